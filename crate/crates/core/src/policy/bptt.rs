//! Forward and reverse-mode passes over batches of sequences run in
//! lockstep. Products that do not depend on the recurrence (encoder, LSTM
//! input weights, all weight gradients) are done once per batch as matrix
//! products; only the hidden-to-gate product runs per timestep.
//!
//! State gradients stop at episode starts and at the beginning of a
//! sequence (truncated BPTT from a stored initial state).

use alloc::vec;
use alloc::vec::Vec;

use super::{check_state, ForwardOutput, ParamTensor, PolicyError, PolicyInput, PolicyParams, RecurrentState};
use crate::env::Observation;
use crate::math::{self, gemm, MatRef};

/// Upstream loss gradient for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrad {
    pub logits: Vec<f64>,
    pub value: f64,
}

impl StepGrad {
    pub fn zeros(n_actions: usize) -> Self {
        Self { logits: vec![0.0; n_actions], value: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutInput {
    pub observation: Observation,
    /// The recurrent state is zeroed before this step.
    pub episode_start: bool,
}

/// A contiguous run of steps replayed from a stored initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub initial_state: RecurrentState,
    pub steps: Vec<RolloutInput>,
}

/// One sequence of a batch: `(observation, episode_start)` per step.
#[derive(Clone, Debug)]
pub struct SequenceSpec<'o> {
    pub initial_state: &'o RecurrentState,
    pub steps: Vec<(&'o Observation, bool)>,
}

/// Everything the backward pass needs. Per-step arrays are row-major with
/// row `t * batch + b`; rows past a sequence's end are padding.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub outputs: Vec<Vec<ForwardOutput>>,
    batch: usize,
    steps: usize,
    lens: Vec<usize>,
    features: Vec<f64>,
    prev_action: Vec<Option<usize>>,
    episode_start: Vec<bool>,
    enc_pre: Vec<f64>,
    enc_out: Vec<f64>,
    /// Activated gates `[i; f; g; o]`.
    gates: Vec<f64>,
    cell_prev: Vec<f64>,
    hidden_prev: Vec<f64>,
    tanh_cell: Vec<f64>,
    hidden: Vec<f64>,
}

pub fn forward_batch(params: &PolicyParams, seqs: &[SequenceSpec<'_>]) -> Result<BatchTrace, PolicyError> {
    let c = *params.config();
    let (e_units, h, z_dim, n_in) = (c.encoder_units, c.lstm_units, c.lstm_input_dim(), c.input_dim());
    let g4 = 4 * h;
    let batch = seqs.len();
    let steps = seqs.iter().map(|s| s.steps.len()).max().unwrap_or(0);
    let rows = batch * steps;

    let mut features = vec![0.0; rows * n_in];
    let mut prev_action = vec![None; rows];
    let mut episode_start = vec![false; rows];
    for (b, s) in seqs.iter().enumerate() {
        check_state(params, s.initial_state)?;
        for (t, &(obs, start)) in s.steps.iter().enumerate() {
            let input = PolicyInput::from_observation(obs, &c)?;
            let row = t * batch + b;
            features[row * n_in..(row + 1) * n_in].copy_from_slice(&input.features);
            prev_action[row] = input.prev_action;
            episode_start[row] = start;
        }
    }

    let mut enc_pre = params.tensor(ParamTensor::EncoderBias).repeat(rows);
    gemm(
        rows,
        n_in,
        e_units,
        1.0,
        MatRef::rows(&features, n_in),
        MatRef::transposed(params.tensor(ParamTensor::EncoderWeight), n_in),
        1.0,
        &mut enc_pre,
        e_units,
    );
    let enc_out: Vec<f64> = enc_pre.iter().map(|&v| c.encoder_activation.apply(v)).collect();

    let wx = params.tensor(ParamTensor::LstmInputWeight);
    let mut gates = params.tensor(ParamTensor::LstmBias).repeat(rows);
    gemm(
        rows,
        e_units,
        g4,
        1.0,
        MatRef::rows(&enc_out, e_units),
        MatRef::transposed(wx, z_dim),
        1.0,
        &mut gates,
        g4,
    );
    for (row, a) in prev_action.iter().enumerate() {
        if let Some(a) = *a {
            for (r, g) in gates[row * g4..(row + 1) * g4].iter_mut().enumerate() {
                *g += wx[r * z_dim + e_units + a];
            }
        }
    }

    let wh = params.tensor(ParamTensor::LstmHiddenWeight);
    let mut cell_prev = vec![0.0; rows * h];
    let mut hidden_prev = vec![0.0; rows * h];
    let mut cell = vec![0.0; rows * h];
    let mut tanh_cell = vec![0.0; rows * h];
    let mut hidden = vec![0.0; rows * h];
    for t in 0..steps {
        let block = t * batch * h..(t + 1) * batch * h;
        for (b, s) in seqs.iter().enumerate() {
            let row = t * batch + b;
            let dst = row * h..(row + 1) * h;
            if episode_start[row] {
                continue;
            }
            if t == 0 {
                hidden_prev[dst.clone()].copy_from_slice(&s.initial_state.hidden);
                cell_prev[dst].copy_from_slice(&s.initial_state.cell);
            } else {
                let src = (row - batch) * h..(row - batch + 1) * h;
                hidden_prev[dst.clone()].copy_from_slice(&hidden[src.clone()]);
                cell_prev[dst].copy_from_slice(&cell[src]);
            }
        }
        gemm(
            batch,
            h,
            g4,
            1.0,
            MatRef::rows(&hidden_prev[block], h),
            MatRef::transposed(wh, h),
            1.0,
            &mut gates[t * batch * g4..(t + 1) * batch * g4],
            g4,
        );
        for b in 0..batch {
            let row = t * batch + b;
            let gr = &mut gates[row * g4..(row + 1) * g4];
            for (r, v) in gr.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&r) { libm::tanh(*v) } else { math::sigmoid(*v) };
            }
            for j in 0..h {
                let k = row * h + j;
                let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                cell[k] = f * cell_prev[k] + i * g;
                tanh_cell[k] = libm::tanh(cell[k]);
                hidden[k] = o * tanh_cell[k];
            }
        }
    }

    let pw = params.tensor(ParamTensor::PolicyWeight);
    let pb = params.tensor(ParamTensor::PolicyBias);
    let vw = params.tensor(ParamTensor::ValueWeight);
    let vb = params.tensor(ParamTensor::ValueBias)[0];
    let lens: Vec<usize> = seqs.iter().map(|s| s.steps.len()).collect();
    let outputs = lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            (0..len)
                .map(|t| {
                    let row = t * batch + b;
                    let hs = &hidden[row * h..(row + 1) * h];
                    let logits: Vec<f64> =
                        (0..c.n_actions).map(|a| math::dot(&pw[a * h..(a + 1) * h], hs) + pb[a]).collect();
                    ForwardOutput {
                        action_probs: math::softmax(&logits),
                        action_logits: logits,
                        value: math::dot(vw, hs) + vb,
                        next_state: RecurrentState { hidden: hs.to_vec(), cell: cell[row * h..(row + 1) * h].to_vec() },
                    }
                })
                .collect()
        })
        .collect();

    Ok(BatchTrace {
        outputs,
        batch,
        steps,
        lens,
        features,
        prev_action,
        episode_start,
        enc_pre,
        enc_out,
        gates,
        cell_prev,
        hidden_prev,
        tanh_cell,
        hidden,
    })
}

/// Accumulates into `grads` the gradient of a loss whose partial derivatives
/// with respect to each step's logits and value are `upstream` (one slice per
/// sequence of the batch).
pub fn backward_batch(
    params: &PolicyParams,
    trace: &BatchTrace,
    upstream: &[&[StepGrad]],
    grads: &mut PolicyParams,
) -> Result<(), PolicyError> {
    let c = *params.config();
    if grads.config() != &c {
        return Err(PolicyError::ParamCount { got: grads.len(), expected: params.len() });
    }
    if upstream.len() != trace.batch {
        return Err(PolicyError::DimMismatch { what: "upstream batch", got: upstream.len(), expected: trace.batch });
    }
    for (up, &len) in upstream.iter().zip(&trace.lens) {
        if up.len() != len {
            return Err(PolicyError::DimMismatch { what: "upstream gradient sequence", got: up.len(), expected: len });
        }
        if let Some(bad) = up.iter().find(|g| g.logits.len() != c.n_actions) {
            return Err(PolicyError::DimMismatch {
                what: "logit gradient",
                got: bad.logits.len(),
                expected: c.n_actions,
            });
        }
    }
    let (e_units, h, n_in, z_dim) = (c.encoder_units, c.lstm_units, c.input_dim(), c.lstm_input_dim());
    let g4 = 4 * h;
    let (batch, rows) = (trace.batch, trace.batch * trace.steps);

    let pw = params.tensor(ParamTensor::PolicyWeight);
    let vw = params.tensor(ParamTensor::ValueWeight);
    let wx = params.tensor(ParamTensor::LstmInputWeight);
    let wh = params.tensor(ParamTensor::LstmHiddenWeight);

    let mut dpre = vec![0.0; rows * g4];
    let mut dh_next = vec![0.0; batch * h];
    let mut dc_next = vec![0.0; batch * h];
    let mut dh_prev = vec![0.0; batch * h];
    let mut dh = vec![0.0; h];

    for t in (0..trace.steps).rev() {
        for b in 0..batch {
            if t >= trace.lens[b] {
                continue;
            }
            let row = t * batch + b;
            let up = &upstream[b][t];
            let hs = &trace.hidden[row * h..(row + 1) * h];

            // Heads.
            dh.copy_from_slice(&dh_next[b * h..(b + 1) * h]);
            {
                let gpw = grads.tensor_mut(ParamTensor::PolicyWeight);
                for (a, &dl) in up.logits.iter().enumerate() {
                    if dl != 0.0 {
                        math::axpy(dl, &pw[a * h..(a + 1) * h], &mut dh);
                        math::axpy(dl, hs, &mut gpw[a * h..(a + 1) * h]);
                    }
                }
            }
            math::axpy(1.0, &up.logits, grads.tensor_mut(ParamTensor::PolicyBias));
            if up.value != 0.0 {
                math::axpy(up.value, vw, &mut dh);
                math::axpy(up.value, hs, grads.tensor_mut(ParamTensor::ValueWeight));
                grads.tensor_mut(ParamTensor::ValueBias)[0] += up.value;
            }

            // LSTM cell.
            let gr = &trace.gates[row * g4..(row + 1) * g4];
            let dp = &mut dpre[row * g4..(row + 1) * g4];
            for j in 0..h {
                let k = row * h + j;
                let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let tc = trace.tanh_cell[k];
                let dc = dc_next[b * h + j] + dh[j] * o * (1.0 - tc * tc);
                dp[j] = dc * g * i * (1.0 - i);
                dp[h + j] = dc * trace.cell_prev[k] * f * (1.0 - f);
                dp[2 * h + j] = dc * i * (1.0 - g * g);
                dp[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                dc_next[b * h + j] = dc * f;
            }
        }

        gemm(
            batch,
            g4,
            h,
            1.0,
            MatRef::rows(&dpre[t * batch * g4..(t + 1) * batch * g4], g4),
            MatRef::rows(wh, h),
            0.0,
            &mut dh_prev,
            h,
        );
        for b in 0..batch {
            let dst = b * h..(b + 1) * h;
            if trace.episode_start[t * batch + b] {
                dh_next[dst.clone()].iter_mut().for_each(|v| *v = 0.0);
                dc_next[dst].iter_mut().for_each(|v| *v = 0.0);
            } else {
                dh_next[dst.clone()].copy_from_slice(&dh_prev[dst]);
            }
        }
    }

    gemm(
        g4,
        rows,
        h,
        1.0,
        MatRef::transposed(&dpre, g4),
        MatRef::rows(&trace.hidden_prev, h),
        1.0,
        grads.tensor_mut(ParamTensor::LstmHiddenWeight),
        h,
    );
    {
        let gwx = grads.tensor_mut(ParamTensor::LstmInputWeight);
        gemm(
            g4,
            rows,
            e_units,
            1.0,
            MatRef::transposed(&dpre, g4),
            MatRef::rows(&trace.enc_out, e_units),
            1.0,
            gwx,
            z_dim,
        );
        for (row, a) in trace.prev_action.iter().enumerate() {
            if let Some(a) = *a {
                for (r, d) in dpre[row * g4..(row + 1) * g4].iter().enumerate() {
                    gwx[r * z_dim + e_units + a] += d;
                }
            }
        }
    }
    {
        let gb = grads.tensor_mut(ParamTensor::LstmBias);
        for row in dpre.chunks_exact(g4) {
            math::axpy(1.0, row, gb);
        }
    }

    // Encoder.
    let mut de = vec![0.0; rows * e_units];
    gemm(rows, g4, e_units, 1.0, MatRef::rows(&dpre, g4), MatRef::rows(wx, z_dim), 0.0, &mut de, e_units);
    for (d, &pre) in de.iter_mut().zip(&trace.enc_pre) {
        *d *= c.encoder_activation.derivative(pre);
    }
    gemm(
        e_units,
        rows,
        n_in,
        1.0,
        MatRef::transposed(&de, e_units),
        MatRef::rows(&trace.features, n_in),
        1.0,
        grads.tensor_mut(ParamTensor::EncoderWeight),
        n_in,
    );
    let gbe = grads.tensor_mut(ParamTensor::EncoderBias);
    for row in de.chunks_exact(e_units) {
        math::axpy(1.0, row, gbe);
    }
    Ok(())
}

/// Forward pass over one sequence with everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct SequenceTrace {
    pub outputs: Vec<ForwardOutput>,
    batch: BatchTrace,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

pub fn forward_sequence<'o>(
    params: &PolicyParams,
    initial_state: &RecurrentState,
    steps: impl IntoIterator<Item = (&'o Observation, bool)>,
) -> Result<SequenceTrace, PolicyError> {
    let spec = SequenceSpec { initial_state, steps: steps.into_iter().collect() };
    let mut batch = forward_batch(params, core::slice::from_ref(&spec))?;
    let outputs = batch.outputs.pop().unwrap_or_default();
    Ok(SequenceTrace { outputs, batch })
}

/// Accumulates into `grads` the gradient of a loss whose partial derivatives
/// with respect to each step's logits and value are `upstream`.
pub fn backward_sequence(
    params: &PolicyParams,
    trace: &SequenceTrace,
    upstream: &[StepGrad],
    grads: &mut PolicyParams,
) -> Result<(), PolicyError> {
    backward_batch(params, &trace.batch, &[upstream], grads)
}

/// Forward replay of `rollout` followed by the backward pass; returns the
/// parameter gradient.
pub fn backward_rollout(
    params: &PolicyParams,
    rollout: &Rollout,
    upstream: &[StepGrad],
) -> Result<PolicyParams, PolicyError> {
    let trace = forward_sequence(
        params,
        &rollout.initial_state,
        rollout.steps.iter().map(|s| (&s.observation, s.episode_start)),
    )?;
    let mut grads = PolicyParams::zeros(*params.config());
    backward_sequence(params, &trace, upstream, &mut grads)?;
    Ok(grads)
}
