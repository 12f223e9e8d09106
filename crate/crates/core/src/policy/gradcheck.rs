//! Central-difference verification of the analytic gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::bptt::{backward_sequence, forward_sequence, Rollout, StepGrad};
use super::{ForwardOutput, ParamTensor, PolicyError, PolicyParams};
use crate::math;
use crate::rng;

/// A scalar loss of a sequence's outputs together with its partials on each
/// step's logits and value.
pub trait SequenceLoss {
    fn evaluate(&self, outputs: &[ForwardOutput]) -> (f64, Vec<StepGrad>);
}

/// Random test loss: `sum_t sum_a w[t][a] * log_softmax(logits_t)[a]
/// + sum_t c[t] * (v_t - y[t])^2`.
#[derive(Clone, Debug)]
pub struct ProbeLoss {
    pub log_prob_weights: Vec<Vec<f64>>,
    pub value_weights: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl ProbeLoss {
    pub fn random(steps: usize, n_actions: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "gradcheck.probe", 0);
        Self {
            log_prob_weights: (0..steps)
                .map(|_| (0..n_actions).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect(),
            value_weights: (0..steps).map(|_| r.random_range(0.1..1.0)).collect(),
            value_targets: (0..steps).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }
}

impl SequenceLoss for ProbeLoss {
    fn evaluate(&self, outputs: &[ForwardOutput]) -> (f64, Vec<StepGrad>) {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(outputs.len());
        for (t, out) in outputs.iter().enumerate() {
            let w = &self.log_prob_weights[t];
            let lse = math::log_sum_exp(&out.action_logits);
            let wsum: f64 = w.iter().sum();
            for (a, &l) in out.action_logits.iter().enumerate() {
                loss += w[a] * (l - lse);
            }
            let logits = w
                .iter()
                .zip(&out.action_probs)
                .map(|(&wa, &p)| wa - p * wsum)
                .collect();
            let err = out.value - self.value_targets[t];
            loss += self.value_weights[t] * err * err;
            grads.push(StepGrad { logits, value: 2.0 * self.value_weights[t] * err });
        }
        (loss, grads)
    }
}

/// `sum_t c[t] * v_t`: linear in the value head.
#[derive(Clone, Debug)]
pub struct LinearValueLoss {
    pub coefficients: Vec<f64>,
}

impl SequenceLoss for LinearValueLoss {
    fn evaluate(&self, outputs: &[ForwardOutput]) -> (f64, Vec<StepGrad>) {
        let loss = outputs.iter().zip(&self.coefficients).map(|(o, c)| c * o.value).sum();
        let grads = outputs
            .iter()
            .zip(&self.coefficients)
            .map(|(o, &c)| StepGrad { logits: vec![0.0; o.action_logits.len()], value: c })
            .collect();
        (loss, grads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamSelection {
    All,
    Tensors(Vec<ParamTensor>),
    /// Uniform random subset of flat indices (without replacement).
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

fn loss_at(params: &PolicyParams, rollout: &Rollout, loss: &impl SequenceLoss) -> Result<f64, PolicyError> {
    let trace = forward_sequence(
        params,
        &rollout.initial_state,
        rollout.steps.iter().map(|s| (&s.observation, s.episode_start)),
    )?;
    Ok(loss.evaluate(&trace.outputs).0)
}

/// Compares the analytic gradient against central differences with step
/// `epsilon`. Relative error per parameter is
/// `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn finite_difference_check(
    params: &PolicyParams,
    rollout: &Rollout,
    loss: &impl SequenceLoss,
    epsilon: f64,
    selection: &ParamSelection,
) -> Result<GradCheckReport, PolicyError> {
    let trace = forward_sequence(
        params,
        &rollout.initial_state,
        rollout.steps.iter().map(|s| (&s.observation, s.episode_start)),
    )?;
    let (_, upstream) = loss.evaluate(&trace.outputs);
    let mut analytic = PolicyParams::zeros(*params.config());
    backward_sequence(params, &trace, &upstream, &mut analytic)?;

    let indices: Vec<usize> = match selection {
        ParamSelection::All => (0..params.len()).collect(),
        ParamSelection::Tensors(ts) => (0..params.len())
            .filter(|&i| ts.contains(&params.tensor_of(i)))
            .collect(),
        ParamSelection::Sample { count, seed } => {
            let mut r = rng::stream(*seed, "gradcheck.sample", 0);
            let mut all: Vec<usize> = (0..params.len()).collect();
            let k = (*count).min(all.len());
            for i in 0..k {
                let j = r.random_range(i..all.len());
                all.swap(i, j);
            }
            all.truncate(k);
            all.sort_unstable();
            all
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, checked: 0 };
    for &i in &indices {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let plus = loss_at(&probe, rollout, loss)?;
        probe.as_mut_slice()[i] = orig - epsilon;
        let minus = loss_at(&probe, rollout, loss)?;
        probe.as_mut_slice()[i] = orig;

        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic.as_slice()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

