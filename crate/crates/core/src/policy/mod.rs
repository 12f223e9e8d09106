//! Recurrent actor-critic: a dense encoder over `[m; x; g]`, one LSTM layer
//! fed with the encoder output and the previous action, and linear policy and
//! value heads on the new hidden state.
//!
//! All parameters live in one flat buffer ([`PolicyParams`]); gradients use
//! the same type. Batched forward and reverse-mode passes are in [`bptt`].

pub mod bptt;
pub mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::env::Observation;
use crate::math;
use crate::rng::{self, Rng};

pub use bptt::{
    backward_batch, backward_rollout, backward_sequence, forward_batch, forward_sequence, BatchTrace, Rollout,
    RolloutInput, SequenceSpec, SequenceTrace, StepGrad,
};
pub use gradcheck::{finite_difference_check, GradCheckReport, LinearValueLoss, ParamSelection, ProbeLoss, SequenceLoss};

pub const DEFAULT_ENCODER_UNITS: usize = 512;
pub const DEFAULT_LSTM_UNITS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid network dimensions: {0}")]
    InvalidDims(&'static str),
    #[error("{what} has dimension {got}, expected {expected}")]
    DimMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid action distribution")]
    InvalidDistribution,
    #[error("parameter buffer has {got} values, expected {expected}")]
    ParamCount { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    /// Literal affine encoder.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyConfig {
    pub descriptor_dim: usize,
    pub n_actions: usize,
    pub encoder_units: usize,
    pub lstm_units: usize,
    pub encoder_activation: Activation,
    /// Also feed the previous action to the encoder, not only to the LSTM.
    pub prev_action_in_encoder: bool,
}

impl PolicyConfig {
    pub fn new(descriptor_dim: usize, n_actions: usize) -> Self {
        Self {
            descriptor_dim,
            n_actions,
            encoder_units: DEFAULT_ENCODER_UNITS,
            lstm_units: DEFAULT_LSTM_UNITS,
            encoder_activation: Activation::Relu,
            prev_action_in_encoder: false,
        }
    }

    pub fn with_units(mut self, encoder_units: usize, lstm_units: usize) -> Self {
        self.encoder_units = encoder_units;
        self.lstm_units = lstm_units;
        self
    }

    /// Encoder input width: `2 + D + 2`, plus `|A|` with the encoder option.
    pub fn input_dim(&self) -> usize {
        let base = 2 + self.descriptor_dim + 2;
        if self.prev_action_in_encoder {
            base + self.n_actions
        } else {
            base
        }
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.encoder_units + self.n_actions
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.descriptor_dim == 0 {
            return Err(PolicyError::InvalidDims("descriptor_dim must be positive"));
        }
        if self.n_actions < 2 {
            return Err(PolicyError::InvalidDims("need at least two actions"));
        }
        if self.encoder_units == 0 || self.lstm_units == 0 {
            return Err(PolicyError::InvalidDims("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Named parameter tensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTensor {
    EncoderWeight,
    EncoderBias,
    LstmInputWeight,
    LstmHiddenWeight,
    LstmBias,
    PolicyWeight,
    PolicyBias,
    ValueWeight,
    ValueBias,
}

impl ParamTensor {
    pub const ALL: [ParamTensor; 9] = [
        ParamTensor::EncoderWeight,
        ParamTensor::EncoderBias,
        ParamTensor::LstmInputWeight,
        ParamTensor::LstmHiddenWeight,
        ParamTensor::LstmBias,
        ParamTensor::PolicyWeight,
        ParamTensor::PolicyBias,
        ParamTensor::ValueWeight,
        ParamTensor::ValueBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamTensor::EncoderWeight => "encoder.weight",
            ParamTensor::EncoderBias => "encoder.bias",
            ParamTensor::LstmInputWeight => "lstm.weight_input",
            ParamTensor::LstmHiddenWeight => "lstm.weight_hidden",
            ParamTensor::LstmBias => "lstm.bias",
            ParamTensor::PolicyWeight => "policy.weight",
            ParamTensor::PolicyBias => "policy.bias",
            ParamTensor::ValueWeight => "value.weight",
            ParamTensor::ValueBias => "value.bias",
        }
    }

    /// `(rows, cols)`; biases are column vectors.
    pub fn shape(self, c: &PolicyConfig) -> (usize, usize) {
        let h = c.lstm_units;
        match self {
            ParamTensor::EncoderWeight => (c.encoder_units, c.input_dim()),
            ParamTensor::EncoderBias => (c.encoder_units, 1),
            ParamTensor::LstmInputWeight => (4 * h, c.lstm_input_dim()),
            ParamTensor::LstmHiddenWeight => (4 * h, h),
            ParamTensor::LstmBias => (4 * h, 1),
            ParamTensor::PolicyWeight => (c.n_actions, h),
            ParamTensor::PolicyBias => (c.n_actions, 1),
            ParamTensor::ValueWeight => (1, h),
            ParamTensor::ValueBias => (1, 1),
        }
    }

    pub fn len(self, c: &PolicyConfig) -> usize {
        let (r, k) = self.shape(c);
        r * k
    }

    pub fn offset(self, c: &PolicyConfig) -> usize {
        Self::ALL
            .iter()
            .take_while(|&&t| t != self)
            .map(|t| t.len(c))
            .sum()
    }
}

/// Every weight of the network in one flat buffer. Also used as the gradient
/// accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    data: Vec<f64>,
    offsets: [usize; 10],
}

fn offsets(c: &PolicyConfig) -> [usize; 10] {
    let mut o = [0usize; 10];
    for (k, t) in ParamTensor::ALL.iter().enumerate() {
        o[k + 1] = o[k] + t.len(c);
    }
    o
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        let offsets = offsets(&config);
        Self { config, data: vec![0.0; offsets[9]], offsets }
    }

    pub fn from_flat(config: PolicyConfig, data: Vec<f64>) -> Result<Self, PolicyError> {
        config.validate()?;
        let offsets = offsets(&config);
        if data.len() != offsets[9] {
            return Err(PolicyError::ParamCount { got: data.len(), expected: offsets[9] });
        }
        Ok(Self { config, data, offsets })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, t: ParamTensor) -> core::ops::Range<usize> {
        let k = t as usize;
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn tensor(&self, t: ParamTensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: ParamTensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    /// Which tensor a flat index belongs to.
    pub fn tensor_of(&self, index: usize) -> ParamTensor {
        let k = self.offsets[1..].iter().position(|&end| index < end).unwrap_or(8);
        ParamTensor::ALL[k]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &PolicyParams) {
        math::axpy(1.0, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Gate blocks of the LSTM are ordered input, forget, cell, output.
    pub fn forget_gate_bias(&self) -> &[f64] {
        let h = self.config.lstm_units;
        &self.tensor(ParamTensor::LstmBias)[h..2 * h]
    }
}

fn fill_uniform(dst: &mut [f64], limit: f64, rng: &mut Rng) {
    for v in dst {
        *v = rng.random_range(-limit..=limit);
    }
}

/// Rows of a `n x n` Gaussian matrix orthonormalized by modified Gram-Schmidt.
fn fill_orthogonal(dst: &mut [f64], n: usize, rng: &mut Rng) {
    debug_assert_eq!(dst.len(), n * n);
    for v in dst.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for i in 0..n {
        let (done, rest) = dst.split_at_mut(i * n);
        let row = &mut rest[..n];
        for j in 0..i {
            let prev = &done[j * n..(j + 1) * n];
            let p = math::dot(row, prev);
            math::axpy(-p, prev, row);
        }
        math::normalize_in_place(row);
    }
}

/// Scaled-uniform input weights, orthogonal recurrent blocks, zero biases
/// except the LSTM forget gate (1). Deterministic per seed.
pub fn init_params(config: PolicyConfig, seed: u64) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    let mut p = PolicyParams::zeros(config);
    let mut rng = rng::stream(seed, "policy.init", 0);
    let h = config.lstm_units;

    let fan_in = config.input_dim() as f64;
    let enc_limit = match config.encoder_activation {
        Activation::Relu => libm::sqrt(6.0 / fan_in),
        Activation::Identity => libm::sqrt(3.0 / fan_in),
    };
    fill_uniform(p.tensor_mut(ParamTensor::EncoderWeight), enc_limit, &mut rng);

    let lstm_limit = libm::sqrt(6.0 / (config.lstm_input_dim() + h) as f64);
    fill_uniform(p.tensor_mut(ParamTensor::LstmInputWeight), lstm_limit, &mut rng);
    for gate in p.tensor_mut(ParamTensor::LstmHiddenWeight).chunks_exact_mut(h * h) {
        fill_orthogonal(gate, h, &mut rng);
    }
    p.tensor_mut(ParamTensor::LstmBias)[h..2 * h].iter_mut().for_each(|b| *b = 1.0);

    let head_limit = libm::sqrt(3.0 / h as f64);
    fill_uniform(p.tensor_mut(ParamTensor::PolicyWeight), 0.01 * head_limit, &mut rng);
    fill_uniform(p.tensor_mut(ParamTensor::ValueWeight), head_limit, &mut rng);
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(units: usize) -> Self {
        Self { hidden: vec![0.0; units], cell: vec![0.0; units] }
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().chain(&self.cell).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub action_logits: Vec<f64>,
    pub action_probs: Vec<f64>,
    pub value: f64,
    pub next_state: RecurrentState,
}

impl ForwardOutput {
    pub fn log_prob(&self, action: usize) -> f64 {
        self.action_logits[action] - math::log_sum_exp(&self.action_logits)
    }

    pub fn entropy(&self) -> f64 {
        math::entropy(&self.action_probs)
    }
}

/// Network input assembled from an observation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    pub features: Vec<f64>,
    pub prev_action: Option<usize>,
}

impl PolicyInput {
    pub fn from_observation(obs: &Observation, config: &PolicyConfig) -> Result<Self, PolicyError> {
        if obs.x.len() != config.descriptor_dim {
            return Err(PolicyError::DimMismatch {
                what: "descriptor",
                got: obs.x.len(),
                expected: config.descriptor_dim,
            });
        }
        if obs.prev_action.len() != config.n_actions {
            return Err(PolicyError::DimMismatch {
                what: "previous action",
                got: obs.prev_action.len(),
                expected: config.n_actions,
            });
        }
        let mut features = Vec::with_capacity(config.input_dim());
        features.extend_from_slice(&obs.m.0);
        features.extend_from_slice(&obs.x);
        features.extend_from_slice(&obs.g.0);
        if config.prev_action_in_encoder {
            features.extend_from_slice(&obs.prev_action);
        }
        Ok(Self { features, prev_action: obs.prev_action_index() })
    }
}

fn check_state(params: &PolicyParams, state: &RecurrentState) -> Result<(), PolicyError> {
    let h = params.config.lstm_units;
    for (what, got) in [("hidden state", state.hidden.len()), ("cell state", state.cell.len())] {
        if got != h {
            return Err(PolicyError::DimMismatch { what, got, expected: h });
        }
    }
    Ok(())
}

/// One step of the network.
pub fn forward_step(
    params: &PolicyParams,
    observation: &Observation,
    state: &RecurrentState,
) -> Result<ForwardOutput, PolicyError> {
    let spec = SequenceSpec { initial_state: state, steps: vec![(observation, false)] };
    let mut trace = forward_batch(params, core::slice::from_ref(&spec))?;
    Ok(trace.outputs.remove(0).remove(0))
}

/// Categorical draw from `probs`.
pub fn sample_action(probs: &[f64], rng: &mut Rng) -> Result<usize, PolicyError> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(PolicyError::InvalidDistribution);
    }
    let u: f64 = rng.random::<f64>() * sum;
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(a);
        }
    }
    // Rounding can leave u just above the running sum; take the last
    // action with positive mass.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionFeature;

    fn toy_config() -> PolicyConfig {
        PolicyConfig::new(4, 2).with_units(8, 6)
    }

    fn observation(d: usize, seed: u64) -> Observation {
        let mut rng = rng::stream(seed, "obs", 0);
        Observation {
            m: MotionFeature([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            x: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            g: MotionFeature([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            prev_action: vec![0.0, 1.0],
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = PolicyConfig::new(64, 2);
        assert_eq!(init_params(c, 3).unwrap(), init_params(c, 3).unwrap());
        assert_ne!(init_params(c, 3).unwrap(), init_params(c, 4).unwrap());
    }

    #[test]
    fn forget_bias_is_one_and_other_biases_zero() {
        let p = init_params(PolicyConfig::new(64, 2), 1).unwrap();
        assert!(p.forget_gate_bias().iter().all(|&b| b == 1.0));
        let lstm_b = p.tensor(ParamTensor::LstmBias);
        let h = DEFAULT_LSTM_UNITS;
        assert!(lstm_b[..h].iter().chain(&lstm_b[2 * h..]).all(|&b| b == 0.0));
        assert!(p.tensor(ParamTensor::EncoderBias).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn encoder_shapes() {
        let c = PolicyConfig::new(64, 2);
        assert_eq!(ParamTensor::EncoderWeight.shape(&c), (512, 68));
        let with_prev = PolicyConfig { prev_action_in_encoder: true, ..c };
        assert_eq!(ParamTensor::EncoderWeight.shape(&with_prev), (512, 70));
        assert_eq!(ParamTensor::LstmInputWeight.shape(&c), (1024, 514));
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let c = toy_config();
        let p = init_params(c, 9).unwrap();
        let h = c.lstm_units;
        for gate in p.tensor(ParamTensor::LstmHiddenWeight).chunks_exact(h * h) {
            for i in 0..h {
                for j in 0..h {
                    let d = math::dot(&gate[i * h..(i + 1) * h], &gate[j * h..(j + 1) * h]);
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_network_is_uniform_with_zero_value() {
        let c = PolicyConfig::new(4, 3).with_units(8, 6);
        let p = PolicyParams::zeros(c);
        let mut obs = observation(4, 0);
        obs.prev_action = vec![0.0; 3];
        let out = forward_step(&p, &obs, &RecurrentState::zeros(6)).unwrap();
        for &q in &out.action_probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        let c = toy_config();
        let p = init_params(c, 2).unwrap();
        let obs = observation(4, 1);
        let state = RecurrentState {
            hidden: (0..6).map(|k| 0.1 * k as f64 - 0.2).collect(),
            cell: (0..6).map(|k| 0.3 - 0.05 * k as f64).collect(),
        };
        let out = forward_step(&p, &obs, &state).unwrap();

        // Independent evaluation written directly from the cell equations.
        let x: Vec<f64> = obs.m.0.iter().chain(&obs.x).chain(&obs.g.0).copied().collect();
        let we = p.tensor(ParamTensor::EncoderWeight);
        let e: Vec<f64> = (0..8)
            .map(|k| {
                let s: f64 = (0..8).map(|j| we[k * 8 + j] * x[j]).sum();
                s.max(0.0)
            })
            .collect();
        let z: Vec<f64> = e.iter().copied().chain(obs.prev_action.iter().copied()).collect();
        let (wx, wh, b) = (
            p.tensor(ParamTensor::LstmInputWeight),
            p.tensor(ParamTensor::LstmHiddenWeight),
            p.tensor(ParamTensor::LstmBias),
        );
        let pre = |r: usize| -> f64 {
            (0..10).map(|j| wx[r * 10 + j] * z[j]).sum::<f64>()
                + (0..6).map(|j| wh[r * 6 + j] * state.hidden[j]).sum::<f64>()
                + b[r]
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hidden = vec![0.0; 6];
        for j in 0..6 {
            let i = sig(pre(j));
            let f = sig(pre(6 + j));
            let g = pre(12 + j).tanh();
            let o = sig(pre(18 + j));
            let cell = f * state.cell[j] + i * g;
            hidden[j] = o * cell.tanh();
            assert!((out.next_state.cell[j] - cell).abs() < 1e-12);
        }
        let pw = p.tensor(ParamTensor::PolicyWeight);
        for a in 0..2 {
            let l: f64 = (0..6).map(|j| pw[a * 6 + j] * hidden[j]).sum();
            assert!((out.action_logits[a] - l).abs() < 1e-12);
        }
        let vw = p.tensor(ParamTensor::ValueWeight);
        let v: f64 = (0..6).map(|j| vw[j] * hidden[j]).sum();
        assert!((out.value - v).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let p = init_params(toy_config(), 0).unwrap();
        let obs = observation(5, 0);
        assert!(matches!(
            forward_step(&p, &obs, &RecurrentState::zeros(6)),
            Err(PolicyError::DimMismatch { what: "descriptor", .. })
        ));
        assert!(forward_step(&p, &observation(4, 0), &RecurrentState::zeros(7)).is_err());
    }

    #[test]
    fn sample_action_cases() {
        let mut rng = rng::stream(0, "sample", 0);
        for _ in 0..100 {
            assert_eq!(sample_action(&[1.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert_eq!(sample_action(&[0.3, -0.1, 0.8], &mut rng), Err(PolicyError::InvalidDistribution));
        assert_eq!(sample_action(&[0.3, 0.3], &mut rng), Err(PolicyError::InvalidDistribution));
        let zeros = (0..10_000).filter(|_| sample_action(&[0.5, 0.5], &mut rng).unwrap() == 0).count();
        // Binomial(10^4, 1/2) has std 0.005; 0.02 is four sigma.
        assert!((zeros as f64 / 1e4 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut p = init_params(toy_config(), 0).unwrap();
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        p.as_mut_slice()[3] += 1e-12;
        assert_ne!(before, p.checksum());
    }
}
