//! Proximal policy optimization for the recurrent actor-critic: clipped
//! surrogate, value regression and entropy bonus, with recurrent minibatches
//! replayed as contiguous sequence chunks from stored initial states.

mod adam;
mod rollout;

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::env::{curriculum_update, CurriculumState, EnvConfig, EnvError, NavEnv};
use crate::exec::Executor;
use crate::motion::MotionModelParams;
use crate::policy::{
    backward_batch, forward_batch, init_params, ForwardOutput, PolicyConfig, PolicyError, PolicyParams,
    SequenceLoss, SequenceSpec, StepGrad,
};
use crate::rng;
use crate::traversal::{Dataset, TraversalError};

pub use adam::Adam;
pub use rollout::{
    collect_rollouts, compute_returns_and_advantages, normalize_advantages, Advantages, Behavior,
    EnvRollout, EnvWorker, EpisodeResult, RolloutBuffer, RolloutStep,
};

/// Gradients are reduced over this many fixed shards per minibatch, so the
/// summation order (and the result) does not depend on the thread count.
pub const GRADIENT_SHARDS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("invalid PPO configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("buffer has {buffer} steps but {targets} advantage targets")]
    LengthMismatch { buffer: usize, targets: usize },
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("buffer does not match the policy: {0}")]
    BufferMismatch(String),
    #[error(transparent)]
    Policy(PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Traversal(#[from] TraversalError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    /// Sequence chunks per minibatch.
    pub minibatch_chunks: usize,
    /// Steps per sequence chunk for recurrent replay.
    pub seq_len: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Steps per environment per update.
    pub rollout_length: usize,
    pub n_envs: usize,
    pub total_updates: usize,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatch_chunks: 64,
            seq_len: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 2.5e-4,
            rollout_length: 128,
            n_envs: 8,
            total_updates: 200,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let err = PpoError::InvalidConfig;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(err("gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(err("gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(err("clip_epsilon must be positive"));
        }
        if self.minibatch_chunks == 0 || self.seq_len == 0 {
            return Err(err("minibatch_chunks and seq_len must be positive"));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(err("loss coefficients must be non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(err("learning_rate must be positive"));
        }
        if self.rollout_length == 0 || self.n_envs == 0 {
            return Err(err("rollout_length and n_envs must be positive"));
        }
        Ok(())
    }
}

/// Clipped-surrogate PPO loss over one minibatch, evaluated chunk by chunk.
/// `normalizer` is the minibatch step count so chunk losses add up to the
/// minibatch mean.
#[derive(Clone, Debug)]
pub struct PpoLoss<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub normalizer: f64,
}

/// Sums of per-step loss terms (not yet averaged).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clipped: usize,
    pub steps: usize,
}

impl LossSums {
    fn add(&mut self, o: &LossSums) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.clipped += o.clipped;
        self.steps += o.steps;
    }
}

impl PpoLoss<'_> {
    pub fn evaluate_with_sums(&self, outputs: &[ForwardOutput]) -> (f64, Vec<StepGrad>, LossSums) {
        let m = self.normalizer;
        let mut sums = LossSums::default();
        let mut grads = Vec::with_capacity(outputs.len());
        for (t, out) in outputs.iter().enumerate() {
            let a = self.actions[t];
            let adv = self.advantages[t];
            let log_prob = out.log_prob(a);
            let ratio = libm::exp(log_prob - self.old_log_probs[t]);
            let clipped_ratio = ratio.clamp(1.0 - self.clip_epsilon, 1.0 + self.clip_epsilon);
            let (surr, clipped_surr) = (ratio * adv, clipped_ratio * adv);
            sums.policy += -surr.min(clipped_surr);
            if (ratio - 1.0).abs() > self.clip_epsilon {
                sums.clipped += 1;
            }
            let entropy = out.entropy();
            sums.entropy += entropy;
            let err = out.value - self.returns[t];
            sums.value += err * err;
            sums.steps += 1;

            // d(policy)/d(log_prob) is zero when the clipped branch is the minimum.
            let d_log_prob = if surr <= clipped_surr { -ratio * adv / m } else { 0.0 };
            let logits = out
                .action_probs
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    let d_entropy = if p > 0.0 { -p * (libm::log(p) + entropy) } else { 0.0 };
                    d_log_prob * (onehot - p) - self.entropy_coef * d_entropy / m
                })
                .collect();
            grads.push(StepGrad { logits, value: self.value_coef * 2.0 * err / m });
        }
        let loss = (sums.policy + self.value_coef * sums.value - self.entropy_coef * sums.entropy) / m;
        (loss, grads, sums)
    }
}

impl SequenceLoss for PpoLoss<'_> {
    fn evaluate(&self, outputs: &[ForwardOutput]) -> (f64, Vec<StepGrad>) {
        let (loss, grads, _) = self.evaluate_with_sums(outputs);
        (loss, grads)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Contiguous slice `[start, start + len)` of one environment's steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub env: usize,
    pub start: usize,
    pub len: usize,
}

pub fn sequence_chunks(buffer: &RolloutBuffer, seq_len: usize) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    for (env, r) in buffer.envs.iter().enumerate() {
        let mut start = 0;
        while start < r.steps.len() {
            let len = seq_len.min(r.steps.len() - start);
            chunks.push(Chunk { env, start, len });
            start += len;
        }
    }
    chunks
}

/// Per-step training targets in buffer order.
#[derive(Clone, Debug)]
struct Targets<'a> {
    advantages: &'a [f64],
    returns: &'a [f64],
    env_offsets: Vec<usize>,
}

/// Loss and gradient of `chunks` (normalized by `normalizer` steps),
/// accumulated into `grads`. The chunks run as one lockstep batch.
fn chunk_group_gradient(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    targets: &Targets<'_>,
    chunks: &[Chunk],
    config: &PpoConfig,
    normalizer: f64,
    grads: &mut PolicyParams,
) -> Result<(f64, LossSums), PolicyError> {
    if chunks.is_empty() {
        return Ok((0.0, LossSums::default()));
    }
    let steps_of = |ch: &Chunk| &buffer.envs[ch.env].steps[ch.start..ch.start + ch.len];
    let specs: Vec<SequenceSpec<'_>> = chunks
        .iter()
        .map(|ch| {
            let steps = steps_of(ch);
            SequenceSpec {
                initial_state: &steps[0].state,
                steps: steps.iter().map(|s| (&s.observation, s.episode_start)).collect(),
            }
        })
        .collect();
    let trace = forward_batch(params, &specs)?;
    let mut total = 0.0;
    let mut sums = LossSums::default();
    let mut upstream = Vec::with_capacity(chunks.len());
    for (ch, outputs) in chunks.iter().zip(&trace.outputs) {
        let steps = steps_of(ch);
        let base = targets.env_offsets[ch.env] + ch.start;
        let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
        let old: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
        let loss = PpoLoss {
            actions: &actions,
            old_log_probs: &old,
            advantages: &targets.advantages[base..base + ch.len],
            returns: &targets.returns[base..base + ch.len],
            clip_epsilon: config.clip_epsilon,
            value_coef: config.value_coef,
            entropy_coef: config.entropy_coef,
            normalizer,
        };
        let (l, step_grads, s) = loss.evaluate_with_sums(outputs);
        upstream.push(step_grads);
        total += l;
        sums.add(&s);
    }
    let slices: Vec<&[StepGrad]> = upstream.iter().map(|u| u.as_slice()).collect();
    backward_batch(params, &trace, &slices, grads)?;
    Ok((total, sums))
}

/// Total loss and gradient of one minibatch, reduced over fixed shards.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradient<E: Executor>(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    advantages: &[f64],
    returns: &[f64],
    chunks: &[Chunk],
    config: &PpoConfig,
    shards: &mut [PolicyParams],
    exec: &E,
) -> Result<(f64, LossSums, PolicyParams), PpoError> {
    let mut offsets = Vec::with_capacity(buffer.envs.len());
    let mut acc = 0;
    for e in &buffer.envs {
        offsets.push(acc);
        acc += e.steps.len();
    }
    let targets = Targets { advantages, returns, env_offsets: offsets };
    let normalizer = chunks.iter().map(|c| c.len).sum::<usize>() as f64;
    let per_shard = chunks.len().div_ceil(shards.len()).max(1);
    let results = exec.map_mut(shards, |s, grads| {
        grads.fill_zero();
        let lo = (s * per_shard).min(chunks.len());
        let hi = ((s + 1) * per_shard).min(chunks.len());
        chunk_group_gradient(params, buffer, &targets, &chunks[lo..hi], config, normalizer, grads)
    });
    let mut total = PolicyParams::zeros(*params.config());
    let mut loss = 0.0;
    let mut sums = LossSums::default();
    for (r, g) in results.into_iter().zip(shards.iter()) {
        let (l, s) = r?;
        loss += l;
        sums.add(&s);
        total.add_assign(g);
    }
    Ok((loss, sums, total))
}

fn check_buffer(params: &PolicyParams, buffer: &RolloutBuffer) -> Result<(), PpoError> {
    let c = params.config();
    for s in buffer.steps() {
        if s.observation.x.len() != c.descriptor_dim
            || s.observation.prev_action.len() != c.n_actions
            || s.state.hidden.len() != c.lstm_units
            || s.action >= c.n_actions
        {
            return Err(PpoError::BufferMismatch(alloc::format!(
                "step with descriptor {} / actions {} / state {} vs network {} / {} / {}",
                s.observation.x.len(),
                s.observation.prev_action.len(),
                s.state.hidden.len(),
                c.descriptor_dim,
                c.n_actions,
                c.lstm_units
            )));
        }
    }
    Ok(())
}

/// Runs `config.epochs` passes of shuffled recurrent minibatches over the
/// buffer, one optimizer step per minibatch. The buffer's log-probabilities
/// are the old policy.
pub fn ppo_update<E: Executor>(
    params: &mut PolicyParams,
    optimizer: &mut Adam,
    buffer: &RolloutBuffer,
    targets: &Advantages,
    config: &PpoConfig,
    rng: &mut rng::Rng,
    exec: &E,
) -> Result<UpdateStats, PpoError> {
    if targets.advantages.len() != buffer.len() || targets.returns.len() != buffer.len() {
        return Err(PpoError::LengthMismatch { buffer: buffer.len(), targets: targets.advantages.len() });
    }
    check_buffer(params, buffer)?;
    let mut advantages = targets.advantages.clone();
    if config.normalize_advantages {
        normalize_advantages(&mut advantages);
    }
    let mut chunks = sequence_chunks(buffer, config.seq_len);
    let mut shards = vec![PolicyParams::zeros(*params.config()); GRADIENT_SHARDS];
    let mut stats = UpdateStats::default();
    let mut sums = LossSums::default();
    for _ in 0..config.epochs {
        chunks.shuffle(rng);
        for mb in chunks.chunks(config.minibatch_chunks) {
            let (_, s, grads) =
                minibatch_gradient(params, buffer, &advantages, &targets.returns, mb, config, &mut shards, exec)?;
            optimizer.step(params, &grads);
            sums.add(&s);
            stats.minibatches += 1;
        }
    }
    if sums.steps > 0 {
        let n = sums.steps as f64;
        stats.policy_loss = sums.policy / n;
        stats.value_loss = sums.value / n;
        stats.entropy = sums.entropy / n;
        stats.clip_fraction = sums.clipped as f64 / n;
    }
    if !params.is_finite() {
        return Err(PpoError::Protocol("parameters became non-finite"));
    }
    Ok(stats)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRecord {
    pub update: usize,
    /// Episodes finished so far.
    pub episodes: usize,
    /// Success fraction over the rolling window at the level in effect.
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Level in effect while this update's rollouts were collected.
    pub curriculum_level: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<UpdateRecord>,
}

impl TrainingLog {
    /// First update whose rolling success reached `threshold` with a full
    /// window at the final curriculum level.
    pub fn first_update_reaching(&self, threshold: f64, final_level: usize) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.curriculum_level == final_level && r.success_rate >= threshold)
            .map(|r| r.update)
    }
}

/// Everything `train` needs besides the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub traversal_id: String,
    pub motion: MotionModelParams,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub curriculum: CurriculumState,
}

/// Alternates rollout collection and PPO updates, promoting the curriculum
/// on the rolling success window. `on_update` sees every log row with the
/// parameters after that update.
pub fn train<E, F>(
    dataset: &Dataset,
    setup: &TrainSetup,
    exec: &E,
    mut on_update: F,
) -> Result<(PolicyParams, TrainingLog), PpoError>
where
    E: Executor,
    F: FnMut(&UpdateRecord, &PolicyParams),
{
    let cfg = &setup.ppo;
    cfg.validate()?;
    if setup.policy.descriptor_dim != dataset.descriptor_dim() {
        return Err(PpoError::Policy(PolicyError::DimMismatch {
            what: "descriptor",
            got: dataset.descriptor_dim(),
            expected: setup.policy.descriptor_dim,
        }));
    }
    if setup.policy.n_actions != setup.env.action_set.len() {
        return Err(PpoError::Policy(PolicyError::DimMismatch {
            what: "action set",
            got: setup.env.action_set.len(),
            expected: setup.policy.n_actions,
        }));
    }
    let mut params =
        init_params(setup.policy, rng::derive_seed(cfg.seed, "policy", 0)).map_err(PpoError::Policy)?;
    let mut optimizer = Adam::new(params.len(), cfg.learning_rate);
    let mut curriculum = setup.curriculum.clone();
    let mut workers = (0..cfg.n_envs)
        .map(|k| {
            let env = NavEnv::new(dataset, &setup.traversal_id, setup.env, setup.motion.clone())?;
            EnvWorker::new(env, k, cfg.seed, setup.policy.lstm_units, &curriculum)
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    let mut update_rng = rng::stream(cfg.seed, "ppo.update", 0);
    let mut window: VecDeque<bool> = VecDeque::with_capacity(curriculum.window);
    let mut log = TrainingLog::default();
    let mut episodes = 0usize;

    for update in 1..=cfg.total_updates {
        let level = curriculum.level;
        let (buffer, finished) =
            collect_rollouts(&mut workers, &params, cfg.rollout_length, &curriculum, Behavior::Sampled, exec)?;
        let targets = compute_returns_and_advantages(&buffer, cfg.gamma, cfg.gae_lambda);
        let stats = ppo_update(&mut params, &mut optimizer, &buffer, &targets, cfg, &mut update_rng, exec)?;

        episodes += finished.len();
        for e in &finished {
            if window.len() == curriculum.window {
                window.pop_front();
            }
            window.push_back(e.success);
        }
        let success_rate = if window.is_empty() {
            0.0
        } else {
            window.iter().filter(|&&s| s).count() as f64 / window.len() as f64
        };
        if window.len() == curriculum.window {
            let recent: Vec<bool> = window.iter().copied().collect();
            let next = curriculum_update(&curriculum, &recent);
            if next.level != curriculum.level {
                window.clear();
            }
            curriculum = next;
        }
        let record = UpdateRecord {
            update,
            episodes,
            success_rate,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            curriculum_level: level,
        };
        on_update(&record, &params);
        log.records.push(record);
    }
    Ok((params, log))
}

