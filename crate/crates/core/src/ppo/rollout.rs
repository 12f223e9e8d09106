//! Rollout collection and return/advantage estimation.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::{oracle_action, sample_task, CurriculumState, EnvError, NavEnv, Observation};
use crate::exec::Executor;
use crate::policy::{forward_step, sample_action, PolicyError, PolicyParams, RecurrentState};
use crate::rng::{self, Rng};

use super::PpoError;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub observation: Observation,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// The recurrent state fed into this step (zero at episode starts).
    pub state: RecurrentState,
    pub episode_start: bool,
}

/// One environment's contiguous steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvRollout {
    pub steps: Vec<RolloutStep>,
    /// Value of the observation after the last step; unused when that step
    /// ended an episode.
    pub bootstrap_value: f64,
}

/// Steps from all environments of one collection phase, environment-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> impl Iterator<Item = &RolloutStep> {
        self.envs.iter().flat_map(|e| e.steps.iter())
    }
}

/// How actions are chosen during collection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Behavior {
    #[default]
    Sampled,
    /// Step toward the goal regardless of the network (still records the
    /// network's log-probabilities and values).
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeResult {
    pub env: usize,
    /// Rollout step at which the episode ended.
    pub step: usize,
    pub length: usize,
    pub success: bool,
}

/// An environment plus the agent-side state carried between collection
/// phases.
#[derive(Clone, Debug)]
pub struct EnvWorker<'a> {
    env: NavEnv<'a>,
    index: usize,
    observation: Observation,
    state: RecurrentState,
    episode_start: bool,
    episodes: u64,
    action_rng: Rng,
    task_rng: Rng,
}

impl<'a> EnvWorker<'a> {
    pub fn new(
        env: NavEnv<'a>,
        index: usize,
        seed: u64,
        lstm_units: usize,
        curriculum: &CurriculumState,
    ) -> Result<Self, EnvError> {
        let mut w = Self {
            observation: Observation {
                m: crate::motion::MotionFeature::ZERO,
                x: Vec::new(),
                g: crate::motion::MotionFeature::ZERO,
                prev_action: Vec::new(),
            },
            env,
            index,
            state: RecurrentState::zeros(lstm_units),
            episode_start: true,
            episodes: 0,
            action_rng: rng::stream(seed, "ppo.action", index as u64),
            task_rng: rng::stream(seed, "ppo.task", index as u64),
        };
        w.new_episode(curriculum)?;
        Ok(w)
    }

    fn new_episode(&mut self, curriculum: &CurriculumState) -> Result<(), EnvError> {
        let task = sample_task(&mut self.task_rng, curriculum, self.env.n_places())?;
        let stream = ((self.index as u64) << 40) | self.episodes;
        self.episodes += 1;
        self.observation = self.env.reset(task, stream)?;
        self.state = RecurrentState::zeros(self.state.hidden.len());
        self.episode_start = true;
        Ok(())
    }

    pub fn env(&self) -> &NavEnv<'a> {
        &self.env
    }

    fn run(
        &mut self,
        params: &PolicyParams,
        rollout_length: usize,
        curriculum: &CurriculumState,
        behavior: Behavior,
    ) -> Result<(EnvRollout, Vec<EpisodeResult>), PpoError> {
        let mut steps = Vec::with_capacity(rollout_length);
        let mut episodes = Vec::new();
        let action_set = self.env.config().action_set;
        for t in 0..rollout_length {
            let out = forward_step(params, &self.observation, &self.state)?;
            let action = match behavior {
                Behavior::Sampled => sample_action(&out.action_probs, &mut self.action_rng)?,
                Behavior::Oracle => oracle_action(self.env.state().ok_or(EnvError::NotReset)?, action_set),
            };
            let outcome = self.env.step(action)?;
            let episode = self.env.state().ok_or(EnvError::NotReset)?.clone();
            steps.push(RolloutStep {
                observation: core::mem::replace(&mut self.observation, outcome.observation),
                action,
                log_prob: out.log_prob(action),
                value: out.value,
                reward: outcome.reward,
                done: outcome.done,
                state: core::mem::replace(&mut self.state, out.next_state),
                episode_start: self.episode_start,
            });
            self.episode_start = false;
            if outcome.done {
                if episode.steps_taken > episode.step_cap || episode.total_reward > 1 {
                    return Err(PpoError::Protocol("episode exceeded the step cap or reward budget"));
                }
                episodes.push(EpisodeResult {
                    env: self.index,
                    step: t,
                    length: episode.steps_taken,
                    success: episode.total_reward == 1,
                });
                self.new_episode(curriculum)?;
            }
        }
        let bootstrap_value = if steps.last().is_some_and(|s| s.done) {
            0.0
        } else {
            forward_step(params, &self.observation, &self.state)?.value
        };
        Ok((EnvRollout { steps, bootstrap_value }, episodes))
    }
}

/// Steps every worker `rollout_length` times under fixed `params`. Finished
/// episodes restart with a task drawn from `curriculum`. Episode results are
/// ordered by (rollout step, environment).
pub fn collect_rollouts<E: Executor>(
    workers: &mut [EnvWorker<'_>],
    params: &PolicyParams,
    rollout_length: usize,
    curriculum: &CurriculumState,
    behavior: Behavior,
    exec: &E,
) -> Result<(RolloutBuffer, Vec<EpisodeResult>), PpoError> {
    let results = exec.map_mut(workers, |_, w| w.run(params, rollout_length, curriculum, behavior));
    let mut buffer = RolloutBuffer { envs: Vec::with_capacity(results.len()) };
    let mut episodes = Vec::new();
    for r in results {
        let (env, eps) = r?;
        buffer.envs.push(env);
        episodes.extend(eps);
    }
    episodes.sort_by_key(|e| (e.step, e.env));
    Ok((buffer, episodes))
}

/// Per-step targets, flattened in buffer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Generalized advantage estimation, run backwards over each environment's
/// steps:
/// `delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t`,
/// `A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}`, `R_t = A_t + V_t`.
pub fn compute_returns_and_advantages(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Advantages {
    let n = buffer.len();
    let mut returns = vec![0.0; n];
    let mut advantages = vec![0.0; n];
    let mut offset = 0;
    for env in &buffer.envs {
        let len = env.steps.len();
        let mut next_adv = 0.0;
        let mut next_value = env.bootstrap_value;
        for t in (0..len).rev() {
            let s = &env.steps[t];
            let nonterminal = if s.done { 0.0 } else { 1.0 };
            let delta = s.reward + gamma * next_value * nonterminal - s.value;
            let adv = delta + gamma * lambda * nonterminal * next_adv;
            advantages[offset + t] = adv;
            returns[offset + t] = adv + s.value;
            next_adv = adv;
            next_value = s.value;
        }
        offset += len;
    }
    Advantages { returns, advantages }
}

/// Shifts and scales to zero mean and unit variance (population std).
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len();
    if n < 2 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let std = libm::sqrt(var);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

impl From<PolicyError> for PpoError {
    fn from(e: PolicyError) -> Self {
        PpoError::Policy(e)
    }
}
