//! Deployment evaluation: the success-rate protocol, the variant-by-condition
//! matrix and the motion-precision sweep.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::env::{oracle_action, sample_task, CurriculumState, EnvConfig, EnvError, MotionInput, NavEnv, Task};
use crate::exec::Executor;
use crate::math::{self, Point2};
use crate::motion::{self, DropoutInterval, MotionError, MotionEstimate, MotionKind, MotionModelParams};
use crate::policy::{forward_step, sample_action, PolicyError, PolicyParams, RecurrentState};
use crate::ppo::{self, PpoError, TrainSetup, TrainingLog};
use crate::rng;
use crate::stats;
use crate::traversal::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid evaluation setup: {0}")]
    InvalidSetup(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Who picks the actions during deployment.
#[derive(Clone, Copy, Debug)]
pub enum Controller<'p> {
    Network {
        params: &'p PolicyParams,
        /// Argmax actions; sampled otherwise.
        greedy: bool,
    },
    /// Steps toward the goal.
    Oracle,
    /// Uniform over the action set.
    UniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub iterations: usize,
    pub targets: usize,
}

impl Default for Protocol {
    /// Ten deployment iterations of one hundred targets each.
    fn default() -> Self {
        Self { iterations: 10, targets: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub task: Task,
    pub success: bool,
    pub length: usize,
    pub estimates: Vec<MotionEstimate>,
    pub truths: Vec<Point2>,
}

/// Runs one episode to termination.
pub fn run_episode(
    env: &mut NavEnv<'_>,
    controller: Controller<'_>,
    task: Task,
    motion_stream: u64,
    action_rng: &mut rng::Rng,
) -> Result<EpisodeTrace, HarnessError> {
    let mut obs = env.reset(task, motion_stream)?;
    let mut estimates = vec![env.tracker().map(|t| t.estimate()).ok_or(EnvError::NotReset)?];
    let mut truths = vec![env.dataset().pose(task.start)];
    let mut state = match controller {
        Controller::Network { params, .. } => RecurrentState::zeros(params.config().lstm_units),
        _ => RecurrentState::zeros(0),
    };
    let n_actions = env.n_actions();
    let mut total_reward = 0.0;
    loop {
        let action = match controller {
            Controller::Network { params, greedy } => {
                let out = forward_step(params, &obs, &state)?;
                let a = if greedy {
                    math::argmax(&out.action_probs)
                } else {
                    sample_action(&out.action_probs, action_rng)?
                };
                state = out.next_state;
                a
            }
            Controller::Oracle => {
                oracle_action(env.state().ok_or(EnvError::NotReset)?, env.config().action_set)
            }
            Controller::UniformRandom => {
                use rand::Rng as _;
                action_rng.random_range(0..n_actions)
            }
        };
        let out = env.step(action)?;
        total_reward += out.reward;
        let st = env.state().ok_or(EnvError::NotReset)?;
        estimates.push(env.tracker().ok_or(EnvError::NotReset)?.estimate());
        truths.push(env.dataset().pose(st.current_index));
        obs = out.observation;
        if out.done {
            if st.steps_taken > st.step_cap || st.step_cap >= env.n_places() {
                return Err(HarnessError::Protocol("episode exceeded the step cap".into()));
            }
            if total_reward != 0.0 && total_reward != 1.0 {
                return Err(HarnessError::Protocol("episode reward outside {0, 1}".into()));
            }
            return Ok(EpisodeTrace {
                task,
                success: total_reward == 1.0,
                length: st.steps_taken,
                estimates,
                truths,
            });
        }
    }
}

/// Success counts of one (controller, traversal, motion model) deployment.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessReport {
    pub successes: Vec<usize>,
    pub targets: usize,
    pub max_episode_length: usize,
}

impl SuccessReport {
    pub fn rates(&self) -> Vec<f64> {
        self.successes.iter().map(|&s| s as f64 / self.targets as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        stats::mean(&self.rates())
    }

    pub fn std(&self) -> f64 {
        stats::sample_std(&self.rates())
    }

    pub fn stderr(&self) -> f64 {
        stats::standard_error(&self.rates())
    }

    /// Pooled successes over pooled tasks.
    pub fn pooled(&self) -> f64 {
        self.successes.iter().sum::<usize>() as f64 / (self.targets * self.successes.len()) as f64
    }
}

/// Deploys `controller` for `protocol.iterations` iterations of
/// `protocol.targets` tasks drawn over the full route. Task draws depend only
/// on `(seed, iteration)`, so every controller faces the same targets.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_success_rate<E: Executor>(
    controller: Controller<'_>,
    dataset: &Dataset,
    traversal_id: &str,
    motion: &MotionModelParams,
    env_config: EnvConfig,
    protocol: Protocol,
    seed: u64,
    exec: &E,
) -> Result<SuccessReport, HarnessError> {
    if protocol.iterations == 0 || protocol.targets == 0 {
        return Err(HarnessError::InvalidSetup("protocol needs iterations and targets".into()));
    }
    if let Controller::Network { params, .. } = controller {
        let c = params.config();
        if c.descriptor_dim != dataset.descriptor_dim() || c.n_actions != env_config.action_set.len() {
            return Err(HarnessError::InvalidSetup(alloc::format!(
                "network expects descriptor {} / {} actions, deployment has {} / {}",
                c.descriptor_dim,
                c.n_actions,
                dataset.descriptor_dim(),
                env_config.action_set.len()
            )));
        }
    }
    let n = dataset.n_places();
    let full = CurriculumState::full_route(n);
    let iterations: Vec<usize> = (0..protocol.iterations).collect();
    let results = exec.map(&iterations, |_, &it| -> Result<(usize, usize), HarnessError> {
        let mut env = NavEnv::new(dataset, traversal_id, env_config, motion.clone())?;
        let mut task_rng = rng::stream(seed, "eval.tasks", it as u64);
        let mut action_rng = rng::stream(seed, "eval.actions", it as u64);
        let mut successes = 0;
        let mut longest = 0;
        for k in 0..protocol.targets {
            let task = sample_task(&mut task_rng, &full, n)?;
            let stream = ((it as u64) << 32) | k as u64;
            let ep = run_episode(&mut env, controller, task, stream, &mut action_rng)?;
            successes += usize::from(ep.success);
            longest = longest.max(ep.length);
        }
        Ok((successes, longest))
    });
    let mut report = SuccessReport { successes: Vec::new(), targets: protocol.targets, max_episode_length: 0 };
    for r in results {
        let (s, l) = r?;
        report.successes.push(s);
        report.max_episode_length = report.max_episode_length.max(l);
    }
    if report.max_episode_length >= n {
        return Err(HarnessError::Protocol("episode longer than N - 1".into()));
    }
    Ok(report)
}

/// An agent configuration: which estimator feeds the motion slot, or none.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub motion_kind: MotionKind,
    pub motion_input: MotionInput,
}

impl Variant {
    pub fn mvp(kind: MotionKind) -> Self {
        Self { name: alloc::format!("mvp-{}", kind.name()), motion_kind: kind, motion_input: MotionInput::Estimated }
    }

    /// Same network with the motion input zeroed.
    pub fn vision_only() -> Self {
        Self { name: "vision-only".to_string(), motion_kind: MotionKind::Gps, motion_input: MotionInput::Zeroed }
    }

    pub fn standard() -> Vec<Variant> {
        vec![
            Variant::mvp(MotionKind::Gps),
            Variant::mvp(MotionKind::Vo),
            Variant::mvp(MotionKind::Ro),
            Variant::vision_only(),
        ]
    }

    pub fn parse(name: &str) -> Option<Variant> {
        match name {
            "mvp-gps" => Some(Variant::mvp(MotionKind::Gps)),
            "mvp-vo" => Some(Variant::mvp(MotionKind::Vo)),
            "mvp-ro" => Some(Variant::mvp(MotionKind::Ro)),
            "vision-only" => Some(Variant::vision_only()),
            _ => None,
        }
    }
}

/// Per-traversal deployment conditions shared by all variants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotionRegime {
    /// Noise per estimator kind; kinds not listed use their defaults.
    pub sigmas: Vec<(MotionKind, f64)>,
    /// GPS reception gaps per traversal id.
    pub gps_dropout: Vec<(String, Vec<DropoutInterval>)>,
    pub seed: u64,
}

impl MotionRegime {
    pub fn sigma(&self, kind: MotionKind) -> f64 {
        self.sigmas
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(kind.default_sigma(), |&(_, s)| s)
    }

    /// Estimator parameters for `kind` on `traversal_id`.
    pub fn params(&self, kind: MotionKind, traversal_id: &str) -> MotionModelParams {
        let dropout = if kind == MotionKind::Gps {
            self.gps_dropout
                .iter()
                .find(|(id, _)| id == traversal_id)
                .map(|(_, d)| d.clone())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        MotionModelParams::new(kind, self.sigma(kind)).with_dropout(dropout).with_seed(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeploymentRow {
    pub variant: String,
    pub traversal: String,
    pub report: SuccessReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeploymentReport {
    pub rows: Vec<DeploymentRow>,
}

impl DeploymentReport {
    pub fn get(&self, variant: &str, traversal: &str) -> Option<&SuccessReport> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.traversal == traversal)
            .map(|r| &r.report)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What is deployed for one variant.
#[derive(Clone, Copy, Debug)]
pub enum Agent<'p> {
    Trained(&'p PolicyParams),
    Oracle,
}

/// Deploys each `(variant, agent)` on every traversal of the dataset.
#[allow(clippy::too_many_arguments)]
pub fn deploy_matrix<E: Executor>(
    dataset: &Dataset,
    agents: &[(Variant, Agent<'_>)],
    env_config: EnvConfig,
    regime: &MotionRegime,
    protocol: Protocol,
    greedy: bool,
    seed: u64,
    exec: &E,
) -> Result<DeploymentReport, HarnessError> {
    let mut report = DeploymentReport::default();
    for (variant, agent) in agents {
        let checksum = match agent {
            Agent::Trained(p) => Some(p.checksum()),
            Agent::Oracle => None,
        };
        for t in dataset.traversals() {
            let id = t.condition_id();
            let controller = match agent {
                Agent::Trained(params) => Controller::Network { params, greedy },
                Agent::Oracle => Controller::Oracle,
            };
            let cfg = EnvConfig { motion_input: variant.motion_input, ..env_config };
            let motion = regime.params(variant.motion_kind, id);
            let r = evaluate_success_rate(controller, dataset, id, &motion, cfg, protocol, seed, exec)?;
            report.rows.push(DeploymentRow { variant: variant.name.clone(), traversal: id.to_string(), report: r });
        }
        if let (Some(before), Agent::Trained(p)) = (checksum, agent) {
            if p.checksum() != before {
                return Err(HarnessError::Protocol("deployment mutated the parameters".into()));
            }
        }
    }
    Ok(report)
}

/// Training configuration for `compare_variants`, shared by every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareSetup {
    /// Template; its motion parameters are replaced per variant.
    pub train: TrainSetup,
    pub regime: MotionRegime,
    pub protocol: Protocol,
    pub greedy: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedVariant {
    pub variant: Variant,
    pub params: PolicyParams,
    pub log: TrainingLog,
}

/// Trains one variant on the setup's training traversal.
pub fn train_variant<E: Executor>(
    dataset: &Dataset,
    variant: &Variant,
    setup: &CompareSetup,
    exec: &E,
) -> Result<TrainedVariant, HarnessError> {
    let mut train = setup.train.clone();
    train.motion = setup.regime.params(variant.motion_kind, &train.traversal_id);
    train.env.motion_input = variant.motion_input;
    let (params, log) = ppo::train(dataset, &train, exec, |_, _| {})?;
    Ok(TrainedVariant { variant: variant.clone(), params, log })
}

/// Trains every variant with identical seeds and budgets, then deploys them
/// all on every traversal.
pub fn compare_variants<E: Executor>(
    dataset: &Dataset,
    variants: &[Variant],
    setup: &CompareSetup,
    exec: &E,
) -> Result<(DeploymentReport, Vec<TrainedVariant>), HarnessError> {
    let trained = variants
        .iter()
        .map(|v| train_variant(dataset, v, setup, exec))
        .collect::<Result<Vec<_>, _>>()?;
    let agents: Vec<(Variant, Agent<'_>)> =
        trained.iter().map(|t| (t.variant.clone(), Agent::Trained(&t.params))).collect();
    let report = deploy_matrix(
        dataset,
        &agents,
        setup.train.env,
        &setup.regime,
        setup.protocol,
        setup.greedy,
        setup.seed,
        exec,
    )?;
    Ok((report, trained))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub sigma: f64,
    pub rmse: f64,
    pub success_rate: f64,
    pub stderr: f64,
}

/// Trajectory RMSE of the VO model with per-step noise `sigma`, pooled over
/// `episodes` oracle-driven episodes on full-route tasks.
pub fn measure_vo_rmse(
    dataset: &Dataset,
    traversal_id: &str,
    sigma: f64,
    episodes: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let motion = MotionModelParams::new(MotionKind::Vo, sigma).with_seed(seed);
    let mut env = NavEnv::new(dataset, traversal_id, EnvConfig::default(), motion)?;
    let n = dataset.n_places();
    let full = CurriculumState::full_route(n);
    let mut task_rng = rng::stream(seed, "sweep.rmse.tasks", 0);
    let mut unused = rng::stream(seed, "sweep.rmse.actions", 0);
    let mut sse = 0.0;
    let mut count = 0usize;
    for k in 0..episodes.max(1) {
        let task = sample_task(&mut task_rng, &full, n)?;
        let ep = run_episode(&mut env, Controller::Oracle, task, k as u64, &mut unused)?;
        let e = motion::trajectory_rmse(&ep.estimates, &ep.truths)?;
        sse += e.rmse * e.rmse * ep.estimates.len() as f64;
        count += ep.estimates.len();
    }
    Ok(libm::sqrt(sse / count as f64))
}

/// Which policy each sweep point deploys.
#[derive(Clone, Copy, Debug)]
pub enum SweepPolicy<'a> {
    /// One policy for every sigma.
    Frozen(&'a PolicyParams),
    /// Retrain with VO at each sigma from this template.
    Retrain(&'a TrainSetup),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetup {
    pub sigmas: Vec<f64>,
    pub env: EnvConfig,
    pub protocol: Protocol,
    pub rmse_episodes: usize,
    pub greedy: bool,
    pub seed: u64,
}

/// Deploys an MVP-VO policy across a grid of VO noise levels, recording the
/// measured trajectory RMSE and success rate at each.
pub fn sweep_motion_precision<E: Executor>(
    dataset: &Dataset,
    traversal_id: &str,
    policy: SweepPolicy<'_>,
    setup: &SweepSetup,
    exec: &E,
) -> Result<Vec<TradeoffPoint>, HarnessError> {
    if setup.sigmas.is_empty() {
        return Err(HarnessError::InvalidSetup("empty sigma grid".into()));
    }
    if setup.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(HarnessError::InvalidSetup("sigmas must be finite and non-negative".into()));
    }
    if setup.sigmas.windows(2).any(|w| w[1] < w[0]) {
        return Err(HarnessError::InvalidSetup("sigma grid must be sorted".into()));
    }
    let mut points = Vec::with_capacity(setup.sigmas.len());
    for &sigma in &setup.sigmas {
        let rmse = measure_vo_rmse(dataset, traversal_id, sigma, setup.rmse_episodes, setup.seed)?;
        let motion = MotionModelParams::new(MotionKind::Vo, sigma).with_seed(setup.seed);
        let retrained;
        let params = match policy {
            SweepPolicy::Frozen(p) => p,
            SweepPolicy::Retrain(template) => {
                let mut t = template.clone();
                t.motion = motion.clone();
                retrained = ppo::train(dataset, &t, exec, |_, _| {})?.0;
                &retrained
            }
        };
        let report = evaluate_success_rate(
            Controller::Network { params, greedy: setup.greedy },
            dataset,
            traversal_id,
            &motion,
            setup.env,
            setup.protocol,
            setup.seed,
            exec,
        )?;
        points.push(TradeoffPoint { sigma, rmse, success_rate: report.mean(), stderr: report.stderr() });
    }
    Ok(points)
}
