//! Episodic navigation over one traversal: discrete moves along the route
//! index, bimodal observations and a sparse +1 reward on reaching the goal.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use crate::motion::{self, MotionError, MotionFeature, MotionModelParams, MotionTracker};
use crate::rng::{self, Rng};
use crate::traversal::{Dataset, Traversal, TraversalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("place index {index} out of range 0..{n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("start and goal are both {0}")]
    StartIsGoal(usize),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("no episode in progress")]
    NotReset,
    #[error("action index {index} out of range for {n} actions")]
    InvalidAction { index: usize, n: usize },
    #[error("curriculum level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("curriculum distances must be non-empty, positive and strictly increasing")]
    InvalidCurriculum,
    #[error("curriculum threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("curriculum window must be positive")]
    InvalidWindow,
    #[error("need at least 2 places, got {0}")]
    TooFewPlaces(usize),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Traversal(#[from] TraversalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Forward,
    Backward,
    Stay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActionSet {
    #[default]
    ForwardBackward,
    ForwardBackwardStay,
}

impl ActionSet {
    pub fn len(self) -> usize {
        match self {
            ActionSet::ForwardBackward => 2,
            ActionSet::ForwardBackwardStay => 3,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn action(self, index: usize) -> Result<Action, EnvError> {
        const ALL: [Action; 3] = [Action::Forward, Action::Backward, Action::Stay];
        if index < self.len() {
            Ok(ALL[index])
        } else {
            Err(EnvError::InvalidAction { index, n: self.len() })
        }
    }

    pub fn index_of(self, action: Action) -> Option<usize> {
        match action {
            Action::Forward => Some(0),
            Action::Backward => Some(1),
            Action::Stay if self == ActionSet::ForwardBackwardStay => Some(2),
            Action::Stay => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionSet::ForwardBackward => "forward_backward",
            ActionSet::ForwardBackwardStay => "forward_backward_stay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward_backward" => Some(ActionSet::ForwardBackward),
            "forward_backward_stay" => Some(ActionSet::ForwardBackwardStay),
            _ => None,
        }
    }
}

/// What the agent sees in the motion slot of its observation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MotionInput {
    /// The estimator's normalized position.
    #[default]
    Estimated,
    /// All zeros: the vision-only ablation.
    Zeroed,
    /// Fresh uniform noise on `[-1, 1]^2` each step: a no-information control.
    Scrambled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnvConfig {
    pub action_set: ActionSet,
    /// The goal counts as reached within this many frames.
    pub goal_tolerance: usize,
    pub motion_input: MotionInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub m: MotionFeature,
    pub x: Vec<f64>,
    pub g: MotionFeature,
    pub prev_action: Vec<f64>,
}

impl Observation {
    /// Index of the hot entry of `prev_action`, `None` at episode start.
    pub fn prev_action_index(&self) -> Option<usize> {
        self.prev_action.iter().position(|&v| v == 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub start: usize,
    pub goal: usize,
}

impl Task {
    pub fn distance(&self) -> usize {
        self.start.abs_diff(self.goal)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeState {
    pub current_index: usize,
    pub goal_index: usize,
    pub steps_taken: usize,
    pub step_cap: usize,
    pub done: bool,
    pub total_reward: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One environment instance bound to a traversal of a shared dataset.
#[derive(Clone, Debug)]
pub struct NavEnv<'a> {
    dataset: &'a Dataset,
    traversal: &'a Traversal,
    config: EnvConfig,
    motion_params: MotionModelParams,
    episode: Option<(EpisodeState, MotionTracker)>,
}

impl<'a> NavEnv<'a> {
    pub fn new(
        dataset: &'a Dataset,
        traversal_id: &str,
        config: EnvConfig,
        motion_params: MotionModelParams,
    ) -> Result<Self, EnvError> {
        motion_params.validate(dataset.n_places())?;
        Ok(Self {
            dataset,
            traversal: dataset.traversal(traversal_id)?,
            config,
            motion_params,
            episode: None,
        })
    }

    pub fn n_places(&self) -> usize {
        self.traversal.len()
    }

    pub fn n_actions(&self) -> usize {
        self.config.action_set.len()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn motion_params(&self) -> &MotionModelParams {
        &self.motion_params
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn state(&self) -> Option<&EpisodeState> {
        self.episode.as_ref().map(|(s, _)| s)
    }

    pub fn tracker(&self) -> Option<&MotionTracker> {
        self.episode.as_ref().map(|(_, t)| t)
    }

    /// Starts an episode. `motion_stream` selects the estimator's noise
    /// stream so that episodes are reproducible individually.
    pub fn reset(&mut self, task: Task, motion_stream: u64) -> Result<Observation, EnvError> {
        let n = self.n_places();
        for index in [task.start, task.goal] {
            if index >= n {
                return Err(EnvError::IndexOutOfRange { index, n });
            }
        }
        if task.start == task.goal {
            return Err(EnvError::StartIsGoal(task.start));
        }
        let rng = rng::stream(self.motion_params.seed, "motion.episode", motion_stream);
        let tracker = MotionTracker::start(
            &self.motion_params,
            self.traversal.pose(task.start),
            task.start,
            rng,
        );
        let state = EpisodeState {
            current_index: task.start,
            goal_index: task.goal,
            steps_taken: 0,
            step_cap: n - 1,
            done: false,
            total_reward: 0,
        };
        self.episode = Some((state, tracker));
        self.observe(None)
    }

    pub fn step(&mut self, action_index: usize) -> Result<StepOutcome, EnvError> {
        let action = self.config.action_set.action(action_index)?;
        let n = self.n_places();
        let tolerance = self.config.goal_tolerance;
        let traversal = self.traversal;
        let (state, tracker) = self.episode.as_mut().ok_or(EnvError::NotReset)?;
        if state.done {
            return Err(EnvError::EpisodeFinished);
        }
        let prev = state.current_index;
        state.current_index = match action {
            Action::Forward => (prev + 1).min(n - 1),
            Action::Backward => prev.saturating_sub(1),
            Action::Stay => prev,
        };
        state.steps_taken += 1;
        tracker.advance(traversal.pose(prev), traversal.pose(state.current_index), state.current_index);

        let reached = state.current_index.abs_diff(state.goal_index) <= tolerance;
        let reward = if reached { 1.0 } else { 0.0 };
        if reached {
            state.total_reward += 1;
        }
        state.done = reached || state.steps_taken >= state.step_cap;
        let done = state.done;
        let observation = self.observe(Some(action_index))?;
        Ok(StepOutcome { observation, reward, done })
    }

    fn observe(&mut self, prev_action: Option<usize>) -> Result<Observation, EnvError> {
        let bbox = self.dataset.route_bbox();
        let (state, tracker) = self.episode.as_mut().ok_or(EnvError::NotReset)?;
        let m = match self.config.motion_input {
            MotionInput::Estimated => motion::motion_feature(&tracker.estimate(), &bbox)?,
            MotionInput::Zeroed => MotionFeature::ZERO,
            MotionInput::Scrambled => {
                MotionFeature([2.0 * tracker.uniform() - 1.0, 2.0 * tracker.uniform() - 1.0])
            }
        };
        let g = motion::position_feature(self.traversal.pose(state.goal_index), &bbox)?;
        let mut one_hot = vec![0.0; self.config.action_set.len()];
        if let Some(a) = prev_action {
            one_hot[a] = 1.0;
        }
        Ok(Observation {
            m,
            x: self.traversal.descriptor(state.current_index).to_vec(),
            g,
            prev_action: one_hot,
        })
    }
}

/// Staged goal-distance schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumState {
    /// 1-based.
    pub level: usize,
    pub max_goal_distance_per_level: Vec<usize>,
    pub promotion_threshold: f64,
    pub window: usize,
}

impl CurriculumState {
    pub fn new(distances: Vec<usize>, promotion_threshold: f64, window: usize) -> Result<Self, EnvError> {
        if distances.is_empty() || distances[0] == 0 || distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EnvError::InvalidCurriculum);
        }
        if !(0.0..=1.0).contains(&promotion_threshold) {
            return Err(EnvError::InvalidThreshold(promotion_threshold));
        }
        if window == 0 {
            return Err(EnvError::InvalidWindow);
        }
        Ok(Self {
            level: 1,
            max_goal_distance_per_level: distances,
            promotion_threshold,
            window,
        })
    }

    /// Default schedule for a route of `n` places: distances growing roughly
    /// threefold per level, the last one spanning the whole route.
    pub fn default_for(n: usize) -> Self {
        let full = n.saturating_sub(1).max(1);
        let mut distances: Vec<usize> = [3usize, 10, 30].into_iter().filter(|&d| d < full).collect();
        distances.push(full);
        Self::new(distances, 0.8, 100).expect("valid by construction")
    }

    /// A single level that already spans the full route.
    pub fn full_route(n: usize) -> Self {
        Self::new(vec![n.saturating_sub(1).max(1)], 1.0, 1).expect("valid by construction")
    }

    pub fn levels(&self) -> usize {
        self.max_goal_distance_per_level.len()
    }

    pub fn is_final_level(&self) -> bool {
        self.level == self.levels()
    }

    pub fn max_distance(&self) -> Result<usize, EnvError> {
        self.level
            .checked_sub(1)
            .and_then(|l| self.max_goal_distance_per_level.get(l))
            .copied()
            .ok_or(EnvError::LevelOutOfRange { level: self.level, levels: self.levels() })
    }
}

/// Start uniform over the route, goal uniform among indices within the
/// current level's distance.
pub fn sample_task(rng: &mut Rng, curriculum: &CurriculumState, n: usize) -> Result<Task, EnvError> {
    if n < 2 {
        return Err(EnvError::TooFewPlaces(n));
    }
    let d = curriculum.max_distance()?;
    let start = rng.random_range(0..n);
    let lo = start.saturating_sub(d);
    let hi = (start + d).min(n - 1);
    // Candidates are lo..=hi without `start`.
    let k = rng.random_range(0..hi - lo);
    let mut goal = lo + k;
    if goal >= start {
        goal += 1;
    }
    Ok(Task { start, goal })
}

/// Promotes one level when the success fraction over the window reaches the
/// threshold. Never demotes.
pub fn curriculum_update(curriculum: &CurriculumState, recent_successes: &[bool]) -> CurriculumState {
    let mut next = curriculum.clone();
    if recent_successes.is_empty() || curriculum.is_final_level() {
        return next;
    }
    let fraction =
        recent_successes.iter().filter(|&&s| s).count() as f64 / recent_successes.len() as f64;
    if fraction >= curriculum.promotion_threshold {
        next.level += 1;
    }
    next
}

/// Steps toward the goal; always optimal.
pub fn oracle_action(state: &EpisodeState, action_set: ActionSet) -> usize {
    let action = match state.goal_index.cmp(&state.current_index) {
        core::cmp::Ordering::Greater => Action::Forward,
        core::cmp::Ordering::Less => Action::Backward,
        core::cmp::Ordering::Equal => Action::Stay,
    };
    action_set.index_of(action).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionKind;
    use crate::traversal::{generate_synthetic_dataset, Condition, SyntheticSpec};
    use alloc::string::ToString;

    fn dataset() -> Dataset {
        generate_synthetic_dataset(&SyntheticSpec {
            n_places: 20,
            descriptor_dim: 8,
            conditions: vec![Condition { id: "day".to_string(), severity: 0.0 }],
            route: SyntheticSpec::default_route(20, 10.0),
            place_spacing: 10.0,
            seed: 5,
        })
        .unwrap()
    }

    fn env(ds: &Dataset) -> NavEnv<'_> {
        NavEnv::new(ds, "day", EnvConfig::default(), MotionModelParams::new(MotionKind::Gps, 0.0)).unwrap()
    }

    #[test]
    fn reset_builds_start_observation() {
        let ds = dataset();
        let mut e = env(&ds);
        let obs = e.reset(Task { start: 0, goal: 10 }, 0).unwrap();
        let t = &ds.traversals()[0];
        assert_eq!(obs.x, t.descriptor(0));
        let bbox = ds.route_bbox();
        assert_eq!(obs.m, motion::position_feature(t.pose(0), &bbox).unwrap());
        assert_eq!(obs.g, motion::position_feature(t.pose(10), &bbox).unwrap());
        assert_eq!(obs.prev_action, vec![0.0, 0.0]);
        assert_eq!(e.state().unwrap().step_cap, 19);
    }

    #[test]
    fn goal_feature_ignores_motion_noise() {
        let ds = dataset();
        let mut e = NavEnv::new(&ds, "day", EnvConfig::default(), MotionModelParams::new(MotionKind::Gps, 50.0)).unwrap();
        let obs = e.reset(Task { start: 2, goal: 10 }, 9).unwrap();
        assert_eq!(obs.g, motion::position_feature(ds.pose(10), &ds.route_bbox()).unwrap());
    }

    #[test]
    fn reset_rejects_bad_tasks() {
        let ds = dataset();
        let mut e = env(&ds);
        assert_eq!(e.reset(Task { start: 3, goal: 3 }, 0), Err(EnvError::StartIsGoal(3)));
        assert_eq!(
            e.reset(Task { start: 0, goal: 20 }, 0),
            Err(EnvError::IndexOutOfRange { index: 20, n: 20 })
        );
    }

    #[test]
    fn transitions_reward_and_clamp() {
        let ds = dataset();
        let mut e = env(&ds);
        e.reset(Task { start: 5, goal: 7 }, 0).unwrap();
        let out = e.step(0).unwrap();
        assert_eq!((e.state().unwrap().current_index, out.reward, out.done), (6, 0.0, false));
        assert_eq!(out.observation.prev_action, vec![1.0, 0.0]);
        let out = e.step(0).unwrap();
        assert_eq!((out.reward, out.done), (1.0, true));
        assert_eq!(e.step(0), Err(EnvError::EpisodeFinished));

        e.reset(Task { start: 0, goal: 4 }, 0).unwrap();
        e.step(1).unwrap();
        assert_eq!(e.state().unwrap().current_index, 0);
    }

    #[test]
    fn episode_times_out_at_step_cap() {
        let ds = dataset();
        let mut e = env(&ds);
        e.reset(Task { start: 0, goal: 19 }, 0).unwrap();
        let mut steps = 0;
        loop {
            let out = e.step(1).unwrap();
            steps += 1;
            if out.done {
                assert_eq!(out.reward, 0.0);
                break;
            }
        }
        assert_eq!(steps, 19);
    }

    #[test]
    fn goal_tolerance_widens_success() {
        let ds = dataset();
        let cfg = EnvConfig { goal_tolerance: 1, ..EnvConfig::default() };
        let mut e = NavEnv::new(&ds, "day", cfg, MotionModelParams::new(MotionKind::Gps, 0.0)).unwrap();
        e.reset(Task { start: 5, goal: 7 }, 0).unwrap();
        assert_eq!(e.step(0).unwrap().reward, 1.0);
    }

    #[test]
    fn zeroed_motion_input() {
        let ds = dataset();
        let cfg = EnvConfig { motion_input: MotionInput::Zeroed, ..EnvConfig::default() };
        let mut e = NavEnv::new(&ds, "day", cfg, MotionModelParams::new(MotionKind::Gps, 0.0)).unwrap();
        let obs = e.reset(Task { start: 5, goal: 7 }, 0).unwrap();
        assert_eq!(obs.m, MotionFeature::ZERO);
        assert_ne!(obs.g, MotionFeature::ZERO);
    }

    #[test]
    fn sampled_tasks_respect_level_distance() {
        let mut rng = rng::stream(1, "test", 0);
        let c = CurriculumState::new(vec![1, 5, 19], 0.5, 10).unwrap();
        for _ in 0..2000 {
            let t = sample_task(&mut rng, &c, 20).unwrap();
            assert_eq!(t.distance(), 1);
        }
        let c5 = CurriculumState { level: 2, ..c.clone() };
        for _ in 0..2000 {
            let t = sample_task(&mut rng, &c5, 20).unwrap();
            assert!((1..=5).contains(&t.distance()) && t.goal < 20);
        }
        let bad = CurriculumState { level: 4, ..c };
        assert!(matches!(sample_task(&mut rng, &bad, 20), Err(EnvError::LevelOutOfRange { .. })));
    }

    #[test]
    fn curriculum_promotion_rules() {
        let c = CurriculumState::new(vec![1, 5, 10], 0.8, 4).unwrap();
        assert_eq!(curriculum_update(&c, &[true; 4]).level, 2);
        assert_eq!(curriculum_update(&c, &[true, false, true, false]).level, 1);
        let top = CurriculumState { level: 3, ..c };
        assert_eq!(curriculum_update(&top, &[true; 4]).level, 3);
    }

    #[test]
    fn curriculum_validation() {
        assert!(CurriculumState::new(vec![], 0.5, 1).is_err());
        assert!(CurriculumState::new(vec![3, 3], 0.5, 1).is_err());
        assert!(CurriculumState::new(vec![3], 1.5, 1).is_err());
        assert!(CurriculumState::new(vec![3], 0.5, 0).is_err());
        let d = CurriculumState::default_for(100);
        assert_eq!(d.max_goal_distance_per_level, vec![3, 10, 30, 99]);
    }
}
