//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! `--set key=value` overrides are applied after the file. Every key is
//! parsed and range-checked up front, and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mvpnav_core::env::{ActionSet, CurriculumState, EnvConfig, MotionInput};
use mvpnav_core::harness::{MotionRegime, Protocol, Variant};
use mvpnav_core::motion::{DropoutInterval, MotionKind};
use mvpnav_core::policy::{Activation, PolicyConfig, DEFAULT_ENCODER_UNITS, DEFAULT_LSTM_UNITS};
use mvpnav_core::ppo::PpoConfig;
use mvpnav_core::traversal::{Condition, SyntheticSpec, DEFAULT_DESCRIPTOR_DIM, DEFAULT_PLACES};
use mvpnav_core::vpr::{FitConfig, VprConfig};
use thiserror::Error;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "MVPNAV_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "mvpnav-out";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Raw key/value pairs, later entries overriding earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            }
            raw.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries
            .insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(kv.to_string()))?;
        if k.trim().is_empty() {
            return Err(ConfigError::Override(kv.to_string()));
        }
        self.set(k, v);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Frozen,
    Retrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub path: PathBuf,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub traversal: String,
    pub variants: Vec<Variant>,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub variants: Vec<Variant>,
    pub protocol: Protocol,
    pub greedy: bool,
    pub oracle: bool,
    pub vpr: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub sigmas: Vec<f64>,
    pub mode: SweepMode,
    pub traversal: String,
    pub rmse_episodes: usize,
}

/// A fully parsed and validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub dataset: DatasetSection,
    /// Noise and GPS gaps for every estimator kind, used in training and
    /// deployment alike.
    pub regime: MotionRegime,
    pub env: EnvConfig,
    pub curriculum: CurriculumState,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub vpr: VprConfig,
}

/// Typed access to the raw entries; records which keys were consumed.
struct Reader {
    entries: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| invalid(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(key, default)?;
        if !v.is_finite() {
            return Err(invalid(key, "must be finite"));
        }
        Ok(v)
    }

    fn positive_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.f64(key, default)?;
        if v <= 0.0 {
            return Err(invalid(key, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    fn non_negative_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.f64(key, default)?;
        if v < 0.0 {
            return Err(invalid(key, format!("must be non-negative, got {v}")));
        }
        Ok(v)
    }

    fn unit_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.f64(key, default)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(key, format!("must lie in [0, 1], got {v}")));
        }
        Ok(v)
    }

    fn positive_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        let v: usize = self.parse(key, default)?;
        if v == 0 {
            return Err(invalid(key, "must be positive"));
        }
        Ok(v)
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(other) => Err(invalid(
                key,
                format!("expected true or false, got `{other}`"),
            )),
        }
    }

    fn list<T>(
        &mut self,
        key: &str,
        default: Vec<T>,
        item: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Vec<T>, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => split_list(&v)
                .map(|s| item(s).map_err(|m| invalid(key, m)))
                .collect(),
        }
    }

    /// Keys of the form `prefix.<suffix>`, removed from the reader.
    fn with_prefix(&mut self, prefix: &str) -> Vec<(String, String, String)> {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).expect("key listed above");
                (k[prefix.len()..].to_string(), k, v)
            })
            .collect()
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.parse()
        .map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a finite number")),
    }
}

/// `start-end` as the half-open frame range `start..end`.
pub fn parse_interval(s: &str) -> Result<DropoutInterval, String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("`{s}` is not a range `start-end`"))?;
    let (a, b) = (parse_usize(a.trim())?, parse_usize(b.trim())?);
    if b <= a {
        return Err(format!("range `{s}` is empty"));
    }
    Ok((a, b))
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    let (id, sev) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not `id:severity`"))?;
    let id = id.trim();
    if id.is_empty() || id.contains([',', '"']) {
        return Err(format!("invalid condition id `{id}`"));
    }
    let severity = parse_f64(sev.trim())?;
    if severity < 0.0 {
        return Err(format!(
            "severity of `{id}` must be non-negative, got {severity}"
        ));
    }
    Ok(Condition {
        id: id.to_string(),
        severity,
    })
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        format!("unknown variant `{s}` (expected mvp-gps, mvp-vo, mvp-ro or vision-only)")
    })
}

fn parse_kind(key: &str, s: &str) -> Result<MotionKind, ConfigError> {
    MotionKind::parse(s).ok_or_else(|| {
        invalid(
            key,
            format!("unknown motion kind `{s}` (expected gps, vo or ro)"),
        )
    })
}

fn check_intervals(key: &str, intervals: &[DropoutInterval], n: usize) -> Result<(), ConfigError> {
    let mut sorted = intervals.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(invalid(
                key,
                format!(
                    "ranges {}-{} and {}-{} overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ),
            ));
        }
    }
    if let Some(&(a, b)) = sorted.iter().find(|&&(_, b)| b > n) {
        return Err(invalid(
            key,
            format!("range {a}-{b} exceeds the {n} places"),
        ));
    }
    Ok(())
}

/// The variant trained when `train.variants` is not given.
fn implied_variant(kind: MotionKind, input: MotionInput) -> Variant {
    match input {
        MotionInput::Zeroed => Variant::vision_only(),
        _ => Variant::mvp(kind),
    }
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        Self::from_raw_with_env(raw, std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
    }

    /// As [`RunConfig::from_raw`] with an explicit fallback output directory.
    pub fn from_raw_with_env(
        raw: &RawConfig,
        env_out_dir: Option<PathBuf>,
    ) -> Result<Self, ConfigError> {
        let mut r = Reader {
            entries: raw.entries.clone(),
        };

        let seed: u64 = r.parse("seed", 0)?;
        let out_dir = match r.take("out_dir") {
            Some(v) if v.is_empty() => return Err(invalid("out_dir", "must not be empty")),
            Some(v) => PathBuf::from(v),
            None => env_out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        };
        let threads: usize = r.parse("threads", 0)?;

        let dataset_path = r
            .take("dataset.path")
            .map(PathBuf::from)
            .unwrap_or_else(|| out_dir.join("dataset.csv"));
        let n_places: usize = r.parse("dataset.n_places", DEFAULT_PLACES)?;
        if n_places < 2 {
            return Err(invalid(
                "dataset.n_places",
                format!("need at least 2 places, got {n_places}"),
            ));
        }
        let descriptor_dim: usize = r.parse("dataset.descriptor_dim", DEFAULT_DESCRIPTOR_DIM)?;
        if descriptor_dim < 2 {
            return Err(invalid(
                "dataset.descriptor_dim",
                format!("must be at least 2, got {descriptor_dim}"),
            ));
        }
        let conditions = r.list(
            "dataset.conditions",
            vec![
                Condition {
                    id: "reference".into(),
                    severity: 0.0,
                },
                Condition {
                    id: "moderate".into(),
                    severity: 0.3,
                },
                Condition {
                    id: "severe".into(),
                    severity: 2.0,
                },
            ],
            parse_condition,
        )?;
        if conditions.is_empty() {
            return Err(invalid(
                "dataset.conditions",
                "at least one condition is required",
            ));
        }
        for (k, c) in conditions.iter().enumerate() {
            if conditions[..k].iter().any(|o| o.id == c.id) {
                return Err(invalid(
                    "dataset.conditions",
                    format!("duplicate condition id `{}`", c.id),
                ));
            }
        }
        let place_spacing = r.positive_f64("dataset.place_spacing", 10.0)?;
        let dataset_seed: u64 = r.parse("dataset.seed", seed)?;
        let spec = SyntheticSpec {
            n_places,
            descriptor_dim,
            conditions,
            route: SyntheticSpec::default_route(n_places, place_spacing),
            place_spacing,
            seed: dataset_seed,
        };
        spec.validate()
            .map_err(|e| invalid("dataset", e.to_string()))?;

        let motion_kind = match r.take("motion.kind") {
            Some(v) => parse_kind("motion.kind", &v)?,
            None => MotionKind::Gps,
        };
        let mut sigmas = Vec::new();
        for (suffix, key, v) in r.with_prefix("motion.sigma.") {
            let kind = parse_kind(&key, &suffix)?;
            let s = parse_f64(&v).map_err(|m| invalid(&key, m))?;
            if s < 0.0 {
                return Err(invalid(&key, format!("must be non-negative, got {s}")));
            }
            sigmas.push((kind, s));
        }
        if r.entries.contains_key("motion.sigma") {
            let s = r.non_negative_f64("motion.sigma", 0.0)?;
            sigmas.retain(|(k, _)| *k != motion_kind);
            sigmas.push((motion_kind, s));
        }
        sigmas.sort_by_key(|(k, _)| k.name());

        let train_traversal = r
            .take("train.traversal")
            .unwrap_or_else(|| spec.conditions[0].id.clone());
        if !spec.conditions.iter().any(|c| c.id == train_traversal) {
            return Err(invalid(
                "train.traversal",
                format!("no condition named `{train_traversal}`"),
            ));
        }
        let mut gps_dropout: Vec<(String, Vec<DropoutInterval>)> = Vec::new();
        let training_gaps = r.list("motion.dropout", Vec::new(), parse_interval)?;
        check_intervals("motion.dropout", &training_gaps, n_places)?;
        if !training_gaps.is_empty() {
            gps_dropout.push((train_traversal.clone(), training_gaps));
        }
        for (id, key, v) in r.with_prefix("eval.gps_dropout.") {
            if !spec.conditions.iter().any(|c| c.id == id) {
                return Err(invalid(&key, format!("no condition named `{id}`")));
            }
            if id == train_traversal && !gps_dropout.is_empty() {
                return Err(invalid(
                    &key,
                    "the training traversal's gaps are set by motion.dropout",
                ));
            }
            let gaps = split_list(&v)
                .map(parse_interval)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|m| invalid(&key, m))?;
            check_intervals(&key, &gaps, n_places)?;
            gps_dropout.push((id, gaps));
        }
        gps_dropout.sort();
        let regime = MotionRegime {
            sigmas,
            gps_dropout,
            seed,
        };

        let action_set = match r.take("env.action_set") {
            None => ActionSet::default(),
            Some(v) => ActionSet::parse(&v)
                .ok_or_else(|| invalid("env.action_set", format!("unknown action set `{v}`")))?,
        };
        let goal_tolerance: usize = r.parse("env.goal_tolerance", 0)?;
        if goal_tolerance >= n_places - 1 {
            return Err(invalid(
                "env.goal_tolerance",
                "must be smaller than the route length",
            ));
        }
        let motion_input = match r.take("env.motion_input").as_deref() {
            None | Some("estimated") => MotionInput::Estimated,
            Some("zeroed") => MotionInput::Zeroed,
            Some("scrambled") => MotionInput::Scrambled,
            Some(other) => {
                return Err(invalid(
                    "env.motion_input",
                    format!("expected estimated, zeroed or scrambled, got `{other}`"),
                ))
            }
        };
        let env = EnvConfig {
            action_set,
            goal_tolerance,
            motion_input,
        };

        let default_curriculum = CurriculumState::default_for(n_places);
        let levels = r.list(
            "env.curriculum.levels",
            default_curriculum.max_goal_distance_per_level.clone(),
            parse_usize,
        )?;
        let threshold = r.unit_f64(
            "env.curriculum.threshold",
            default_curriculum.promotion_threshold,
        )?;
        let window = r.positive_usize("env.curriculum.window", default_curriculum.window)?;
        if levels.iter().any(|&d| d == 0 || d > n_places - 1) {
            return Err(invalid(
                "env.curriculum.levels",
                format!("distances must lie in 1..={}", n_places - 1),
            ));
        }
        let curriculum = CurriculumState::new(levels, threshold, window)
            .map_err(|e| invalid("env.curriculum.levels", e.to_string()))?;

        let encoder_units = r.positive_usize("policy.encoder_units", DEFAULT_ENCODER_UNITS)?;
        let lstm_units = r.positive_usize("policy.lstm_units", DEFAULT_LSTM_UNITS)?;
        let encoder_activation = match r.take("policy.encoder_activation") {
            None => Activation::default(),
            Some(v) => Activation::parse(&v).ok_or_else(|| {
                invalid(
                    "policy.encoder_activation",
                    format!("unknown activation `{v}`"),
                )
            })?,
        };
        let prev_action_in_encoder = r.bool("policy.prev_action_in_encoder", false)?;
        let policy = PolicyConfig {
            descriptor_dim,
            n_actions: action_set.len(),
            encoder_units,
            lstm_units,
            encoder_activation,
            prev_action_in_encoder,
        };
        policy
            .validate()
            .map_err(|e| invalid("policy", e.to_string()))?;

        let d = PpoConfig::default();
        let ppo = PpoConfig {
            gamma: r.unit_f64("ppo.gamma", d.gamma)?,
            gae_lambda: r.unit_f64("ppo.gae_lambda", d.gae_lambda)?,
            clip_epsilon: r.positive_f64("ppo.clip_epsilon", d.clip_epsilon)?,
            epochs: r.positive_usize("ppo.epochs", d.epochs)?,
            minibatch_chunks: r.positive_usize("ppo.minibatch_chunks", d.minibatch_chunks)?,
            seq_len: r.positive_usize("ppo.seq_len", d.seq_len)?,
            value_coef: r.non_negative_f64("ppo.value_coef", d.value_coef)?,
            entropy_coef: r.non_negative_f64("ppo.entropy_coef", d.entropy_coef)?,
            learning_rate: r.positive_f64("ppo.learning_rate", d.learning_rate)?,
            rollout_length: r.positive_usize("ppo.rollout_length", d.rollout_length)?,
            n_envs: r.positive_usize("ppo.n_envs", d.n_envs)?,
            total_updates: r.positive_usize("ppo.total_updates", d.total_updates)?,
            normalize_advantages: r.bool("ppo.normalize_advantages", d.normalize_advantages)?,
            seed,
        };
        ppo.validate().map_err(|e| invalid("ppo", e.to_string()))?;
        let checkpoint_every: usize = r.parse("ppo.checkpoint_every", 0)?;

        let train_variants = r.list(
            "train.variants",
            vec![implied_variant(motion_kind, motion_input)],
            parse_variant,
        )?;
        if train_variants.is_empty() {
            return Err(invalid(
                "train.variants",
                "at least one variant is required",
            ));
        }
        let train = TrainSection {
            traversal: train_traversal.clone(),
            variants: train_variants.clone(),
            checkpoint_every,
        };

        let eval = EvalSection {
            variants: r.list("eval.variants", train_variants, parse_variant)?,
            protocol: Protocol {
                iterations: r.positive_usize("eval.iterations", Protocol::default().iterations)?,
                targets: r.positive_usize("eval.targets", Protocol::default().targets)?,
            },
            greedy: r.bool("eval.greedy", true)?,
            oracle: r.bool("eval.oracle", false)?,
            vpr: r.bool("eval.vpr", false)?,
        };

        let sigmas = r.list(
            "sweep.sigmas",
            vec![10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0],
            parse_f64,
        )?;
        if sigmas.is_empty() {
            return Err(invalid("sweep.sigmas", "the grid must not be empty"));
        }
        if sigmas.iter().any(|&s| s < 0.0) {
            return Err(invalid("sweep.sigmas", "values must be non-negative"));
        }
        if sigmas.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("sweep.sigmas", "values must be sorted ascending"));
        }
        let mode = match r.take("sweep.mode").as_deref() {
            None | Some("frozen") => SweepMode::Frozen,
            Some("retrain") => SweepMode::Retrain,
            Some(other) => {
                return Err(invalid(
                    "sweep.mode",
                    format!("expected frozen or retrain, got `{other}`"),
                ))
            }
        };
        let sweep_traversal = r
            .take("sweep.traversal")
            .unwrap_or_else(|| train_traversal.clone());
        if !spec.conditions.iter().any(|c| c.id == sweep_traversal) {
            return Err(invalid(
                "sweep.traversal",
                format!("no condition named `{sweep_traversal}`"),
            ));
        }
        let sweep = SweepSection {
            sigmas,
            mode,
            traversal: sweep_traversal,
            rmse_episodes: r.positive_usize("sweep.rmse_episodes", 20)?,
        };

        let fd = FitConfig::default();
        let fit = FitConfig {
            l2: r.non_negative_f64("vpr.l2", fd.l2)?,
            max_iterations: r.positive_usize("vpr.max_iterations", fd.max_iterations)?,
            gradient_tolerance: r.positive_f64("vpr.gradient_tolerance", fd.gradient_tolerance)?,
            init_scale: r.non_negative_f64("vpr.init_scale", fd.init_scale)?,
            seed,
        };
        fit.validate().map_err(|e| invalid("vpr", e.to_string()))?;
        let vpr = VprConfig {
            repetitions: r.positive_usize("vpr.repetitions", VprConfig::default().repetitions)?,
            tolerance: r.parse("vpr.tolerance", 0)?,
            fit,
        };

        if let Some(key) = r.entries.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }

        Ok(RunConfig {
            seed,
            out_dir,
            threads,
            dataset: DatasetSection {
                path: dataset_path,
                spec,
            },
            regime,
            env,
            curriculum,
            policy,
            ppo,
            train,
            eval,
            sweep,
            vpr,
        })
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, variant: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{variant}.ckpt"))
    }
}
