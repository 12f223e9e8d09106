//! Subcommands. Each one parses and validates the whole configuration, loads
//! every input file, and only then starts work and writes outputs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mvpnav_core::env::EnvConfig;
use mvpnav_core::harness::{self, Agent, HarnessError, SweepPolicy, SweepSetup, Variant};
use mvpnav_core::motion::MotionKind;
use mvpnav_core::policy::PolicyParams;
use mvpnav_core::ppo::{self, PpoError, TrainSetup, TrainingLog};
use mvpnav_core::traversal::{generate_synthetic_dataset, Dataset};
use mvpnav_core::vpr::{self, VprError};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RawConfig, RunConfig, SweepMode};
use crate::dataset_io::{self, DatasetFileError};
use crate::exec::AnyExecutor;
use crate::report::{self, ReportError};

#[derive(Debug, Parser)]
#[command(
    name = "mvpnav",
    version,
    about = "Navigation policies from motion estimates and visual place descriptors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-condition dataset.
    Generate(CommonArgs),
    /// Train one policy per configured variant with PPO.
    Train(CommonArgs),
    /// Deploy trained policies on every traversal (and optionally run VPR).
    Eval(CheckpointArgs),
    /// Sweep VO noise and record success rate against trajectory RMSE.
    Sweep(CheckpointArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to deploy, as `path` or `variant=path`; may be repeated.
    /// Defaults to `<out_dir>/checkpoints/<variant>.ckpt`.
    #[arg(long = "checkpoint", value_name = "[VARIANT=]PATH")]
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Validation(String),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetFileError),
    #[error("writing dataset: {0}")]
    DatasetWrite(DatasetFileError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("training failed: {0}")]
    Training(#[from] PpoError),
    #[error("evaluation failed: {0}")]
    Harness(#[from] HarnessError),
    #[error("VPR evaluation failed: {0}")]
    Vpr(#[from] VprError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for invalid configuration or inputs, 2 for failures after work
    /// started.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Validation(_)
            | CliError::Dataset(_)
            | CliError::Checkpoint { .. } => 1,
            CliError::DatasetWrite(_)
            | CliError::Training(_)
            | CliError::Harness(_)
            | CliError::Vpr(_)
            | CliError::Report(_)
            | CliError::Io { .. } => 2,
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut raw = match &args.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for kv in &args.overrides {
        raw.apply_override(kv)?;
    }
    Ok(RunConfig::from_raw(&raw)?)
}

/// Loads the dataset and checks it against the configured sizes and ids.
fn load_checked_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = &cfg.dataset.path;
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "dataset file {} does not exist (run `mvpnav generate` or set dataset.path)",
            path.display()
        )));
    }
    let dataset = dataset_io::load_dataset(path)?;
    let spec = &cfg.dataset.spec;
    if dataset.n_places() != spec.n_places {
        return Err(CliError::Validation(format!(
            "config key `dataset.n_places`: config says {} but {} has {} places",
            spec.n_places,
            path.display(),
            dataset.n_places()
        )));
    }
    if dataset.descriptor_dim() != spec.descriptor_dim {
        return Err(CliError::Validation(format!(
            "config key `dataset.descriptor_dim`: config says {} but {} has descriptor_dim={}",
            spec.descriptor_dim,
            path.display(),
            dataset.descriptor_dim()
        )));
    }
    let known = |id: &str| dataset.traversal(id).is_ok();
    for (key, id) in [
        ("train.traversal", &cfg.train.traversal),
        ("sweep.traversal", &cfg.sweep.traversal),
    ] {
        if !known(id) {
            return Err(CliError::Validation(format!(
                "config key `{key}`: dataset has no traversal `{id}`"
            )));
        }
    }
    for (id, _) in &cfg.regime.gps_dropout {
        if !known(id) {
            return Err(CliError::Validation(format!(
                "config key `eval.gps_dropout.{id}`: dataset has no traversal `{id}`"
            )));
        }
    }
    Ok(dataset)
}

fn train_setup(cfg: &RunConfig, variant: &Variant) -> TrainSetup {
    TrainSetup {
        traversal_id: cfg.train.traversal.clone(),
        motion: cfg.regime.params(variant.motion_kind, &cfg.train.traversal),
        env: EnvConfig {
            motion_input: variant.motion_input,
            ..cfg.env
        },
        policy: cfg.policy,
        ppo: cfg.ppo.clone(),
        curriculum: cfg.curriculum.clone(),
    }
}

fn metadata(cfg: &RunConfig, variant: &Variant, update: usize) -> String {
    format!(
        "variant={}\ntraversal={}\nseed={}\nupdate={}\n",
        variant.name, cfg.train.traversal, cfg.seed, update
    )
}

/// Resolves `--checkpoint` arguments against the requested variants.
fn checkpoint_paths(
    cfg: &RunConfig,
    variants: &[Variant],
    args: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = variants
        .iter()
        .map(|v| cfg.checkpoint_path(&v.name))
        .collect();
    for arg in args {
        match arg.split_once('=') {
            Some((name, path)) if Variant::parse(name).is_some() => {
                let k = variants.iter().position(|v| v.name == name).ok_or_else(|| {
                    CliError::Validation(format!("--checkpoint names variant `{name}`, which is not being evaluated"))
                })?;
                paths[k] = PathBuf::from(path);
            }
            _ if variants.len() == 1 => paths[0] = PathBuf::from(arg),
            _ => {
                return Err(CliError::Validation(format!(
                    "--checkpoint `{arg}` must be written `variant=path` when several variants are evaluated"
                )))
            }
        }
    }
    Ok(paths)
}

fn load_policy(path: &Path, dataset: &Dataset, cfg: &RunConfig) -> Result<PolicyParams, CliError> {
    let err = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    let ckpt = checkpoint::load_checkpoint(path).map_err(err)?;
    ckpt.check_compatible(dataset.descriptor_dim(), cfg.env.action_set.len())
        .map_err(err)?;
    Ok(ckpt.params)
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

pub fn cmd_generate(args: &CommonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dataset = generate_synthetic_dataset(&cfg.dataset.spec)
        .map_err(|e| CliError::Validation(format!("config key `dataset`: {e}")))?;
    dataset_io::save_dataset(&dataset, &cfg.dataset.path).map_err(CliError::DatasetWrite)?;
    let bbox = dataset.route_bbox();
    let ids: Vec<&str> = dataset
        .traversals()
        .iter()
        .map(|t| t.condition_id())
        .collect();
    write_line(out, &format!("wrote {}", cfg.dataset.path.display()))?;
    write_line(
        out,
        &format!(
            "N={} D={} conditions={} bbox=[{:.2}, {:.2}]x[{:.2}, {:.2}]",
            dataset.n_places(),
            dataset.descriptor_dim(),
            ids.join(","),
            bbox.min.x,
            bbox.max.x,
            bbox.min.y,
            bbox.max.y
        ),
    )
}

pub fn cmd_train(args: &CommonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dataset = load_checked_dataset(&cfg)?;
    for v in &cfg.train.variants {
        train_setup(&cfg, v)
            .motion
            .validate(dataset.n_places())
            .map_err(|e| CliError::Validation(format!("motion model for {}: {e}", v.name)))?;
    }
    let exec = AnyExecutor::from_threads(cfg.threads);
    for variant in &cfg.train.variants {
        let setup = train_setup(&cfg, variant);
        let mut periodic: Vec<(usize, Checkpoint)> = Vec::new();
        let every = cfg.train.checkpoint_every;
        let (params, log) = ppo::train(&dataset, &setup, &exec, |rec, params| {
            if every > 0 && rec.update % every == 0 && rec.update < cfg.ppo.total_updates {
                periodic.push((
                    rec.update,
                    Checkpoint {
                        params: params.clone(),
                        metadata: metadata(&cfg, variant, rec.update),
                    },
                ));
            }
        })?;
        for (update, ckpt) in &periodic {
            let path = cfg
                .checkpoint_dir()
                .join(format!("{}_update{update:05}.ckpt", variant.name));
            checkpoint::save_checkpoint(ckpt, &path)
                .map_err(|source| CliError::Checkpoint { path, source })?;
        }
        let path = cfg.checkpoint_path(&variant.name);
        let ckpt = Checkpoint {
            params,
            metadata: metadata(&cfg, variant, cfg.ppo.total_updates),
        };
        checkpoint::save_checkpoint(&ckpt, &path).map_err(|source| CliError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        let log_path = report::emit_training_log(&log, &variant.name, &cfg.out_dir)?;
        write_line(out, &training_summary(&variant.name, &log))?;
        write_line(
            out,
            &format!("wrote {} and {}", path.display(), log_path.display()),
        )?;
    }
    Ok(())
}

fn training_summary(name: &str, log: &TrainingLog) -> String {
    match log.records.last() {
        Some(r) => format!(
            "{name}: {} updates, {} episodes, final rolling success {:.3} at curriculum level {}",
            r.update, r.episodes, r.success_rate, r.curriculum_level
        ),
        None => format!("{name}: no updates"),
    }
}

pub fn cmd_eval(args: &CheckpointArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let dataset = load_checked_dataset(&cfg)?;
    let oracle = Variant {
        name: "oracle".into(),
        ..Variant::mvp(MotionKind::Gps)
    };
    let variants: Vec<Variant> = if cfg.eval.oracle {
        vec![oracle]
    } else {
        cfg.eval.variants.clone()
    };
    let policies: Vec<Option<PolicyParams>> = if cfg.eval.oracle {
        if !args.checkpoints.is_empty() {
            return Err(CliError::Validation(
                "--checkpoint cannot be combined with eval.oracle=true".into(),
            ));
        }
        vec![None]
    } else {
        let paths = checkpoint_paths(&cfg, &variants, &args.checkpoints)?;
        paths
            .iter()
            .map(|p| load_policy(p, &dataset, &cfg).map(Some))
            .collect::<Result<_, _>>()?
    };
    let exec = AnyExecutor::from_threads(cfg.threads);
    let agents: Vec<(Variant, Agent<'_>)> = variants
        .iter()
        .zip(&policies)
        .map(|(v, p)| (v.clone(), p.as_ref().map_or(Agent::Oracle, Agent::Trained)))
        .collect();
    let deployment = harness::deploy_matrix(
        &dataset,
        &agents,
        cfg.env,
        &cfg.regime,
        cfg.eval.protocol,
        cfg.eval.greedy,
        cfg.seed,
        &exec,
    )?;
    let vpr_report = if cfg.eval.vpr {
        Some(vpr::vpr_experiment(
            &dataset,
            &cfg.train.traversal,
            &cfg.vpr,
            &exec,
        )?)
    } else {
        None
    };

    for row in &deployment.rows {
        write_line(
            out,
            &format!(
                "{:<12} {:<12} success {:.3} +/- {:.3}",
                row.variant,
                row.traversal,
                row.report.mean(),
                row.report.std()
            ),
        )?;
    }
    let mut written = report::emit_deployment(&deployment, &cfg.out_dir)?;
    if let Some(v) = &vpr_report {
        for s in &v.summary {
            write_line(
                out,
                &format!(
                    "vpr {:<12} AUC {:.4} +/- {:.4}",
                    s.query, s.mean_auc, s.std_auc
                ),
            )?;
        }
        written.extend(report::emit_vpr(v, &cfg.out_dir)?);
    }
    for p in written {
        write_line(out, &format!("wrote {}", p.display()))?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &CheckpointArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let dataset = load_checked_dataset(&cfg)?;
    let vo = Variant::mvp(MotionKind::Vo);
    let frozen = match cfg.sweep.mode {
        SweepMode::Frozen => {
            let path =
                checkpoint_paths(&cfg, std::slice::from_ref(&vo), &args.checkpoints)?.remove(0);
            Some(load_policy(&path, &dataset, &cfg)?)
        }
        SweepMode::Retrain => {
            if !args.checkpoints.is_empty() {
                return Err(CliError::Validation(
                    "--checkpoint is not used with sweep.mode=retrain".into(),
                ));
            }
            None
        }
    };
    let retrain = train_setup(&cfg, &vo);
    let policy = match &frozen {
        Some(p) => SweepPolicy::Frozen(p),
        None => SweepPolicy::Retrain(&retrain),
    };
    let setup = SweepSetup {
        sigmas: cfg.sweep.sigmas.clone(),
        env: EnvConfig {
            motion_input: vo.motion_input,
            ..cfg.env
        },
        protocol: cfg.eval.protocol,
        rmse_episodes: cfg.sweep.rmse_episodes,
        greedy: cfg.eval.greedy,
        seed: cfg.seed,
    };
    let exec = AnyExecutor::from_threads(cfg.threads);
    let points =
        harness::sweep_motion_precision(&dataset, &cfg.sweep.traversal, policy, &setup, &exec)?;
    for p in &points {
        write_line(
            out,
            &format!(
                "sigma {:<8} rmse {:>10.3} m  success {:.3} +/- {:.3}",
                p.sigma, p.rmse, p.success_rate, p.stderr
            ),
        )?;
    }
    for p in report::emit_tradeoff(&points, &cfg.out_dir)? {
        write_line(out, &format!("wrote {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to `out`, errors to `err`.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
