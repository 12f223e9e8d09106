//! CSV tables and plots for experiment results.
//!
//! Every emitter renders all of its files in memory before touching the
//! file system, so an invalid report leaves the output directory untouched.

use std::fs;
use std::path::{Path, PathBuf};

use mvpnav_core::harness::{DeploymentReport, TradeoffPoint};
use mvpnav_core::ppo::TrainingLog;
use mvpnav_core::vpr::VprReport;
use thiserror::Error;

use crate::svg;

pub const DEPLOYMENT_CSV: &str = "deployment.csv";
pub const DEPLOYMENT_SUMMARY_CSV: &str = "deployment_summary.csv";
pub const SUCCESS_SVG: &str = "success_by_condition.svg";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const TRADEOFF_SVG: &str = "tradeoff_curve.svg";
pub const VPR_CSV: &str = "vpr.csv";
pub const VPR_SUMMARY_CSV: &str = "vpr_summary.csv";

/// Label in the `iteration` column of the per-pair summary rows.
pub const SUMMARY_ITERATION: &str = "all";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report: {0}")]
    Empty(&'static str),
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn write_all(out_dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

fn check_deployment(report: &DeploymentReport) -> Result<(), ReportError> {
    if report.is_empty() {
        return Err(ReportError::Empty("deployment report has no rows"));
    }
    for row in &report.rows {
        let r = &row.report;
        if r.successes.is_empty() || r.targets == 0 {
            return Err(ReportError::Invalid(format!(
                "{}/{} has no tasks",
                row.variant, row.traversal
            )));
        }
        if r.successes.iter().any(|&s| s > r.targets) {
            return Err(ReportError::Invalid(format!(
                "{}/{} counts exceed the targets",
                row.variant, row.traversal
            )));
        }
    }
    Ok(())
}

/// `variant,traversal,iteration,successes,targets,success_rate`: one row per
/// iteration, then a summary row per (variant, traversal) whose iteration is
/// [`SUMMARY_ITERATION`], with pooled counts and the mean rate.
pub fn deployment_csv(report: &DeploymentReport) -> Vec<u8> {
    let mut rows = Vec::new();
    for row in &report.rows {
        let r = &row.report;
        for (i, &s) in r.successes.iter().enumerate() {
            rows.push(vec![
                row.variant.clone(),
                row.traversal.clone(),
                i.to_string(),
                s.to_string(),
                r.targets.to_string(),
                (s as f64 / r.targets as f64).to_string(),
            ]);
        }
    }
    for row in &report.rows {
        let r = &row.report;
        rows.push(vec![
            row.variant.clone(),
            row.traversal.clone(),
            SUMMARY_ITERATION.to_string(),
            r.successes.iter().sum::<usize>().to_string(),
            (r.targets * r.successes.len()).to_string(),
            r.mean().to_string(),
        ]);
    }
    csv_bytes(
        &[
            "variant",
            "traversal",
            "iteration",
            "successes",
            "targets",
            "success_rate",
        ],
        rows,
    )
}

pub fn deployment_summary_csv(report: &DeploymentReport) -> Vec<u8> {
    let rows = report.rows.iter().map(|row| {
        let r = &row.report;
        vec![
            row.variant.clone(),
            row.traversal.clone(),
            r.successes.len().to_string(),
            r.targets.to_string(),
            r.mean().to_string(),
            r.std().to_string(),
            r.stderr().to_string(),
            r.max_episode_length.to_string(),
        ]
    });
    csv_bytes(
        &[
            "variant",
            "traversal",
            "iterations",
            "targets",
            "mean_success_rate",
            "std_success_rate",
            "stderr",
            "max_episode_length",
        ],
        rows,
    )
}

/// Writes `deployment.csv`, `deployment_summary.csv` and
/// `success_by_condition.svg`.
pub fn emit_deployment(
    report: &DeploymentReport,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    check_deployment(report)?;
    let files = vec![
        (DEPLOYMENT_CSV, deployment_csv(report)),
        (DEPLOYMENT_SUMMARY_CSV, deployment_summary_csv(report)),
        (SUCCESS_SVG, svg::success_by_condition(report).into_bytes()),
    ];
    write_all(out_dir, files)
}

/// `sigma,rmse_m,success_rate,stderr`
pub fn tradeoff_csv(points: &[TradeoffPoint]) -> Vec<u8> {
    let rows = points.iter().map(|p| {
        vec![
            p.sigma.to_string(),
            p.rmse.to_string(),
            p.success_rate.to_string(),
            p.stderr.to_string(),
        ]
    });
    csv_bytes(&["sigma", "rmse_m", "success_rate", "stderr"], rows)
}

pub fn emit_tradeoff(
    points: &[TradeoffPoint],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if points.is_empty() {
        return Err(ReportError::Empty("trade-off sweep has no points"));
    }
    let bad = |p: &TradeoffPoint| {
        !(p.sigma >= 0.0
            && p.rmse >= 0.0
            && (0.0..=1.0).contains(&p.success_rate)
            && p.stderr >= 0.0)
    };
    if let Some(p) = points.iter().find(|p| bad(p)) {
        return Err(ReportError::Invalid(format!(
            "trade-off point out of range: {p:?}"
        )));
    }
    let files = vec![
        (TRADEOFF_CSV, tradeoff_csv(points)),
        (TRADEOFF_SVG, svg::tradeoff_curve(points).into_bytes()),
    ];
    write_all(out_dir, files)
}

/// `reference_id,query_id,repetition,auc`
pub fn vpr_csv(report: &VprReport) -> Vec<u8> {
    let rows = report.rows.iter().map(|r| {
        vec![
            r.reference.clone(),
            r.query.clone(),
            r.repetition.to_string(),
            r.auc.to_string(),
        ]
    });
    csv_bytes(&["reference_id", "query_id", "repetition", "auc"], rows)
}

pub fn vpr_summary_csv(report: &VprReport) -> Vec<u8> {
    let reference = report
        .rows
        .first()
        .map(|r| r.reference.clone())
        .unwrap_or_default();
    let rows = report.summary.iter().map(|s| {
        vec![
            reference.clone(),
            s.query.clone(),
            s.mean_auc.to_string(),
            s.std_auc.to_string(),
        ]
    });
    csv_bytes(&["reference_id", "query_id", "mean_auc", "std_auc"], rows)
}

pub fn emit_vpr(report: &VprReport, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if report.rows.is_empty() {
        return Err(ReportError::Empty("VPR report has no rows"));
    }
    write_all(
        out_dir,
        vec![
            (VPR_CSV, vpr_csv(report)),
            (VPR_SUMMARY_CSV, vpr_summary_csv(report)),
        ],
    )
}

/// `update,episodes,success_rate,policy_loss,value_loss,entropy,clip_fraction,curriculum_level`
pub fn training_log_csv(log: &TrainingLog) -> Vec<u8> {
    let rows = log.records.iter().map(|r| {
        vec![
            r.update.to_string(),
            r.episodes.to_string(),
            r.success_rate.to_string(),
            r.policy_loss.to_string(),
            r.value_loss.to_string(),
            r.entropy.to_string(),
            r.clip_fraction.to_string(),
            r.curriculum_level.to_string(),
        ]
    });
    csv_bytes(
        &[
            "update",
            "episodes",
            "success_rate",
            "policy_loss",
            "value_loss",
            "entropy",
            "clip_fraction",
            "curriculum_level",
        ],
        rows,
    )
}

pub fn training_log_name(variant: &str) -> String {
    format!("training_log_{variant}.csv")
}

pub fn emit_training_log(
    log: &TrainingLog,
    variant: &str,
    out_dir: &Path,
) -> Result<PathBuf, ReportError> {
    if log.records.is_empty() {
        return Err(ReportError::Empty("training log has no updates"));
    }
    let name = training_log_name(variant);
    let mut paths = write_all(out_dir, vec![(name.as_str(), training_log_csv(log))])?;
    Ok(paths.remove(0))
}
