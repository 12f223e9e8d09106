//! Parametric motion estimators: GPS with reception gaps, and visual/radar
//! odometry integrated by dead reckoning from the episode start pose.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::math::Point2;
use crate::rng::Rng;
use crate::traversal::BoundingBox;

/// Default per-reading GPS noise (meters).
pub const DEFAULT_GPS_SIGMA: f64 = 2.0;
/// Default per-step visual-odometry noise (meters).
pub const DEFAULT_VO_SIGMA: f64 = 0.5;
/// Radar odometry is modeled as ten times more precise than VO.
pub const DEFAULT_RO_SIGMA: f64 = DEFAULT_VO_SIGMA / 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("expected a {expected:?} model, got {got:?}")]
    WrongKind { expected: MotionKind, got: MotionKind },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("dropout intervals are only meaningful for GPS")]
    DropoutWithoutGps,
    #[error("dropout interval {start}..{end} is empty or outside 0..{n}")]
    DropoutOutOfRange { start: usize, end: usize, n: usize },
    #[error("dropout intervals {0:?} and {1:?} overlap")]
    DropoutOverlap((usize, usize), (usize, usize)),
    #[error("degenerate bounding box")]
    DegenerateBoundingBox,
    #[error("trajectory lengths differ: {estimates} estimates vs {truths} truths")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Gps,
    Vo,
    Ro,
}

impl MotionKind {
    pub fn default_sigma(self) -> f64 {
        match self {
            MotionKind::Gps => DEFAULT_GPS_SIGMA,
            MotionKind::Vo => DEFAULT_VO_SIGMA,
            MotionKind::Ro => DEFAULT_RO_SIGMA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Gps => "gps",
            MotionKind::Vo => "vo",
            MotionKind::Ro => "ro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gps" => Some(MotionKind::Gps),
            "vo" => Some(MotionKind::Vo),
            "ro" => Some(MotionKind::Ro),
            _ => None,
        }
    }
}

/// Half-open range of frame indices `[start, end)` without GPS reception.
pub type DropoutInterval = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct MotionModelParams {
    pub kind: MotionKind,
    pub noise_sigma: f64,
    pub dropout_intervals: Vec<DropoutInterval>,
    pub seed: u64,
}

impl MotionModelParams {
    pub fn new(kind: MotionKind, noise_sigma: f64) -> Self {
        Self {
            kind,
            noise_sigma,
            dropout_intervals: Vec::new(),
            seed: 0,
        }
    }

    pub fn with_default_sigma(kind: MotionKind) -> Self {
        Self::new(kind, kind.default_sigma())
    }

    pub fn with_dropout(mut self, intervals: Vec<DropoutInterval>) -> Self {
        self.dropout_intervals = intervals;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks ranges against a route of `n` frames.
    pub fn validate(&self, n: usize) -> Result<(), MotionError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MotionError::InvalidSigma(self.noise_sigma));
        }
        if self.kind != MotionKind::Gps && !self.dropout_intervals.is_empty() {
            return Err(MotionError::DropoutWithoutGps);
        }
        for &(start, end) in &self.dropout_intervals {
            if start >= end || end > n {
                return Err(MotionError::DropoutOutOfRange { start, end, n });
            }
        }
        let mut sorted = self.dropout_intervals.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(MotionError::DropoutOverlap(w[0], w[1]));
            }
        }
        Ok(())
    }

    pub fn in_dropout(&self, frame_index: usize) -> bool {
        self.dropout_intervals
            .iter()
            .any(|&(s, e)| (s..e).contains(&frame_index))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionEstimate {
    pub position: Point2,
    pub available: bool,
}

/// Normalized 2-d motion input, each component in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionFeature(pub [f64; 2]);

impl MotionFeature {
    pub const ZERO: MotionFeature = MotionFeature([0.0, 0.0]);
}

/// Root-mean-square position error in meters.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TrajectoryError {
    pub rmse: f64,
}

fn gaussian2(rng: &mut Rng, sigma: f64) -> Point2 {
    if sigma == 0.0 {
        return Point2::ZERO;
    }
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    Point2::new(sigma * x, sigma * y)
}

/// One GPS reading. Inside a dropout interval the reading is unavailable and
/// reports `held`, the last available estimate (or the episode start pose).
pub fn gps_estimate(
    true_pose: Point2,
    frame_index: usize,
    params: &MotionModelParams,
    held: Point2,
    rng: &mut Rng,
) -> Result<MotionEstimate, MotionError> {
    if params.kind != MotionKind::Gps {
        return Err(MotionError::WrongKind { expected: MotionKind::Gps, got: params.kind });
    }
    if params.in_dropout(frame_index) {
        return Ok(MotionEstimate { position: held, available: false });
    }
    Ok(MotionEstimate {
        position: true_pose + gaussian2(rng, params.noise_sigma),
        available: true,
    })
}

/// Noisy relative displacement between consecutive true poses.
pub fn vo_relative_step(
    prev_true: Point2,
    cur_true: Point2,
    params: &MotionModelParams,
    rng: &mut Rng,
) -> Result<Point2, MotionError> {
    if params.kind == MotionKind::Gps {
        return Err(MotionError::WrongKind { expected: MotionKind::Vo, got: params.kind });
    }
    Ok(cur_true - prev_true + gaussian2(rng, params.noise_sigma))
}

/// Integrates relative steps from `start`. The result has one more entry
/// than `steps`: index 0 is the start pose itself.
pub fn dead_reckon(start: Point2, steps: &[Point2]) -> Vec<MotionEstimate> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    let mut pos = start;
    out.push(MotionEstimate { position: pos, available: true });
    for &s in steps {
        pos = pos + s;
        out.push(MotionEstimate { position: pos, available: true });
    }
    out
}

/// Affine map of the estimate from `bbox` onto `[-1, 1]^2`, clamped.
pub fn motion_feature(
    estimate: &MotionEstimate,
    bbox: &BoundingBox,
) -> Result<MotionFeature, MotionError> {
    position_feature(estimate.position, bbox)
}

pub fn position_feature(p: Point2, bbox: &BoundingBox) -> Result<MotionFeature, MotionError> {
    if bbox.is_degenerate() {
        return Err(MotionError::DegenerateBoundingBox);
    }
    let map = |v: f64, lo: f64, hi: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
    Ok(MotionFeature([
        map(p.x, bbox.min.x, bbox.max.x),
        map(p.y, bbox.min.y, bbox.max.y),
    ]))
}

pub fn trajectory_rmse(
    estimates: &[MotionEstimate],
    truths: &[Point2],
) -> Result<TrajectoryError, MotionError> {
    if estimates.len() != truths.len() {
        return Err(MotionError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    if estimates.is_empty() {
        return Err(MotionError::EmptyTrajectory);
    }
    let sse: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, &t)| (e.position - t).norm_squared())
        .sum();
    Ok(TrajectoryError { rmse: libm::sqrt(sse / estimates.len() as f64) })
}

/// Per-episode estimator state: the held GPS reading or the dead-reckoned
/// odometry position.
#[derive(Clone, Debug)]
pub struct MotionTracker {
    params: MotionModelParams,
    estimate: MotionEstimate,
    rng: Rng,
}

impl MotionTracker {
    /// Anchors the estimator at the true start pose. GPS takes a reading at
    /// the start frame; odometry starts exactly at the true pose.
    pub fn start(
        params: &MotionModelParams,
        start_pose: Point2,
        start_index: usize,
        mut rng: Rng,
    ) -> Self {
        let estimate = match params.kind {
            MotionKind::Gps => gps_estimate(start_pose, start_index, params, start_pose, &mut rng)
                .expect("kind checked"),
            MotionKind::Vo | MotionKind::Ro => MotionEstimate { position: start_pose, available: true },
        };
        Self { params: params.clone(), estimate, rng }
    }

    /// Moves the estimator one frame, from `prev_true` to `cur_true`.
    pub fn advance(&mut self, prev_true: Point2, cur_true: Point2, cur_index: usize) -> MotionEstimate {
        self.estimate = match self.params.kind {
            MotionKind::Gps => {
                gps_estimate(cur_true, cur_index, &self.params, self.estimate.position, &mut self.rng)
                    .expect("kind checked")
            }
            MotionKind::Vo | MotionKind::Ro => {
                let step = vo_relative_step(prev_true, cur_true, &self.params, &mut self.rng)
                    .expect("kind checked");
                MotionEstimate { position: self.estimate.position + step, available: true }
            }
        };
        self.estimate
    }

    pub fn estimate(&self) -> MotionEstimate {
        self.estimate
    }

    pub fn params(&self) -> &MotionModelParams {
        &self.params
    }

    /// Uniform random draw from the tracker's stream, for scrambled controls.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}
