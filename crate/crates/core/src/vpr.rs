//! Single-frame place recognition: a linear place classifier fitted on a
//! reference traversal, scored on query traversals by precision-recall AUC.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::exec::Executor;
use crate::math;
use crate::rng;
use crate::stats;
use crate::traversal::{Dataset, Traversal, TraversalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VprError {
    #[error("need at least 2 places, got {0}")]
    TooFewPlaces(usize),
    #[error("descriptor has dimension {got}, classifier expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no queries to score")]
    EmptyQueries,
    #[error("a precision-recall curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error(transparent)]
    Traversal(#[from] TraversalError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub l2: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Scale of the random initial weights.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { l2: 1e-4, max_iterations: 5000, gradient_tolerance: 1e-6, init_scale: 0.01, seed: 0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), VprError> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(VprError::InvalidConfig("l2 must be finite and non-negative".into()));
        }
        if self.max_iterations == 0 {
            return Err(VprError::InvalidConfig("max_iterations must be positive".into()));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(VprError::InvalidConfig("gradient_tolerance must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(VprError::InvalidConfig("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Multinomial logistic regression over places.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceClassifier {
    n_places: usize,
    dim: usize,
    /// Row-major `n_places x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PlaceClassifier {
    pub fn zeros(n_places: usize, dim: usize) -> Self {
        Self { n_places, dim, weights: vec![0.0; n_places * dim], bias: vec![0.0; n_places] }
    }

    pub fn from_parts(n_places: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, VprError> {
        if weights.len() != n_places * dim {
            return Err(VprError::DimensionMismatch { expected: n_places * dim, got: weights.len() });
        }
        if bias.len() != n_places {
            return Err(VprError::DimensionMismatch { expected: n_places, got: bias.len() });
        }
        Ok(Self { n_places, dim, weights, bias })
    }

    /// `(rows, cols)` of the weight matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.n_places, self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_row(&self, place: usize) -> &[f64] {
        &self.weights[place * self.dim..(place + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = math::dot(self.weight_row(i), x) + self.bias[i];
        }
    }
}

/// Outcome of a fit, including diagnostics that must not be silently dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Pairs of places whose training descriptors are identical.
    pub collisions: Vec<(usize, usize)>,
}

impl FitReport {
    pub fn separable(&self) -> bool {
        self.collisions.is_empty()
    }
}

/// Mean cross-entropy plus `l2/2 * |W|^2` (bias unpenalized), and its gradient.
fn objective(clf: &PlaceClassifier, reference: &Traversal, l2: f64, grad: &mut PlaceClassifier) -> f64 {
    let n = clf.n_places;
    let inv_n = 1.0 / n as f64;
    grad.weights.iter_mut().for_each(|g| *g = 0.0);
    grad.bias.iter_mut().for_each(|g| *g = 0.0);
    let mut logits = vec![0.0; n];
    let mut probs = vec![0.0; n];
    let mut loss = 0.0;
    for k in 0..n {
        let x = reference.descriptor(k);
        clf.logits_into(x, &mut logits);
        let lse = math::log_sum_exp(&logits);
        loss -= (logits[k] - lse) * inv_n;
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p = libm::exp(l - lse);
        }
        probs[k] -= 1.0;
        for (i, &d) in probs.iter().enumerate() {
            let c = d * inv_n;
            grad.bias[i] += c;
            math::axpy(c, x, &mut grad.weights[i * clf.dim..(i + 1) * clf.dim]);
        }
    }
    let mut sq = 0.0;
    for (g, w) in grad.weights.iter_mut().zip(&clf.weights) {
        *g += l2 * w;
        sq += w * w;
    }
    loss + 0.5 * l2 * sq
}

fn gradient_norm(g: &PlaceClassifier) -> f64 {
    libm::sqrt(g.weights.iter().chain(&g.bias).map(|v| v * v).sum())
}

/// Largest eigenvalue of the mean second moment of `[x; 1]`, by power iteration.
fn second_moment_bound(reference: &Traversal) -> f64 {
    let n = reference.len();
    let d = reference.descriptor_dim();
    let mut v = vec![1.0; d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d + 1];
        for k in 0..n {
            let x = reference.descriptor(k);
            let p = math::dot(x, &v[..d]) + v[d];
            math::axpy(p, x, &mut next[..d]);
            next[d] += p;
        }
        let norm = math::norm(&next);
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|e| *e /= norm);
        let new_lambda = norm / n as f64 / math::norm(&v);
        v = next;
        if (new_lambda - lambda).abs() <= 1e-9 * new_lambda {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    lambda
}

/// Fits one class per place, one training example per class, by
/// Nesterov-accelerated full-batch gradient descent.
pub fn fit_linear_classifier(reference: &Traversal, config: &FitConfig) -> Result<(PlaceClassifier, FitReport), VprError> {
    config.validate()?;
    let n = reference.len();
    if n < 2 {
        return Err(VprError::TooFewPlaces(n));
    }
    let d = reference.descriptor_dim();
    let mut collisions = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if reference.descriptor(i) == reference.descriptor(j) {
                collisions.push((i, j));
            }
        }
    }

    let mut clf = PlaceClassifier::zeros(n, d);
    let mut init_rng = rng::stream(config.seed, "vpr.init", 0);
    for w in clf.weights.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut init_rng);
        *w = config.init_scale * z;
    }

    // softmax cross-entropy curvature is at most 1/2 per example
    let lipschitz = 0.5 * second_moment_bound(reference) * 1.01 + config.l2;
    let step = 1.0 / lipschitz;
    let kappa = lipschitz / config.l2.max(1e-12);
    let momentum = if config.l2 > 0.0 {
        let s = libm::sqrt(kappa);
        (s - 1.0) / (s + 1.0)
    } else {
        0.9
    };

    let mut prev = clf.clone();
    let mut look = clf.clone();
    let mut grad = PlaceClassifier::zeros(n, d);
    let mut report = FitReport { iterations: 0, gradient_norm: f64::INFINITY, converged: false, collisions };
    for it in 0..config.max_iterations {
        objective(&clf, reference, config.l2, &mut grad);
        report.gradient_norm = gradient_norm(&grad);
        report.iterations = it;
        if report.gradient_norm < config.gradient_tolerance {
            report.converged = true;
            return Ok((clf, report));
        }
        // look-ahead point y = w + mu (w - w_prev)
        for ((y, w), p) in look.weights.iter_mut().zip(&clf.weights).zip(&prev.weights) {
            *y = w + momentum * (w - p);
        }
        for ((y, w), p) in look.bias.iter_mut().zip(&clf.bias).zip(&prev.bias) {
            *y = w + momentum * (w - p);
        }
        objective(&look, reference, config.l2, &mut grad);
        core::mem::swap(&mut prev, &mut clf);
        for ((w, y), g) in clf.weights.iter_mut().zip(&look.weights).zip(&grad.weights) {
            *w = y - step * g;
        }
        for ((w, y), g) in clf.bias.iter_mut().zip(&look.bias).zip(&grad.bias) {
            *w = y - step * g;
        }
    }
    objective(&clf, reference, config.l2, &mut grad);
    report.gradient_norm = gradient_norm(&grad);
    report.iterations = config.max_iterations;
    report.converged = report.gradient_norm < config.gradient_tolerance;
    Ok((clf, report))
}

/// Class probabilities for one descriptor.
pub fn classify_scores(clf: &PlaceClassifier, descriptor: &[f64]) -> Result<Vec<f64>, VprError> {
    if descriptor.len() != clf.dim {
        return Err(VprError::DimensionMismatch { expected: clf.dim, got: descriptor.len() });
    }
    let mut logits = vec![0.0; clf.n_places];
    clf.logits_into(descriptor, &mut logits);
    Ok(math::softmax(&logits))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredQuery {
    pub confidence: f64,
    pub predicted: usize,
    pub truth: usize,
}

impl ScoredQuery {
    pub fn is_match(&self, tolerance: usize) -> bool {
        self.predicted.abs_diff(self.truth) <= tolerance
    }
}

/// One threshold of the sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall at each distinct confidence, highest first.
pub fn pr_sweep(queries: &[ScoredQuery], tolerance: usize) -> Result<Vec<SweepPoint>, VprError> {
    if queries.is_empty() {
        return Err(VprError::EmptyQueries);
    }
    let mut sorted: Vec<ScoredQuery> = queries.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let total = queries.len() as f64;
    let mut out = Vec::new();
    let mut correct = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == threshold {
            correct += usize::from(sorted[i].is_match(tolerance));
            i += 1;
        }
        out.push(SweepPoint { threshold, recall: correct as f64 / total, precision: correct as f64 / i as f64 });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)`, recall non-decreasing; the first point is the
    /// recall-0 endpoint.
    pub points: Vec<(f64, f64)>,
}

/// Sweeps the confidence threshold over the scored queries. A prediction is
/// correct when it lies within `tolerance` places of the truth.
pub fn precision_recall_curve(queries: &[ScoredQuery], tolerance: usize) -> Result<PrCurve, VprError> {
    let sweep = pr_sweep(queries, tolerance)?;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(sweep.len() + 1);
    for p in &sweep {
        if !points.contains(&(p.recall, p.precision)) {
            points.push((p.recall, p.precision));
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = points[0].1;
    points.insert(0, (0.0, first));
    Ok(PrCurve { points })
}

pub fn auc_trapezoid(curve: &PrCurve) -> Result<f64, VprError> {
    let p = &curve.points;
    if p.len() < 2 {
        return Err(VprError::TooFewPoints(p.len()));
    }
    Ok(p.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5).sum())
}

/// Scores every place of `query` with the classifier.
pub fn score_traversal(clf: &PlaceClassifier, query: &Traversal) -> Result<Vec<ScoredQuery>, VprError> {
    (0..query.len())
        .map(|k| {
            let probs = classify_scores(clf, query.descriptor(k))?;
            let predicted = math::argmax(&probs);
            Ok(ScoredQuery { confidence: probs[predicted], predicted, truth: k })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VprConfig {
    pub repetitions: usize,
    pub tolerance: usize,
    pub fit: FitConfig,
}

impl Default for VprConfig {
    fn default() -> Self {
        Self { repetitions: 10, tolerance: 0, fit: FitConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VprRow {
    pub reference: String,
    pub query: String,
    pub repetition: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VprSummary {
    pub query: String,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VprReport {
    pub rows: Vec<VprRow>,
    pub summary: Vec<VprSummary>,
    /// One per repetition.
    pub fits: Vec<FitReport>,
}

impl VprReport {
    pub fn summary_for(&self, query: &str) -> Option<&VprSummary> {
        self.summary.iter().find(|s| s.query == query)
    }

    pub fn all_converged(&self) -> bool {
        self.fits.iter().all(|f| f.converged)
    }
}

/// Fits on the reference traversal `repetitions` times with different seeds
/// and scores every traversal, the reference included.
pub fn vpr_experiment<E: Executor>(
    dataset: &Dataset,
    reference_id: &str,
    config: &VprConfig,
    exec: &E,
) -> Result<VprReport, VprError> {
    if config.repetitions == 0 {
        return Err(VprError::NoRepetitions);
    }
    config.fit.validate()?;
    let reference = dataset.traversal(reference_id)?;
    let reps: Vec<usize> = (0..config.repetitions).collect();
    let results = exec.map(&reps, |_, &rep| -> Result<(FitReport, Vec<f64>), VprError> {
        let fit = FitConfig { seed: rng::derive_seed(config.fit.seed, "vpr.fit", rep as u64), ..config.fit };
        let (clf, report) = fit_linear_classifier(reference, &fit)?;
        let aucs = dataset
            .traversals()
            .iter()
            .map(|t| auc_trapezoid(&precision_recall_curve(&score_traversal(&clf, t)?, config.tolerance)?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((report, aucs))
    });
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let ids: Vec<&str> = dataset.traversals().iter().map(|t| t.condition_id()).collect();
    let mut per_query: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    for (rep, r) in results.into_iter().enumerate() {
        let (fit, aucs) = r?;
        fits.push(fit);
        for (q, auc) in aucs.into_iter().enumerate() {
            per_query[q].push(auc);
            rows.push(VprRow { reference: reference_id.to_string(), query: ids[q].to_string(), repetition: rep, auc });
        }
    }
    let summary = ids
        .iter()
        .zip(&per_query)
        .map(|(id, a)| VprSummary { query: id.to_string(), mean_auc: stats::mean(a), std_auc: stats::sample_std(a) })
        .collect();
    Ok(VprReport { rows, summary, fits })
}
