//! Route, place and descriptor model, plus the synthetic traversal generator.
//!
//! A [`Dataset`] is a set of frame-aligned traversals of one route: place `i`
//! has the same ground-truth pose in every traversal, only the visual
//! descriptor changes with the condition.

use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::math::{self, Point2};
use crate::rng;

/// Descriptors must have unit norm to within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_DESCRIPTOR_DIM: usize = 64;
pub const DEFAULT_PLACES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraversalError {
    #[error("dataset has no traversals")]
    Empty,
    #[error("n_places must be at least 2, got {0}")]
    TooFewPlaces(usize),
    #[error("descriptor_dim must be at least 2, got {0}")]
    DescriptorDimTooSmall(usize),
    #[error("condition `{id}` has invalid severity {severity}")]
    InvalidSeverity { id: String, severity: f64 },
    #[error("place spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("route needs at least one segment with positive length")]
    InvalidRoute,
    #[error("duplicate traversal id `{0}`")]
    DuplicateTraversal(String),
    #[error("traversal `{a}` has {len_a} places but `{b}` has {len_b}")]
    LengthMismatch {
        a: String,
        len_a: usize,
        b: String,
        len_b: usize,
    },
    #[error("traversal `{id}` has {descriptors} descriptors for {places} places")]
    DescriptorCount {
        id: String,
        descriptors: usize,
        places: usize,
    },
    #[error("traversal `{id}` place {index}: descriptor has dimension {got}, expected {expected}")]
    DescriptorDim {
        id: String,
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("traversal `{id}` place {index}: descriptor norm {norm} is not unit")]
    NotUnitNorm { id: String, index: usize, norm: f64 },
    #[error("traversal `{id}` place {index}: non-finite value")]
    NonFinite { id: String, index: usize },
    #[error("traversal `{id}`: place indices are not contiguous at position {position}")]
    NonContiguousIndex { id: String, position: usize },
    #[error("traversal `{id}` place {index}: pose differs from traversal `{reference}`")]
    PoseMismatch {
        id: String,
        reference: String,
        index: usize,
    },
    #[error("places {0} and {1} share the same pose")]
    DegenerateRoute(usize, usize),
    #[error("route bounding box is degenerate ({width} x {height} m)")]
    DegenerateBoundingBox { width: f64, height: f64 },
    #[error("unknown traversal `{0}`")]
    UnknownTraversal(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Place {
    pub index: usize,
    pub pose: Point2,
}

/// Axis-aligned box around all route poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Point2,
    pub max: Point2,
}

impl BoundingBox {
    pub fn around(points: impl IntoIterator<Item = Point2>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Some(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.min.x + self.max.x), 0.5 * (self.min.y + self.max.y))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }
}

/// One pass over the route under a single condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    condition_id: String,
    descriptor_dim: usize,
    // Row-major, places.len() x descriptor_dim.
    descriptors: Vec<f64>,
    places: Vec<Place>,
}

impl Traversal {
    /// Builds a traversal, checking shape, finiteness, index contiguity and
    /// unit norm of every descriptor.
    pub fn new(
        condition_id: impl Into<String>,
        places: Vec<Place>,
        descriptors: Vec<Vec<f64>>,
    ) -> Result<Self, TraversalError> {
        let id = condition_id.into();
        if descriptors.len() != places.len() {
            return Err(TraversalError::DescriptorCount {
                id,
                descriptors: descriptors.len(),
                places: places.len(),
            });
        }
        let dim = descriptors.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(dim * descriptors.len());
        for (i, d) in descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(TraversalError::DescriptorDim {
                    id,
                    index: i,
                    got: d.len(),
                    expected: dim,
                });
            }
            flat.extend_from_slice(d);
        }
        let t = Self {
            condition_id: id,
            descriptor_dim: dim,
            descriptors: flat,
            places,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), TraversalError> {
        let id = || self.condition_id.clone();
        for (pos, place) in self.places.iter().enumerate() {
            if place.index != pos {
                return Err(TraversalError::NonContiguousIndex { id: id(), position: pos });
            }
            if !place.pose.is_finite() {
                return Err(TraversalError::NonFinite { id: id(), index: pos });
            }
        }
        for i in 0..self.len() {
            let d = self.descriptor(i);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TraversalError::NonFinite { id: id(), index: i });
            }
            let n = math::norm(d);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(TraversalError::NotUnitNorm { id: id(), index: i, norm: n });
            }
        }
        Ok(())
    }

    pub fn condition_id(&self) -> &str {
        &self.condition_id
    }

    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn places(&self) -> &[Place] {
        &self.places
    }

    pub fn pose(&self, index: usize) -> Point2 {
        self.places[index].pose
    }

    pub fn descriptor(&self, index: usize) -> &[f64] {
        let d = self.descriptor_dim;
        &self.descriptors[index * d..(index + 1) * d]
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &[f64]> {
        self.descriptors.chunks_exact(self.descriptor_dim.max(1))
    }
}

/// Frame-aligned traversals of one route.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    traversals: Vec<Traversal>,
    route_bbox: BoundingBox,
    descriptor_dim: usize,
}

impl Dataset {
    pub fn new(traversals: Vec<Traversal>) -> Result<Self, TraversalError> {
        let first = traversals.first().ok_or(TraversalError::Empty)?;
        let n = first.len();
        if n < 2 {
            return Err(TraversalError::TooFewPlaces(n));
        }
        let dim = first.descriptor_dim();
        for (k, t) in traversals.iter().enumerate() {
            if traversals[..k].iter().any(|o| o.condition_id == t.condition_id) {
                return Err(TraversalError::DuplicateTraversal(t.condition_id.clone()));
            }
            if t.len() != n {
                return Err(TraversalError::LengthMismatch {
                    a: first.condition_id.clone(),
                    len_a: n,
                    b: t.condition_id.clone(),
                    len_b: t.len(),
                });
            }
            if t.descriptor_dim() != dim {
                return Err(TraversalError::DescriptorDim {
                    id: t.condition_id.clone(),
                    index: 0,
                    got: t.descriptor_dim(),
                    expected: dim,
                });
            }
            for (a, b) in t.places.iter().zip(&first.places) {
                // Frame alignment is exact, not approximate.
                if a.pose != b.pose {
                    return Err(TraversalError::PoseMismatch {
                        id: t.condition_id.clone(),
                        reference: first.condition_id.clone(),
                        index: a.index,
                    });
                }
            }
        }
        if dim < 2 {
            return Err(TraversalError::DescriptorDimTooSmall(dim));
        }
        for w in first.places.windows(2) {
            if w[0].pose == w[1].pose {
                return Err(TraversalError::DegenerateRoute(w[0].index, w[1].index));
            }
        }
        let route_bbox = BoundingBox::around(first.places.iter().map(|p| p.pose))
            .ok_or(TraversalError::Empty)?;
        if route_bbox.is_degenerate() {
            return Err(TraversalError::DegenerateBoundingBox {
                width: route_bbox.width(),
                height: route_bbox.height(),
            });
        }
        Ok(Self {
            traversals,
            route_bbox,
            descriptor_dim: dim,
        })
    }

    pub fn traversals(&self) -> &[Traversal] {
        &self.traversals
    }

    pub fn route_bbox(&self) -> BoundingBox {
        self.route_bbox
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    /// Number of places per traversal.
    pub fn n_places(&self) -> usize {
        self.traversals[0].len()
    }

    pub fn pose(&self, index: usize) -> Point2 {
        self.traversals[0].pose(index)
    }

    pub fn traversal_index(&self, id: &str) -> Result<usize, TraversalError> {
        self.traversals
            .iter()
            .position(|t| t.condition_id == id)
            .ok_or_else(|| TraversalError::UnknownTraversal(id.into()))
    }

    pub fn traversal(&self, id: &str) -> Result<&Traversal, TraversalError> {
        Ok(&self.traversals[self.traversal_index(id)?])
    }
}

/// One straight piece of the route: turn by `turn_deg` (counter-clockwise)
/// then travel `length` meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteSegment {
    pub length: f64,
    pub turn_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub id: String,
    /// Appearance-change severity; 0 reproduces the base descriptors.
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_places: usize,
    pub descriptor_dim: usize,
    pub conditions: Vec<Condition>,
    pub route: Vec<RouteSegment>,
    pub place_spacing: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale default route for `n` places: four straight pieces
    /// covering 30/25/25/20% of the route length, monotone in x, and never
    /// axis-aligned so even two places span a proper bounding box.
    pub fn default_route(n_places: usize, place_spacing: f64) -> Vec<RouteSegment> {
        let total = (n_places.max(2) - 1) as f64 * place_spacing;
        [(0.30, 10.0), (0.25, 30.0), (0.25, -65.0), (0.20, 35.0)]
            .into_iter()
            .map(|(f, turn_deg)| RouteSegment { length: f * total, turn_deg })
            .collect()
    }

    pub fn validate(&self) -> Result<(), TraversalError> {
        if self.n_places < 2 {
            return Err(TraversalError::TooFewPlaces(self.n_places));
        }
        if self.descriptor_dim < 2 {
            return Err(TraversalError::DescriptorDimTooSmall(self.descriptor_dim));
        }
        if self.conditions.is_empty() {
            return Err(TraversalError::Empty);
        }
        for (k, c) in self.conditions.iter().enumerate() {
            if !(c.severity >= 0.0 && c.severity.is_finite()) {
                return Err(TraversalError::InvalidSeverity {
                    id: c.id.clone(),
                    severity: c.severity,
                });
            }
            if self.conditions[..k].iter().any(|o| o.id == c.id) {
                return Err(TraversalError::DuplicateTraversal(c.id.clone()));
            }
        }
        if !(self.place_spacing > 0.0 && self.place_spacing.is_finite()) {
            return Err(TraversalError::InvalidSpacing(self.place_spacing));
        }
        let valid_segment = |s: &RouteSegment| {
            s.length.is_finite() && s.length >= 0.0 && s.turn_deg.is_finite()
        };
        if !self.route.iter().all(valid_segment) || !self.route.iter().any(|s| s.length > 0.0) {
            return Err(TraversalError::InvalidRoute);
        }
        Ok(())
    }
}

/// Poses at arc lengths `0, spacing, 2*spacing, ...` along the polyline
/// starting at the origin heading along +x. Past the last vertex the route
/// continues straight.
pub fn layout_poses(route: &[RouteSegment], spacing: f64, n: usize) -> Vec<Point2> {
    let mut vertices = alloc::vec![Point2::ZERO];
    let mut headings = Vec::new();
    let mut heading = 0.0f64;
    for seg in route {
        heading += seg.turn_deg.to_radians();
        if seg.length > 0.0 {
            let last = *vertices.last().unwrap();
            let dir = Point2::new(libm::cos(heading), libm::sin(heading));
            vertices.push(last + dir * seg.length);
            headings.push(dir);
        }
    }
    let mut poses = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for i in 0..n {
        let s = i as f64 * spacing;
        while seg + 1 < headings.len() && s > seg_start + (vertices[seg + 1] - vertices[seg]).norm()
        {
            seg_start += (vertices[seg + 1] - vertices[seg]).norm();
            seg += 1;
        }
        poses.push(vertices[seg] + headings[seg] * (s - seg_start));
    }
    poses
}

/// Draws the synthetic dataset. Base descriptors are isotropic Gaussian draws
/// normalized to unit length; condition `c` perturbs each base descriptor by
/// `severity * n` with `n ~ N(0, I_D)` and renormalizes.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset, TraversalError> {
    spec.validate()?;
    let n = spec.n_places;
    let d = spec.descriptor_dim;
    let poses = layout_poses(&spec.route, spec.place_spacing, n);
    let places: Vec<Place> = poses
        .iter()
        .enumerate()
        .map(|(index, &pose)| Place { index, pose })
        .collect();

    let mut base_rng = rng::stream(spec.seed, "traversal.base", 0);
    let base: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut base_rng)).collect();
            // A zero draw from a continuous distribution does not happen in practice.
            math::normalize_in_place(&mut v);
            v
        })
        .collect();

    let mut traversals = Vec::with_capacity(spec.conditions.len());
    for (k, cond) in spec.conditions.iter().enumerate() {
        let descriptors = if cond.severity == 0.0 {
            base.clone()
        } else {
            let mut cond_rng = rng::stream(spec.seed, "traversal.condition", k as u64);
            base.iter()
                .map(|b| {
                    let mut v: Vec<f64> = b
                        .iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(&mut cond_rng);
                            x + cond.severity * z
                        })
                        .collect();
                    math::normalize_in_place(&mut v);
                    v
                })
                .collect()
        };
        traversals.push(Traversal::new(cond.id.clone(), places.clone(), descriptors)?);
    }
    Dataset::new(traversals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn spec(n: usize, conditions: &[(&str, f64)], seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_places: n,
            descriptor_dim: 64,
            conditions: conditions
                .iter()
                .map(|(id, s)| Condition { id: id.to_string(), severity: *s })
                .collect(),
            route: SyntheticSpec::default_route(n, 10.0),
            place_spacing: 10.0,
            seed,
        }
    }

    #[test]
    fn zero_severity_conditions_share_descriptors() {
        let ds = generate_synthetic_dataset(&spec(50, &[("A", 0.0), ("B", 0.0)], 3)).unwrap();
        let (a, b) = (&ds.traversals()[0], &ds.traversals()[1]);
        for i in 0..50 {
            assert_eq!(a.descriptor(i), b.descriptor(i));
        }
    }

    #[test]
    fn descriptors_are_64d_unit_norm() {
        let ds = generate_synthetic_dataset(&spec(30, &[("A", 0.0), ("B", 1.5)], 1)).unwrap();
        assert_eq!(ds.descriptor_dim(), 64);
        for t in ds.traversals() {
            for d in t.descriptors() {
                assert_eq!(d.len(), 64);
                assert!((math::norm(d) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(40, &[("A", 0.0), ("B", 0.7)], 11);
        assert_eq!(generate_synthetic_dataset(&s).unwrap(), generate_synthetic_dataset(&s).unwrap());
        let other = SyntheticSpec { seed: 12, ..s.clone() };
        assert_ne!(generate_synthetic_dataset(&s).unwrap(), generate_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert_eq!(
            generate_synthetic_dataset(&spec(1, &[("A", 0.0)], 0)),
            Err(TraversalError::TooFewPlaces(1))
        );
        let mut s = spec(10, &[("A", 0.0)], 0);
        s.descriptor_dim = 1;
        assert_eq!(generate_synthetic_dataset(&s), Err(TraversalError::DescriptorDimTooSmall(1)));
        assert!(matches!(
            generate_synthetic_dataset(&spec(10, &[("A", -0.1)], 0)),
            Err(TraversalError::InvalidSeverity { .. })
        ));
    }

    #[test]
    fn poses_follow_polyline_at_fixed_spacing() {
        let ds = generate_synthetic_dataset(&spec(100, &[("A", 0.0)], 0)).unwrap();
        let t = &ds.traversals()[0];
        assert_eq!(t.pose(0), Point2::ZERO);
        assert!(((t.pose(1) - t.pose(0)).norm() - 10.0).abs() < 1e-12);
        // Chord length never exceeds arc length, and equals it on straight parts.
        for i in 1..100 {
            let step = (t.pose(i) - t.pose(i - 1)).norm();
            assert!(step <= 10.0 + 1e-9 && step > 5.0, "step {i}: {step}");
        }
        assert!(!ds.route_bbox().is_degenerate());
    }

    #[test]
    fn straight_route_is_rejected_as_degenerate() {
        let mut s = spec(10, &[("A", 0.0)], 0);
        s.route = vec![RouteSegment { length: 100.0, turn_deg: 0.0 }];
        assert!(matches!(
            generate_synthetic_dataset(&s),
            Err(TraversalError::DegenerateBoundingBox { .. })
        ));
    }

    #[test]
    fn dataset_rejects_misaligned_traversals() {
        let places = |n: usize| {
            (0..n)
                .map(|i| Place { index: i, pose: Point2::new(i as f64, (i * i) as f64) })
                .collect::<Vec<_>>()
        };
        let desc = |n: usize| (0..n).map(|_| vec![1.0, 0.0]).collect::<Vec<_>>();
        let a = Traversal::new("a", places(3), desc(3)).unwrap();
        let b = Traversal::new("b", places(4), desc(4)).unwrap();
        match Dataset::new(vec![a, b]) {
            Err(TraversalError::LengthMismatch { a, b, .. }) => {
                assert_eq!((a.as_str(), b.as_str()), ("a", "b"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn traversal_rejects_non_unit_descriptor() {
        let places = vec![
            Place { index: 0, pose: Point2::new(0.0, 0.0) },
            Place { index: 1, pose: Point2::new(1.0, 1.0) },
        ];
        let err = Traversal::new("a", places, vec![vec![1.0, 0.0], vec![0.5, 0.0]]).unwrap_err();
        assert!(matches!(err, TraversalError::NotUnitNorm { index: 1, .. }));
    }
}
