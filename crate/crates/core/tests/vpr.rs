use mvpnav_core::exec::Sequential;
use mvpnav_core::math;
use mvpnav_core::traversal::{generate_synthetic_dataset, Condition, Dataset, Place, SyntheticSpec, Traversal};
use mvpnav_core::vpr::*;
use proptest::prelude::*;

fn dataset(n: usize, d: usize, severities: &[f64], seed: u64) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        n_places: n,
        descriptor_dim: d,
        conditions: severities
            .iter()
            .enumerate()
            .map(|(i, &s)| Condition { id: format!("c{i}"), severity: s })
            .collect(),
        route: SyntheticSpec::default_route(n, 10.0),
        place_spacing: 10.0,
        seed,
    })
    .unwrap()
}

fn q(confidence: f64, correct: bool) -> ScoredQuery {
    ScoredQuery { confidence, predicted: if correct { 5 } else { 9 }, truth: 5 }
}

/// Enumerates every threshold directly from the definition.
fn oracle_auc(queries: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = queries.iter().map(|q| q.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for t in thresholds {
        let retrieved = queries.iter().filter(|q| q.0 >= t).count() as f64;
        let correct = queries.iter().filter(|q| q.0 >= t && q.1).count() as f64;
        pts.push((correct / queries.len() as f64, correct / retrieved));
    }
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for p in pts {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    area
}

#[test]
fn hand_enumerated_four_query_curve() {
    let raw = [(0.9, true), (0.8, false), (0.7, true), (0.6, true)];
    let queries: Vec<_> = raw.iter().map(|&(c, ok)| q(c, ok)).collect();
    let curve = precision_recall_curve(&queries, 0).unwrap();
    let expected = [(0.0, 1.0), (0.25, 1.0), (0.25, 0.5), (0.5, 2.0 / 3.0), (0.75, 0.75)];
    assert_eq!(curve.points.len(), expected.len());
    for (p, e) in curve.points.iter().zip(&expected) {
        assert!((p.0 - e.0).abs() < 1e-12 && (p.1 - e.1).abs() < 1e-12, "{p:?} vs {e:?}");
    }
    let auc = auc_trapezoid(&curve).unwrap();
    assert!((auc - oracle_auc(&raw)).abs() < 1e-12);
    // frozen from the enumeration above
    assert!((auc - 0.572_916_666_666_666_6).abs() < 1e-12);
}

#[test]
fn perfect_and_adversarial_scores() {
    let good: Vec<_> = [0.9, 0.5, 0.3].iter().map(|&c| q(c, true)).collect();
    let curve = precision_recall_curve(&good, 0).unwrap();
    assert!(curve.points.iter().all(|p| p.1 == 1.0));
    assert_eq!(auc_trapezoid(&curve).unwrap(), 1.0);

    let bad: Vec<_> = [0.9, 0.5, 0.3].iter().map(|&c| q(c, false)).collect();
    let curve = precision_recall_curve(&bad, 0).unwrap();
    assert!(curve.points.iter().all(|p| p.1 == 0.0));
    assert_eq!(auc_trapezoid(&curve).unwrap(), 0.0);
}

#[test]
fn trapezoid_examples() {
    let c = |p: &[(f64, f64)]| PrCurve { points: p.to_vec() };
    assert_eq!(auc_trapezoid(&c(&[(0.0, 1.0), (1.0, 1.0)])).unwrap(), 1.0);
    assert_eq!(auc_trapezoid(&c(&[(0.0, 1.0), (1.0, 0.0)])).unwrap(), 0.5);
    assert_eq!(auc_trapezoid(&c(&[(0.0, 1.0), (0.5, 1.0), (1.0, 0.0)])).unwrap(), 0.75);
    assert_eq!(auc_trapezoid(&c(&[(0.0, 1.0)])), Err(VprError::TooFewPoints(1)));
}

#[test]
fn empty_queries_rejected() {
    assert_eq!(precision_recall_curve(&[], 0), Err(VprError::EmptyQueries));
}

#[test]
fn tolerance_widens_matches() {
    let qs = [
        ScoredQuery { confidence: 0.9, predicted: 3, truth: 4 },
        ScoredQuery { confidence: 0.8, predicted: 4, truth: 4 },
        ScoredQuery { confidence: 0.7, predicted: 1, truth: 4 },
    ];
    let strict = auc_trapezoid(&precision_recall_curve(&qs, 0).unwrap()).unwrap();
    let loose = auc_trapezoid(&precision_recall_curve(&qs, 1).unwrap()).unwrap();
    let looser = auc_trapezoid(&precision_recall_curve(&qs, 3).unwrap()).unwrap();
    assert!(strict < loose && loose < looser);
    assert_eq!(looser, 1.0);
}

proptest! {
    #[test]
    fn curve_invariants(raw in prop::collection::vec((0.0f64..1.0, 0usize..6, 0usize..6), 1..40), k in 0usize..3) {
        let qs: Vec<_> = raw.iter().map(|&(c, p, t)| ScoredQuery { confidence: c, predicted: p, truth: t }).collect();
        let curve = precision_recall_curve(&qs, k).unwrap();
        prop_assert!(curve.points.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.1) && (0.0..=1.0).contains(&p.0)));
        let auc = auc_trapezoid(&curve).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));

        // a looser tolerance never lowers precision at any threshold
        let strict = pr_sweep(&qs, k).unwrap();
        let loose = pr_sweep(&qs, k + 1).unwrap();
        for (s, l) in strict.iter().zip(&loose) {
            prop_assert_eq!(s.threshold, l.threshold);
            prop_assert!(l.precision >= s.precision);
        }
    }

    #[test]
    fn scores_are_distributions(x in prop::collection::vec(-3.0f64..3.0, 6), seed in 0u64..50) {
        let ds = dataset(5, 6, &[0.0], seed);
        let (clf, _) = fit_linear_classifier(&ds.traversals()[0], &FitConfig { max_iterations: 20, ..FitConfig::default() }).unwrap();
        let p = classify_scores(&clf, &x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn zero_model_is_uniform() {
    let clf = PlaceClassifier::zeros(8, 4);
    let p = classify_scores(&clf, &[0.5, 0.5, 0.5, 0.5]).unwrap();
    assert!(p.iter().all(|v| (v - 0.125).abs() < 1e-15));
    assert_eq!(
        classify_scores(&clf, &[1.0, 0.0]),
        Err(VprError::DimensionMismatch { expected: 4, got: 2 })
    );
}

#[test]
fn template_classifier_argmax_is_training_place() {
    let ds = dataset(12, 16, &[0.0], 4);
    let t = &ds.traversals()[0];
    let c = 3.0;
    let weights: Vec<f64> = t.descriptors().flat_map(|d| d.iter().map(move |v| c * v)).collect();
    let clf = PlaceClassifier::from_parts(12, 16, weights, vec![0.0; 12]).unwrap();
    for i in 0..12 {
        let d = t.descriptor(i);
        let p1 = classify_scores(&clf, d).unwrap();
        // self dot product 1 beats every other unit-vector dot product
        assert_eq!(math::argmax(&p1), i);
        let doubled: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let p2 = classify_scores(&clf, &doubled).unwrap();
        assert_ne!(p1, p2);
        assert_eq!(math::argmax(&p2), i);
    }
}

#[test]
fn fit_shape_and_self_accuracy() {
    let ds = dataset(10, 64, &[0.0], 2);
    let t = &ds.traversals()[0];
    let (clf, report) = fit_linear_classifier(t, &FitConfig::default()).unwrap();
    assert_eq!(clf.shape(), (10, 64));
    assert!(report.converged, "{report:?}");
    assert!(report.separable());
    assert!(report.gradient_norm < 1e-6);
    for s in score_traversal(&clf, t).unwrap() {
        assert_eq!(s.predicted, s.truth);
    }
}

#[test]
fn fit_reports_collisions_and_non_convergence() {
    let ds = dataset(4, 8, &[0.0], 5);
    let src = &ds.traversals()[0];
    let places: Vec<Place> = src.places().to_vec();
    let mut descriptors: Vec<Vec<f64>> = src.descriptors().map(|d| d.to_vec()).collect();
    descriptors[2] = descriptors[0].clone();
    let t = Traversal::new("dup", places, descriptors).unwrap();
    let (_, report) = fit_linear_classifier(&t, &FitConfig::default()).unwrap();
    assert_eq!(report.collisions, vec![(0, 2)]);
    assert!(!report.separable());

    let (_, report) = fit_linear_classifier(src, &FitConfig { max_iterations: 3, ..FitConfig::default() }).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 3);
}

#[test]
fn experiment_reference_row_and_severity_order() {
    let ds = dataset(100, 64, &[0.0, 0.0, 0.2, 0.8, 2.0], 7);
    let cfg = VprConfig { repetitions: 3, ..VprConfig::default() };
    let report = vpr_experiment(&ds, "c0", &cfg, &Sequential).unwrap();
    assert_eq!(report.rows.len(), 3 * 5);
    assert!(report.all_converged());
    assert!(report.summary_for("c0").unwrap().mean_auc >= 0.99);
    assert!(report.summary_for("c1").unwrap().mean_auc >= 0.99);
    let m: Vec<f64> = ["c2", "c3", "c4"].iter().map(|id| report.summary_for(id).unwrap().mean_auc).collect();
    assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.auc)));
}

#[test]
fn experiment_is_deterministic() {
    let ds = dataset(30, 16, &[0.0, 0.5], 1);
    let cfg = VprConfig { repetitions: 2, ..VprConfig::default() };
    assert_eq!(
        vpr_experiment(&ds, "c0", &cfg, &Sequential).unwrap(),
        vpr_experiment(&ds, "c0", &cfg, &Sequential).unwrap()
    );
    assert!(vpr_experiment(&ds, "nope", &cfg, &Sequential).is_err());
}
