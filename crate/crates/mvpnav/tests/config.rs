use std::path::PathBuf;

use mvpnav::config::{parse_interval, ConfigError, RawConfig, RunConfig, SweepMode};
use mvpnav_core::env::{ActionSet, MotionInput};
use mvpnav_core::harness::Variant;
use mvpnav_core::motion::MotionKind;
use mvpnav_core::policy::Activation;

fn build(text: &str) -> Result<RunConfig, ConfigError> {
    RunConfig::from_raw_with_env(&RawConfig::parse(text)?, None)
}

fn key_of(err: ConfigError) -> String {
    match err {
        ConfigError::Invalid { key, .. } => key,
        other => panic!("expected an invalid-key error, got {other:?}"),
    }
}

#[test]
fn defaults_match_the_documented_values() {
    let cfg = build("").unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.threads, 0);
    assert_eq!(cfg.out_dir, PathBuf::from("mvpnav-out"));
    assert_eq!(cfg.dataset.path, PathBuf::from("mvpnav-out/dataset.csv"));
    assert_eq!(cfg.dataset.spec.n_places, 100);
    assert_eq!(cfg.dataset.spec.descriptor_dim, 64);
    assert_eq!(cfg.policy.encoder_units, 512);
    assert_eq!(cfg.policy.lstm_units, 256);
    assert_eq!(cfg.policy.n_actions, 2);
    assert!(!cfg.policy.prev_action_in_encoder);
    assert_eq!(cfg.ppo.gamma, 0.99);
    assert_eq!(cfg.ppo.gae_lambda, 0.95);
    assert_eq!(cfg.ppo.clip_epsilon, 0.2);
    assert_eq!(cfg.ppo.epochs, 4);
    assert_eq!(cfg.ppo.minibatch_chunks, 64);
    assert_eq!(cfg.ppo.learning_rate, 2.5e-4);
    assert_eq!(cfg.ppo.rollout_length, 128);
    assert_eq!(cfg.ppo.n_envs, 8);
    assert_eq!(cfg.eval.protocol.iterations, 10);
    assert_eq!(cfg.eval.protocol.targets, 100);
    assert!(cfg.eval.greedy);
    assert_eq!(cfg.train.traversal, "reference");
    assert_eq!(cfg.train.variants, vec![Variant::mvp(MotionKind::Gps)]);
    assert_eq!(
        cfg.curriculum.max_goal_distance_per_level,
        vec![3, 10, 30, 99]
    );
    assert_eq!(cfg.sweep.sigmas.len(), 6);
    assert_eq!(cfg.sweep.mode, SweepMode::Frozen);
    assert_eq!(cfg.vpr.repetitions, 10);
    assert_eq!(
        cfg.regime.sigma(MotionKind::Ro),
        cfg.regime.sigma(MotionKind::Vo) / 10.0
    );
}

#[test]
fn comments_blank_lines_and_overrides() {
    let text = "# experiment\n\nseed = 7   # trailing comment\nppo.learning_rate=1e-3\n";
    let mut raw = RawConfig::parse(text).unwrap();
    raw.apply_override("seed=9").unwrap();
    raw.apply_override("policy.encoder_activation = identity")
        .unwrap();
    let cfg = RunConfig::from_raw_with_env(&raw, None).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ppo.seed, 9);
    assert_eq!(cfg.dataset.spec.seed, 9);
    assert_eq!(cfg.ppo.learning_rate, 1e-3);
    assert_eq!(cfg.policy.encoder_activation, Activation::Identity);
    assert!(matches!(
        raw.apply_override("novalue"),
        Err(ConfigError::Override(_))
    ));
    assert!(matches!(
        RawConfig::parse("just words"),
        Err(ConfigError::Syntax { line: 1, .. })
    ));
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let raw = RawConfig::parse("").unwrap();
    let cfg = RunConfig::from_raw_with_env(&raw, Some(PathBuf::from("/tmp/elsewhere"))).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("/tmp/elsewhere"));
    assert_eq!(
        cfg.checkpoint_path("mvp-ro"),
        PathBuf::from("/tmp/elsewhere/checkpoints/mvp-ro.ckpt")
    );
    let raw = RawConfig::parse("out_dir = here").unwrap();
    let cfg = RunConfig::from_raw_with_env(&raw, Some(PathBuf::from("/tmp/elsewhere"))).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("here"));
}

#[test]
fn unknown_keys_are_rejected() {
    match build("ppo.learning_rte = 0.1") {
        Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "ppo.learning_rte"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        build("motion.sigma.lidar = 1"),
        Err(ConfigError::Invalid { .. })
    ));
}

#[test]
fn invalid_values_name_their_key() {
    let cases = [
        (
            "dataset.conditions = reference:0, storm:-1",
            "dataset.conditions",
        ),
        ("dataset.conditions = a:0, a:1", "dataset.conditions"),
        ("dataset.n_places = 1", "dataset.n_places"),
        ("dataset.place_spacing = 0", "dataset.place_spacing"),
        ("ppo.learning_rate = -1", "ppo.learning_rate"),
        ("ppo.gamma = 1.5", "ppo.gamma"),
        ("ppo.epochs = 0", "ppo.epochs"),
        ("ppo.n_envs = many", "ppo.n_envs"),
        ("motion.kind = sonar", "motion.kind"),
        ("motion.sigma = -0.1", "motion.sigma"),
        ("motion.dropout = 5-2", "motion.dropout"),
        ("motion.dropout = 0-10, 5-20", "motion.dropout"),
        ("motion.dropout = 90-101", "motion.dropout"),
        ("env.action_set = teleport", "env.action_set"),
        ("env.motion_input = imagined", "env.motion_input"),
        ("env.curriculum.levels = 3, 200", "env.curriculum.levels"),
        ("env.curriculum.threshold = 2", "env.curriculum.threshold"),
        ("train.traversal = mars", "train.traversal"),
        ("train.variants = mvp-lidar", "train.variants"),
        ("eval.greedy = maybe", "eval.greedy"),
        ("eval.gps_dropout.mars = 0-10", "eval.gps_dropout.mars"),
        ("sweep.sigmas = 1, 0.5", "sweep.sigmas"),
        ("sweep.sigmas = -1", "sweep.sigmas"),
        ("sweep.mode = sometimes", "sweep.mode"),
        ("vpr.gradient_tolerance = 0", "vpr.gradient_tolerance"),
    ];
    for (text, key) in cases {
        let err = build(text).expect_err(text);
        let msg = err.to_string();
        assert!(msg.contains(key), "{text}: {msg}");
        assert_eq!(key_of(err), key, "{text}");
    }
}

#[test]
fn motion_keys_build_the_regime() {
    let cfg = build(
        "motion.kind = vo\nmotion.sigma = 0.25\nmotion.sigma.gps = 3\nmotion.dropout = 10-20\n\
         eval.gps_dropout.severe = 0-100",
    )
    .unwrap();
    assert_eq!(cfg.regime.sigma(MotionKind::Vo), 0.25);
    assert_eq!(cfg.regime.sigma(MotionKind::Gps), 3.0);
    assert_eq!(
        cfg.regime.sigma(MotionKind::Ro),
        MotionKind::Ro.default_sigma()
    );
    assert_eq!(cfg.train.variants, vec![Variant::mvp(MotionKind::Vo)]);
    let gps = cfg.regime.params(MotionKind::Gps, "reference");
    assert_eq!(gps.dropout_intervals, vec![(10, 20)]);
    assert_eq!(
        cfg.regime
            .params(MotionKind::Gps, "severe")
            .dropout_intervals,
        vec![(0, 100)]
    );
    assert!(cfg
        .regime
        .params(MotionKind::Vo, "severe")
        .dropout_intervals
        .is_empty());
    assert_eq!(parse_interval("3-4"), Ok((3, 4)));
    assert!(parse_interval("4-4").is_err());
}

#[test]
fn variants_and_switches() {
    let cfg = build("env.motion_input = zeroed").unwrap();
    assert_eq!(cfg.train.variants, vec![Variant::vision_only()]);
    assert_eq!(cfg.env.motion_input, MotionInput::Zeroed);
    let cfg = build(
        "train.variants = mvp-ro, vision-only\neval.variants = mvp-gps,mvp-vo,mvp-ro,vision-only\n\
         env.action_set = forward_backward_stay\nsweep.mode = retrain\neval.oracle = true",
    )
    .unwrap();
    assert_eq!(cfg.train.variants.len(), 2);
    assert_eq!(cfg.eval.variants, Variant::standard());
    assert_eq!(cfg.env.action_set, ActionSet::ForwardBackwardStay);
    assert_eq!(cfg.policy.n_actions, 3);
    assert_eq!(cfg.sweep.mode, SweepMode::Retrain);
    assert!(cfg.eval.oracle);
}
