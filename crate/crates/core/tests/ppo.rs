use mvpnav_core::env::{ActionSet, CurriculumState, EnvConfig, NavEnv};
use mvpnav_core::exec::Sequential;
use mvpnav_core::motion::{MotionKind, MotionModelParams};
use mvpnav_core::policy::{
    backward_sequence, forward_sequence, init_params, PolicyConfig, PolicyParams, ProbeLoss, SequenceLoss,
};
use mvpnav_core::ppo::{
    collect_rollouts, compute_returns_and_advantages, minibatch_gradient, ppo_update, sequence_chunks, train,
    Adam, Advantages, Behavior, EnvRollout, EnvWorker, PpoConfig, PpoLoss, RolloutBuffer, RolloutStep,
    TrainSetup, GRADIENT_SHARDS,
};
use mvpnav_core::rng;
use mvpnav_core::traversal::{generate_synthetic_dataset, Condition, Dataset, SyntheticSpec};

fn dataset(n: usize) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        n_places: n,
        descriptor_dim: 8,
        conditions: vec![Condition { id: "ref".into(), severity: 0.0 }],
        route: SyntheticSpec::default_route(n, 10.0),
        place_spacing: 10.0,
        seed: 1,
    })
    .unwrap()
}

fn small_policy() -> PolicyConfig {
    PolicyConfig::new(8, 2).with_units(16, 12)
}

fn collect(
    ds: &Dataset,
    params: &PolicyParams,
    n_envs: usize,
    len: usize,
    behavior: Behavior,
    seed: u64,
) -> (RolloutBuffer, Vec<mvpnav_core::ppo::EpisodeResult>) {
    let curriculum = CurriculumState::new(vec![3, 19], 0.8, 10).unwrap();
    let mut workers: Vec<_> = (0..n_envs)
        .map(|k| {
            let env = NavEnv::new(ds, "ref", EnvConfig::default(), MotionModelParams::new(MotionKind::Gps, 1.0)).unwrap();
            EnvWorker::new(env, k, seed, params.config().lstm_units, &curriculum).unwrap()
        })
        .collect();
    collect_rollouts(&mut workers, params, len, &curriculum, behavior, &Sequential).unwrap()
}

fn step(reward: f64, value: f64, done: bool) -> RolloutStep {
    RolloutStep {
        observation: mvpnav_core::env::Observation {
            m: mvpnav_core::motion::MotionFeature::ZERO,
            x: vec![],
            g: mvpnav_core::motion::MotionFeature::ZERO,
            prev_action: vec![],
        },
        action: 0,
        log_prob: 0.0,
        value,
        reward,
        done,
        state: mvpnav_core::policy::RecurrentState::zeros(1),
        episode_start: false,
    }
}

fn hand_buffer(steps: Vec<RolloutStep>, bootstrap: f64) -> RolloutBuffer {
    RolloutBuffer { envs: vec![EnvRollout { steps, bootstrap_value: bootstrap }] }
}

#[test]
fn gae_single_step_episode() {
    let b = hand_buffer(vec![step(1.0, 0.0, true)], 0.0);
    let a = compute_returns_and_advantages(&b, 0.99, 0.95);
    assert_eq!(a, Advantages { returns: vec![1.0], advantages: vec![1.0] });
}

#[test]
fn gae_zero_rewards_and_values() {
    let b = hand_buffer(vec![step(0.0, 0.0, false), step(0.0, 0.0, false), step(0.0, 0.0, true)], 0.0);
    let a = compute_returns_and_advantages(&b, 0.99, 0.95);
    assert!(a.advantages.iter().all(|&v| v == 0.0));
}

#[test]
fn gae_three_step_episode_matches_explicit_sum() {
    let (r, v) = ([0.0, 0.0, 1.0], [0.2, 0.4, 0.7]);
    let (gamma, lambda) = (0.9, 0.8);
    let b = hand_buffer((0..3).map(|t| step(r[t], v[t], t == 2)).collect(), 123.0);
    let a = compute_returns_and_advantages(&b, gamma, lambda);
    // Oracle: A_t = sum_k (gamma lambda)^k delta_{t+k}, the episode ends at t = 2.
    let delta = |t: usize| {
        let next = if t < 2 { v[t + 1] } else { 0.0 };
        r[t] + gamma * next - v[t]
    };
    for t in 0..3 {
        let expected: f64 = (t..3).map(|k| (gamma * lambda).powi((k - t) as i32) * delta(k)).sum();
        assert!((a.advantages[t] - expected).abs() < 1e-12);
        assert!((a.returns[t] - expected - v[t]).abs() < 1e-12);
    }
    // Frozen values of the oracle above.
    let frozen = [0.48112, 0.446, 0.3];
    for t in 0..3 {
        assert!((a.advantages[t] - frozen[t]).abs() < 1e-12, "{t}: {}", a.advantages[t]);
    }
}

#[test]
fn gae_lambda_one_is_discounted_return_minus_baseline() {
    let rewards = [0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 1.0];
    let dones = [false, false, false, true, false, false, false];
    let values = [0.3, -0.2, 0.9, 0.1, 0.4, 0.0, 0.25];
    let bootstrap = 0.6;
    let gamma = 0.95;
    let b = hand_buffer((0..7).map(|t| step(rewards[t], values[t], dones[t])).collect(), bootstrap);
    let a = compute_returns_and_advantages(&b, gamma, 1.0);
    for t in 0..7 {
        // Monte-Carlo return up to the episode end, bootstrapped on truncation.
        let mut g = 0.0;
        let mut discount = 1.0;
        let mut k = t;
        loop {
            g += discount * rewards[k];
            discount *= gamma;
            if dones[k] {
                break;
            }
            if k == 6 {
                g += discount * bootstrap;
                break;
            }
            k += 1;
        }
        assert!((a.advantages[t] - (g - values[t])).abs() < 1e-12, "t={t}");
        assert!((a.returns[t] - g).abs() < 1e-12);
    }
}

#[test]
fn collection_shape_rewards_and_determinism() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 0).unwrap();
    let (buffer, episodes) = collect(&ds, &params, 4, 128, Behavior::Oracle, 5);
    assert_eq!(buffer.len(), 512);
    for env in &buffer.envs {
        let mut reward_in_episode = 0.0;
        for s in &env.steps {
            reward_in_episode += s.reward;
            if s.done {
                assert_eq!(reward_in_episode, 1.0, "oracle episodes earn exactly one +1");
                reward_in_episode = 0.0;
            }
        }
    }
    assert!(episodes.iter().all(|e| e.success && e.length <= 19));
    let completed = buffer.steps().filter(|s| s.done).count();
    assert_eq!(completed, episodes.len());
    let total_reward: f64 = buffer.steps().map(|s| s.reward).sum();
    assert_eq!(total_reward, completed as f64);

    let (again, _) = collect(&ds, &params, 4, 128, Behavior::Oracle, 5);
    assert_eq!(buffer, again);
    let (sampled_a, _) = collect(&ds, &params, 2, 64, Behavior::Sampled, 9);
    let (sampled_b, _) = collect(&ds, &params, 2, 64, Behavior::Sampled, 9);
    assert_eq!(sampled_a, sampled_b);
}

#[test]
fn sampled_episodes_respect_horizon_and_reward_budget() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 3).unwrap();
    let (buffer, episodes) = collect(&ds, &params, 3, 200, Behavior::Sampled, 2);
    assert!(episodes.iter().all(|e| e.length <= 19));
    for env in &buffer.envs {
        let mut reward = 0.0;
        for s in &env.steps {
            assert!(s.reward == 0.0 || s.reward == 1.0);
            reward += s.reward;
            assert!(reward <= 1.0);
            if s.done {
                reward = 0.0;
            }
        }
    }
}

fn update_config() -> PpoConfig {
    PpoConfig { seq_len: 8, minibatch_chunks: 4, epochs: 1, ..PpoConfig::default() }
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 0).unwrap();
    let (buffer, _) = collect(&ds, &params, 2, 32, Behavior::Sampled, 1);
    let targets = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let mut p = params.clone();
    let mut adam = Adam::new(p.len(), 1e-3);
    let cfg = PpoConfig { epochs: 0, ..update_config() };
    ppo_update(&mut p, &mut adam, &buffer, &targets, &cfg, &mut rng::stream(0, "t", 0), &Sequential).unwrap();
    assert_eq!(p, params);
}

/// Loss of the whole buffer as one minibatch at `params`.
fn buffer_loss(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    targets: &Advantages,
    cfg: &PpoConfig,
) -> (f64, mvpnav_core::ppo::LossSums, PolicyParams) {
    let chunks = sequence_chunks(buffer, cfg.seq_len);
    let mut shards = vec![PolicyParams::zeros(*params.config()); GRADIENT_SHARDS];
    minibatch_gradient(params, buffer, &targets.advantages, &targets.returns, &chunks, cfg, &mut shards, &Sequential)
        .unwrap()
}

#[test]
fn identical_policies_have_unit_ratio() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 0).unwrap();
    let (buffer, _) = collect(&ds, &params, 2, 40, Behavior::Sampled, 4);
    let targets = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let cfg = update_config();
    let (_, sums, _) = buffer_loss(&params, &buffer, &targets, &cfg);
    assert_eq!(sums.clipped, 0);
    let mean_adv = targets.advantages.iter().sum::<f64>() / targets.advantages.len() as f64;
    assert!((sums.policy / sums.steps as f64 + mean_adv).abs() < 1e-12);
    let max_entropy = 2f64.ln();
    assert!(sums.entropy / sums.steps as f64 <= max_entropy + 1e-12);
}

#[test]
fn clipped_surrogate_gradient_equals_vanilla_policy_gradient_at_unit_ratio() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 7).unwrap();
    let (buffer, _) = collect(&ds, &params, 1, 24, Behavior::Sampled, 7);
    let targets = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, seq_len: 24, ..update_config() };
    let (_, _, clipped) = buffer_loss(&params, &buffer, &targets, &cfg);

    // Vanilla estimator: -(1/M) sum_t A_t grad log pi(a_t), built from the
    // generic log-prob probe loss.
    let steps = &buffer.envs[0].steps;
    let m = steps.len() as f64;
    let vanilla_loss = ProbeLoss {
        log_prob_weights: steps
            .iter()
            .zip(&targets.advantages)
            .map(|(s, &a)| (0..2).map(|k| if k == s.action { -a / m } else { 0.0 }).collect())
            .collect(),
        value_weights: vec![0.0; steps.len()],
        value_targets: vec![0.0; steps.len()],
    };
    let trace = forward_sequence(&params, &steps[0].state, steps.iter().map(|s| (&s.observation, s.episode_start))).unwrap();
    let (_, up) = vanilla_loss.evaluate(&trace.outputs);
    let mut vanilla = PolicyParams::zeros(*params.config());
    backward_sequence(&params, &trace, &up, &mut vanilla).unwrap();
    for (a, b) in clipped.as_slice().iter().zip(vanilla.as_slice()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn ppo_loss_matches_finite_differences() {
    let ds = dataset(20);
    let c = PolicyConfig::new(8, 2).with_units(6, 5);
    let params = init_params(c, 2).unwrap();
    let (buffer, _) = collect(&ds, &params, 1, 10, Behavior::Sampled, 3);
    let targets = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let steps = &buffer.envs[0].steps;
    let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
    // Shift old log-probs so some ratios sit outside the clip range.
    let old: Vec<f64> = steps.iter().enumerate().map(|(t, s)| s.log_prob + 0.3 * ((t % 3) as f64 - 1.0)).collect();
    let loss = PpoLoss {
        actions: &actions,
        old_log_probs: &old,
        advantages: &targets.advantages,
        returns: &targets.returns,
        clip_epsilon: 0.2,
        value_coef: 0.5,
        entropy_coef: 0.01,
        normalizer: steps.len() as f64,
    };
    let rollout = mvpnav_core::policy::Rollout {
        initial_state: steps[0].state.clone(),
        steps: steps
            .iter()
            .map(|s| mvpnav_core::policy::RolloutInput { observation: s.observation.clone(), episode_start: s.episode_start })
            .collect(),
    };
    let report = mvpnav_core::policy::finite_difference_check(
        &params,
        &rollout,
        &loss,
        // Some partials here are ~1e-8; a smaller step drowns them in roundoff.
        1e-4,
        &mvpnav_core::policy::ParamSelection::All,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn small_step_decreases_minibatch_loss() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 1).unwrap();
    let (buffer, _) = collect(&ds, &params, 2, 32, Behavior::Sampled, 8);
    let targets = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let cfg = PpoConfig {
        learning_rate: 1e-4,
        epochs: 1,
        seq_len: 8,
        minibatch_chunks: 1000,
        normalize_advantages: false,
        ..PpoConfig::default()
    };
    let (before, _, _) = buffer_loss(&params, &buffer, &targets, &cfg);
    let mut p = params.clone();
    let mut adam = Adam::new(p.len(), cfg.learning_rate);
    ppo_update(&mut p, &mut adam, &buffer, &targets, &cfg, &mut rng::stream(0, "t", 0), &Sequential).unwrap();
    let (after, _, _) = buffer_loss(&p, &buffer, &targets, &cfg);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn normalization_of_centered_advantages_only_rescales_the_gradient() {
    let ds = dataset(20);
    let params = init_params(small_policy(), 5).unwrap();
    let (buffer, _) = collect(&ds, &params, 2, 32, Behavior::Sampled, 6);
    let raw = compute_returns_and_advantages(&buffer, 0.99, 0.95);
    let mean = raw.advantages.iter().sum::<f64>() / raw.advantages.len() as f64;
    let centered = Advantages {
        returns: raw.returns.clone(),
        advantages: raw.advantages.iter().map(|a| a - mean).collect(),
    };
    let mut normalized = centered.clone();
    mvpnav_core::ppo::normalize_advantages(&mut normalized.advantages);
    let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, ..update_config() };
    let (_, _, g1) = buffer_loss(&params, &buffer, &centered, &cfg);
    let (_, _, g2) = buffer_loss(&params, &buffer, &normalized, &cfg);
    let dot: f64 = g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| a * b).sum();
    let n1: f64 = g1.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = g2.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!((dot / (n1 * n2) - 1.0).abs() < 1e-10);
}

#[test]
fn update_stats_stay_in_range_and_training_is_deterministic() {
    let ds = dataset(20);
    let setup = TrainSetup {
        traversal_id: "ref".into(),
        motion: MotionModelParams::new(MotionKind::Gps, 0.0),
        env: EnvConfig { action_set: ActionSet::ForwardBackwardStay, ..EnvConfig::default() },
        policy: PolicyConfig::new(8, 3).with_units(16, 12),
        ppo: PpoConfig { n_envs: 2, rollout_length: 32, total_updates: 3, seq_len: 8, minibatch_chunks: 4, ..PpoConfig::default() },
        curriculum: CurriculumState::new(vec![2, 19], 0.5, 5).unwrap(),
    };
    let (p1, log1) = train(&ds, &setup, &Sequential, |_, _| {}).unwrap();
    let (p2, log2) = train(&ds, &setup, &Sequential, |_, _| {}).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(p1, p2);
    for r in &log1.records {
        assert!((0.0..=1.0).contains(&r.clip_fraction));
        assert!(r.entropy >= 0.0 && r.entropy <= 3f64.ln() + 1e-12);
        assert!((0.0..=1.0).contains(&r.success_rate));
    }
}
