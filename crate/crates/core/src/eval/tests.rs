use super::*;
use crate::qnet::{ConvSpec, InputShape, ModelConfig, ModelKind};

fn tiny_env() -> EnvConfig {
    EnvConfig {
        obs_side: 12,
        stack_size: 2,
        max_score: 2,
        ..EnvConfig::default()
    }
}

fn tiny_net(kind: ModelKind, seed: u64) -> QNetwork<f32> {
    let cfg = ModelConfig {
        kind,
        convs: vec![ConvSpec::new(2, 4, 2)],
        mf_dim: 8,
        grc_dim: 32,
        fan_in: 4,
        topk_fraction: 0.25,
        pc_count: 4,
        pc_density: 0.5,
        cn_dim: 6,
        baseline_hidden: vec![8],
        gate: crate::gate::GateConfig {
            num_branches: 8,
            ..Default::default()
        },
        ..ModelConfig::default()
    };
    QNetwork::build(cfg, InputShape::of_env(&tiny_env()), seed).unwrap()
}

fn sample_obs() -> Observation {
    Pong::new(tiny_env()).unwrap().reset(3)
}

#[test]
fn zero_sigma_is_bit_exact() {
    let obs = sample_obs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(add_obs_noise(&obs, 0.0, &mut rng), obs);
}

#[test]
fn observation_noise_moments() {
    let obs = sample_obs();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    let pixel = 5;
    let clean = obs.to_vec()[pixel] as f64;
    for _ in 0..n {
        let d = add_obs_noise(&obs, 1.0, &mut rng).to_vec()[pixel] as f64 - clean;
        sum += d;
        sq += d * d;
    }
    let mean = sum / n as f64;
    let sd = (sq / n as f64 - mean * mean).sqrt();
    // standard error of the mean is 1/sqrt(n); of the std about 1/sqrt(2n)
    assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "{mean}");
    assert!((sd - 1.0).abs() < 3.0 / (2.0 * n as f64).sqrt(), "{sd}");
}

#[test]
fn noise_is_not_clipped_and_leaves_input_alone() {
    let obs = sample_obs();
    let before = obs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = add_obs_noise(&obs, 10.0, &mut rng).to_vec();
    assert!(noisy.iter().any(|&v| v < 0.0) && noisy.iter().any(|&v| v > 1.0));
    assert_eq!(obs, before);
}

#[test]
fn action_replacement_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for a in Action::ALL {
        assert_eq!(perturb_action(a, 0.0, &mut rng), a);
    }
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[perturb_action(Action::NoOp, 1.0, &mut rng).index()] += 1;
    }
    let p = 1.0 / 3.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!(counts.iter().all(|&c| (c as f64 - n as f64 * p).abs() < 3.0 * sd), "{counts:?}");

    // a replacement that draws the same action is invisible, so count the
    // events through a mirror of the draw sequence
    let mut events = 0;
    let mut mirror = ChaCha8Rng::seed_from_u64(4);
    let mut live = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..n {
        let replaced = mirror.gen::<f64>() < 0.3;
        if replaced {
            mirror.gen_range(0..Action::COUNT);
            events += 1;
        }
        perturb_action(Action::Up, 0.3, &mut live);
    }
    assert_eq!(mirror.gen::<u64>(), live.gen::<u64>());
    let sd = (n as f64 * 0.3 * 0.7).sqrt();
    assert!((events as f64 - 0.3 * n as f64).abs() < 3.0 * sd, "{events}");
}

#[test]
fn sticky_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(sticky_action(Action::Up, Some(Action::Down), 0.0, &mut rng), Action::Up);
    assert_eq!(sticky_action(Action::Up, Some(Action::Down), 1.0, &mut rng), Action::Down);
    assert_eq!(sticky_action(Action::Up, None, 1.0, &mut rng), Action::Up);
    let n = 10_000;
    let repeats = (0..n)
        .filter(|_| sticky_action(Action::Up, Some(Action::Down), 0.25, &mut rng) == Action::Down)
        .count();
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    assert!((repeats as f64 - 0.25 * n as f64).abs() < 3.0 * sd, "{repeats}");
}

#[test]
fn noise_spec_validation() {
    let both = NoiseSpec {
        act_prob: 0.1,
        sticky_prob: 0.25,
        ..NoiseSpec::default()
    };
    assert!(matches!(both.validate(), Err(Error::Config { .. })));
    assert!(NoiseSpec::observation(-1.0).validate().is_err());
    assert!(NoiseSpec {
        act_prob: 1.5,
        ..NoiseSpec::default()
    }
    .validate()
    .is_err());
    assert!(EvalConfig::default().validate().is_ok());
}

#[test]
fn population_std() {
    assert_eq!(mean_std([0.5]), (0.5, 0.0));
    let (m, s) = mean_std([1.0, 2.0, 4.0]);
    assert!((m - 7.0 / 3.0).abs() < 1e-12);
    assert!((s - (14.0f64 / 9.0).sqrt()).abs() < 1e-12);
}

#[test]
fn untrained_model_rarely_wins() {
    let env = EnvConfig {
        max_score: 21,
        ..tiny_env()
    };
    for kind in ModelKind::ALL {
        let net = tiny_net(kind, 1);
        let res = evaluate(&net, &env, &NoiseSpec::default(), 5, &[1, 2]).unwrap();
        for s in &res {
            assert!(s.win_rate < 0.3, "{kind} {s:?}");
        }
    }
}

#[test]
fn evaluation_is_deterministic() {
    let net = tiny_net(ModelKind::Cdrl, 2);
    let noise = NoiseSpec {
        obs_sigma: 1.0,
        act_prob: 0.1,
        ..NoiseSpec::default()
    };
    let a = evaluate(&net, &tiny_env(), &noise, 1, &[7]).unwrap();
    let b = evaluate(&net, &tiny_env(), &noise, 1, &[7]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_rejects_mismatched_input() {
    let net = tiny_net(ModelKind::Baseline, 2);
    let env = EnvConfig {
        obs_side: 16,
        ..tiny_env()
    };
    assert!(evaluate(&net, &env, &NoiseSpec::default(), 1, &[1]).is_err());
}

#[test]
fn grid_shape_self_difference_and_composition() {
    let models = [
        NamedModel::new("cdrl", tiny_net(ModelKind::Cdrl, 3), vec![1]),
        NamedModel::new("baseline", tiny_net(ModelKind::Baseline, 3), vec![1]),
    ];
    let env = tiny_env();
    let grid = robustness_grid_over(&models, &env, &[0.0, 2.0], &[0.0, 0.3], 1, 9).unwrap();
    assert_eq!(grid.cells.len(), 8);
    let same = grid.difference("cdrl", "cdrl").unwrap();
    assert!(same.iter().flatten().all(|&d| d == 0.0));
    let cell = grid.cell("cdrl", 0.0, 0.0).unwrap();
    let direct = evaluate(
        &models[0].net,
        &env,
        &NoiseSpec {
            noise_seed: 9,
            ..NoiseSpec::default()
        },
        1,
        &[1],
    )
    .unwrap();
    assert_eq!(cell.report.per_seed, direct);
    assert!(grid.win_matrix("missing").is_err());
}

#[test]
fn default_grid_axes() {
    assert_eq!(GRID_OBS_SIGMAS.len() * GRID_ACT_PROBS.len(), 36);
}

#[test]
fn generalization_rows() {
    let train = EnvConfig::default();
    assert_eq!(GENERALIZATION_TESTS[0].apply(&train), train);
    let t4 = GENERALIZATION_TESTS.iter().find(|t| t.id == "test4").unwrap().apply(&train);
    assert_eq!(t4.paddle_height, 20.0);
    assert_eq!(t4.opponent_height(), 80.0);
    let t5 = GENERALIZATION_TESTS[5].apply(&train);
    assert_eq!((t5.paddle_speed, t5.opponent_speed()), (2.0, 5.0));
    let t2 = GENERALIZATION_TESTS[2].apply(&train);
    assert_eq!((t2.ball_speed_x, t2.ball_speed_y), (18.0, 12.0));
    for t in GENERALIZATION_TESTS {
        t.apply(&train).validate().unwrap();
    }
}

#[test]
fn sweep_returns_one_report_per_row() {
    let models = [NamedModel::new("baseline", tiny_net(ModelKind::Baseline, 4), vec![1])];
    let reports = generalization_sweep(&models, &tiny_env(), 1).unwrap();
    assert_eq!(reports.len(), 8);
    let ids: Vec<&str> = reports.iter().map(|r| r.env_id.as_str()).collect();
    assert_eq!(ids[0], "train");
    assert_eq!(ids[7], "test7");
}

#[test]
fn opponent_path_is_unaffected_by_observation_noise() {
    // with a policy that ignores its input, observation noise must not change
    // the rollout at all
    let mut net = tiny_net(ModelKind::Baseline, 5);
    if let Some(h) = net.baseline_mut() {
        let out = h.layers.last_mut().unwrap();
        out.weight.value.iter_mut().for_each(|w| *w = 0.0);
        out.bias.value = vec![0.0, 1.0, 0.0];
    }
    let clean = evaluate(&net, &tiny_env(), &NoiseSpec::default(), 2, &[1]).unwrap();
    let noisy = evaluate(&net, &tiny_env(), &NoiseSpec::observation(5.0), 2, &[1]).unwrap();
    assert_eq!(clean, noisy);
}

#[test]
fn grid_files() {
    let models = [NamedModel::new("cdrl", tiny_net(ModelKind::Cdrl, 6), vec![1, 2])];
    let grid = robustness_grid_over(&models, &tiny_env(), &[0.0, 1.0], &[0.0, 0.1, 0.2], 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_grid(dir.path(), &grid).unwrap();
    let flat = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(flat.lines().next().unwrap(), GRID_HEADER.join(","));
    assert_eq!(flat.lines().count(), 1 + 6 * 2);
    let pivot = fs::read_to_string(dir.path().join("grid_pivot.csv")).unwrap();
    assert_eq!(pivot.lines().count(), 1 + 6);
    let matrix = fs::read_to_string(dir.path().join("matrix_cdrl.csv")).unwrap();
    let rows: Vec<&str> = matrix.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
}

#[test]
fn models_sharing_a_name_pool_their_seeds() {
    let models = [
        NamedModel::new("cdrl", tiny_net(ModelKind::Cdrl, 7), vec![1]),
        NamedModel::new("cdrl", tiny_net(ModelKind::Cdrl, 8), vec![2]),
    ];
    let reports = evaluate_models(&models, "train", &tiny_env(), &NoiseSpec::default(), 1).unwrap();
    assert_eq!(reports.len(), 1);
    let seeds: Vec<u64> = reports[0].per_seed.iter().map(|s| s.seed).collect();
    assert_eq!(seeds, [1, 2]);
}
