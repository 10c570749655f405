mod support;

#[test]
fn toy_regulator_learns() {
    let returns = support::train_toy(200, 3);
    assert_eq!(returns.len(), 200);
    let avg = support::moving_average(&returns, 5);
    assert!(
        support::worst_relative_drop(&avg) < 0.02,
        "moving average is not monotone: {avg:?}"
    );
    let first = avg.iter().position(|&r| r > support::TOY_THRESHOLD);
    assert!(first.is_some(), "threshold never reached: {avg:?}");
    assert!(avg[0] < 2.0 * support::TOY_THRESHOLD);
}

use driftsim::dynamics::VehicleParams;
use driftsim::env::{DriftEnv, EnvConfig, PathSource};
use driftsim::nn::PolicyNet;
use driftsim::ppo::{train, LearningCurve, TrainerConfig};

fn small_run(threads: usize, total: u64) -> (PolicyNet, LearningCurve) {
    let cfg = TrainerConfig {
        n_envs: 96,
        rollout_length: 16,
        minibatch_size: 512,
        total_env_steps: total,
        seed: 42,
        ..TrainerConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let circle = driftsim::path::gen_circle(1.0, 1).unwrap();
        let mut env = DriftEnv::new(
            EnvConfig::default(),
            VehicleParams::default(),
            PathSource::single("circle", circle),
            cfg.n_envs,
            cfg.seed,
        );
        train(&mut env, &cfg, &mut ())
    })
}

#[test]
fn zero_budget_returns_initial_net() {
    let (net, curve) = small_run(1, 0);
    assert!(curve.rows.is_empty());
    let mut rng = driftsim::seeding::rng_for(42, driftsim::seeding::STREAM_POLICY_INIT, 0);
    let init = PolicyNet::init(
        EnvConfig::default().obs_dim(),
        TrainerConfig::default().init_log_std,
        &mut rng,
    );
    assert_eq!(net.params, init.params);
}

#[test]
fn training_is_bitwise_reproducible_across_threads() {
    let (a, ca) = small_run(1, 96 * 16 * 3);
    let (b, cb) = small_run(2, 96 * 16 * 3);
    let (c, cc) = small_run(1, 96 * 16 * 3);
    assert_eq!(ca.rows.len(), 3);
    assert_eq!(ca.to_csv(), cb.to_csv());
    assert_eq!(ca.to_csv(), cc.to_csv());
    let bits = |n: &PolicyNet| n.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
}
