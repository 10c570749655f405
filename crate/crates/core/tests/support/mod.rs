//! Randomized checks shared by the integration suites and the acceptance run.
//! Each check returns its worst observed error so callers choose how to report.
#![allow(dead_code)]

use driftsim::dynamics::{
    derivatives, pacejka_force, step, step_batch, tire_forces, BatchModel, ControlInput, Disturbance, TireParams,
    VehicleParams, VehicleState, WheelKin, FL, FR, N_WHEELS, RL, RR,
};
use driftsim::env::ACTION_DIM;
use driftsim::env::{disturbance_step, StepOutput, Termination};
use driftsim::nn::{gaussian_log_prob, PolicyNet};
use driftsim::ppo::VecEnv;
use driftsim::ppo::{compute_gae, loss_and_grad, LossCoefs, Minibatch};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moving state with speed in `speed`, sideslip within ±1 rad.
pub fn random_state<R: Rng>(rng: &mut R, speed: (f64, f64)) -> VehicleState {
    VehicleState::from_pose_and_motion(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-3.2..3.2),
        rng.random_range(-4.0..4.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(speed.0..speed.1),
    )
}

pub fn random_input<R: Rng>(rng: &mut R, params: &VehicleParams) -> ControlInput {
    let mut omega = [0.0; N_WHEELS];
    for w in omega.iter_mut() {
        *w = rng.random_range(1.0..7.0) / params.wheel_radius;
    }
    ControlInput {
        delta: rng.random_range(-params.max_steer..params.max_steer),
        omega,
    }
}

pub fn random_tires<R: Rng>(rng: &mut R) -> TireParams {
    TireParams {
        b: rng.random_range(0.2..3.0),
        c: rng.random_range(1.5..3.0),
        d: rng.random_range(0.2..0.5),
    }
}

pub fn random_disturbance<R: Rng>(rng: &mut R) -> Disturbance {
    let mut d = Disturbance::zero();
    for v in d.0.iter_mut() {
        *v = rng.random_range(-Disturbance::LIMIT..Disturbance::LIMIT);
    }
    d
}

pub struct Case {
    pub state: VehicleState,
    pub input: ControlInput,
    pub tires: TireParams,
    pub dist: Disturbance,
}

pub fn random_case<R: Rng>(rng: &mut R, params: &VehicleParams) -> Case {
    Case {
        state: random_state(rng, (0.0, 4.0)),
        input: random_input(rng, params),
        tires: random_tires(rng),
        dist: random_disturbance(rng),
    }
}

fn max_abs_diff(a: [f64; 6], b: [f64; 6]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mirror_state(s: &VehicleState) -> VehicleState {
    VehicleState {
        x: s.x,
        y: -s.y,
        psi: -s.psi,
        xdot: s.xdot,
        ydot: -s.ydot,
        psidot: -s.psidot,
    }
}

fn mirror_input(u: &ControlInput) -> ControlInput {
    let mut omega = u.omega;
    omega.swap(FL, FR);
    omega.swap(RL, RR);
    ControlInput { delta: -u.delta, omega }
}

/// Worst deviation of the derivatives from left-right reflection symmetry.
pub fn mirror_symmetry(n: usize, seed: u64) -> f64 {
    let p = VehicleParams::default();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = random_case(&mut rng, &p);
        let d = derivatives(&c.state, &c.input, &p, &c.tires, &c.dist);
        let m = derivatives(
            &mirror_state(&c.state),
            &mirror_input(&c.input),
            &p,
            &c.tires,
            &c.dist.mirrored(),
        );
        worst = worst.max(max_abs_diff(mirror_state(&d).as_array(), m.as_array()));
    }
    worst
}

/// Worst deviation between `step ∘ rigid motion` and `rigid motion ∘ step`.
pub fn rigid_motion_invariance(n: usize, seed: u64) -> f64 {
    let p = VehicleParams::default();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let moved = |s: &VehicleState, phi: f64, t: (f64, f64)| {
        let (sp, cp) = phi.sin_cos();
        VehicleState {
            x: cp * s.x - sp * s.y + t.0,
            y: sp * s.x + cp * s.y + t.1,
            psi: s.psi + phi,
            xdot: cp * s.xdot - sp * s.ydot,
            ydot: sp * s.xdot + cp * s.ydot,
            psidot: s.psidot,
        }
    };
    for _ in 0..n {
        let c = random_case(&mut rng, &p);
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let a = moved(&step(&c.state, &c.input, &p, &c.tires, &c.dist, 0.01), phi, t);
        let b = step(&moved(&c.state, phi, t), &c.input, &p, &c.tires, &c.dist, 0.01);
        worst = worst.max(max_abs_diff(a.as_array(), b.as_array()));
    }
    worst
}

/// Largest ratio `|F| / (D·Fz)` over all wheels of all cases.
pub fn friction_circle(n: usize, seed: u64) -> f64 {
    let p = VehicleParams::default();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = random_case(&mut rng, &p);
        let (_, forces) = tire_forces(&c.state, &c.input, &p, &c.tires, &c.dist.clipped());
        for f in forces {
            if f.fz > 0.0 {
                worst = worst.max(f.fx.hypot(f.fy) / (c.tires.d * f.fz));
            }
        }
    }
    worst
}

/// Worst relative error of `ΣFz` against `m·g`, and how many cases ran.
pub fn load_conservation(n: usize, seed: u64) -> (f64, usize) {
    let p = VehicleParams::default();
    let weight = p.mass * p.gravity;
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = random_case(&mut rng, &p);
        let (_, forces) = tire_forces(&c.state, &c.input, &p, &c.tires, &c.dist);
        let total: f64 = forces.iter().map(|f| f.fz).sum();
        worst = worst.max((total - weight).abs() / weight);
    }
    (worst, n)
}

/// Worst `|F(s) + F(-s)|` for zero disturbance.
pub fn pacejka_oddness(n: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let tires = random_tires(&mut rng);
        let fz = rng.random_range(0.0..30.0);
        let kin = |k: f64, t: f64| WheelKin {
            slip_ratio: k,
            tan_slip: t,
            slip_angle: t.atan(),
            ..Default::default()
        };
        let (k, t) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let a = pacejka_force(&kin(k, t), fz, &tires, [0.0; 2]);
        let b = pacejka_force(&kin(-k, -t), fz, &tires, [0.0; 2]);
        worst = worst.max((a.fx + b.fx).abs()).max((a.fy + b.fy).abs());
    }
    worst
}

/// Number of instances whose batched result differs bitwise from a
/// sequential loop, over `steps` steps of `n` heterogeneous instances.
pub fn batch_mismatches(n: usize, steps: usize, seed: u64) -> usize {
    let p = VehicleParams::default();
    let mut rng = rng(seed);
    let cases: Vec<Case> = (0..n).map(|_| random_case(&mut rng, &p)).collect();
    let inputs: Vec<ControlInput> = cases.iter().map(|c| c.input).collect();
    let tires: Vec<TireParams> = cases.iter().map(|c| c.tires).collect();
    let dists: Vec<Disturbance> = cases.iter().map(|c| c.dist).collect();
    let mut batch: Vec<VehicleState> = cases.iter().map(|c| c.state).collect();
    let mut seq = batch.clone();
    let params = [p];
    for _ in 0..steps {
        step_batch(
            &mut batch,
            &inputs,
            BatchModel {
                params: &params,
                tires: &tires,
                disturbances: &dists,
            },
            0.01,
        );
        for (i, s) in seq.iter_mut().enumerate() {
            *s = step(s, &inputs[i], &p, &tires[i], &dists[i], 0.01);
        }
    }
    batch
        .iter()
        .zip(&seq)
        .filter(|(a, b)| a.as_array().map(f64::to_bits) != b.as_array().map(f64::to_bits))
        .count()
}

fn integrate(c: &Case, p: &VehicleParams, dt: f64, horizon: f64) -> VehicleState {
    let n = (horizon / dt).round() as usize;
    let mut s = c.state;
    for _ in 0..n {
        s = step(&s, &c.input, p, &c.tires, &c.dist, dt);
    }
    s
}

/// Ratios `err(dt) / err(dt/2)` on a 1 s horizon against a `dt/100`
/// reference, for forward motion with wheel commands near rolling speed.
pub fn integrator_ratios(n: usize, seed: u64, dt: f64) -> Vec<f64> {
    let p = VehicleParams::default();
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let state = VehicleState::from_pose_and_motion(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.2..3.2),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(1.0..3.0),
        );
        let v = state.speed();
        let mut omega = [0.0; N_WHEELS];
        for w in omega.iter_mut() {
            *w = v * rng.random_range(0.9..1.2) / p.wheel_radius;
        }
        let c = Case {
            state,
            input: ControlInput {
                delta: rng.random_range(-0.2..0.2),
                omega,
            },
            tires: TireParams::default(),
            dist: Disturbance::zero(),
        };
        let reference = integrate(&c, &p, dt / 100.0, 1.0).as_array();
        let e1 = max_abs_diff(integrate(&c, &p, dt, 1.0).as_array(), reference);
        let e2 = max_abs_diff(integrate(&c, &p, dt / 2.0, 1.0).as_array(), reference);
        out.push(e1 / e2);
    }
    out
}

/// Empirical std of the latent AR(1) disturbance (all components pooled)
/// after a burn-in, and the fraction of samples the clip would limit.
pub fn ar1_statistics(steps: usize, a: f64, w: f64, seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let mut d = Disturbance::zero();
    for _ in 0..1000 {
        d = disturbance_step(&d, a, w, &mut rng);
    }
    let (mut sum, mut sum_sq, mut clipped, mut count) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..steps {
        d = disturbance_step(&d, a, w, &mut rng);
        for v in d.0 {
            sum += v;
            sum_sq += v * v;
            clipped += (v.abs() > Disturbance::LIMIT) as usize;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    (
        (sum_sq / count as f64 - mean * mean).sqrt(),
        clipped as f64 / count as f64,
    )
}

/// One-dimensional regulation task: drive `x` to zero.
///
/// `x ← x + 0.1·a₀` with the first action component as the control, reward
/// `-(x² + 0.01·a₀²)`, 50-step episodes from `x ~ U(-1, 1)`. The other action
/// components are ignored. Observation is `x` followed by zeros so the same
/// network shape as the real task can be used.
pub struct ToyEnv {
    x: Vec<f64>,
    t: Vec<usize>,
    rng: ChaCha8Rng,
    obs_dim: usize,
}

pub const TOY_EPISODE: usize = 50;

impl ToyEnv {
    pub fn new(n: usize, obs_dim: usize, seed: u64) -> Self {
        let mut rng = rng(seed);
        let x = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            x,
            t: vec![0; n],
            rng,
            obs_dim,
        }
    }
}

impl VecEnv for ToyEnv {
    fn n_envs(&self) -> usize {
        self.x.len()
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn observations(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.x.len() * self.obs_dim];
        for (i, x) in self.x.iter().enumerate() {
            o[i * self.obs_dim] = *x;
        }
        o
    }

    fn step(&mut self, actions: &[f64], out: &mut StepOutput) {
        let n = self.x.len();
        let dim = actions.len() / n;
        out.rewards.resize(n, 0.0);
        out.dones.resize(n, false);
        out.terminations.resize(n, Termination::Running);
        out.breakdowns.clear();
        out.finished.clear();
        out.abs_beta.clear();
        out.e_pos.clear();
        for i in 0..n {
            // Steering channel, range ±0.46, rescaled to ±1.
            let u = actions[i * dim] / 0.46;
            self.x[i] += 0.1 * u;
            out.rewards[i] = -(self.x[i] * self.x[i] + 0.01 * u * u);
            self.t[i] += 1;
            let done = self.t[i] >= TOY_EPISODE || self.x[i].abs() > 5.0;
            out.dones[i] = done;
            out.terminations[i] = if done {
                Termination::Completed
            } else {
                Termination::Running
            };
            if done {
                self.x[i] = self.rng.random_range(-1.0..1.0);
                self.t[i] = 0;
            }
        }
        out.obs = self.observations();
    }
}

/// Mean undiscounted 50-step return of the deterministic policy on a fixed
/// set of starts.
pub fn toy_policy_return(net: &driftsim::nn::PolicyNet, starts: &[f64]) -> f64 {
    let dim = net.obs_dim();
    let mut total = 0.0;
    for &x0 in starts {
        let mut x = x0;
        for _ in 0..TOY_EPISODE {
            let mut o = vec![0.0; dim];
            o[0] = x;
            let (a, _, _) = net.forward_one(&o);
            let u = a[0] / 0.46;
            x += 0.1 * u;
            total -= x * x + 0.01 * u * u;
        }
    }
    total / starts.len() as f64
}

/// Records the deterministic-policy toy return at every checkpoint.
pub struct ReturnLog {
    pub starts: Vec<f64>,
    pub returns: Vec<f64>,
}

impl driftsim::ppo::TrainObserver for ReturnLog {
    fn on_checkpoint(&mut self, _update: usize, net: &driftsim::nn::PolicyNet) {
        self.returns.push(toy_policy_return(net, &self.starts));
    }
}

/// Return the toy policy must beat; an untrained policy scores about -11.
pub const TOY_THRESHOLD: f64 = -1.5;

/// Trains on [`ToyEnv`] for `updates` updates and returns the per-update
/// deterministic return.
pub fn train_toy(updates: usize, seed: u64) -> Vec<f64> {
    let cfg = driftsim::ppo::TrainerConfig {
        n_envs: 32,
        rollout_length: 64,
        minibatch_size: 512,
        epochs_per_update: 4,
        lr: 3e-3,
        init_log_std: -1.0,
        checkpoint_every: 1,
        total_env_steps: (updates * 32 * 64) as u64,
        seed,
        ..driftsim::ppo::TrainerConfig::default()
    };
    let mut env = ToyEnv::new(cfg.n_envs, 8, seed ^ 0x5eed);
    let mut log = ReturnLog {
        starts: (0..21).map(|k| -1.0 + 0.1 * k as f64).collect(),
        returns: Vec::new(),
    };
    driftsim::ppo::train(&mut env, &cfg, &mut log);
    log.returns
}

pub fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    xs.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}

/// Largest drop of a sequence below its running maximum, relative to that maximum's magnitude.
pub fn worst_relative_drop(xs: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &x in xs {
        best = best.max(x);
        worst = worst.max((best - x) / best.abs().max(1e-12));
    }
    worst
}

pub const GRAD_OBS: usize = 12;

pub fn random_batch(net: &PolicyNet, rng: &mut ChaCha8Rng, n: usize) -> Minibatch {
    let obs = Array2::from_shape_fn((n, GRAD_OBS), |_| rng.random_range(-2.0..2.0));
    let mean = net.actor_mean(obs.view());
    let mut actions = Array2::zeros((n, ACTION_DIM));
    let mut old = Array1::zeros(n);
    for i in 0..n {
        let mut u = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let z: f64 = StandardNormal.sample(rng);
            u[d] = mean[[i, d]] + net.log_std()[d].exp() * z;
            actions[[i, d]] = u[d];
        }
        // Old log-probs near the current ones so ratios straddle the clip range.
        let lp = gaussian_log_prob(&u, mean.row(i).as_slice().unwrap(), net.log_std());
        old[i] = lp + rng.random_range(-0.3..0.3);
    }
    Minibatch {
        obs,
        actions,
        old_log_probs: old,
        advantages: Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0)),
        returns: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
    }
}

pub fn random_net(rng: &mut ChaCha8Rng) -> PolicyNet {
    let mut net = PolicyNet::init(GRAD_OBS, -0.5, rng);
    // Larger head weights than the init so the actor term is not negligible.
    for p in net.params.iter_mut() {
        *p += 0.1 * rng.random_range(-1.0..1.0);
    }
    for l in net.log_std_mut() {
        *l = rng.random_range(-1.0..0.0);
    }
    net
}

/// Central-difference check of the PPO loss gradient over `draws` random
/// networks and minibatches. Returns the number of parameters compared and
/// the worst relative error; points within `h` of a clip kink are skipped.
pub fn gradient_check(draws: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefs = LossCoefs {
        clip_eps: 0.2,
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    let h = 1e-5;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let mut net = random_net(&mut rng);
        let mb = random_batch(&net, &mut rng, 8);
        let (_, grad) = loss_and_grad(&net, &mb, coefs);
        for _ in 0..6 {
            // Mix of actor, log-std and critic parameters.
            let k = match draw % 3 {
                0 => rng.random_range(0..net.layout().log_std_offset),
                1 => net.layout().log_std_offset + rng.random_range(0..ACTION_DIM),
                _ => rng.random_range(net.layout().log_std_offset + ACTION_DIM..net.n_params()),
            };
            let orig = net.params[k];
            net.params[k] = orig + h;
            let lp = loss_and_grad(&net, &mb, coefs).0.total;
            net.params[k] = orig - h;
            let lm = loss_and_grad(&net, &mb, coefs).0.total;
            net.params[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let scale = grad[k].abs().max(fd.abs());
            if scale < 1e-7 {
                continue;
            }
            // A clip boundary inside [-h, h] makes the loss non-smooth there.
            let lp2 = {
                net.params[k] = orig + 2.0 * h;
                let v = loss_and_grad(&net, &mb, coefs).0.total;
                net.params[k] = orig;
                v
            };
            let l0 = loss_and_grad(&net, &mb, coefs).0.total;
            let curvature = (lp2 - 2.0 * lp + l0).abs() / (h * h);
            if curvature > 1e3 {
                continue;
            }
            let rel = (grad[k] - fd).abs() / scale;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

pub fn brute_force_gae(r: &[f64], v: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let live = if done[k] { 0.0 } else { 1.0 };
                let delta = r[k] + gamma * v[k + 1] * live - v[k];
                sum += w * delta;
                if done[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// Worst deviation of [`compute_gae`] from the brute-force sum over random
/// 10-step single-instance sequences.
pub fn gae_check(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = 10;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let gamma = rng.random_range(0.5..0.999);
        let lambda = rng.random_range(0.0..1.0);
        let (adv, ret) = compute_gae(&r, &v, &done, 1, gamma, lambda);
        let oracle = brute_force_gae(&r, &v, &done, gamma, lambda);
        for t in 0..n {
            worst = worst
                .max((adv[t] - oracle[t]).abs())
                .max((ret[t] - adv[t] - v[t]).abs());
        }
    }
    worst
}
