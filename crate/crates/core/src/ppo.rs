//! Proximal policy optimization over a batched environment: rollout
//! collection, generalized advantage estimation, clipped-surrogate updates
//! with Adam, and the training loop.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{DriftEnv, StepOutput, ACTION_DIM};
use crate::nn::{gaussian_entropy, Forward, PolicyNet, LOG_2PI};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub n_envs: usize,
    pub rollout_length: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_decay: bool,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_env_steps: u64,
    pub init_log_std: f64,
    /// Divide rewards by a running std of the discounted return before GAE.
    pub normalize_rewards: bool,
    /// Save a checkpoint every this many updates (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_envs: 256,
            rollout_length: 64,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            lr_decay: true,
            epochs_per_update: 4,
            minibatch_size: 4096,
            entropy_coef: 0.003,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_env_steps: 5_000_000,
            init_log_std: -1.0,
            normalize_rewards: true,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.gae_lambda) {
            return Err("trainer: gamma and gae_lambda must be in [0, 1)".into());
        }
        if !(self.clip_eps > 0.0) {
            return Err("trainer.clip_eps must be positive".into());
        }
        if self.n_envs == 0 || self.rollout_length == 0 || self.minibatch_size == 0 || self.epochs_per_update == 0 {
            return Err("trainer: n_envs, rollout_length, minibatch_size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.max_grad_norm > 0.0 && self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return Err("trainer: lr, coefficients and max_grad_norm must be non-negative".into());
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.n_envs * self.rollout_length) as u64
    }

    pub fn n_updates(&self) -> usize {
        (self.total_env_steps / self.steps_per_update()) as usize
    }
}

/// Something the trainer can collect rollouts from.
pub trait VecEnv {
    fn n_envs(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn observations(&self) -> Vec<f64>;
    /// Advances all instances; terminated ones are reset automatically.
    fn step(&mut self, actions: &[f64], out: &mut StepOutput);
}

impl VecEnv for DriftEnv {
    fn n_envs(&self) -> usize {
        DriftEnv::n_envs(self)
    }
    fn obs_dim(&self) -> usize {
        DriftEnv::obs_dim(self)
    }
    fn observations(&self) -> Vec<f64> {
        DriftEnv::observations(self)
    }
    fn step(&mut self, actions: &[f64], out: &mut StepOutput) {
        DriftEnv::step(self, actions, out);
        out.abs_beta.clear();
        out.e_pos.clear();
        for v in self.last_views() {
            out.abs_beta.push(v.beta.abs());
            out.e_pos.push(v.errors.e_pos);
        }
    }
}

/// Transitions stored time-major: row `t * n_envs + i`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs: Array2<f64>,
    /// Pre-squash Gaussian samples.
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub rewards: Array1<f64>,
    /// `n_steps + 1` rows: the last holds bootstrap values.
    pub values: Array1<f64>,
    pub dones: Vec<bool>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl RolloutBuffer {
    pub fn new(n_steps: usize, n_envs: usize, obs_dim: usize) -> Self {
        let rows = n_steps * n_envs;
        Self {
            n_steps,
            n_envs,
            obs: Array2::zeros((rows, obs_dim)),
            actions: Array2::zeros((rows, ACTION_DIM)),
            log_probs: Array1::zeros(rows),
            rewards: Array1::zeros(rows),
            values: Array1::zeros(rows + n_envs),
            dones: vec![false; rows],
            advantages: Array1::zeros(rows),
            returns: Array1::zeros(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalizes advantages in place to zero mean and unit standard deviation.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len();
        if n < 2 {
            return;
        }
        let mean = self.advantages.sum() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-8);
        self.advantages.mapv_inplace(|a| (a - mean) / std);
    }
}

/// Backward GAE recursion over a time-major buffer layout. `values` has one
/// extra row of bootstrap values. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let rows = rewards.len();
    assert_eq!(values.len(), rows + n_envs);
    assert_eq!(dones.len(), rows);
    let n_steps = rows / n_envs;
    let mut adv = vec![0.0; rows];
    for i in 0..n_envs {
        let mut next_adv = 0.0;
        for t in (0..n_steps).rev() {
            let k = t * n_envs + i;
            let live = if dones[k] { 0.0 } else { 1.0 };
            let delta = rewards[k] + gamma * values[k + n_envs] * live - values[k];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[k] = next_adv;
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

impl RolloutBuffer {
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let (adv, ret) = compute_gae(
            self.rewards.as_slice().expect("contiguous"),
            self.values.as_slice().expect("contiguous"),
            &self.dones,
            self.n_envs,
            gamma,
            lambda,
        );
        self.advantages = Array1::from(adv);
        self.returns = Array1::from(ret);
    }
}

/// A minibatch view used by the loss.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_probs: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl Minibatch {
    fn gather(buf: &RolloutBuffer, idx: &[usize]) -> Self {
        Self {
            obs: buf.obs.select(Axis(0), idx),
            actions: buf.actions.select(Axis(0), idx),
            old_log_probs: buf.log_probs.select(Axis(0), idx),
            advantages: buf.advantages.select(Axis(0), idx),
            returns: buf.returns.select(Axis(0), idx),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, lo: usize, hi: usize) -> Minibatch {
        use ndarray::s;
        Self {
            obs: self.obs.slice(s![lo..hi, ..]).to_owned(),
            actions: self.actions.slice(s![lo..hi, ..]).to_owned(),
            old_log_probs: self.old_log_probs.slice(s![lo..hi]).to_owned(),
            advantages: self.advantages.slice(s![lo..hi]).to_owned(),
            returns: self.returns.slice(s![lo..hi]).to_owned(),
        }
    }
}

/// Loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&TrainerConfig> for LossCoefs {
    fn from(c: &TrainerConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
        }
    }
}

/// Loss terms summed (not averaged) over a chunk; averaged by the caller.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub policy: f64,
    pub value: f64,
    pub approx_kl: f64,
    pub clipped: f64,
}

/// Per-sample Gaussian log-probabilities of pre-squash actions.
fn log_probs(mean: &Array2<f64>, actions: &Array2<f64>, log_std: &[f64]) -> Array1<f64> {
    let norm: f64 = log_std.iter().sum::<f64>() + 0.5 * LOG_2PI * log_std.len() as f64;
    let inv_std: Vec<f64> = log_std.iter().map(|l| (-l).exp()).collect();
    Array1::from_iter(mean.outer_iter().zip(actions.outer_iter()).map(|(m, a)| {
        let mut q = 0.0;
        for d in 0..log_std.len() {
            let z = (a[d] - m[d]) * inv_std[d];
            q += z * z;
        }
        -0.5 * q - norm
    }))
}

/// Loss and gradient of a chunk, with every per-sample term scaled by
/// `1 / total_batch` so chunk gradients add up to the minibatch gradient.
/// The entropy term is left to the caller.
fn chunk_loss_grad(net: &PolicyNet, mb: &Minibatch, coefs: LossCoefs, total_batch: usize) -> (LossSums, Vec<f64>) {
    let fwd: Forward = net.forward(mb.obs.view());
    let log_std = net.log_std();
    let act_dim = log_std.len();
    let new_lp = log_probs(&fwd.mean, &mb.actions, log_std);
    let scale = 1.0 / total_batch as f64;
    let mut sums = LossSums::default();
    let mut d_mean = Array2::zeros(fwd.mean.raw_dim());
    let mut d_log_std = vec![0.0; act_dim];
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    for i in 0..mb.len() {
        let log_ratio = new_lp[i] - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = mb.advantages[i];
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(1.0 - coefs.clip_eps, 1.0 + coefs.clip_eps) * adv;
        sums.policy -= surr1.min(surr2);
        sums.approx_kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > coefs.clip_eps {
            sums.clipped += 1.0;
        }
        // d(-min)/d logp: only the unclipped branch carries gradient.
        let g = if surr1 <= surr2 { -adv * ratio * scale } else { 0.0 };
        if g != 0.0 {
            for d in 0..act_dim {
                let diff = mb.actions[[i, d]] - fwd.mean[[i, d]];
                d_mean[[i, d]] = g * diff * inv_var[d];
                d_log_std[d] += g * (diff * diff * inv_var[d] - 1.0);
            }
        }
    }
    let mut d_value = Array1::zeros(mb.len());
    for i in 0..mb.len() {
        let err = fwd.values[i] - mb.returns[i];
        sums.value += 0.5 * err * err;
        d_value[i] = coefs.value_coef * err * scale;
    }
    let mut grad = vec![0.0; net.n_params()];
    net.backward(&fwd, d_mean, d_value, &mut grad);
    let off = net.layout().log_std_offset;
    for d in 0..act_dim {
        grad[off + d] += d_log_std[d];
    }
    (sums, grad)
}

/// Rows per gradient work unit. Fixed so the reduction order never depends
/// on the worker count.
pub const GRAD_CHUNK: usize = 1024;

/// Minibatch loss statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Total loss `policy + value_coef * value - entropy_coef * entropy` and its
/// gradient over a minibatch.
pub fn loss_and_grad(net: &PolicyNet, mb: &Minibatch, coefs: LossCoefs) -> (LossStats, Vec<f64>) {
    let n = mb.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(GRAD_CHUNK)
        .map(|lo| (lo, (lo + GRAD_CHUNK).min(n)))
        .collect();
    let parts: Vec<(LossSums, Vec<f64>)> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            if lo == 0 && hi == n {
                chunk_loss_grad(net, mb, coefs, n)
            } else {
                chunk_loss_grad(net, &mb.rows(lo, hi), coefs, n)
            }
        })
        .collect();
    let mut grad = vec![0.0; net.n_params()];
    let mut sums = LossSums::default();
    for (s, g) in parts {
        sums.policy += s.policy;
        sums.value += s.value;
        sums.approx_kl += s.approx_kl;
        sums.clipped += s.clipped;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let entropy = gaussian_entropy(net.log_std());
    let off = net.layout().log_std_offset;
    for d in 0..net.log_std().len() {
        grad[off + d] -= coefs.entropy_coef;
    }
    let nf = n.max(1) as f64;
    let stats = LossStats {
        policy: sums.policy / nf,
        value: sums.value / nf,
        entropy,
        approx_kl: sums.approx_kl / nf,
        clip_fraction: sums.clipped / nf,
        total: sums.policy / nf + coefs.value_coef * sums.value / nf - coefs.entropy_coef * entropy,
    };
    (stats, grad)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` to at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
    /// A non-finite loss was hit and the update was rolled back.
    pub aborted: bool,
}

/// Optimizer state carried across updates.
#[derive(Debug, Clone)]
pub struct PpoState {
    pub adam: Adam,
    pub shuffle_rng: ChaCha8Rng,
}

impl PpoState {
    pub fn new(net: &PolicyNet, seed: u64) -> Self {
        Self {
            adam: Adam::new(net.n_params()),
            shuffle_rng: seeding::rng_for(seed, seeding::STREAM_SHUFFLE, 0),
        }
    }
}

/// Epochs of shuffled minibatch updates. On a non-finite loss the network
/// and optimizer are restored to their state before the call.
pub fn ppo_update(
    net: &mut PolicyNet,
    buf: &RolloutBuffer,
    cfg: &TrainerConfig,
    lr: f64,
    state: &mut PpoState,
) -> UpdateStats {
    let snapshot = (net.params.clone(), state.adam.clone());
    let coefs = LossCoefs::from(cfg);
    let n = buf.len();
    let mb_size = cfg.minibatch_size.min(n).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut acc = LossStats::default();
    for _ in 0..cfg.epochs_per_update {
        idx.shuffle(&mut state.shuffle_rng);
        for chunk in idx.chunks(mb_size) {
            let mb = Minibatch::gather(buf, chunk);
            let (loss, mut grad) = loss_and_grad(net, &mb, coefs);
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                net.params = snapshot.0;
                state.adam = snapshot.1;
                stats.aborted = true;
                return stats;
            }
            stats.grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            state.adam.step(&mut net.params, &grad, lr);
            acc.policy += loss.policy;
            acc.value += loss.value;
            acc.entropy += loss.entropy;
            acc.approx_kl += loss.approx_kl;
            acc.clip_fraction += loss.clip_fraction;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss = acc.policy / k;
    stats.value_loss = acc.value / k;
    stats.entropy = acc.entropy / k;
    stats.approx_kl = acc.approx_kl / k;
    stats.clip_fraction = acc.clip_fraction / k;
    stats
}

/// Rows per rollout forward work unit.
const ROLLOUT_CHUNK: usize = 256;

fn chunked_forward(net: &PolicyNet, obs: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let n = obs.nrows();
    let parts: Vec<(Array2<f64>, Array1<f64>)> = (0..n)
        .step_by(ROLLOUT_CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&lo| {
            let hi = (lo + ROLLOUT_CHUNK).min(n);
            let f = net.forward(obs.slice(ndarray::s![lo..hi, ..]));
            (f.mean, f.values)
        })
        .collect();
    let means: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
    let values: Vec<_> = parts.iter().map(|p| p.1.view()).collect();
    (
        ndarray::concatenate(Axis(0), &means).unwrap_or_else(|_| Array2::zeros((0, ACTION_DIM))),
        ndarray::concatenate(Axis(0), &values).unwrap_or_else(|_| Array1::zeros(0)),
    )
}

/// Batched squashed action means for deterministic control.
pub fn deterministic_actions(net: &PolicyNet, obs: &[f64], obs_dim: usize) -> Vec<f64> {
    let view = ArrayView2::from_shape((obs.len() / obs_dim, obs_dim), obs).expect("obs shape");
    let (mean, _) = chunked_forward(net, view);
    let mut out = Vec::with_capacity(mean.len());
    for row in mean.outer_iter() {
        for d in 0..ACTION_DIM {
            out.push(net.squash.apply(d, row[d]));
        }
    }
    out
}

/// Running scale of the per-instance discounted return, updated in a fixed
/// sequential order (Chan et al. parallel variance merge per step).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardScaler {
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardScaler {
    pub fn new(n_envs: usize) -> Self {
        Self {
            returns: vec![0.0; n_envs],
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// Folds one step of rewards into the statistics.
    pub fn observe(&mut self, rewards: &[f64], dones: &[bool], gamma: f64) {
        let n = rewards.len() as f64;
        if n == 0.0 {
            return;
        }
        for (g, r) in self.returns.iter_mut().zip(rewards) {
            *g = gamma * *g + r;
        }
        let bmean = self.returns.iter().sum::<f64>() / n;
        let bm2 = self.returns.iter().map(|g| (g - bmean) * (g - bmean)).sum::<f64>();
        let total = self.count + n;
        let delta = bmean - self.mean;
        self.mean += delta * n / total;
        self.m2 += bm2 + delta * delta * self.count * n / total;
        self.count = total;
        for (g, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *g = 0.0;
            }
        }
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt().max(1e-4)
        }
    }
}

/// Per-rollout statistics gathered during collection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutStats {
    pub mean_reward: f64,
    pub mean_abs_beta: f64,
    pub rmse: f64,
    pub episodes: usize,
    pub mean_return: f64,
    pub failures: usize,
    /// Mean unweighted reward terms in [`crate::env::RewardBreakdown::COLUMNS`] order
    /// (zero for environments without a breakdown).
    pub reward_terms: [f64; 9],
}

/// Collects `buf.n_steps` transitions from every instance, then fills
/// advantages and returns. `obs` carries the current observations across calls.
pub fn collect_rollout<E: VecEnv>(
    env: &mut E,
    net: &PolicyNet,
    obs: &mut Vec<f64>,
    buf: &mut RolloutBuffer,
    rng: &mut ChaCha8Rng,
    scaler: Option<&mut RewardScaler>,
    cfg: &TrainerConfig,
) -> RolloutStats {
    let mut scaler = scaler;
    let n = env.n_envs();
    let od = env.obs_dim();
    let mut out = StepOutput::default();
    let mut actions = vec![0.0; n * ACTION_DIM];
    let std: Vec<f64> = net.log_std().iter().map(|l| l.exp()).collect();
    let mut stats = RolloutStats::default();
    let mut ret_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut beta_sum = 0.0;
    for t in 0..buf.n_steps {
        let view = ArrayView2::from_shape((n, od), obs.as_slice()).expect("obs shape");
        let (mean, values) = chunked_forward(net, view);
        let base = t * n;
        buf.obs.slice_mut(ndarray::s![base..base + n, ..]).assign(&view);
        for i in 0..n {
            let mut u = [0.0; ACTION_DIM];
            for d in 0..ACTION_DIM {
                let z: f64 = StandardNormal.sample(rng);
                u[d] = mean[[i, d]] + std[d] * z;
                buf.actions[[base + i, d]] = u[d];
                actions[i * ACTION_DIM + d] = net.squash.apply(d, u[d]);
            }
            buf.log_probs[base + i] =
                crate::nn::gaussian_log_prob(&u, mean.row(i).as_slice().expect("row"), net.log_std());
            buf.values[base + i] = values[i];
        }
        env.step(&actions, &mut out);
        let scale = match scaler.as_deref_mut() {
            Some(sc) => {
                sc.observe(&out.rewards, &out.dones, cfg.gamma);
                1.0 / sc.std()
            }
            None => 1.0,
        };
        for i in 0..n {
            buf.rewards[base + i] = out.rewards[i] * scale;
            buf.dones[base + i] = out.dones[i];
            stats.mean_reward += out.rewards[i];
        }
        for b in &out.breakdowns {
            for (acc, v) in stats.reward_terms.iter_mut().zip(b.values()) {
                *acc += v;
            }
        }
        for (b, e) in out.abs_beta.iter().zip(&out.e_pos) {
            beta_sum += b;
            sq_sum += e * e;
        }
        for ep in &out.finished {
            stats.episodes += 1;
            ret_sum += ep.episode_return;
            if ep.termination.is_failure() {
                stats.failures += 1;
            }
        }
        obs.clone_from(&out.obs);
    }
    let view = ArrayView2::from_shape((n, od), obs.as_slice()).expect("obs shape");
    let (_, last_values) = chunked_forward(net, view);
    let rows = buf.len();
    buf.values.slice_mut(ndarray::s![rows..]).assign(&last_values);
    buf.compute_gae(cfg.gamma, cfg.gae_lambda);
    let samples = rows.max(1) as f64;
    stats.mean_reward /= samples;
    stats.reward_terms.iter_mut().for_each(|v| *v /= samples);
    stats.mean_abs_beta = beta_sum / samples;
    stats.rmse = (sq_sum / samples).sqrt();
    stats.mean_return = if stats.episodes > 0 {
        ret_sum / stats.episodes as f64
    } else {
        f64::NAN
    };
    stats
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub env_steps: u64,
    /// Mean return of episodes that ended during the rollout (NaN if none).
    pub mean_return: f64,
    pub mean_abs_beta: f64,
    pub rmse_proxy: f64,
    pub steps_per_sec: f64,
    pub mean_step_reward: f64,
    pub episodes: usize,
    pub failures: usize,
    pub reward_terms: [f64; 9],
    pub update_stats: UpdateStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    /// CSV with the deterministic columns only (throughput lives elsewhere so
    /// that repeated runs produce identical files).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,env_steps,mean_return,mean_abs_beta,rmse_proxy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.update, r.env_steps, r.mean_return, r.mean_abs_beta, r.rmse_proxy
            ));
        }
        s
    }

    /// Wall-clock throughput per update as a plain-text log. Not reproducible.
    pub fn timing_log(&self) -> String {
        let mut s = String::from("# update env_steps steps_per_sec (wall clock)\n");
        for r in &self.rows {
            s.push_str(&format!("{} {} {:.1}\n", r.update, r.env_steps, r.steps_per_sec));
        }
        s
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_update(&mut self, _row: &CurveRow) {}
    fn on_checkpoint(&mut self, _update: usize, _net: &PolicyNet) {}
}

impl TrainObserver for () {}

/// Runs PPO until `cfg.total_env_steps` transitions have been collected.
pub fn train<E: VecEnv, O: TrainObserver>(
    env: &mut E,
    cfg: &TrainerConfig,
    observer: &mut O,
) -> (PolicyNet, LearningCurve) {
    let mut init_rng = seeding::rng_for(cfg.seed, seeding::STREAM_POLICY_INIT, 0);
    let net = PolicyNet::init(env.obs_dim(), cfg.init_log_std, &mut init_rng);
    train_from(env, cfg, net, observer)
}

/// Like [`train`] but starting from a given network.
pub fn train_from<E: VecEnv, O: TrainObserver>(
    env: &mut E,
    cfg: &TrainerConfig,
    mut net: PolicyNet,
    observer: &mut O,
) -> (PolicyNet, LearningCurve) {
    let mut curve = LearningCurve::default();
    let n_updates = cfg.n_updates();
    if n_updates == 0 {
        return (net, curve);
    }
    assert_eq!(env.n_envs(), cfg.n_envs, "environment batch must match trainer n_envs");
    let mut state = PpoState::new(&net, cfg.seed);
    let mut noise_rng = seeding::rng_for(cfg.seed, seeding::STREAM_ACTION_NOISE, 0);
    let mut buf = RolloutBuffer::new(cfg.rollout_length, cfg.n_envs, env.obs_dim());
    let mut obs = env.observations();
    let mut scaler = RewardScaler::new(cfg.n_envs);
    let mut env_steps = 0u64;
    for update in 0..n_updates {
        let t0 = Instant::now();
        let rs = collect_rollout(
            env,
            &net,
            &mut obs,
            &mut buf,
            &mut noise_rng,
            cfg.normalize_rewards.then_some(&mut scaler),
            cfg,
        );
        buf.normalize_advantages();
        env_steps += cfg.steps_per_update();
        let lr = if cfg.lr_decay {
            cfg.lr * (1.0 - update as f64 / n_updates as f64)
        } else {
            cfg.lr
        };
        let us = ppo_update(&mut net, &buf, cfg, lr, &mut state);
        let secs = t0.elapsed().as_secs_f64();
        let row = CurveRow {
            update,
            env_steps,
            mean_return: rs.mean_return,
            mean_abs_beta: rs.mean_abs_beta,
            rmse_proxy: rs.rmse,
            steps_per_sec: if secs > 0.0 {
                cfg.steps_per_update() as f64 / secs
            } else {
                f64::NAN
            },
            mean_step_reward: rs.mean_reward,
            episodes: rs.episodes,
            failures: rs.failures,
            reward_terms: rs.reward_terms,
            update_stats: us,
        };
        observer.on_update(&row);
        curve.rows.push(row);
        if cfg.checkpoint_every > 0 && (update + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(update + 1, &net);
        }
    }
    (net, curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gae_lambda_zero_is_td0() {
        let r = [1.0, 0.5, -0.2, 0.3];
        let v = [0.1, 0.2, 0.3, 0.4, 0.5];
        let d = [false, true, false, false];
        let (adv, ret) = compute_gae(&r, &v, &d, 1, 0.9, 0.0);
        for t in 0..4 {
            let live = if d[t] { 0.0 } else { 1.0 };
            assert_eq!(adv[t], r[t] + 0.9 * v[t + 1] * live - v[t]);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
    }

    #[test]
    fn gae_gamma_zero() {
        let r = [1.0, 0.5, -0.2];
        let v = [0.1, 0.2, 0.3, 0.4];
        let (adv, _) = compute_gae(&r, &v, &[false; 3], 1, 0.0, 0.95);
        for t in 0..3 {
            assert_eq!(adv[t], r[t] - v[t]);
        }
    }

    #[test]
    fn advantage_normalization() {
        let mut buf = RolloutBuffer::new(10, 3, 2);
        buf.advantages = Array1::from_iter((0..30).map(|i| (i as f64 * 1.7).sin() * 5.0 + 2.0));
        buf.normalize_advantages();
        let n = 30.0;
        let mean = buf.advantages.sum() / n;
        let std = (buf.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    fn tiny_buffer(net: &PolicyNet, adv: f64) -> RolloutBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut buf = RolloutBuffer::new(1, 1, net.obs_dim());
        let obs: Vec<f64> = (0..net.obs_dim()).map(|i| (i as f64 * 0.1).sin()).collect();
        buf.obs.row_mut(0).assign(&Array1::from(obs.clone()));
        let (_, u, _) = net.sample_action(&obs, &mut rng);
        let mean = net.actor_mean(buf.obs.view());
        buf.actions.row_mut(0).assign(&Array1::from(u.to_vec()));
        buf.log_probs[0] = crate::nn::gaussian_log_prob(&u, mean.row(0).as_slice().unwrap(), net.log_std());
        buf.advantages[0] = adv;
        buf.returns[0] = 0.0;
        buf
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::init(56, -0.5, &mut rng);
        let before = net.params.clone();
        let buf = tiny_buffer(&net, 1.0);
        let cfg = TrainerConfig::default();
        let mut st = PpoState::new(&net, 0);
        let stats = ppo_update(&mut net, &buf, &cfg, 0.0, &mut st);
        assert!(!stats.aborted);
        assert_eq!(net.params, before);
    }

    #[test]
    fn positive_advantage_raises_action_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::init(56, -0.5, &mut rng);
        let buf = tiny_buffer(&net, 1.0);
        let lp = |net: &PolicyNet| {
            let m = net.actor_mean(buf.obs.view());
            crate::nn::gaussian_log_prob(
                buf.actions.row(0).as_slice().unwrap(),
                m.row(0).as_slice().unwrap(),
                net.log_std(),
            )
        };
        let before = lp(&net);
        let cfg = TrainerConfig {
            epochs_per_update: 1,
            entropy_coef: 0.0,
            ..Default::default()
        };
        let mut st = PpoState::new(&net, 0);
        ppo_update(&mut net, &buf, &cfg, 1e-3, &mut st);
        assert!(lp(&net) > before);
    }

    #[test]
    fn unchanged_policy_has_no_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::init(56, -0.5, &mut rng);
        let buf = tiny_buffer(&net, 0.7);
        let mb = Minibatch::gather(&buf, &[0]);
        let (stats, _) = loss_and_grad(&net, &mb, LossCoefs::from(&TrainerConfig::default()));
        assert_eq!(stats.clip_fraction, 0.0);
        assert!(stats.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_rolls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::init(56, -0.5, &mut rng);
        let mut buf = tiny_buffer(&net, 1.0);
        buf.returns[0] = f64::NAN;
        let before = net.params.clone();
        let mut st = PpoState::new(&net, 0);
        let stats = ppo_update(&mut net, &buf, &TrainerConfig::default(), 1e-3, &mut st);
        assert!(stats.aborted);
        assert_eq!(net.params, before);
    }
}
