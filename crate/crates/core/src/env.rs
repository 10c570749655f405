//! Batched drifting environment: observations, rewards, episode lifecycle and
//! domain randomization over `N` independent car instances.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, wheel_kinematics, ControlInput, Disturbance, TireParams, VehicleParams, VehicleState, WheelKinematics, FL,
    FR, N_WHEELS,
};
use crate::path::{self, MotionSample, RandomPathConfig, ReferencePath, TrackingErrors};
use crate::seeding;

/// Action layout: steering, then linear wheel speed commands fl, fr, rl, rr.
pub const ACTION_DIM: usize = 5;
pub const STEER_LIMIT: f64 = 0.46;
pub const WHEEL_SPEED_MIN: f64 = 1.0;
pub const WHEEL_SPEED_MAX: f64 = 7.0;

pub fn action_low() -> [f64; ACTION_DIM] {
    [
        -STEER_LIMIT,
        WHEEL_SPEED_MIN,
        WHEEL_SPEED_MIN,
        WHEEL_SPEED_MIN,
        WHEEL_SPEED_MIN,
    ]
}

pub fn action_high() -> [f64; ACTION_DIM] {
    [
        STEER_LIMIT,
        WHEEL_SPEED_MAX,
        WHEEL_SPEED_MAX,
        WHEEL_SPEED_MAX,
        WHEEL_SPEED_MAX,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub delta: f64,
    /// Linear wheel speed commands (m/s).
    pub wheel_speed: [f64; N_WHEELS],
}

impl Action {
    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            delta: a[0],
            wheel_speed: [a[1], a[2], a[3], a[4]],
        }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [
            self.delta,
            self.wheel_speed[0],
            self.wheel_speed[1],
            self.wheel_speed[2],
            self.wheel_speed[3],
        ]
    }

    /// Projects onto the admissible box. NaN components map to the lower bound.
    pub fn clamped(&self) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { lo } else { v.clamp(lo, hi) };
        Self {
            delta: fix(self.delta, -STEER_LIMIT, STEER_LIMIT),
            wheel_speed: self.wheel_speed.map(|v| fix(v, WHEEL_SPEED_MIN, WHEEL_SPEED_MAX)),
        }
    }

    pub fn to_input(&self, wheel_radius: f64) -> ControlInput {
        ControlInput {
            delta: self.delta,
            omega: self.wheel_speed.map(|v| v / wheel_radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub pos: f64,
    pub dir: f64,
    pub curv: f64,
    pub drift: f64,
    pub smooth: f64,
    pub slip: f64,
    pub speed: f64,
    pub prog: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            pos: 2.4,
            dir: 0.5,
            curv: 0.15,
            drift: 1.6,
            smooth: 0.015,
            slip: 0.005,
            speed: 0.1,
            prog: 0.2,
        }
    }
}

/// Which randomization mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomizationFlags {
    pub trajectory: bool,
    pub init_state: bool,
    pub tire: bool,
    pub disturbance: bool,
}

impl RandomizationFlags {
    pub const ALL: Self = Self {
        trajectory: true,
        init_state: true,
        tire: true,
        disturbance: true,
    };
    pub const NONE: Self = Self {
        trajectory: false,
        init_state: false,
        tire: false,
        disturbance: false,
    };
}

impl Default for RandomizationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationConfig {
    pub sigma_pos: f64,
    pub sigma_heading: f64,
    pub yaw_rate_init: Range,
    pub beta_init: Range,
    pub speed_init: Range,
    pub tire_b: Range,
    pub tire_c: Range,
    pub tire_d: Range,
    /// AR(1) coefficient of the tire-force disturbance.
    pub ar_coeff: f64,
    /// AR(1) innovation scale.
    pub ar_scale: f64,
    pub flags: RandomizationFlags,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            sigma_pos: 0.1,
            sigma_heading: 0.1,
            yaw_rate_init: Range::new(1.0, 3.0),
            beta_init: Range::new(-1.0, 1.0),
            speed_init: Range::new(0.0, 3.0),
            tire_b: Range::new(0.8, 1.0),
            tire_c: Range::new(2.0, 2.5),
            tire_d: Range::new(0.3, 0.4),
            ar_coeff: 0.95,
            ar_scale: 0.1,
            flags: RandomizationFlags::ALL,
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [
            ("yaw_rate_init", self.yaw_rate_init),
            ("beta_init", self.beta_init),
            ("speed_init", self.speed_init),
            ("tire_b", self.tire_b),
            ("tire_c", self.tire_c),
            ("tire_d", self.tire_d),
        ] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(format!(
                    "randomization.{name}: range [{}, {}] is not ordered",
                    r.lo, r.hi
                ));
            }
        }
        for (name, r) in [
            ("tire_b", self.tire_b),
            ("tire_c", self.tire_c),
            ("tire_d", self.tire_d),
        ] {
            if r.lo <= 0.0 {
                return Err(format!("randomization.{name}: tire coefficients must be positive"));
            }
        }
        if self.speed_init.lo < 0.0 || self.yaw_rate_init.lo < 0.0 {
            return Err("randomization: speed and yaw-rate magnitudes must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(format!(
                "randomization.ar_coeff must be in [0, 1), got {}",
                self.ar_coeff
            ));
        }
        if !(self.ar_scale >= 0.0 && self.sigma_pos >= 0.0 && self.sigma_heading >= 0.0) {
            return Err("randomization: scales must be non-negative".into());
        }
        Ok(())
    }

    fn nominal_tires(&self) -> TireParams {
        TireParams {
            b: self.tire_b.mid(),
            c: self.tire_c.mid(),
            d: self.tire_d.mid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub off_track_limit: f64,
    pub n_preview: usize,
    pub preview_spacing: f64,
    /// Per-step progress that earns the full progress reward (m).
    pub prog_cap: f64,
    /// Reward added on off-track or divergence termination.
    pub terminal_penalty: f64,
    /// Bound on `|e_kappa|` in observations and reward. The vehicle curvature
    /// is singular near standstill, where the sideslip rate is meaningless.
    pub kappa_error_limit: f64,
    /// Apply [`scale_observation`] to every observation.
    pub scale_observations: bool,
    pub weights: RewardWeights,
    pub randomization: RandomizationConfig,
    pub random_paths: RandomPathConfig,
    /// Number of pre-generated random paths drawn from at reset.
    pub path_pool_size: usize,
    /// Always start at `s = 0` (evaluation mode).
    pub start_at_path_start: bool,
    /// Speed along the tangent when the initial state is not randomized,
    /// with the yaw rate of the local curvature and zero sideslip.
    pub start_speed: f64,
    /// End episodes as `Completed` after one full lap of a closed path.
    pub complete_closed_paths: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: dynamics::DEFAULT_DT,
            max_steps: 1500,
            off_track_limit: 1.0,
            n_preview: 10,
            preview_spacing: 0.1,
            prog_cap: 0.03,
            terminal_penalty: 100.0,
            kappa_error_limit: 5.0,
            scale_observations: false,
            weights: RewardWeights::default(),
            randomization: RandomizationConfig::default(),
            random_paths: RandomPathConfig::default(),
            path_pool_size: 256,
            start_at_path_start: false,
            start_speed: 0.0,
            complete_closed_paths: false,
        }
    }
}

impl EnvConfig {
    pub fn obs_dim(&self) -> usize {
        obs_dim(self.n_preview)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(format!("env.dt must be positive, got {}", self.dt));
        }
        if self.n_preview == 0 {
            return Err("env.n_preview must be at least 1".into());
        }
        if !(self.prog_cap > 0.0
            && self.off_track_limit > 0.0
            && self.preview_spacing > 0.0
            && self.kappa_error_limit > 0.0)
        {
            return Err(
                "env: prog_cap, off_track_limit, preview_spacing and kappa_error_limit must be positive".into(),
            );
        }
        if !(self.start_speed >= 0.0 && self.start_speed.is_finite()) {
            return Err(format!(
                "env.start_speed must be non-negative, got {}",
                self.start_speed
            ));
        }
        if self.max_steps == 0 || self.path_pool_size == 0 {
            return Err("env: max_steps and path_pool_size must be positive".into());
        }
        for (name, w) in [
            ("pos", self.weights.pos),
            ("dir", self.weights.dir),
            ("curv", self.weights.curv),
            ("drift", self.weights.drift),
            ("smooth", self.weights.smooth),
            ("slip", self.weights.slip),
            ("speed", self.weights.speed),
            ("prog", self.weights.prog),
        ] {
            if !(w >= 0.0) {
                return Err(format!("reward.{name} must be non-negative"));
            }
        }
        self.randomization.validate()?;
        self.random_paths.validate().map_err(|e| e.to_string())
    }
}

/// Observation length for `n_preview` preview points.
pub fn obs_dim(n_preview: usize) -> usize {
    4 * n_preview + 4 + 3 + 4 + 5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    #[default]
    Running,
    OffTrack,
    Diverged,
    MaxSteps,
    /// Reached the end of an open path, or finished a lap in evaluation mode.
    Completed,
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        matches!(self, Self::OffTrack | Self::Diverged)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::OffTrack => "off_track",
            Self::Diverged => "diverged",
            Self::MaxSteps => "max_steps",
            Self::Completed => "completed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub step_count: usize,
    pub termination: Termination,
    pub progress_s: f64,
}

/// AR(1) update of every disturbance component. The latent process is not
/// clipped; [`Disturbance::clipped`] is applied where it acts on the forces,
/// so the latent stationary std stays `w / sqrt(1 - a^2)`.
pub fn disturbance_step<R: Rng>(d: &Disturbance, a: f64, w: f64, rng: &mut R) -> Disturbance {
    let mut out = *d;
    for v in out.0.iter_mut() {
        let eps: f64 = StandardNormal.sample(rng);
        *v = a * *v + w * eps;
    }
    out
}

/// Per-term reward values (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub pos: f64,
    pub dir: f64,
    pub curv: f64,
    pub drift: f64,
    pub smooth: f64,
    pub slip: f64,
    pub speed: f64,
    pub prog: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const COLUMNS: [&'static str; 9] = [
        "r_pos", "r_dir", "r_curv", "r_drift", "r_smooth", "r_slip", "r_speed", "r_prog", "reward",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.pos,
            self.dir,
            self.curv,
            self.drift,
            self.smooth,
            self.slip,
            self.speed,
            self.prog,
            self.total,
        ]
    }
}

/// Inputs of the reward for one transition.
#[derive(Debug, Clone, Copy)]
pub struct RewardInputs<'a> {
    pub errors: &'a TrackingErrors,
    pub input: &'a ControlInput,
    pub prev_input: &'a ControlInput,
    pub kin: &'a WheelKinematics,
    pub wheel_radius: f64,
    pub speed: f64,
    pub progress: f64,
}

pub fn reward(r: RewardInputs<'_>, weights: &RewardWeights, prog_cap: f64) -> RewardBreakdown {
    let e = r.errors;
    let pos = -e.e_pos * e.e_pos;
    let dir = -e.e_dir * e.e_dir;
    let curv = -e.e_kappa * e.e_kappa;
    let drift = -e.e_beta * e.e_beta;
    let d_delta = r.input.delta - r.prev_input.delta;
    let d_omega: f64 = (0..N_WHEELS)
        .map(|w| (r.input.omega[w] - r.prev_input.omega[w]).powi(2))
        .sum();
    let smooth = -d_delta * d_delta - 1e-4 * d_omega;
    let slip = -[FL, FR]
        .iter()
        .map(|&w| (r.kin[w].vx - r.kin[w].omega * r.wheel_radius).powi(2))
        .sum::<f64>();
    let speed = (r.speed - 0.5).min(0.0);
    let prog = r.progress.clamp(0.0, prog_cap) / prog_cap;
    let total = weights.pos * pos
        + weights.dir * dir
        + weights.curv * curv
        + weights.drift * drift
        + weights.smooth * smooth
        + weights.slip * slip
        + weights.speed * speed
        + weights.prog * prog;
    RewardBreakdown {
        pos,
        dir,
        curv,
        drift,
        smooth,
        slip,
        speed,
        prog,
        total,
    }
}

/// Maps an observation from [`observe_into`] to roughly unit scale with fixed
/// physical constants: curvature error by its limit, rates and speeds by
/// 5 rad/s and 3 m/s, steering by its limit, wheel speeds centred on the
/// middle of their range. Preview and angle entries are left as they are.
pub fn scale_observation(out: &mut [f64], n_preview: usize, kappa_error_limit: f64) {
    let k = 4 * n_preview;
    out[k + 2] /= kappa_error_limit;
    out[k + 4] /= 5.0;
    out[k + 6] /= 3.0;
    for v in &mut out[k + 7..k + 11] {
        *v /= 3.0;
    }
    out[k + 11] /= STEER_LIMIT;
    let mid = 0.5 * (WHEEL_SPEED_MIN + WHEEL_SPEED_MAX);
    let half = 0.5 * (WHEEL_SPEED_MAX - WHEEL_SPEED_MIN);
    for v in &mut out[k + 12..k + 16] {
        *v = (*v - mid) / half;
    }
}

/// Writes the observation vector for one car into `out`
/// (length [`obs_dim`]`(n_preview)`).
#[allow(clippy::too_many_arguments)]
pub fn observe_into(
    state: &VehicleState,
    prev: &Action,
    errors: &TrackingErrors,
    beta: f64,
    params: &VehicleParams,
    path: &ReferencePath,
    n_preview: usize,
    spacing: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), obs_dim(n_preview));
    let (sp, cp) = state.psi.sin_cos();
    let mut k = 0;
    for j in 1..=n_preview {
        let w = path.sample(errors.s_proj + j as f64 * spacing);
        let (dx, dy) = (w.x - state.x, w.y - state.y);
        out[k] = cp * dx + sp * dy;
        out[k + 1] = -sp * dx + cp * dy;
        out[k + 2] = dynamics::wrap_angle(w.theta - state.psi);
        out[k + 3] = w.beta_ref;
        k += 4;
    }
    out[k..k + 4].copy_from_slice(&[errors.e_pos, errors.e_dir, errors.e_kappa, errors.e_beta]);
    k += 4;
    out[k..k + 3].copy_from_slice(&[state.psidot, beta, state.speed()]);
    k += 3;
    let kin = wheel_kinematics(state, &prev.to_input(params.wheel_radius), params);
    for w in 0..N_WHEELS {
        out[k + w] = kin[w].vx;
    }
    k += 4;
    out[k..k + 5].copy_from_slice(&prev.to_array());
}

/// Where reset draws its reference path from.
#[derive(Debug, Clone)]
pub struct PathSource {
    paths: Vec<Arc<ReferencePath>>,
    ids: Vec<String>,
}

impl PathSource {
    pub fn single(id: impl Into<String>, path: ReferencePath) -> Self {
        Self {
            paths: vec![Arc::new(path)],
            ids: vec![id.into()],
        }
    }

    pub fn from_paths(entries: Vec<(String, Arc<ReferencePath>)>) -> Self {
        assert!(!entries.is_empty(), "path source needs at least one path");
        let (ids, paths) = entries.into_iter().unzip();
        Self { paths, ids }
    }

    /// Pool of random paths, path `k` generated from
    /// `derive_seed(seed, STREAM_PATH_POOL, k)`.
    pub fn random_pool(seed: u64, cfg: &RandomPathConfig, size: usize) -> Result<Self, path::PathError> {
        let paths: Result<Vec<_>, _> = (0..size as u64)
            .into_par_iter()
            .map(|k| path::gen_random_path(seeding::derive_seed(seed, seeding::STREAM_PATH_POOL, k), cfg).map(Arc::new))
            .collect();
        Ok(Self {
            paths: paths?,
            ids: (0..size).map(|k| format!("random-{k}")).collect(),
        })
    }

    /// The reference-path families at `radius`: figure-eight first, then the
    /// circle in both directions, the variable-curvature track and the rings.
    /// Without trajectory randomization resets use the figure-eight only.
    pub fn families(radius: f64) -> Result<Self, path::PathError> {
        let entries = [
            ("eight", path::gen_eight(radius)?),
            ("circle", path::gen_circle(radius, 1)?),
            ("circle-cw", path::gen_circle(radius, -1)?),
            ("variable", path::gen_variable_curvature()?),
            ("rings", path::gen_rings(radius)?),
        ];
        Ok(Self::from_paths(
            entries
                .into_iter()
                .map(|(id, p)| (id.to_string(), Arc::new(p)))
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn path(&self, i: usize) -> &Arc<ReferencePath> {
        &self.paths[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub instance: usize,
    pub episode: u64,
    pub seed: u64,
    pub path_id: String,
    pub termination: Termination,
    pub steps: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub mean_abs_beta: f64,
    pub rmse: f64,
    pub progress: f64,
}

#[derive(Debug, Clone)]
struct Instance {
    state: VehicleState,
    prev_action: Action,
    tires: TireParams,
    disturbance: Disturbance,
    path: usize,
    errors: TrackingErrors,
    prev_beta: f64,
    status: EpisodeStatus,
    rng: ChaCha8Rng,
    seed: u64,
    episode: u64,
    ret: f64,
    sum_sq_pos: f64,
    sum_abs_beta: f64,
}

/// Everything `reset` decides for a new episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetDraw {
    pub path: usize,
    pub s: f64,
    pub state: VehicleState,
    pub tires: TireParams,
    pub disturbance: Disturbance,
    pub status: EpisodeStatus,
}

/// Samples a fresh episode start.
pub fn reset_draw<R: Rng>(sources: &PathSource, cfg: &EnvConfig, rng: &mut R) -> ResetDraw {
    let rc = &cfg.randomization;
    let path_idx = if rc.flags.trajectory && sources.len() > 1 {
        rng.random_range(0..sources.len())
    } else {
        0
    };
    let p = sources.path(path_idx);
    let s = if cfg.start_at_path_start || !rc.flags.init_state {
        0.0
    } else if p.is_closed() {
        rng.random_range(0.0..p.total_length())
    } else {
        let last = p.waypoints().last().map_or(0.0, |w| w.s);
        let hi = (last - 3.0).max(0.0);
        if hi > 0.0 {
            rng.random_range(0.0..hi)
        } else {
            0.0
        }
    };
    let w = p.sample(s);
    let state = if rc.flags.init_state {
        let pos = Normal::new(0.0, rc.sigma_pos).expect("sigma_pos validated");
        let head = Normal::new(0.0, rc.sigma_heading).expect("sigma_heading validated");
        let dx: f64 = pos.sample(rng);
        let dy: f64 = pos.sample(rng);
        let dpsi: f64 = head.sample(rng);
        let speed = rc.speed_init.sample(rng);
        let beta_mag = Range::new(0.0, rc.beta_init.hi.abs().max(rc.beta_init.lo.abs())).sample(rng);
        let r_mag = rc.yaw_rate_init.sample(rng);
        let coin = |rng: &mut R| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let beta_sign = if w.beta_ref != 0.0 {
            w.beta_ref.signum()
        } else {
            coin(rng)
        };
        let r_sign = if w.kappa != 0.0 { w.kappa.signum() } else { coin(rng) };
        let beta = (beta_sign * beta_mag).clamp(rc.beta_init.lo, rc.beta_init.hi);
        // The velocity, not the body, is aligned with the tangent.
        let psi = w.theta - beta + dpsi;
        VehicleState::from_pose_and_motion(w.x + dx, w.y + dy, psi, r_sign * r_mag, beta, speed)
    } else {
        let v = cfg.start_speed;
        VehicleState::from_pose_and_motion(w.x, w.y, w.theta, w.kappa * v, 0.0, v)
    };
    let tires = if rc.flags.tire {
        TireParams {
            b: rc.tire_b.sample(rng),
            c: rc.tire_c.sample(rng),
            d: rc.tire_d.sample(rng),
        }
    } else {
        rc.nominal_tires()
    };
    ResetDraw {
        path: path_idx,
        s,
        state,
        tires,
        disturbance: Disturbance::zero(),
        status: EpisodeStatus::default(),
    }
}

/// Output buffers of [`DriftEnv::step`], reused across steps.
#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    /// Observations after auto-reset, `n × obs_dim` row-major.
    pub obs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub terminations: Vec<Termination>,
    pub breakdowns: Vec<RewardBreakdown>,
    /// Episodes that ended during this step.
    pub finished: Vec<EpisodeSummary>,
    /// Per-instance `|beta|` and lateral error of the step (for logging).
    pub abs_beta: Vec<f64>,
    pub e_pos: Vec<f64>,
}

/// Per-instance snapshot for tracing, taken before any auto-reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceView {
    pub state: VehicleState,
    pub input: ControlInput,
    pub errors: TrackingErrors,
    pub beta: f64,
    pub status: EpisodeStatus,
}

const ENV_CHUNK: usize = 64;

// Borrows only the read-only fields so `instances` stays free for mutation.
macro_rules! ctx {
    ($env:expr) => {
        Ctx {
            cfg: &$env.cfg,
            params: &$env.params,
            paths: &$env.paths,
            obs_dim: $env.obs_dim,
        }
    };
}

pub struct DriftEnv {
    cfg: EnvConfig,
    params: VehicleParams,
    paths: PathSource,
    instances: Vec<Instance>,
    obs_dim: usize,
    auto_reset: bool,
    last_views: Vec<InstanceView>,
}

impl DriftEnv {
    /// `n` instances, instance `i` seeded with
    /// `derive_seed(seed, STREAM_ENV_INSTANCE, i)`. All instances start reset.
    pub fn new(cfg: EnvConfig, params: VehicleParams, paths: PathSource, n: usize, seed: u64) -> Self {
        let seeds: Vec<u64> = (0..n as u64)
            .map(|i| seeding::derive_seed(seed, seeding::STREAM_ENV_INSTANCE, i))
            .collect();
        Self::with_instance_seeds(cfg, params, paths, &seeds)
    }

    /// One instance per explicit seed.
    pub fn with_instance_seeds(cfg: EnvConfig, params: VehicleParams, paths: PathSource, seeds: &[u64]) -> Self {
        use rand::SeedableRng;
        let obs_dim = cfg.obs_dim();
        let instances = seeds
            .iter()
            .map(|&seed| Instance {
                state: VehicleState::default(),
                prev_action: Action::default(),
                tires: TireParams::default(),
                disturbance: Disturbance::zero(),
                path: 0,
                errors: TrackingErrors::default(),
                prev_beta: 0.0,
                status: EpisodeStatus::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                seed,
                episode: 0,
                ret: 0.0,
                sum_sq_pos: 0.0,
                sum_abs_beta: 0.0,
            })
            .collect();
        let mut env = Self {
            cfg,
            params,
            paths,
            instances,
            obs_dim,
            auto_reset: true,
            last_views: Vec::new(),
        };
        let ctx = ctx!(env);
        for inst in env.instances.iter_mut() {
            ctx.reset(inst);
        }
        env
    }

    /// When disabled, finished instances stay frozen until [`Self::reset_instance`].
    pub fn set_auto_reset(&mut self, on: bool) {
        self.auto_reset = on;
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn paths(&self) -> &PathSource {
        &self.paths
    }

    pub fn n_envs(&self) -> usize {
        self.instances.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn state(&self, i: usize) -> &VehicleState {
        &self.instances[i].state
    }

    pub fn status(&self, i: usize) -> EpisodeStatus {
        self.instances[i].status
    }

    pub fn errors(&self, i: usize) -> TrackingErrors {
        self.instances[i].errors
    }

    pub fn tires(&self, i: usize) -> TireParams {
        self.instances[i].tires
    }

    pub fn disturbance(&self, i: usize) -> Disturbance {
        self.instances[i].disturbance
    }

    pub fn path_index(&self, i: usize) -> usize {
        self.instances[i].path
    }

    /// Snapshots taken during the last step, before auto-reset.
    pub fn last_views(&self) -> &[InstanceView] {
        &self.last_views
    }

    /// Overrides the physical state of one instance (re-projecting it).
    pub fn set_state(&mut self, i: usize, state: VehicleState) {
        let ctx = ctx!(self);
        let inst = &mut self.instances[i];
        inst.state = state;
        inst.prev_beta = state.sideslip();
        let hint = inst.errors.index;
        ctx.reproject(inst, hint);
    }

    pub fn set_tires(&mut self, i: usize, tires: TireParams) {
        self.instances[i].tires = tires;
    }

    pub fn reset_instance(&mut self, i: usize) {
        let ctx = ctx!(self);
        ctx.reset(&mut self.instances[i]);
    }

    /// Current observations, `n × obs_dim`.
    pub fn observations(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.instances.len() * self.obs_dim];
        let ctx = ctx!(self);
        out.par_chunks_mut(self.obs_dim)
            .zip(self.instances.par_iter())
            .for_each(|(o, inst)| ctx.observe(inst, o));
        out
    }

    /// Advances every instance by one control step. `actions` is
    /// `n × ACTION_DIM` row-major and is clamped to the action box.
    pub fn step(&mut self, actions: &[f64], out: &mut StepOutput) {
        let n = self.instances.len();
        assert_eq!(actions.len(), n * ACTION_DIM, "action buffer size");
        out.obs.resize(n * self.obs_dim, 0.0);
        out.rewards.resize(n, 0.0);
        out.dones.resize(n, false);
        out.terminations.resize(n, Termination::Running);
        out.breakdowns.resize(n, RewardBreakdown::default());
        self.last_views.resize(
            n,
            InstanceView {
                state: VehicleState::default(),
                input: ControlInput::default(),
                errors: TrackingErrors::default(),
                beta: 0.0,
                status: EpisodeStatus::default(),
            },
        );
        let obs_dim = self.obs_dim;
        let auto_reset = self.auto_reset;
        let ctx = ctx!(self);
        let finished: Vec<Option<EpisodeSummary>> = self
            .instances
            .par_chunks_mut(ENV_CHUNK)
            .zip(actions.par_chunks(ENV_CHUNK * ACTION_DIM))
            .zip(out.obs.par_chunks_mut(ENV_CHUNK * obs_dim))
            .zip(out.rewards.par_chunks_mut(ENV_CHUNK))
            .zip(out.dones.par_chunks_mut(ENV_CHUNK))
            .zip(out.terminations.par_chunks_mut(ENV_CHUNK))
            .zip(out.breakdowns.par_chunks_mut(ENV_CHUNK))
            .zip(self.last_views.par_chunks_mut(ENV_CHUNK))
            .enumerate()
            .flat_map_iter(|(c, (((((((insts, acts), obs), rews), dones), terms), bds), views))| {
                let mut fin = Vec::with_capacity(insts.len());
                for (k, inst) in insts.iter_mut().enumerate() {
                    if !auto_reset && inst.status.termination != Termination::Running {
                        // Finished and held until an explicit reset.
                        rews[k] = 0.0;
                        bds[k] = RewardBreakdown::default();
                        terms[k] = inst.status.termination;
                        dones[k] = true;
                        ctx.observe(inst, &mut obs[k * obs_dim..(k + 1) * obs_dim]);
                        fin.push(None);
                        continue;
                    }
                    let a = Action::from_slice(&acts[k * ACTION_DIM..(k + 1) * ACTION_DIM]);
                    let (bd, view) = ctx.advance(inst, a);
                    rews[k] = bd.total;
                    bds[k] = bd;
                    terms[k] = inst.status.termination;
                    views[k] = view;
                    let done = inst.status.termination != Termination::Running;
                    dones[k] = done;
                    let mut summary = None;
                    if done {
                        summary = Some(ctx.summary(c * ENV_CHUNK + k, inst));
                        if auto_reset {
                            ctx.reset(inst);
                        }
                    }
                    ctx.observe(inst, &mut obs[k * obs_dim..(k + 1) * obs_dim]);
                    fin.push(summary);
                }
                fin
            })
            .collect();
        out.finished.clear();
        out.finished.extend(finished.into_iter().flatten());
    }
}

struct Ctx<'a> {
    cfg: &'a EnvConfig,
    params: &'a VehicleParams,
    paths: &'a PathSource,
    obs_dim: usize,
}

impl Ctx<'_> {
    fn reset(&self, inst: &mut Instance) {
        let draw = reset_draw(self.paths, self.cfg, &mut inst.rng);
        inst.state = draw.state;
        inst.tires = draw.tires;
        inst.disturbance = draw.disturbance;
        inst.path = draw.path;
        inst.status = draw.status;
        let cruise = draw.state.speed().clamp(WHEEL_SPEED_MIN, WHEEL_SPEED_MAX);
        inst.prev_action = Action {
            delta: 0.0,
            wheel_speed: [cruise; N_WHEELS],
        };
        inst.prev_beta = draw.state.sideslip();
        inst.ret = 0.0;
        inst.sum_sq_pos = 0.0;
        inst.sum_abs_beta = 0.0;
        inst.episode += 1;
        let hint = self.paths.path(draw.path).index_at(draw.s);
        self.reproject(inst, hint);
    }

    fn reproject(&self, inst: &mut Instance, hint: usize) {
        let p = self.paths.path(inst.path);
        let motion = MotionSample {
            beta: inst.state.sideslip(),
            beta_rate: 0.0,
        };
        inst.errors = path::project(&inst.state, motion, p, hint).expect("paths are nonempty");
        let lim = self.cfg.kappa_error_limit;
        inst.errors.e_kappa = inst.errors.e_kappa.clamp(-lim, lim);
    }

    fn observe(&self, inst: &Instance, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.obs_dim);
        if !inst.state.is_finite() {
            out.fill(0.0);
            return;
        }
        observe_into(
            &inst.state,
            &inst.prev_action,
            &inst.errors,
            inst.state.sideslip(),
            self.params,
            self.paths.path(inst.path),
            self.cfg.n_preview,
            self.cfg.preview_spacing,
            out,
        );
        if self.cfg.scale_observations {
            scale_observation(out, self.cfg.n_preview, self.cfg.kappa_error_limit);
        }
    }

    fn advance(&self, inst: &mut Instance, action: Action) -> (RewardBreakdown, InstanceView) {
        let cfg = self.cfg;
        let rc = &cfg.randomization;
        let action = action.clamped();
        let input = action.to_input(self.params.wheel_radius);
        let prev_input = inst.prev_action.to_input(self.params.wheel_radius);
        if rc.flags.disturbance {
            inst.disturbance = disturbance_step(&inst.disturbance, rc.ar_coeff, rc.ar_scale, &mut inst.rng);
        }
        let applied = inst.disturbance.clipped();
        let next = dynamics::step(&inst.state, &input, self.params, &inst.tires, &applied, cfg.dt);
        inst.status.step_count += 1;
        inst.prev_action = action;
        let mut bd = RewardBreakdown::default();
        if !next.is_finite() {
            inst.state = next;
            inst.status.termination = Termination::Diverged;
            bd.total = -cfg.terminal_penalty;
            inst.ret += bd.total;
            let view = InstanceView {
                state: next,
                input,
                errors: inst.errors,
                beta: f64::NAN,
                status: inst.status,
            };
            return (bd, view);
        }
        let p = self.paths.path(inst.path);
        let motion = MotionSample::of(&next, inst.prev_beta, cfg.dt);
        let old_s = inst.errors.s_proj;
        let mut errors = match path::project(&next, motion, p, inst.errors.index) {
            Ok(e) => e,
            Err(_) => {
                inst.status.termination = Termination::Diverged;
                return (bd, self.view(inst, input, motion.beta));
            }
        };
        errors.e_kappa = errors.e_kappa.clamp(-cfg.kappa_error_limit, cfg.kappa_error_limit);
        let ds = p.progress(old_s, errors.s_proj);
        inst.state = next;
        inst.errors = errors;
        inst.prev_beta = motion.beta;
        inst.status.progress_s += ds;
        let kin = wheel_kinematics(&next, &input, self.params);
        bd = reward(
            RewardInputs {
                errors: &errors,
                input: &input,
                prev_input: &prev_input,
                kin: &kin,
                wheel_radius: self.params.wheel_radius,
                speed: next.speed(),
                progress: ds,
            },
            &cfg.weights,
            cfg.prog_cap,
        );
        inst.sum_sq_pos += errors.e_pos * errors.e_pos;
        inst.sum_abs_beta += motion.beta.abs();

        let end_s = p.waypoints().last().map_or(0.0, |w| w.s);
        inst.status.termination = if errors.e_pos.abs() > cfg.off_track_limit {
            Termination::OffTrack
        } else if (!p.is_closed() && errors.s_proj >= end_s - 1e-9)
            || (p.is_closed() && cfg.complete_closed_paths && inst.status.progress_s >= p.total_length())
        {
            Termination::Completed
        } else if inst.status.step_count >= cfg.max_steps {
            Termination::MaxSteps
        } else {
            Termination::Running
        };
        if inst.status.termination.is_failure() {
            bd.total -= cfg.terminal_penalty;
        }
        inst.ret += bd.total;
        (bd, self.view(inst, input, motion.beta))
    }

    fn view(&self, inst: &Instance, input: ControlInput, beta: f64) -> InstanceView {
        InstanceView {
            state: inst.state,
            input,
            errors: inst.errors,
            beta,
            status: inst.status,
        }
    }

    fn summary(&self, index: usize, inst: &Instance) -> EpisodeSummary {
        let n = inst.status.step_count.max(1) as f64;
        EpisodeSummary {
            instance: index,
            episode: inst.episode,
            seed: inst.seed,
            path_id: self.paths.id(inst.path).to_string(),
            termination: inst.status.termination,
            steps: inst.status.step_count,
            episode_return: inst.ret,
            mean_abs_beta: inst.sum_abs_beta / n,
            rmse: (inst.sum_sq_pos / n).sqrt(),
            progress: inst.status.progress_s,
        }
    }
}
