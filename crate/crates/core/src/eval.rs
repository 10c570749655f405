//! Deterministic policy evaluation: tracking statistics, success rates,
//! drift-equilibrium detection, the randomization ablation protocol, and
//! CSV/SVG exports of the resulting traces.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, VehicleParams, VehicleState};
use crate::env::{
    DriftEnv, EnvConfig, PathSource, RandomizationConfig, RandomizationFlags, Range, RewardBreakdown, StepOutput,
    Termination, ACTION_DIM,
};
use crate::nn::PolicyNet;
use crate::path::{ReferencePath, TrackingErrors};
use crate::ppo::deterministic_actions;
use crate::seeding;

/// Length of the trailing window examined for a steady state (s).
pub const EQUILIBRIUM_WINDOW: f64 = 2.0;
/// Maximum standard deviation of each signal relative to its mean magnitude.
pub const EQUILIBRIUM_REL_STD: f64 = 0.05;
/// Minimum mean speed used to derive the evaluation step cap (m/s).
pub const EVAL_MIN_SPEED: f64 = 0.5;
/// Paths whose local `|kappa|` exceeds this count as curved.
pub const CURVED_KAPPA: f64 = 0.05;

/// Steady drift state `(r, beta, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub r: f64,
    pub beta: f64,
    pub v: f64,
}

/// One recorded control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    pub beta: f64,
    pub errors: TrackingErrors,
    pub kappa: f64,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub dt: f64,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_COLUMNS: [&str; 15] = [
    "t", "x", "y", "psi", "xdot", "ydot", "psidot", "delta", "omega_fl", "omega_fr", "omega_rl", "omega_rr", "beta",
    "V", "r",
];

pub const TRACE_ERROR_COLUMNS: [&str; 5] = ["e_pos", "e_dir", "e_kappa", "e_beta", "s_proj"];

impl Trace {
    /// Synthetic trace carrying only yaw rate, sideslip and speed samples.
    pub fn from_phase(dt: f64, samples: &[(f64, f64, f64)]) -> Self {
        let rows = samples
            .iter()
            .enumerate()
            .map(|(k, &(r, beta, v))| TraceRow {
                t: k as f64 * dt,
                state: VehicleState::from_pose_and_motion(0.0, 0.0, 0.0, r, beta, v),
                input: ControlInput::default(),
                beta,
                errors: TrackingErrors::default(),
                kappa: 0.0,
                reward: RewardBreakdown::default(),
            })
            .collect();
        Self { dt, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Root mean square of the lateral error; 0 for an empty trace.
    pub fn rmse(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        (self.rows.iter().map(|r| r.errors.e_pos * r.errors.e_pos).sum::<f64>() / self.rows.len() as f64).sqrt()
    }

    pub fn mean_abs_beta(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.beta.abs()))
    }

    /// Mean `|beta|` over steps projected onto curved path sections.
    pub fn mean_abs_beta_curved(&self) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| r.kappa.abs() > CURVED_KAPPA)
                .map(|r| r.beta.abs()),
        )
    }

    pub fn mean_speed(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.state.speed()))
    }

    /// State trace CSV: the dynamics columns, tracking errors, then reward terms.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = TRACE_COLUMNS
            .iter()
            .chain(TRACE_ERROR_COLUMNS.iter())
            .chain(RewardBreakdown::COLUMNS.iter())
            .copied()
            .collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for r in &self.rows {
            let st = &r.state;
            let mut vals = vec![
                r.t,
                st.x,
                st.y,
                st.psi,
                st.xdot,
                st.ydot,
                st.psidot,
                r.input.delta,
                r.input.omega[0],
                r.input.omega[1],
                r.input.omega[2],
                r.input.omega[3],
                r.beta,
                st.speed(),
                st.psidot,
                r.errors.e_pos,
                r.errors.e_dir,
                r.errors.e_kappa,
                r.errors.e_beta,
                r.errors.s_proj,
            ];
            vals.extend(r.reward.values());
            push_row(&mut s, &vals);
        }
        s
    }
}

fn push_row(s: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s.push('\n');
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Steady state over the trailing [`EQUILIBRIUM_WINDOW`]: the window means of
/// `(r, beta, V)` if each signal's standard deviation is below
/// [`EQUILIBRIUM_REL_STD`] of its mean magnitude.
pub fn detect_equilibrium(trace: &Trace) -> Option<Equilibrium> {
    if !(trace.dt > 0.0) {
        return None;
    }
    let n = (EQUILIBRIUM_WINDOW / trace.dt).round() as usize;
    if n == 0 || trace.rows.len() <= n {
        return None;
    }
    let window = &trace.rows[trace.rows.len() - n..];
    let stat = |f: &dyn Fn(&TraceRow) -> f64| {
        let m = window.iter().map(f).sum::<f64>() / n as f64;
        let var = window.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n as f64;
        (m, var.sqrt())
    };
    let r = stat(&|row| row.state.psidot);
    let b = stat(&|row| row.beta);
    let v = stat(&|row| row.state.speed());
    let steady = |(m, sd): (f64, f64)| sd < EQUILIBRIUM_REL_STD * m.abs();
    (steady(r) && steady(b) && steady(v)).then_some(Equilibrium {
        r: r.0,
        beta: b.0,
        v: v.0,
    })
}

/// Phase-plane CSV `(t, r, beta)` of one trace.
pub fn phase_plane_csv(trace: &Trace) -> String {
    let mut s = String::from("t,r,beta\n");
    for r in &trace.rows {
        push_row(&mut s, &[r.t, r.state.psidot, r.beta]);
    }
    s
}

/// One phase-plane CSV per trace.
pub fn phase_plane_export(traces: &[Trace]) -> Vec<String> {
    traces.iter().map(phase_plane_csv).collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let m = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean: m, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub termination: Termination,
    pub steps: usize,
    pub success: bool,
    pub rmse: f64,
    pub mean_abs_beta: f64,
    pub mean_abs_beta_curved: f64,
    pub mean_v: f64,
    pub progress: f64,
    pub equilibrium: Option<Equilibrium>,
}

impl TrialOutcome {
    pub fn from_trace(trial: usize, seed: u64, termination: Termination, progress: f64, trace: &Trace) -> Self {
        Self {
            trial,
            seed,
            termination,
            steps: trace.len(),
            success: termination == Termination::Completed,
            rmse: trace.rmse(),
            mean_abs_beta: trace.mean_abs_beta(),
            mean_abs_beta_curved: trace.mean_abs_beta_curved(),
            mean_v: trace.mean_speed(),
            progress,
            equilibrium: detect_equilibrium(trace),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub path_id: String,
    pub n_trials: usize,
    pub rmse_pos: Stat,
    pub mean_abs_beta: Stat,
    pub mean_abs_beta_curved: Stat,
    pub mean_v: Stat,
    pub success_rate: f64,
    /// Mean over the trials that settled, if any did.
    pub equilibrium: Option<Equilibrium>,
    pub trials: Vec<TrialOutcome>,
}

impl EvalReport {
    pub fn from_trials(path_id: &str, trials: Vec<TrialOutcome>) -> Self {
        let col = |f: fn(&TrialOutcome) -> f64| trials.iter().map(f).collect::<Vec<_>>();
        let n = trials.len();
        let successes = trials.iter().filter(|t| t.success).count();
        let eq: Vec<Equilibrium> = trials.iter().filter_map(|t| t.equilibrium).collect();
        let equilibrium = (!eq.is_empty()).then(|| {
            let k = eq.len() as f64;
            Equilibrium {
                r: eq.iter().map(|e| e.r).sum::<f64>() / k,
                beta: eq.iter().map(|e| e.beta).sum::<f64>() / k,
                v: eq.iter().map(|e| e.v).sum::<f64>() / k,
            }
        });
        Self {
            path_id: path_id.to_string(),
            n_trials: n,
            rmse_pos: Stat::of(&col(|t| t.rmse)),
            mean_abs_beta: Stat::of(&col(|t| t.mean_abs_beta)),
            mean_abs_beta_curved: Stat::of(&col(|t| t.mean_abs_beta_curved)),
            mean_v: Stat::of(&col(|t| t.mean_v)),
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            equilibrium,
            trials,
        }
    }
}

/// How evaluation episodes are set up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_trials: usize,
    pub seed: u64,
    /// Sample actions instead of using the mean.
    pub stochastic: bool,
    /// Step cap; `None` derives it from the path length at [`EVAL_MIN_SPEED`].
    pub max_steps: Option<usize>,
    /// End after one lap of a closed path.
    pub complete_laps: bool,
    pub randomization: RandomizationConfig,
}

impl EvalOptions {
    /// Rolling start on the path origin at the middle of the training
    /// initial-speed range; tires and disturbances randomized within the
    /// training ranges. A standing start with zero yaw rate lies outside the
    /// training reset distribution, whose yaw-rate magnitudes start at 1 rad/s.
    pub fn standard(n_trials: usize, seed: u64, training: &RandomizationConfig) -> Self {
        let mut randomization = *training;
        randomization.flags = RandomizationFlags {
            trajectory: false,
            init_state: false,
            tire: true,
            disturbance: true,
        };
        Self {
            n_trials,
            seed,
            stochastic: false,
            max_steps: None,
            complete_laps: true,
            randomization,
        }
    }

    fn env_config(&self, base: &EnvConfig, path: &ReferencePath) -> EnvConfig {
        let derived = (path.total_length() / (EVAL_MIN_SPEED * base.dt)).ceil() as usize;
        EnvConfig {
            max_steps: self.max_steps.unwrap_or(derived).max(1),
            start_at_path_start: true,
            start_speed: self.randomization.speed_init.mid(),
            complete_closed_paths: self.complete_laps,
            randomization: self.randomization,
            ..base.clone()
        }
    }
}

/// Seed of evaluation trial `trial`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seeding::derive_seed(seed, seeding::STREAM_EVAL_TRIAL, trial as u64)
}

/// Runs `opts.n_trials` independent episodes of `net` on `path` in one batch.
/// Returns the report and one trace per trial.
pub fn rollout_eval(
    net: &PolicyNet,
    base: &EnvConfig,
    params: &VehicleParams,
    path_id: &str,
    path: Arc<ReferencePath>,
    opts: &EvalOptions,
) -> (EvalReport, Vec<Trace>) {
    let n = opts.n_trials;
    if n == 0 {
        return (EvalReport::from_trials(path_id, Vec::new()), Vec::new());
    }
    let cfg = opts.env_config(base, &path);
    let dt = cfg.dt;
    let seeds: Vec<u64> = (0..n).map(|t| trial_seed(opts.seed, t)).collect();
    let sources = PathSource::from_paths(vec![(path_id.to_string(), path.clone())]);
    let mut env = DriftEnv::with_instance_seeds(cfg.clone(), *params, sources, &seeds);
    env.set_auto_reset(false);
    let od = env.obs_dim();
    let mut noise: Vec<_> = (0..n)
        .map(|t| seeding::rng_for(opts.seed, seeding::STREAM_ACTION_NOISE, t as u64))
        .collect();
    let mut traces: Vec<Trace> = (0..n).map(|_| Trace { dt, rows: Vec::new() }).collect();
    let mut terminations = vec![Termination::Running; n];
    let mut progress = vec![0.0; n];
    let mut obs = env.observations();
    let mut out = StepOutput::default();
    for step in 0..cfg.max_steps {
        let actions = if opts.stochastic {
            let mut a = Vec::with_capacity(n * ACTION_DIM);
            for (i, rng) in noise.iter_mut().enumerate() {
                a.extend(net.sample_action(&obs[i * od..(i + 1) * od], rng).0);
            }
            a
        } else {
            deterministic_actions(net, &obs, od)
        };
        env.step(&actions, &mut out);
        let views = env.last_views();
        for i in 0..n {
            if terminations[i] != Termination::Running {
                continue;
            }
            let v = &views[i];
            let kappa = path.waypoints()[v.errors.index.min(path.len() - 1)].kappa;
            traces[i].rows.push(TraceRow {
                t: (step + 1) as f64 * dt,
                state: v.state,
                input: v.input,
                beta: v.beta,
                errors: v.errors,
                kappa,
                reward: out.breakdowns[i],
            });
            if out.dones[i] {
                terminations[i] = out.terminations[i];
                progress[i] = v.status.progress_s;
            }
        }
        obs.clone_from(&out.obs);
        if terminations.iter().all(|t| *t != Termination::Running) {
            break;
        }
    }
    let trials = (0..n)
        .map(|i| TrialOutcome::from_trace(i, seeds[i], terminations[i], progress[i], &traces[i]))
        .collect();
    (EvalReport::from_trials(path_id, trials), traces)
}

/// Training configurations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationConfig {
    Full,
    NoTire,
    NoInitState,
    NoDisturbance,
    NoTrajectory,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 5] = [
        AblationConfig::Full,
        AblationConfig::NoTire,
        AblationConfig::NoInitState,
        AblationConfig::NoDisturbance,
        AblationConfig::NoTrajectory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationConfig::Full => "full",
            AblationConfig::NoTire => "no_tire",
            AblationConfig::NoInitState => "no_init_state",
            AblationConfig::NoDisturbance => "no_disturbance",
            AblationConfig::NoTrajectory => "no_trajectory",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn flags(self) -> RandomizationFlags {
        let mut f = RandomizationFlags::ALL;
        match self {
            AblationConfig::Full => {}
            AblationConfig::NoTire => f.tire = false,
            AblationConfig::NoInitState => f.init_state = false,
            AblationConfig::NoDisturbance => f.disturbance = false,
            AblationConfig::NoTrajectory => f.trajectory = false,
        }
        f
    }
}

/// Test-time conditions of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub configs: Vec<AblationConfig>,
    pub tire_b: Range,
    pub tire_c: Range,
    pub tire_d: Range,
    /// AR(1) innovation scale at test time.
    pub disturbance_scale: f64,
    pub n_trials: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            configs: AblationConfig::ALL.to_vec(),
            tire_b: Range::new(0.2, 3.0),
            tire_c: Range::new(1.5, 3.0),
            tire_d: Range::new(0.2, 0.5),
            disturbance_scale: 0.2,
            n_trials: 100,
        }
    }
}

impl AblationSpec {
    /// Test ranges must strictly contain the training ranges.
    pub fn validate(&self, training: &RandomizationConfig) -> Result<(), String> {
        let strict = |test: Range, train: Range| test.lo < train.lo && test.hi > train.hi;
        if !strict(self.tire_b, training.tire_b)
            || !strict(self.tire_c, training.tire_c)
            || !strict(self.tire_d, training.tire_d)
        {
            return Err("ablation: test tire ranges must strictly contain the training ranges".into());
        }
        if !(self.disturbance_scale > training.ar_scale) {
            return Err("ablation: test disturbance scale must exceed the training scale".into());
        }
        if self.configs.is_empty() {
            return Err("ablation: no configurations".into());
        }
        Ok(())
    }

    /// Evaluation options: perturbed starts at the path origin, wide tire
    /// ranges and stronger disturbances.
    pub fn eval_options(&self, training: &RandomizationConfig, seed: u64) -> EvalOptions {
        let mut randomization = *training;
        randomization.tire_b = self.tire_b;
        randomization.tire_c = self.tire_c;
        randomization.tire_d = self.tire_d;
        randomization.ar_scale = self.disturbance_scale;
        randomization.flags = RandomizationFlags {
            trajectory: false,
            init_state: true,
            tire: true,
            disturbance: true,
        };
        EvalOptions {
            n_trials: self.n_trials,
            seed,
            stochastic: false,
            max_steps: None,
            complete_laps: true,
            randomization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub success: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    /// Training failed; the row is recorded as zero success.
    pub failed: bool,
    pub note: String,
}

impl AblationRow {
    fn failed(config: AblationConfig, note: String) -> Self {
        Self {
            method: config.name().to_string(),
            success: 0.0,
            rmse_mean: f64::NAN,
            rmse_std: f64::NAN,
            beta_mean: f64::NAN,
            beta_std: f64::NAN,
            failed: true,
            note,
        }
    }
}

/// Seed used to train the policy of one ablation configuration.
pub fn ablation_seed(seed: u64, config: AblationConfig) -> u64 {
    let idx = AblationConfig::ALL.iter().position(|c| *c == config).unwrap_or(0);
    seeding::derive_seed(seed, seeding::STREAM_ABLATION, idx as u64)
}

/// Trains one policy per configuration with `train_fn` and evaluates each on
/// `path` under the spec's test conditions. Rows whose training fails (error
/// or non-finite parameters) get zero success and the run continues.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<F>(
    mut train_fn: F,
    spec: &AblationSpec,
    base: &EnvConfig,
    params: &VehicleParams,
    path_id: &str,
    path: Arc<ReferencePath>,
    seed: u64,
) -> Vec<AblationRow>
where
    F: FnMut(AblationConfig, u64) -> Result<PolicyNet, String>,
{
    let opts = spec.eval_options(
        &base.randomization,
        seeding::derive_seed(seed, seeding::STREAM_EVAL_TRIAL, u64::MAX),
    );
    spec.configs
        .iter()
        .map(|&config| match train_fn(config, ablation_seed(seed, config)) {
            Err(e) => AblationRow::failed(config, e),
            Ok(net) if net.params.iter().any(|p| !p.is_finite()) => {
                AblationRow::failed(config, "training diverged".to_string())
            }
            Ok(net) => {
                let (report, _) = rollout_eval(&net, base, params, path_id, path.clone(), &opts);
                AblationRow {
                    method: config.name().to_string(),
                    success: report.success_rate,
                    rmse_mean: report.rmse_pos.mean,
                    rmse_std: report.rmse_pos.std,
                    beta_mean: report.mean_abs_beta.mean,
                    beta_std: report.mean_abs_beta.std,
                    failed: false,
                    note: String::new(),
                }
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,success,rmse_mean,rmse_std,beta_mean,beta_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method, r.success, r.rmse_mean, r.rmse_std, r.beta_mean, r.beta_std
        );
    }
    s
}

const SVG_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, size: f64, margin: f64) -> Self {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmin > xmax {
            (xmin, xmax, ymin, ymax) = (-1.0, 1.0, -1.0, 1.0);
        }
        let span = (xmax - xmin).max(ymax - ymin).max(1e-9);
        let scale = (size - 2.0 * margin) / span;
        Self {
            x0: xmin - margin / scale,
            y0: ymin - margin / scale,
            scale,
            height: size,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.scale, self.height - (y - self.y0) * self.scale)
    }
}

fn polyline(s: &mut String, frame: &Frame, pts: impl Iterator<Item = (f64, f64)>, color: &str, width: f64, dash: bool) {
    let mut d = String::new();
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        let (px, py) = frame.map(x, y);
        let _ = write!(d, "{px:.2},{py:.2} ");
    }
    let dash = if dash { " stroke-dasharray=\"6,4\"" } else { "" };
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>",
        d.trim_end()
    );
}

/// Reference path (dashed) with the driven trajectories overlaid.
pub fn path_overlay_svg(path: &ReferencePath, traces: &[Trace]) -> String {
    let size = 600.0;
    let pts = path.waypoints().iter().map(|w| (w.x, w.y)).chain(
        traces
            .iter()
            .flat_map(|t| t.rows.iter().map(|r| (r.state.x, r.state.y))),
    );
    let frame = Frame::fit(pts, size, 30.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let closing = path.is_closed().then(|| path.waypoints().first()).flatten();
    polyline(
        &mut s,
        &frame,
        path.waypoints().iter().chain(closing).map(|w| (w.x, w.y)),
        "#555555",
        2.0,
        true,
    );
    for (i, t) in traces.iter().enumerate() {
        polyline(
            &mut s,
            &frame,
            t.rows.iter().map(|r| (r.state.x, r.state.y)),
            SVG_COLORS[i % SVG_COLORS.len()],
            1.5,
            false,
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Trajectories in the yaw-rate / sideslip plane with axes through the origin.
pub fn phase_plane_svg(traces: &[Trace]) -> String {
    let size = 500.0;
    let pts = traces
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| (r.beta, r.state.psidot)))
        .chain([(0.0, 0.0)]);
    let frame = Frame::fit(pts, size, 40.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let (ox, oy) = frame.map(0.0, 0.0);
    let _ = writeln!(
        s,
        "<line x1=\"0\" y1=\"{oy:.2}\" x2=\"{size}\" y2=\"{oy:.2}\" stroke=\"#999999\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ox:.2}\" y1=\"0\" x2=\"{ox:.2}\" y2=\"{size}\" stroke=\"#999999\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">beta [rad]</text>",
        size - 80.0,
        oy - 6.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"14\" font-size=\"12\">r [rad/s]</text>",
        ox + 6.0
    );
    for (i, t) in traces.iter().enumerate() {
        polyline(
            &mut s,
            &frame,
            t.rows.iter().map(|r| (r.beta, r.state.psidot)),
            SVG_COLORS[i % SVG_COLORS.len()],
            1.2,
            false,
        );
        if let Some(last) = t.rows.last() {
            let (px, py) = frame.map(last.beta, last.state.psidot);
            let _ = writeln!(s, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"black\"/>");
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_EQ: (f64, f64, f64) = (1.85, -0.85, 1.84);

    #[test]
    fn constant_trace_is_its_own_equilibrium() {
        let trace = Trace::from_phase(0.01, &vec![PAPER_EQ; 400]);
        let eq = detect_equilibrium(&trace).expect("steady");
        assert!((eq.r - 1.85).abs() < 1e-12);
        assert!((eq.beta + 0.85).abs() < 1e-12);
        assert!((eq.v - 1.84).abs() < 1e-12);
    }

    #[test]
    fn short_trace_has_no_equilibrium() {
        let trace = Trace::from_phase(0.01, &vec![PAPER_EQ; 200]);
        assert!(detect_equilibrium(&trace).is_none());
    }

    #[test]
    fn white_noise_is_not_steady() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s: Vec<_> = (0..600)
            .map(|_| {
                (
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..3.0),
                )
            })
            .collect();
        assert!(detect_equilibrium(&Trace::from_phase(0.01, &s)).is_none());
    }

    #[test]
    fn transient_then_plateau_uses_final_window() {
        let s: Vec<_> = (0..800)
            .map(|k| {
                let a = (k as f64 / 300.0).min(1.0);
                (a * 1.85, a * -0.85, 0.5 + a * 1.34)
            })
            .collect();
        let eq = detect_equilibrium(&Trace::from_phase(0.01, &s)).expect("plateau");
        assert!((eq.r - 1.85).abs() < 1e-12 && (eq.v - 1.84).abs() < 1e-12);
        // A ramp still inside the window is rejected.
        let ramp: Vec<_> = (0..800).map(|k| (k as f64 * 0.01, -0.5, 1.0)).collect();
        assert!(detect_equilibrium(&Trace::from_phase(0.01, &ramp)).is_none());
    }

    #[test]
    fn empty_report_has_no_nans() {
        let r = EvalReport::from_trials("x", Vec::new());
        assert_eq!(r.n_trials, 0);
        assert_eq!(r.success_rate, 0.0);
        assert!(r.rmse_pos.mean == 0.0 && r.equilibrium.is_none());
    }

    #[test]
    fn phase_export_of_empty_trace_is_header() {
        assert_eq!(phase_plane_csv(&Trace::default()), "t,r,beta\n");
        let t = Trace::from_phase(0.01, &[PAPER_EQ; 5]);
        let files = phase_plane_export(&[t.clone(), t.clone(), t]);
        assert_eq!(files.len(), 3);
        assert!(files.iter().all(|f| f.lines().count() == 6));
        let last = files[0].lines().last().unwrap();
        assert!(last.ends_with(",1.85,-0.85"), "{last}");
    }

    #[test]
    fn ablation_spec_contains_training_ranges() {
        let spec = AblationSpec::default();
        spec.validate(&RandomizationConfig::default()).unwrap();
        let narrow = AblationSpec {
            tire_d: Range::new(0.3, 0.5),
            ..AblationSpec::default()
        };
        assert!(narrow.validate(&RandomizationConfig::default()).is_err());
        for c in AblationConfig::ALL {
            assert_eq!(AblationConfig::parse(c.name()), Some(c));
        }
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
