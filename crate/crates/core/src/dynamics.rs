//! Planar four-wheel vehicle model with individually commanded wheel speeds.
//!
//! The state is the global pose and its time derivative. Tire forces come from
//! a combined-slip magic-formula curve scaled by the vertical load on each
//! wheel, where the vertical loads include longitudinal load transfer. The
//! model is integrated with explicit Euler.
//!
//! Wheel order everywhere is front-left, front-right, rear-left, rear-right.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Guard on the slip denominators near standstill (m/s).
pub const SLIP_SPEED_EPS: f64 = 0.1;

/// Default integration step (s).
pub const DEFAULT_DT: f64 = 0.01;

/// Number of wheels.
pub const N_WHEELS: usize = 4;

/// Wheel index helpers.
pub const FL: usize = 0;
pub const FR: usize = 1;
pub const RL: usize = 2;
pub const RR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub xdot: f64,
    pub ydot: f64,
    pub psidot: f64,
}

impl VehicleState {
    /// Builds a state from pose and the rotation-invariant triple `(r, beta, V)`.
    pub fn from_pose_and_motion(x: f64, y: f64, psi: f64, yaw_rate: f64, beta: f64, speed: f64) -> Self {
        let course = psi + beta;
        Self {
            x,
            y,
            psi,
            xdot: speed * course.cos(),
            ydot: speed * course.sin(),
            psidot: yaw_rate,
        }
    }

    pub fn speed(&self) -> f64 {
        self.xdot.hypot(self.ydot)
    }

    pub fn yaw_rate(&self) -> f64 {
        self.psidot
    }

    /// Sideslip angle: velocity direction minus heading, wrapped to (-pi, pi].
    /// Zero when the car is (numerically) stationary.
    pub fn sideslip(&self) -> f64 {
        if self.speed() < 1e-9 {
            return 0.0;
        }
        wrap_angle(self.ydot.atan2(self.xdot) - self.psi)
    }

    /// Velocity expressed in the body frame (forward, left).
    pub fn body_velocity(&self) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (c * self.xdot + s * self.ydot, -s * self.xdot + c * self.ydot)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.x, self.y, self.psi, self.xdot, self.ydot, self.psidot]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            psi: a[2],
            xdot: a[3],
            ydot: a[4],
            psidot: a[5],
        }
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Steering angle and the four wheel angular velocities (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta: f64,
    pub omega: [f64; N_WHEELS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drivetrain {
    /// Every wheel tracks its own speed command.
    #[default]
    Iwd,
    /// Front wheels roll freely, rear wheels share one speed.
    Rwd,
    /// Left and right wheels of each axle share one speed.
    Awd,
}

impl std::str::FromStr for Drivetrain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iwd" => Ok(Self::Iwd),
            "rwd" => Ok(Self::Rwd),
            "awd" => Ok(Self::Awd),
            other => Err(format!("unknown drivetrain '{other}'")),
        }
    }
}

impl std::fmt::Display for Drivetrain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iwd => "iwd",
            Self::Rwd => "rwd",
            Self::Awd => "awd",
        })
    }
}

/// Rigid-body and geometry parameters. Defaults describe the 1/10 scale
/// test car (4.84 kg, 0.35 m wheelbase, 0.26 m track).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub track: f64,
    pub wheel_radius: f64,
    pub cg_height: f64,
    pub max_steer: f64,
    pub gravity: f64,
    pub drivetrain: Drivetrain,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 4.84,
            yaw_inertia: 0.062,
            lf: 0.175,
            lr: 0.175,
            track: 0.26,
            wheel_radius: 0.0565,
            cg_height: 0.05,
            max_steer: 0.46,
            gravity: 9.81,
            drivetrain: Drivetrain::Iwd,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Body-frame contact point of each wheel.
    pub fn wheel_positions(&self) -> [(f64, f64); N_WHEELS] {
        let half = 0.5 * self.track;
        [(self.lf, half), (self.lf, -half), (-self.lr, half), (-self.lr, -half)]
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("track", self.track),
            ("wheel_radius", self.wheel_radius),
            ("cg_height", self.cg_height),
            ("max_steer", self.max_steer),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("vehicle.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Magic-formula coefficients: stiffness `b`, shape `c`, peak friction `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TireParams {
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            b: 0.9,
            c: 2.25,
            d: 0.35,
        }
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("b", self.b), ("c", self.c), ("d", self.d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("tire.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Multiplicative tire-force perturbation, laid out as
/// `[fl_x, fl_y, fr_x, fr_y, rl_x, rl_y, rr_x, rr_y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance(pub [f64; 2 * N_WHEELS]);

impl Disturbance {
    pub const LIMIT: f64 = 0.5;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn wheel(&self, w: usize) -> [f64; 2] {
        [self.0[2 * w], self.0[2 * w + 1]]
    }

    /// Left/right reflection of the wheel assignment.
    /// Components limited to `[-LIMIT, LIMIT]`.
    pub fn clipped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(-Self::LIMIT, Self::LIMIT)))
    }

    pub fn mirrored(&self) -> Self {
        let mut out = *self;
        for (a, b) in [(FL, FR), (RL, RR)] {
            out.0.swap(2 * a, 2 * b);
            out.0.swap(2 * a + 1, 2 * b + 1);
        }
        out
    }
}

/// Contact-patch kinematics of one wheel, expressed in the wheel frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WheelKin {
    pub vx: f64,
    pub vy: f64,
    /// Effective wheel angular velocity after drivetrain coupling (rad/s).
    pub omega: f64,
    pub slip_ratio: f64,
    pub slip_angle: f64,
    /// `tan(slip_angle)`, kept separately to avoid a tan/atan round trip.
    pub tan_slip: f64,
}

pub type WheelKinematics = [WheelKin; N_WHEELS];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForce {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

pub type TireForces = [TireForce; N_WHEELS];

/// Wheel speeds actually applied once the drivetrain coupling is taken into
/// account. Free-rolling wheels are reported as `None`.
fn coupled_speeds(input: &ControlInput, drivetrain: Drivetrain) -> [Option<f64>; N_WHEELS] {
    let w = input.omega;
    match drivetrain {
        Drivetrain::Iwd => [Some(w[0]), Some(w[1]), Some(w[2]), Some(w[3])],
        Drivetrain::Rwd => {
            let rear = 0.5 * (w[RL] + w[RR]);
            [None, None, Some(rear), Some(rear)]
        }
        Drivetrain::Awd => {
            let front = 0.5 * (w[FL] + w[FR]);
            let rear = 0.5 * (w[RL] + w[RR]);
            [Some(front), Some(front), Some(rear), Some(rear)]
        }
    }
}

pub fn wheel_kinematics(state: &VehicleState, input: &ControlInput, params: &VehicleParams) -> WheelKinematics {
    let (vx_body, vy_body) = state.body_velocity();
    let r = state.psidot;
    let (sd, cd) = input.delta.sin_cos();
    let speeds = coupled_speeds(input, params.drivetrain);
    let positions = params.wheel_positions();
    let mut out = [WheelKin::default(); N_WHEELS];
    for w in 0..N_WHEELS {
        let (px, py) = positions[w];
        let cx = vx_body - r * py;
        let cy = vy_body + r * px;
        let (vx, vy) = if w < 2 {
            (cd * cx + sd * cy, -sd * cx + cd * cy)
        } else {
            (cx, cy)
        };
        let omega = speeds[w].unwrap_or(vx / params.wheel_radius);
        let denom = vx.abs().max(SLIP_SPEED_EPS);
        let slip_ratio = if speeds[w].is_some() {
            (omega * params.wheel_radius - vx) / denom
        } else {
            0.0
        };
        let tan_slip = -vy / denom;
        out[w] = WheelKin {
            vx,
            vy,
            omega,
            slip_ratio,
            slip_angle: tan_slip.atan(),
            tan_slip,
        };
    }
    out
}

/// Per-axle vertical loads `(front, rear)` for a body longitudinal
/// acceleration `ax`. Both are clamped to `[0, m g]` and always sum to `m g`.
pub fn vertical_loads(ax: f64, params: &VehicleParams) -> (f64, f64) {
    let weight = params.mass * params.gravity;
    let front = params.mass * (params.gravity * params.lr - ax * params.cg_height) / params.wheelbase();
    let front = if front.is_nan() {
        0.5 * weight
    } else {
        front.clamp(0.0, weight)
    };
    (front, weight - front)
}

/// Combined-slip magic formula for one wheel with the multiplicative
/// disturbance `[d_x, d_y]` applied on top.
pub fn pacejka_force(kin: &WheelKin, fz: f64, tires: &TireParams, disturbance: [f64; 2]) -> TireForce {
    let s = kin.slip_ratio.hypot(kin.tan_slip);
    if s == 0.0 || fz <= 0.0 {
        return TireForce {
            fx: 0.0,
            fy: 0.0,
            fz: fz.max(0.0),
        };
    }
    let peak = fz * tires.d;
    let total = peak * (tires.c * (tires.b * s).atan()).sin();
    let mut fx = total * (kin.slip_ratio / s) * (1.0 + disturbance[0]);
    let mut fy = total * (kin.tan_slip / s) * (1.0 + disturbance[1]);
    let mag = fx.hypot(fy);
    if mag > peak {
        let k = peak / mag;
        fx *= k;
        fy *= k;
    }
    TireForce { fx, fy, fz }
}

fn forces_with_loads(
    kin: &WheelKinematics,
    loads: (f64, f64),
    tires: &TireParams,
    disturbance: &Disturbance,
) -> TireForces {
    let mut out = [TireForce::default(); N_WHEELS];
    for w in 0..N_WHEELS {
        let fz = if w < 2 { 0.5 * loads.0 } else { 0.5 * loads.1 };
        out[w] = pacejka_force(&kin[w], fz, tires, disturbance.wheel(w));
    }
    out
}

/// Body-frame longitudinal acceleration produced by a set of wheel forces.
fn body_longitudinal_accel(forces: &TireForces, delta: f64, params: &VehicleParams) -> f64 {
    let (sd, cd) = delta.sin_cos();
    let fxf = forces[FL].fx + forces[FR].fx;
    let fyf = forces[FL].fy + forces[FR].fy;
    let fxr = forces[RL].fx + forces[RR].fx;
    (cd * fxf - sd * fyf + fxr) / params.mass
}

/// Tire forces at the current state. The longitudinal load transfer is
/// resolved with one fixed-point pass: forces at static load give the
/// acceleration that sets the final loads.
pub fn tire_forces(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    tires: &TireParams,
    disturbance: &Disturbance,
) -> (WheelKinematics, TireForces) {
    let kin = wheel_kinematics(state, input, params);
    let static_loads = vertical_loads(0.0, params);
    let first = forces_with_loads(&kin, static_loads, tires, disturbance);
    let ax = body_longitudinal_accel(&first, input.delta, params);
    let forces = forces_with_loads(&kin, vertical_loads(ax, params), tires, disturbance);
    (kin, forces)
}

/// Global-frame accelerations `(xddot, yddot, psiddot)` from wheel forces.
pub fn accelerations(state: &VehicleState, delta: f64, forces: &TireForces, params: &VehicleParams) -> (f64, f64, f64) {
    let fxf = forces[FL].fx + forces[FR].fx;
    let fyf = forces[FL].fy + forces[FR].fy;
    let fxr = forces[RL].fx + forces[RR].fx;
    let fyr = forces[RL].fy + forces[RR].fy;
    let dfxf = forces[FR].fx - forces[FL].fx;
    let dfyf = forces[FR].fy - forces[FL].fy;
    let dfxr = forces[RR].fx - forces[RL].fx;

    let (sp, cp) = state.psi.sin_cos();
    let (sdp, cdp) = (delta + state.psi).sin_cos();
    let (sd, cd) = delta.sin_cos();

    let xdd = (cdp * fxf - sdp * fyf + cp * fxr - sp * fyr) / params.mass;
    let ydd = (sdp * fxf + cdp * fyf + sp * fxr + cp * fyr) / params.mass;
    let moment =
        (cd * fyf + sd * fxf) * params.lf - fyr * params.lr + (cd * dfxf - sd * dfyf + dfxr) * 0.5 * params.track;
    (xdd, ydd, moment / params.yaw_inertia)
}

/// Time derivative of the state.
pub fn derivatives(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    tires: &TireParams,
    disturbance: &Disturbance,
) -> VehicleState {
    let (_, forces) = tire_forces(state, input, params, tires, disturbance);
    let (xdd, ydd, psidd) = accelerations(state, input.delta, &forces, params);
    VehicleState {
        x: state.xdot,
        y: state.ydot,
        psi: state.psidot,
        xdot: xdd,
        ydot: ydd,
        psidot: psidd,
    }
}

/// One explicit Euler step. The caller checks [`VehicleState::is_finite`] to
/// detect divergence.
pub fn step(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    tires: &TireParams,
    disturbance: &Disturbance,
    dt: f64,
) -> VehicleState {
    let d = derivatives(state, input, params, tires, disturbance);
    VehicleState {
        x: state.x + dt * d.x,
        y: state.y + dt * d.y,
        psi: state.psi + dt * d.psi,
        xdot: state.xdot + dt * d.xdot,
        ydot: state.ydot + dt * d.ydot,
        psidot: state.psidot + dt * d.psidot,
    }
}

/// Per-instance model data for batched stepping. Each slice must either have
/// the batch length or length one (broadcast).
#[derive(Debug, Clone, Copy)]
pub struct BatchModel<'a> {
    pub params: &'a [VehicleParams],
    pub tires: &'a [TireParams],
    pub disturbances: &'a [Disturbance],
}

fn pick<T>(items: &[T], i: usize) -> &T {
    if items.len() == 1 {
        &items[0]
    } else {
        &items[i]
    }
}

/// Instances per parallel work unit. Fixed so results never depend on the
/// worker count.
pub const BATCH_CHUNK: usize = 256;

/// Advances every instance by one step in place and returns a divergence
/// flag per instance. Diverged instances keep their non-finite state so the
/// caller can decide how to reset them.
pub fn step_batch(states: &mut [VehicleState], inputs: &[ControlInput], model: BatchModel<'_>, dt: f64) -> Vec<bool> {
    let n = states.len();
    assert_eq!(inputs.len(), n, "inputs length");
    for (name, len) in [
        ("params", model.params.len()),
        ("tires", model.tires.len()),
        ("disturbances", model.disturbances.len()),
    ] {
        assert!(len == n || len == 1, "{name} length {len} does not match batch {n}");
    }
    let mut diverged = vec![false; n];
    states
        .par_chunks_mut(BATCH_CHUNK)
        .zip(diverged.par_chunks_mut(BATCH_CHUNK))
        .enumerate()
        .for_each(|(c, (chunk, flags))| {
            let base = c * BATCH_CHUNK;
            for (k, (s, flag)) in chunk.iter_mut().zip(flags.iter_mut()).enumerate() {
                let i = base + k;
                *s = step(
                    s,
                    &inputs[i],
                    pick(model.params, i),
                    pick(model.tires, i),
                    pick(model.disturbances, i),
                    dt,
                );
                *flag = !s.is_finite();
            }
        });
    diverged
}
