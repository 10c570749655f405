//! Reference paths sampled at a fixed arc-length spacing, the generators for
//! the evaluation track families, and curvilinear projection.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, VehicleState};

/// Arc-length spacing between consecutive waypoints (m).
pub const WAYPOINT_SPACING: f64 = 0.005;

/// Largest reference sideslip magnitude (rad).
pub const BETA_REF_MAX: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum PathError {
    #[error("path has no waypoints")]
    Empty,
    #[error("invalid path parameter: {0}")]
    InvalidParameter(String),
    #[error("path csv: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    /// Tangent heading, unwrapped along the path.
    pub theta: f64,
    pub kappa: f64,
    pub beta_ref: f64,
}

/// Reference sideslip for a local curvature: opposite sign to the turn,
/// growing linearly up to [`BETA_REF_MAX`] at unit curvature.
pub fn beta_ref_for(kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    -kappa.signum() * (BETA_REF_MAX * kappa.abs()).min(BETA_REF_MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    waypoints: Vec<Waypoint>,
    closed: bool,
    total_length: f64,
    /// Start pose of the path at `s = total_length`, used to interpolate the
    /// closing segment of closed paths.
    end: Waypoint,
}

/// One piece of a curvature profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureSegment {
    Constant {
        kappa: f64,
        length: f64,
    },
    /// Linear curvature ramp (clothoid).
    Ramp {
        from: f64,
        to: f64,
        length: f64,
    },
}

impl CurvatureSegment {
    pub fn length(&self) -> f64 {
        match *self {
            Self::Constant { length, .. } | Self::Ramp { length, .. } => length,
        }
    }

    fn kappa_at(&self, u: f64) -> f64 {
        match *self {
            Self::Constant { kappa, .. } => kappa,
            Self::Ramp { from, to, length } => from + (to - from) * (u / length),
        }
    }

    /// Heading change accumulated over the first `u` metres.
    fn turn_at(&self, u: f64) -> f64 {
        match *self {
            Self::Constant { kappa, .. } => kappa * u,
            Self::Ramp { from, to, length } => from * u + 0.5 * (to - from) * u * u / length,
        }
    }
}

/// Starting pose for profile integration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Piecewise curvature profile evaluated analytically for heading; positions
/// are integrated with Gauss-Legendre quadrature between waypoints.
#[derive(Debug, Clone, PartialEq)]
struct Profile {
    segments: Vec<CurvatureSegment>,
    starts: Vec<f64>,
    turns: Vec<f64>,
    length: f64,
}

impl Profile {
    fn new(segments: Vec<CurvatureSegment>) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut turns = Vec::with_capacity(segments.len());
        let (mut s, mut turn) = (0.0, 0.0);
        for seg in &segments {
            starts.push(s);
            turns.push(turn);
            s += seg.length();
            turn += seg.turn_at(seg.length());
        }
        Self {
            segments,
            starts,
            turns,
            length: s,
        }
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let idx = match self.starts.partition_point(|&st| st <= s) {
            0 => 0,
            n => n - 1,
        };
        (idx, (s - self.starts[idx]).min(self.segments[idx].length()))
    }

    fn kappa(&self, s: f64) -> f64 {
        let (i, u) = self.locate(s);
        self.segments[i].kappa_at(u)
    }

    fn turn(&self, s: f64) -> f64 {
        let (i, u) = self.locate(s);
        self.turns[i] + self.segments[i].turn_at(u)
    }
}

// 5-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

fn integrate_step(profile: &Profile, theta0: f64, a: f64, b: f64) -> (f64, f64) {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let (mut dx, mut dy) = (0.0, 0.0);
    for (n, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        let th = theta0 + profile.turn(mid + half * n);
        dx += w * th.cos();
        dy += w * th.sin();
    }
    (dx * half, dy * half)
}

impl ReferencePath {
    /// Builds a path from an explicit list of waypoints. For closed paths the
    /// geometry wraps from the last waypoint back to the first over the
    /// remaining `total_length - s_last`.
    pub fn from_waypoints(waypoints: Vec<Waypoint>, closed: bool, total_length: f64) -> Result<Self, PathError> {
        let first = *waypoints.first().ok_or(PathError::Empty)?;
        let last = *waypoints.last().expect("nonempty");
        if !(total_length.is_finite() && total_length >= last.s) {
            return Err(PathError::InvalidParameter(format!(
                "total length {total_length} shorter than last waypoint s={}",
                last.s
            )));
        }
        let end = if closed {
            // Unwrapped heading at the closing point continues from the last one.
            let turns = ((last.theta - first.theta) / TAU).round();
            Waypoint {
                s: total_length,
                theta: first.theta + turns * TAU,
                ..first
            }
        } else {
            last
        };
        Ok(Self {
            waypoints,
            closed,
            total_length,
            end,
        })
    }

    /// Integrates a curvature profile from `start`, sampling every
    /// [`WAYPOINT_SPACING`] metres.
    pub fn from_profile(segments: Vec<CurvatureSegment>, start: StartPose, closed: bool) -> Result<Self, PathError> {
        if segments.is_empty() {
            return Err(PathError::Empty);
        }
        for seg in &segments {
            let l = seg.length();
            if !(l.is_finite() && l > 0.0) {
                return Err(PathError::InvalidParameter(format!("segment length {l}")));
            }
        }
        let profile = Profile::new(segments);
        let n = (profile.length / WAYPOINT_SPACING + 1e-9).floor() as usize + 1;
        let mut waypoints = Vec::with_capacity(n);
        let (mut x, mut y) = (start.x, start.y);
        let mut prev_s = 0.0;
        for i in 0..n {
            let s = i as f64 * WAYPOINT_SPACING;
            if closed && i > 0 && s >= profile.length - 1e-9 {
                break;
            }
            if i > 0 {
                let (dx, dy) = integrate_step(&profile, start.theta, prev_s, s);
                x += dx;
                y += dy;
            }
            let kappa = profile.kappa(s);
            waypoints.push(Waypoint {
                s,
                x,
                y,
                theta: start.theta + profile.turn(s),
                kappa,
                beta_ref: beta_ref_for(kappa),
            });
            prev_s = s;
        }
        Self::from_waypoints(waypoints, closed, profile.length)
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Waypoint `i` and its successor along the path (wrapping for closed
    /// paths, where the successor of the last waypoint is the closing pose).
    fn segment(&self, i: usize) -> (Waypoint, Waypoint) {
        let a = self.waypoints[i];
        let b = if i + 1 < self.waypoints.len() {
            self.waypoints[i + 1]
        } else {
            self.end
        };
        (a, b)
    }

    fn n_segments(&self) -> usize {
        if self.closed {
            self.waypoints.len()
        } else {
            self.waypoints.len().saturating_sub(1)
        }
    }

    /// Normalizes an arc length: wrapped for closed paths, clamped for open.
    pub fn normalize_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s.clamp(0.0, self.waypoints.last().map_or(0.0, |w| w.s))
        }
    }

    /// Interpolated waypoint at arc length `s`.
    pub fn sample(&self, s: f64) -> Waypoint {
        let s = self.normalize_s(s);
        if self.n_segments() == 0 {
            return self.waypoints[0];
        }
        let i = ((s / WAYPOINT_SPACING).floor() as usize).min(self.n_segments() - 1);
        let (a, b) = self.segment(i);
        let span = b.s - a.s;
        let t = if span > 0.0 {
            ((s - a.s) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let lerp = |p: f64, q: f64| p + (q - p) * t;
        Waypoint {
            s,
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            theta: lerp(a.theta, b.theta),
            kappa: if t < 0.5 { a.kappa } else { b.kappa },
            beta_ref: lerp(a.beta_ref, b.beta_ref),
        }
    }

    /// Index of the waypoint nearest to `s`.
    pub fn index_at(&self, s: f64) -> usize {
        let s = self.normalize_s(s);
        let i = (s / WAYPOINT_SPACING).round() as usize;
        if i >= self.waypoints.len() {
            if self.closed {
                0
            } else {
                self.waypoints.len() - 1
            }
        } else {
            i
        }
    }

    /// Closest point on segment `i` to `(px, py)`: `(distance², t)`.
    fn closest_on_segment(&self, i: usize, px: f64, py: f64) -> (f64, f64) {
        let (a, b) = self.segment(i);
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let len2 = ex * ex + ey * ey;
        let t = if len2 > 0.0 {
            (((px - a.x) * ex + (py - a.y) * ey) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (dx, dy) = (px - a.x - t * ex, py - a.y - t * ey);
        (dx * dx + dy * dy, t)
    }

    /// Nearest segment to a point, searching outward from `hint` and falling
    /// back to a full scan when the local search runs into its window edge.
    pub fn nearest_segment(&self, px: f64, py: f64, hint: usize) -> (usize, f64) {
        const WINDOW: usize = 200;
        let n = self.n_segments();
        if n == 0 {
            return (0, 0.0);
        }
        let hint = hint.min(n - 1);
        let mut best = (f64::INFINITY, 0usize, 0.0);
        let mut best_offset = 0isize;
        let reach = WINDOW.min(n / 2) as isize;
        for off in -reach..=reach {
            let i = hint as isize + off;
            let i = if self.closed {
                i.rem_euclid(n as isize) as usize
            } else if i < 0 || i >= n as isize {
                continue;
            } else {
                i as usize
            };
            let (d2, t) = self.closest_on_segment(i, px, py);
            if d2 < best.0 {
                best = (d2, i, t);
                best_offset = off;
            }
        }
        let stalled = reach < n as isize / 2 && best_offset.unsigned_abs() as isize == reach;
        if stalled {
            for i in 0..n {
                let (d2, t) = self.closest_on_segment(i, px, py);
                if d2 < best.0 {
                    best = (d2, i, t);
                }
            }
        }
        (best.1, best.2)
    }

    /// Arc-length distance travelled from `from` to `to`, unwrapping closed
    /// paths to the shorter way round.
    pub fn progress(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if self.closed {
            let l = self.total_length;
            d - l * (d / l).round()
        } else {
            d
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), PathError> {
        writeln!(out, "# closed={} total_length={}", self.closed, self.total_length)?;
        writeln!(out, "s,x,y,theta,kappa,beta_ref")?;
        for w in &self.waypoints {
            writeln!(out, "{},{},{},{},{},{}", w.s, w.x, w.y, w.theta, w.kappa, w.beta_ref)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, PathError> {
        let mut closed = false;
        let mut total_length = None;
        let mut waypoints = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for tok in meta.split_whitespace() {
                    match tok.split_once('=') {
                        Some(("closed", v)) => {
                            closed = v
                                .parse()
                                .map_err(|_| PathError::Format(format!("bad closed flag '{v}'")))?
                        }
                        Some(("total_length", v)) => {
                            total_length = Some(
                                v.parse::<f64>()
                                    .map_err(|_| PathError::Format(format!("bad total_length '{v}'")))?,
                            )
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line != "s,x,y,theta,kappa,beta_ref" {
                    return Err(PathError::Format(format!("unexpected header '{line}'")));
                }
                saw_header = true;
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PathError::Format(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 6 {
                return Err(PathError::Format(format!("line {}: expected 6 columns", lineno + 1)));
            }
            waypoints.push(Waypoint {
                s: vals[0],
                x: vals[1],
                y: vals[2],
                theta: vals[3],
                kappa: vals[4],
                beta_ref: vals[5],
            });
        }
        let last_s = waypoints.last().ok_or(PathError::Empty)?.s;
        Self::from_waypoints(waypoints, closed, total_length.unwrap_or(last_s))
    }
}

fn check_radius(radius: f64) -> Result<(), PathError> {
    if radius.is_finite() && radius > 0.0 {
        Ok(())
    } else {
        Err(PathError::InvalidParameter(format!(
            "radius must be positive, got {radius}"
        )))
    }
}

/// Waypoints along a circular arc. `center` is the circle centre, `phase0`
/// the polar angle of the first point and `direction` the turn sign.
#[allow(clippy::too_many_arguments)]
fn arc_waypoints(
    out: &mut Vec<Waypoint>,
    center: (f64, f64),
    radius: f64,
    direction: f64,
    phase0: f64,
    theta0: f64,
    s0: f64,
    length: f64,
    include_end: bool,
) {
    let n = (length / WAYPOINT_SPACING + 1e-9).floor() as usize + 1;
    let kappa = direction / radius;
    for i in 0..n {
        let u = i as f64 * WAYPOINT_SPACING;
        if !include_end && u >= length - 1e-12 {
            break;
        }
        let phase = phase0 + direction * u / radius;
        out.push(Waypoint {
            s: s0 + u,
            x: center.0 + radius * phase.cos(),
            y: center.1 + radius * phase.sin(),
            theta: theta0 + kappa * u,
            kappa,
            beta_ref: beta_ref_for(kappa),
        });
    }
}

/// Closed circle centred at the origin, starting at `(radius, 0)`.
/// `direction` +1 turns left (counter-clockwise), -1 right.
pub fn gen_circle(radius: f64, direction: i32) -> Result<ReferencePath, PathError> {
    check_radius(radius)?;
    if direction != 1 && direction != -1 {
        return Err(PathError::InvalidParameter(format!(
            "direction must be +1 or -1, got {direction}"
        )));
    }
    let dir = f64::from(direction);
    let length = TAU * radius;
    let mut wps = Vec::new();
    arc_waypoints(
        &mut wps,
        (0.0, 0.0),
        radius,
        dir,
        0.0,
        dir * PI / 2.0,
        0.0,
        length,
        false,
    );
    ReferencePath::from_waypoints(wps, true, length)
}

/// Figure eight: a left-turning circle above the origin followed by a
/// right-turning circle below it, tangent at the origin.
pub fn gen_eight(radius: f64) -> Result<ReferencePath, PathError> {
    check_radius(radius)?;
    let lap = TAU * radius;
    let mut wps = Vec::new();
    // Left lobe: centre (0, r), starting at the bottom heading +x.
    arc_waypoints(&mut wps, (0.0, radius), radius, 1.0, -PI / 2.0, 0.0, 0.0, lap, false);
    let s1 = wps.len() as f64 * WAYPOINT_SPACING;
    let u0 = s1 - lap;
    // Right lobe: centre (0, -r), starting at the top heading +x.
    let mut lobe = Vec::new();
    arc_waypoints(
        &mut lobe,
        (0.0, -radius),
        radius,
        -1.0,
        PI / 2.0 - u0 / radius,
        TAU + u0 / radius,
        0.0,
        lap - u0,
        false,
    );
    for (k, mut w) in lobe.into_iter().enumerate() {
        w.s = s1 + k as f64 * WAYPOINT_SPACING;
        w.theta = TAU - (u0 + k as f64 * WAYPOINT_SPACING) / radius;
        wps.push(w);
    }
    ReferencePath::from_waypoints(wps, true, 2.0 * lap)
}

/// Closed left-turning track alternating tight (`kappa = 1`) and gentle
/// (`kappa = 0.5`) arcs joined by linear curvature ramps. Built from two
/// copies of a half-turn unit, so it closes by point symmetry.
pub fn gen_variable_curvature() -> Result<ReferencePath, PathError> {
    let ramp = 0.5;
    let tight_len = 1.2;
    // Each ramp between 1.0 and 0.5 turns 0.75 * ramp; solve the gentle arc
    // length so one unit turns exactly pi.
    let gentle_len = 2.0 * (PI - 2.0 * 0.75 * ramp - tight_len);
    let unit = [
        CurvatureSegment::Constant {
            kappa: 1.0,
            length: tight_len,
        },
        CurvatureSegment::Ramp {
            from: 1.0,
            to: 0.5,
            length: ramp,
        },
        CurvatureSegment::Constant {
            kappa: 0.5,
            length: gentle_len,
        },
        CurvatureSegment::Ramp {
            from: 0.5,
            to: 1.0,
            length: ramp,
        },
    ];
    let segments: Vec<_> = unit.iter().chain(unit.iter()).copied().collect();
    ReferencePath::from_profile(segments, StartPose::default(), true)
}

/// Five circles of radius `radius` in a row, each tangent to the next and
/// traversed in alternating directions. The end circles are driven for a
/// full lap and the middle ones for one and a half, so the path is open with
/// four drift-direction reversals.
pub fn gen_rings(radius: f64) -> Result<ReferencePath, PathError> {
    check_radius(radius)?;
    let mut segments = Vec::new();
    for k in 0..5 {
        let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
        let laps = if k == 0 || k == 4 { 1.0 } else { 1.5 };
        segments.push(CurvatureSegment::Constant {
            kappa: dir / radius,
            length: laps * TAU * radius,
        });
    }
    let start = StartPose {
        x: radius,
        y: 0.0,
        theta: PI / 2.0,
    };
    ReferencePath::from_profile(segments, start, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomPathConfig {
    pub segment_length_min: f64,
    pub segment_length_max: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub ramp_length: f64,
    pub segments_min: usize,
    pub segments_max: usize,
}

impl Default for RandomPathConfig {
    fn default() -> Self {
        Self {
            segment_length_min: 1.5,
            segment_length_max: 4.0,
            kappa_min: 0.4,
            kappa_max: 1.2,
            ramp_length: 0.3,
            segments_min: 4,
            segments_max: 8,
        }
    }
}

impl RandomPathConfig {
    pub fn validate(&self) -> Result<(), PathError> {
        let ok = self.segment_length_min > 0.0
            && self.segment_length_min <= self.segment_length_max
            && self.kappa_min >= 0.0
            && self.kappa_min <= self.kappa_max
            && self.ramp_length > 0.0
            && self.segments_min >= 1
            && self.segments_min <= self.segments_max;
        if ok {
            Ok(())
        } else {
            Err(PathError::InvalidParameter(format!("random path config {self:?}")))
        }
    }

    /// Draws a curvature profile: constant arcs of random length, magnitude
    /// and sign, joined by linear ramps.
    pub fn sample_profile<R: Rng>(&self, rng: &mut R) -> Vec<CurvatureSegment> {
        let n = rng.random_range(self.segments_min..=self.segments_max);
        let mut segments = Vec::with_capacity(2 * n);
        let mut prev: Option<f64> = None;
        for _ in 0..n {
            let mag = if self.kappa_max > self.kappa_min {
                rng.random_range(self.kappa_min..=self.kappa_max)
            } else {
                self.kappa_min
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let kappa = sign * mag;
            let length = if self.segment_length_max > self.segment_length_min {
                rng.random_range(self.segment_length_min..=self.segment_length_max)
            } else {
                self.segment_length_min
            };
            if let Some(p) = prev {
                segments.push(CurvatureSegment::Ramp {
                    from: p,
                    to: kappa,
                    length: self.ramp_length,
                });
            }
            segments.push(CurvatureSegment::Constant { kappa, length });
            prev = Some(kappa);
        }
        segments
    }
}

/// Open random path starting at the origin heading along +x.
pub fn gen_random_path(seed: u64, config: &RandomPathConfig) -> Result<ReferencePath, PathError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ReferencePath::from_profile(config.sample_profile(&mut rng), StartPose::default(), false)
}

/// Curvilinear tracking errors of a vehicle relative to a path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingErrors {
    /// Signed lateral offset, positive to the left of the tangent.
    pub e_pos: f64,
    /// Course (velocity direction) minus path tangent, wrapped.
    pub e_dir: f64,
    pub e_kappa: f64,
    pub e_beta: f64,
    pub s_proj: f64,
    /// Index of the nearest segment, reusable as the next search hint.
    pub index: usize,
}

/// Speed floor used when dividing by the vehicle speed (m/s).
pub const CURVATURE_SPEED_FLOOR: f64 = 0.1;

/// Vehicle motion quantities that the projection needs beyond the pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub beta: f64,
    /// Sideslip rate, from a backward difference.
    pub beta_rate: f64,
}

impl MotionSample {
    pub fn of(state: &VehicleState, prev_beta: f64, dt: f64) -> Self {
        let beta = state.sideslip();
        Self {
            beta,
            beta_rate: wrap_angle(beta - prev_beta) / dt,
        }
    }
}

/// Curvature of the centre-of-mass trajectory.
pub fn vehicle_curvature(state: &VehicleState, beta_rate: f64) -> f64 {
    (state.psidot + beta_rate) / state.speed().max(CURVATURE_SPEED_FLOOR)
}

pub fn project(
    state: &VehicleState,
    motion: MotionSample,
    path: &ReferencePath,
    hint: usize,
) -> Result<TrackingErrors, PathError> {
    if path.is_empty() {
        return Err(PathError::Empty);
    }
    let (i, t) = path.nearest_segment(state.x, state.y, hint);
    let (a, b) = if path.n_segments() == 0 {
        (path.waypoints[0], path.waypoints[0])
    } else {
        path.segment(i)
    };
    let s_proj = path.normalize_s(a.s + t * (b.s - a.s));
    let theta = a.theta + t * (b.theta - a.theta);
    let (px, py) = (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
    let (tx, ty) = (theta.cos(), theta.sin());
    let (dx, dy) = (state.x - px, state.y - py);
    let side = tx * dy - ty * dx;
    let e_pos = side.signum() * dx.hypot(dy);
    let e_pos = if side == 0.0 { 0.0 } else { e_pos };
    let near = if t < 0.5 { a } else { b };
    let beta_ref = a.beta_ref + t * (b.beta_ref - a.beta_ref);
    Ok(TrackingErrors {
        e_pos,
        e_dir: wrap_angle(state.psi + motion.beta - theta),
        e_kappa: vehicle_curvature(state, motion.beta_rate) - near.kappa,
        e_beta: wrap_angle(motion.beta - beta_ref),
        s_proj,
        index: i,
    })
}

/// Preview point expressed in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PreviewPoint {
    pub x_rel: f64,
    pub y_rel: f64,
    pub theta_rel: f64,
    pub beta_ref: f64,
}

/// `n_points` path samples ahead of `s_proj` at fixed arc spacing, in the
/// body frame of `state`. Open paths clamp at their final waypoint.
pub fn preview(
    state: &VehicleState,
    path: &ReferencePath,
    s_proj: f64,
    n_points: usize,
    spacing: f64,
) -> Vec<PreviewPoint> {
    let mut out = Vec::with_capacity(n_points);
    preview_into(state, path, s_proj, n_points, spacing, &mut out);
    out
}

pub fn preview_into(
    state: &VehicleState,
    path: &ReferencePath,
    s_proj: f64,
    n_points: usize,
    spacing: f64,
    out: &mut Vec<PreviewPoint>,
) {
    out.clear();
    let (sp, cp) = state.psi.sin_cos();
    for k in 1..=n_points {
        let w = path.sample(s_proj + k as f64 * spacing);
        let (dx, dy) = (w.x - state.x, w.y - state.y);
        out.push(PreviewPoint {
            x_rel: cp * dx + sp * dy,
            y_rel: -sp * dx + cp * dy,
            theta_rel: wrap_angle(w.theta - state.psi),
            beta_ref: w.beta_ref,
        });
    }
}
