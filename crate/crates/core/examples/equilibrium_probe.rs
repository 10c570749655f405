//! Searches fixed inputs holding a steady drift on a unit circle.
use driftsim::dynamics::{derivatives, ControlInput, Disturbance, TireParams, VehicleParams, VehicleState};

fn residual(beta: f64, v: f64, u: [f64; 3]) -> [f64; 3] {
    let p = VehicleParams::default();
    let t = TireParams::default();
    let s = VehicleState::from_pose_and_motion(0.0, 0.0, 0.0, v, beta, v);
    let inp = ControlInput {
        delta: u[0],
        omega: [u[1], u[1], u[2], u[2]],
    };
    let d = derivatives(&s, &inp, &p, &t, &Disturbance::zero());
    let course = beta;
    let (nx, ny) = (-course.sin(), course.cos());
    [d.xdot - v * v * nx, d.ydot - v * v * ny, d.psidot]
}

fn main() {
    for &beta in &[-0.5, -0.6, -0.7, -0.8, -0.85, -0.9, -1.0] {
        for &v in &[1.5, 1.84, 2.2] {
            let mut best: Option<([f64; 3], f64)> = None;
            for d0 in [-0.4, -0.2, 0.0, 0.2, 0.4] {
                for w0 in [2.0, 4.0, 6.0] {
                    let mut u = [d0, v / 0.0565, w0 / 0.0565];
                    for _ in 0..60 {
                        let r = residual(beta, v, u);
                        let mut j = [[0.0; 3]; 3];
                        for k in 0..3 {
                            let mut up = u;
                            let h = 1e-6 * (1.0 + u[k].abs());
                            up[k] += h;
                            let rp = residual(beta, v, up);
                            for i in 0..3 {
                                j[i][k] = (rp[i] - r[i]) / h;
                            }
                        }
                        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                        if det.abs() < 1e-14 {
                            break;
                        }
                        let solve = |col: usize| {
                            let mut m = j;
                            for i in 0..3 {
                                m[i][col] = r[i];
                            }
                            (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))
                                / det
                        };
                        let dx = [solve(0), solve(1), solve(2)];
                        for k in 0..3 {
                            u[k] -= 0.7 * dx[k];
                        }
                    }
                    let r = residual(beta, v, u);
                    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    if n.is_finite() && best.is_none_or(|b| n < b.1) {
                        best = Some((u, n));
                    }
                }
            }
            let (u, n) = best.unwrap();
            println!(
                "beta {beta:5.2} V {v:4.2}: delta {:7.3} vf {:6.3} vr {:6.3} resid {:.2e}",
                u[0],
                u[1] * 0.0565,
                u[2] * 0.0565,
                n
            );
        }
    }
}
