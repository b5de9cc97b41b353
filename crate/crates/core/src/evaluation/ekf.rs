//! Kalman-filter baseline: CTRV for vehicles, constant velocity for
//! pedestrians. Both observe positions only.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};

use crate::scenario::{AgentType, EgoSample, DT};

/// Longitudinal acceleration noise of the vehicle model, m/s².
pub const VEHICLE_ACCEL_NOISE: f64 = 0.5;
/// Yaw acceleration noise of the vehicle model, rad/s².
pub const VEHICLE_YAW_NOISE: f64 = 0.5;
/// Acceleration noise of the pedestrian model, m/s².
pub const PEDESTRIAN_ACCEL_NOISE: f64 = 0.8;
/// Position measurement noise, metres.
pub const MEASUREMENT_NOISE: f64 = 0.05;

type V5 = SVector<f64, 5>;
type M5 = SMatrix<f64, 5, 5>;
type V4 = SVector<f64, 4>;
type M4 = SMatrix<f64, 4, 4>;

/// Observed positions of an agent as `(step, position)`.
pub type Track = Vec<(usize, [f64; 2])>;

/// Prediction for one agent: `[T_f, 2]` and whether the hold-position
/// fallback was used.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfPrediction {
    pub trajectory: Vec<f64>,
    pub held: bool,
}

fn r() -> Matrix2<f64> {
    Matrix2::identity() * MEASUREMENT_NOISE.powi(2)
}

/// CTRV motion over `dt`; state `[x, y, heading, speed, yaw rate]`.
fn ctrv(s: &V5, dt: f64) -> V5 {
    let (x, y, h, v, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (nx, ny) = if w.abs() > 1e-6 {
        (x + v / w * ((h + w * dt).sin() - h.sin()), y + v / w * (h.cos() - (h + w * dt).cos()))
    } else {
        (x + v * h.cos() * dt, y + v * h.sin() * dt)
    };
    V5::new(nx, ny, h + w * dt, v, w)
}

fn ctrv_jacobian(s: &V5, dt: f64) -> M5 {
    let (h, v, w) = (s[2], s[3], s[4]);
    let mut f = M5::identity();
    f[(2, 4)] = dt;
    if w.abs() > 1e-6 {
        let (s0, c0) = h.sin_cos();
        let (s1, c1) = (h + w * dt).sin_cos();
        f[(0, 2)] = v / w * (c1 - c0);
        f[(0, 3)] = (s1 - s0) / w;
        f[(0, 4)] = v * dt * c1 / w - v * (s1 - s0) / (w * w);
        f[(1, 2)] = v / w * (s1 - s0);
        f[(1, 3)] = (c0 - c1) / w;
        f[(1, 4)] = v * dt * s1 / w - v * (c0 - c1) / (w * w);
    } else {
        let (s0, c0) = h.sin_cos();
        f[(0, 2)] = -v * s0 * dt;
        f[(0, 3)] = c0 * dt;
        f[(0, 4)] = -0.5 * v * s0 * dt * dt;
        f[(1, 2)] = v * c0 * dt;
        f[(1, 3)] = s0 * dt;
        f[(1, 4)] = 0.5 * v * c0 * dt * dt;
    }
    f
}

fn ctrv_noise(s: &V5, dt: f64) -> M5 {
    let (sh, ch) = s[2].sin_cos();
    let half = 0.5 * dt * dt;
    let g = SMatrix::<f64, 5, 2>::new(half * ch, 0.0, half * sh, 0.0, 0.0, half, dt, 0.0, 0.0, dt);
    let q = Matrix2::new(VEHICLE_ACCEL_NOISE.powi(2), 0.0, 0.0, VEHICLE_YAW_NOISE.powi(2));
    g * q * g.transpose()
}

fn cv_matrices(dt: f64) -> (M4, M4) {
    let mut f = M4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let (a, b, c) = (dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt * dt);
    let q2 = PEDESTRIAN_ACCEL_NOISE.powi(2);
    let q = M4::from_row_slice(&[a, 0.0, b, 0.0, 0.0, a, 0.0, b, b, 0.0, c, 0.0, 0.0, b, 0.0, c]) * q2;
    (f, q)
}

/// Position-only measurement update for any state size.
fn update<const N: usize>(x: &mut SVector<f64, N>, p: &mut SMatrix<f64, N, N>, z: [f64; 2]) {
    let mut h = SMatrix::<f64, 2, N>::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    let innov = Vector2::new(z[0], z[1]) - h * *x;
    let s = h * *p * h.transpose() + r();
    let Some(s_inv) = s.try_inverse() else { return };
    let k = *p * h.transpose() * s_inv;
    *x += k * innov;
    *p = (SMatrix::<f64, N, N>::identity() - k * h) * *p;
}

fn ctrv_predict(x: &mut V5, p: &mut M5, dt: f64) {
    let f = ctrv_jacobian(x, dt);
    let q = ctrv_noise(x, dt);
    *x = ctrv(x, dt);
    *p = f * *p * f.transpose() + q;
}

/// Filters a track and extrapolates `t_future` steps past `last_step`.
pub fn ekf_predict(track: &[(usize, [f64; 2])], agent_type: AgentType, last_step: usize, t_future: usize) -> EkfPrediction {
    if track.len() < 2 {
        let p = track.last().map(|(_, p)| *p).unwrap_or([0.0; 2]);
        return EkfPrediction {
            trajectory: (0..t_future).flat_map(|_| p).collect(),
            held: true,
        };
    }
    let (t0, p0) = track[0];
    let (t1, p1) = track[1];
    let gap = (t1 - t0) as f64 * DT;
    let (dx, dy) = ((p1[0] - p0[0]) / gap, (p1[1] - p0[1]) / gap);
    let (end, _) = *track.last().expect("two entries");
    let lead = last_step.saturating_sub(end);
    let mut out = Vec::with_capacity(2 * t_future);
    match agent_type {
        AgentType::Vehicle => {
            let mut x = V5::new(p0[0], p0[1], dy.atan2(dx), dx.hypot(dy), 0.0);
            let mut p = M5::from_diagonal(&V5::new(MEASUREMENT_NOISE.powi(2), MEASUREMENT_NOISE.powi(2), 0.5, 1.0, 0.5));
            let mut t = t0;
            for &(s, z) in &track[1..] {
                for _ in t..s {
                    ctrv_predict(&mut x, &mut p, DT);
                }
                update(&mut x, &mut p, z);
                t = s;
            }
            for _ in 0..lead {
                x = ctrv(&x, DT);
            }
            for _ in 0..t_future {
                x = ctrv(&x, DT);
                out.extend([x[0], x[1]]);
            }
        }
        AgentType::Pedestrian => {
            let (f, q) = cv_matrices(DT);
            let mut x = V4::new(p0[0], p0[1], dx, dy);
            let mut p = M4::from_diagonal(&V4::new(MEASUREMENT_NOISE.powi(2), MEASUREMENT_NOISE.powi(2), 1.0, 1.0));
            let mut t = t0;
            for &(s, z) in &track[1..] {
                for _ in t..s {
                    x = f * x;
                    p = f * p * f.transpose() + q;
                }
                update(&mut x, &mut p, z);
                t = s;
            }
            for _ in 0..lead {
                x = f * x;
            }
            for _ in 0..t_future {
                x = f * x;
                out.extend([x[0], x[1]]);
            }
        }
    }
    EkfPrediction { trajectory: out, held: false }
}

/// Valid past positions of one agent in a sample.
pub fn track_of(sample: &EgoSample, agent: usize) -> Track {
    (0..sample.t_past)
        .filter(|&t| sample.is_valid(agent, t))
        .map(|t| {
            let f = sample.feature(agent, t);
            (t, [f[0], f[1]])
        })
        .collect()
}

/// Predictions for every agent of a sample, `[N, T_f, 2]`, and the
/// per-agent hold flags.
pub fn ekf_sample(sample: &EgoSample) -> (Vec<f64>, Vec<bool>) {
    let mut traj = Vec::with_capacity(sample.num_agents() * sample.t_future * 2);
    let mut held = Vec::with_capacity(sample.num_agents());
    for a in 0..sample.num_agents() {
        let p = ekf_predict(&track_of(sample, a), sample.agent_types[a], sample.t_past - 1, sample.t_future);
        traj.extend(p.trajectory);
        held.push(p.held);
    }
    (traj, held)
}
