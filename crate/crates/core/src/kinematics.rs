//! Control-to-trajectory layer: point-mass vehicles with an adhesion bound
//! on acceleration, a learned first-order model for pedestrians, and Heun
//! integration with the control held over each step.
//!
//! Plain `f64` versions serve tests and baselines; the `*_graph` versions
//! record the same arithmetic on a [`Graph`] for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, Mlp};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::scenario::AgentType;

pub const MU: f64 = 0.7;
pub const GRAVITY: f64 = 9.81;
/// Adhesion bound on vehicle acceleration, m/s².
pub const MU_G: f64 = MU * GRAVITY;
/// Pedestrian speed scale; each velocity component is bounded by it.
pub const V_PED_MAX: f64 = 3.0;
/// Positions fed to the pedestrian net are divided by this, metres.
const PED_POSITION_SCALE: f64 = 10.0;
const PED_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    pub mu: f64,
    pub g: f64,
    pub dt: f64,
    pub v_ped_max: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            mu: MU,
            g: GRAVITY,
            dt: crate::scenario::DT,
            v_ped_max: V_PED_MAX,
        }
    }
}

impl PhysicalConstants {
    pub fn max_accel(&self) -> f64 {
        self.mu * self.g
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.g > 0.0 && self.dt > 0.0 && self.v_ped_max > 0.0) {
            return Err(Error::Config("physical constants must be positive".into()));
        }
        Ok(())
    }
}

/// Point-mass state: position and velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VehicleState {
    pub p: [f64; 2],
    pub v: [f64; 2],
}

impl VehicleState {
    fn to_array(self) -> [f64; 4] {
        [self.p[0], self.p[1], self.v[0], self.v[1]]
    }

    fn from_array(z: [f64; 4]) -> Self {
        Self {
            p: [z[0], z[1]],
            v: [z[2], z[3]],
        }
    }
}

/// Radial projection onto the disc of radius `max`.
pub fn clamp_control(u: [f64; 2], max: f64) -> [f64; 2] {
    let n = u[0].hypot(u[1]);
    if n > max {
        let s = max / n;
        [u[0] * s, u[1] * s]
    } else {
        u
    }
}

pub fn vehicle_derivative(z: &VehicleState, u: [f64; 2]) -> VehicleState {
    VehicleState { p: z.v, v: u }
}

/// One Heun step: Euler predictor, then the trapezoidal corrector, with
/// `u` held constant over the interval.
pub fn heun_step<const N: usize>(
    z: &[f64; N],
    u: [f64; 2],
    dt: f64,
    f: impl Fn(&[f64; N], [f64; 2]) -> [f64; N],
) -> [f64; N] {
    let k1 = f(z, u);
    let mut pred = [0.0; N];
    for i in 0..N {
        pred[i] = z[i] + dt * k1[i];
    }
    let k2 = f(&pred, u);
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = z[i] + 0.5 * dt * (k1[i] + k2[i]);
    }
    out
}

/// Learned pedestrian dynamics `ṗ = f(p, u)`; a two-layer tanh MLP whose
/// output passes through `tanh` and is scaled by `v_max`, so each velocity
/// component lies in `[-v_max, v_max]`.
#[derive(Clone, Debug)]
pub struct PedestrianNet {
    pub mlp: Mlp,
    pub v_max: f64,
}

impl PedestrianNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, v_max: f64, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[4, PED_HIDDEN, 2], Activation::Tanh, 1.0, rng),
            v_max,
        }
    }

    /// `p, u: [M, 2]` → `ṗ: [M, 2]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, p: Var, u: Var) -> Result<Var> {
        let ps = g.scale(p, S::lit(1.0 / PED_POSITION_SCALE))?;
        let x = g.concat(&[ps, u])?;
        let h = self.mlp.forward(g, store, x)?;
        let t = g.tanh(h)?;
        g.scale(t, S::lit(self.v_max))
    }

    /// Single-point evaluation without recording a graph.
    pub fn eval<S: Scalar>(&self, store: &ParamStore<S>, p: [f64; 2], u: [f64; 2]) -> [f64; 2] {
        let mut h = vec![p[0] / PED_POSITION_SCALE, p[1] / PED_POSITION_SCALE, u[0], u[1]];
        let n = self.mlp.layers.len();
        for (i, layer) in self.mlp.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias);
            let mut y: Vec<f64> = b.data().iter().map(|v| v.to_f64_lossy()).collect();
            for (r, &hr) in h.iter().enumerate() {
                for (c, yc) in y.iter_mut().enumerate() {
                    *yc += hr * w.data()[r * layer.fan_out + c].to_f64_lossy();
                }
            }
            if i + 1 < n {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = y;
        }
        [self.v_max * h[0].tanh(), self.v_max * h[1].tanh()]
    }
}

/// Integrates `controls` from `start`, returning one position per control.
/// Vehicle controls are clamped to `max_accel` before every step.
pub fn rollout<S: Scalar>(
    start: &VehicleState,
    controls: &[[f64; 2]],
    agent_type: AgentType,
    consts: &PhysicalConstants,
    ped: Option<(&PedestrianNet, &ParamStore<S>)>,
) -> Result<Vec<[f64; 2]>> {
    let dt = consts.dt;
    let mut out = Vec::with_capacity(controls.len());
    match agent_type {
        AgentType::Vehicle => {
            let mut z = start.to_array();
            for &u in controls {
                let u = clamp_control(u, consts.max_accel());
                z = heun_step(&z, u, dt, |z, u| {
                    vehicle_derivative(&VehicleState::from_array(*z), u).to_array()
                });
                out.push([z[0], z[1]]);
            }
        }
        AgentType::Pedestrian => {
            let (net, store) = ped.ok_or_else(|| Error::Contract("pedestrian rollout needs a dynamics net".into()))?;
            let mut p = start.p;
            for &u in controls {
                p = heun_step(&p, u, dt, |p, u| net.eval(store, *p, u));
                out.push(p);
            }
        }
    }
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Rollout("non-finite state during integration".into()));
    }
    Ok(out)
}

/// Batched rollout on a graph. `p0, v0: [M, 2]`, `controls: [M, 2·T]`
/// interleaved per step, `is_vehicle` per row. Returns positions
/// `[M, 2·T]` in the same layout. Vehicle rows use the clamped point-mass
/// model, pedestrian rows the learned net.
#[allow(clippy::too_many_arguments)]
pub fn rollout_graph<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    net: &PedestrianNet,
    consts: &PhysicalConstants,
    p0: Var,
    v0: Var,
    controls: Var,
    is_vehicle: &[bool],
) -> Result<Var> {
    let m = is_vehicle.len();
    let cols = g.shape(controls)[1];
    if cols % 2 != 0 || g.shape(controls)[0] != m {
        return Err(Error::dim("rollout_graph", format!("controls {:?} for {m} rows", g.shape(controls))));
    }
    let steps = cols / 2;
    let dt = S::lit(consts.dt);
    let half_dt = S::lit(0.5 * consts.dt);
    let any_vehicle = is_vehicle.iter().any(|&v| v);
    let any_ped = is_vehicle.iter().any(|&v| !v);
    let mask_of = |want: bool| {
        Tensor::from_fn(&[m, 2], |i| if is_vehicle[i / 2] == want { S::one() } else { S::zero() })
    };
    let veh_mask = g.constant(mask_of(true));
    let ped_mask = g.constant(mask_of(false));

    let (mut p_veh, mut v_veh, mut p_ped) = (p0, v0, p0);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let u = g.slice(controls, 2 * t, 2)?;
        let mut parts = Vec::new();
        if any_vehicle {
            let uc = g.clamp_norm(u, S::lit(consts.max_accel()))?;
            // k1 = (v, u); predictor z̃ = z + dt·k1; k2 = (ṽ, u)
            let v_pred = {
                let du = g.scale(uc, dt)?;
                g.add(v_veh, du)?
            };
            let vsum = g.add(v_veh, v_pred)?;
            let dp = g.scale(vsum, half_dt)?;
            p_veh = g.add(p_veh, dp)?;
            let usum = g.scale(uc, S::lit(2.0))?;
            let dv = g.scale(usum, half_dt)?;
            v_veh = g.add(v_veh, dv)?;
            parts.push(g.mul(p_veh, veh_mask)?);
        }
        if any_ped {
            let k1 = net.forward(g, store, p_ped, u)?;
            let step = g.scale(k1, dt)?;
            let pred = g.add(p_ped, step)?;
            let k2 = net.forward(g, store, pred, u)?;
            let ks = g.add(k1, k2)?;
            let dp = g.scale(ks, half_dt)?;
            p_ped = g.add(p_ped, dp)?;
            parts.push(g.mul(p_ped, ped_mask)?);
        }
        let pos = if parts.len() == 2 { g.add(parts[0], parts[1])? } else { parts[0] };
        outputs.push(pos);
    }
    g.concat(&outputs)
}

/// Largest per-step implied acceleration `‖Δv/Δt‖` of a position sequence
/// that starts from `start`.
pub fn max_implied_accel(start: &VehicleState, positions: &[[f64; 2]], dt: f64) -> f64 {
    let mut prev_p = start.p;
    let mut prev_v = start.v;
    let mut worst = 0.0f64;
    for &p in positions {
        // under Heun with a held control, p' = p + dt·v + dt²/2·u and
        // v' = v + dt·u, so v' = 2(p' − p)/dt − v
        let v = [2.0 * (p[0] - prev_p[0]) / dt - prev_v[0], 2.0 * (p[1] - prev_p[1]) / dt - prev_v[1]];
        let a = ((v[0] - prev_v[0]) / dt).hypot((v[1] - prev_v[1]) / dt);
        worst = worst.max(a);
        prev_p = p;
        prev_v = v;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, grad_check_params, project_to_scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_control([1.0, 0.0], MU_G), [1.0, 0.0]);
        assert!(close(clamp_control([10.0, 0.0], MU_G), [6.867, 0.0], 1e-12));
        assert!(close(clamp_control([6.0, 8.0], MU_G), [4.1202, 5.4936], 1e-12));
    }

    #[test]
    fn clamp_is_idempotent_and_continuous() {
        let u = clamp_control([30.0, -4.0], MU_G);
        assert_eq!(clamp_control(u, MU_G), u);
        let inside = clamp_control([MU_G * (1.0 - 1e-12), 0.0], MU_G);
        let outside = clamp_control([MU_G * (1.0 + 1e-12), 0.0], MU_G);
        assert!((inside[0] - outside[0]).abs() < 1e-10);
    }

    #[test]
    fn vehicle_derivative_is_definition() {
        let z = VehicleState { p: [3.0, 4.0], v: [1.0, 2.0] };
        let d = vehicle_derivative(&z, [0.0, -1.0]);
        assert_eq!(d, VehicleState { p: [1.0, 2.0], v: [0.0, -1.0] });
        let zero = vehicle_derivative(&VehicleState::default(), [0.0, 0.0]);
        assert_eq!(zero, VehicleState::default());
    }

    #[test]
    fn heun_examples() {
        let f = |z: &[f64; 4], u: [f64; 2]| vehicle_derivative(&VehicleState::from_array(*z), u).to_array();
        let z = heun_step(&[0.0, 0.0, 1.0, 0.0], [0.0, 0.0], 0.4, f);
        assert!(close([z[0], z[1]], [0.4, 0.0], 1e-15) && close([z[2], z[3]], [1.0, 0.0], 1e-15));
        let z = heun_step(&[0.0, 0.0, 1.0, 0.0], [0.0, 1.0], 0.4, f);
        assert!(close([z[0], z[1]], [0.4, 0.08], 1e-15) && close([z[2], z[3]], [1.0, 0.4], 1e-15));
        let mut z = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..10 {
            z = heun_step(&z, [0.0, 0.0], 0.4, f);
        }
        assert!(close([z[0], z[1]], [4.0, 0.0], 1e-12));
    }

    #[test]
    fn vehicle_rollout_examples() {
        let c = PhysicalConstants::default();
        let start = VehicleState { p: [0.0, 0.0], v: [2.0, 0.0] };
        let out = rollout::<f64>(&start, &[[0.0, 0.0]; 10], AgentType::Vehicle, &c, None).unwrap();
        for (k, p) in out.iter().enumerate() {
            assert!(close(*p, [0.8 * (k + 1) as f64, 0.0], 1e-12));
        }
        let rest = VehicleState::default();
        let out = rollout::<f64>(&rest, &[[0.0, MU_G]; 10], AgentType::Vehicle, &c, None).unwrap();
        for (k, p) in out.iter().enumerate() {
            let t = 0.4 * (k + 1) as f64;
            assert!(close(*p, [0.0, 0.5 * MU_G * t * t], 1e-9));
        }
    }

    #[test]
    fn pedestrian_zero_net_is_stationary_and_bounded() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PedestrianNet::new(&mut store, "ped", V_PED_MAX, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        let mut zero = store.clone();
        for id in &ids {
            let shape = zero.get(*id).shape().to_vec();
            zero.set(*id, Tensor::zeros(&shape)).unwrap();
        }
        let start = VehicleState { p: [1.5, -2.0], v: [1.0, 1.0] };
        let c = PhysicalConstants::default();
        let out = rollout(&start, &[[3.0, -1.0]; 10], AgentType::Pedestrian, &c, Some((&net, &zero))).unwrap();
        assert!(out.iter().all(|p| *p == [1.5, -2.0]));

        let bound = V_PED_MAX * 2f64.sqrt();
        for k in 0..200 {
            let x = k as f64;
            let v = net.eval(&store, [x * 0.7 - 50.0, 30.0 - x], [x.sin() * 40.0, x.cos() * 90.0]);
            assert!(v[0].hypot(v[1]) <= bound);
        }
        let out = rollout(&start, &[[50.0, -80.0]; 10], AgentType::Pedestrian, &c, Some((&net, &store))).unwrap();
        let mut prev = start.p;
        for p in out {
            assert!((p[0] - prev[0]).hypot(p[1] - prev[1]) <= bound * c.dt + 1e-12);
            prev = p;
        }
    }

    fn graph_rollout(
        net: &PedestrianNet,
        store: &ParamStore<f64>,
        start: &[VehicleState],
        controls: &[Vec<[f64; 2]>],
        is_vehicle: &[bool],
    ) -> Vec<f64> {
        let m = start.len();
        let t = controls[0].len();
        let mut g = Graph::inference();
        let p0 = g.constant(Tensor::from_fn(&[m, 2], |i| start[i / 2].p[i % 2]));
        let v0 = g.constant(Tensor::from_fn(&[m, 2], |i| start[i / 2].v[i % 2]));
        let u = g.constant(Tensor::from_fn(&[m, 2 * t], |i| controls[i / (2 * t)][(i % (2 * t)) / 2][i % 2]));
        let out = rollout_graph(&mut g, store, net, &PhysicalConstants::default(), p0, v0, u, is_vehicle).unwrap();
        g.value(out).to_f64_vec()
    }

    #[test]
    fn graph_rollout_matches_plain() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PedestrianNet::new(&mut store, "ped", V_PED_MAX, &mut rng);
        let starts = [
            VehicleState { p: [1.0, 2.0], v: [3.0, -1.0] },
            VehicleState { p: [-4.0, 0.5], v: [0.2, 0.3] },
            VehicleState { p: [0.0, 0.0], v: [0.0, 0.0] },
        ];
        let types = [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Vehicle];
        let controls: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|a| (0..10).map(|k| [((a * 10 + k) as f64).sin() * 9.0, ((k * 3) as f64).cos() * 4.0]).collect())
            .collect();
        let flags: Vec<bool> = types.iter().map(|t| *t == AgentType::Vehicle).collect();
        let g = graph_rollout(&net, &store, &starts, &controls, &flags);
        for a in 0..3 {
            let plain = rollout(&starts[a], &controls[a], types[a], &PhysicalConstants::default(), Some((&net, &store))).unwrap();
            for (k, p) in plain.iter().enumerate() {
                assert!((g[a * 20 + 2 * k] - p[0]).abs() < 1e-12);
                assert!((g[a * 20 + 2 * k + 1] - p[1]).abs() < 1e-12);
            }
            if flags[a] {
                assert!(max_implied_accel(&starts[a], &plain, 0.4) <= MU_G + 1e-6);
            }
        }
    }

    #[test]
    fn control_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = PedestrianNet::new(&mut store, "ped", V_PED_MAX, &mut rng);
        let flags = [true, false, true];
        // controls kept well inside the adhesion disc
        let u = Tensor::from_fn(&[3, 8], |i| ((i * 37 % 11) as f64 - 5.0) * 0.5);
        let p0 = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let v0 = Tensor::from_fn(&[3, 2], |i| 0.3 * i as f64);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let y = rollout_graph(g, &store, &net, &PhysicalConstants::default(), v[0], v[1], v[2], &flags)?;
            project_to_scalar(g, y)
        };
        let r = grad_check(build, &[p0.clone(), v0.clone(), u.clone()], 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");

        let build_p = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let (a, b, c) = (g.constant(p0.clone()), g.constant(v0.clone()), g.constant(u.clone()));
            let y = rollout_graph(g, s, &net, &PhysicalConstants::default(), a, b, c, &flags)?;
            project_to_scalar(g, y)
        };
        let r = grad_check_params(&store, build_p, 1e-5, 1e-5, 40, &mut rng).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn clamp_gradient_outside_the_disc() {
        let u = Tensor::from_f64(&[2, 2], &[9.0, 4.0, -3.0, 12.0]).unwrap();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let c = g.clamp_norm(v[0], MU_G)?;
            project_to_scalar(g, c)
        };
        let r = grad_check(build, &[u], 1e-6, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
