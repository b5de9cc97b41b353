//! Ego-centric sample construction.
//!
//! Every pose in the scene is expressed in the frame of the ego vehicle at
//! the prediction time `t0` (origin at the ego position, x-axis along its
//! heading). Agent features are then computed from those transformed
//! tracks, so the result does not depend on the scene's world frame.

use serde::{Deserialize, Serialize};

use super::types::{
    dist, wrap_angle, AgentState, AgentTrack, AgentType, Polyline, Scene, AGENT_FEATURES,
    MAP_FEATURES, POLYLINE_POINTS, POLYLINE_TYPES,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Observed history length, including `t0`.
    pub t_past: usize,
    pub t_future: usize,
    /// Agents and polylines farther than this from the ego at `t0` are
    /// dropped, metres.
    pub radius: f64,
    pub max_agents: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            t_past: 10,
            t_future: 10,
            radius: 20.0,
            max_agents: 32,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_past < 2 || self.t_future < 1 {
            return Err(Error::Config(format!(
                "t_past must be >= 2 and t_future >= 1 (got {}, {})",
                self.t_past, self.t_future
            )));
        }
        if !(self.radius > 0.0) || self.max_agents == 0 {
            return Err(Error::Config("radius and max_agents must be positive".into()));
        }
        Ok(())
    }
}

/// One ego-centric sample. Agent 0 is the ego. Agents are stored unpadded.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoSample {
    pub scene_index: usize,
    pub t0: usize,
    pub ego_id: u64,
    pub t_past: usize,
    pub t_future: usize,
    pub agent_ids: Vec<u64>,
    pub agent_types: Vec<AgentType>,
    /// `[N, t_past, 12]`: x, y, h, v, a_x, a_y and the same six relative to
    /// the ego at the same timestamp.
    pub features: Vec<f64>,
    /// `[N, t_past]`
    pub agent_valid: Vec<bool>,
    /// Agents whose velocity or acceleration needed backfilling.
    pub backfilled: Vec<bool>,
    pub soft: Vec<Polyline>,
    pub hard: Vec<Polyline>,
    /// `[N, t_future, 2]` ground-truth future positions.
    pub future: Vec<f64>,
    /// `[N, t_future]`
    pub future_valid: Vec<bool>,
}

impl EgoSample {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn feature(&self, agent: usize, t: usize) -> &[f64] {
        let off = (agent * self.t_past + t) * AGENT_FEATURES;
        &self.features[off..off + AGENT_FEATURES]
    }

    pub fn is_valid(&self, agent: usize, t: usize) -> bool {
        self.agent_valid[agent * self.t_past + t]
    }

    pub fn future_point(&self, agent: usize, t: usize) -> [f64; 2] {
        let off = (agent * self.t_future + t) * 2;
        [self.future[off], self.future[off + 1]]
    }

    pub fn future_is_valid(&self, agent: usize, t: usize) -> bool {
        self.future_valid[agent * self.t_future + t]
    }

    /// Ground-truth future of one agent as `[t_future, 2]`.
    pub fn future_of(&self, agent: usize) -> &[f64] {
        &self.future[agent * self.t_future * 2..(agent + 1) * self.t_future * 2]
    }

    pub fn future_valid_of(&self, agent: usize) -> &[bool] {
        &self.future_valid[agent * self.t_future..(agent + 1) * self.t_future]
    }

    /// Last valid observed index of an agent, if any.
    pub fn last_valid(&self, agent: usize) -> Option<usize> {
        (0..self.t_past).rev().find(|&t| self.is_valid(agent, t))
    }

    /// Position and velocity vector at the last valid observation.
    pub fn anchor(&self, agent: usize) -> ([f64; 2], [f64; 2]) {
        match self.last_valid(agent) {
            Some(t) => {
                let f = self.feature(agent, t);
                let (s, c) = f[2].sin_cos();
                ([f[0], f[1]], [f[3] * c, f[3] * s])
            }
            None => ([0.0; 2], [0.0; 2]),
        }
    }

    /// Past positions over valid timestamps.
    pub fn past_positions(&self, agent: usize) -> Vec<[f64; 2]> {
        (0..self.t_past)
            .filter(|&t| self.is_valid(agent, t))
            .map(|t| {
                let f = self.feature(agent, t);
                [f[0], f[1]]
            })
            .collect()
    }

    /// Flattened polyline features `[n, POLYLINE_POINTS * MAP_FEATURES]`.
    pub fn polyline_features(polys: &[Polyline]) -> Vec<f64> {
        let mut out = Vec::with_capacity(polys.len() * POLYLINE_POINTS * MAP_FEATURES);
        for p in polys {
            for q in &p.points {
                out.push(q[0]);
                out.push(q[1]);
                for k in 0..POLYLINE_TYPES {
                    out.push(if k == p.kind.code() as usize { 1.0 } else { 0.0 });
                }
            }
        }
        out
    }

    /// Copy with only the selected polylines kept.
    pub fn with_polylines(&self, keep_soft: &[bool], keep_hard: &[bool]) -> EgoSample {
        let pick = |ps: &[Polyline], keep: &[bool]| {
            ps.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| p.clone())
                .collect()
        };
        EgoSample {
            soft: pick(&self.soft, keep_soft),
            hard: pick(&self.hard, keep_hard),
            ..self.clone()
        }
    }
}

/// Rigid transform into the frame of a pose.
#[derive(Clone, Copy, Debug)]
struct Frame {
    ox: f64,
    oy: f64,
    heading: f64,
    cos: f64,
    sin: f64,
}

impl Frame {
    fn at(s: &AgentState) -> Self {
        Self {
            ox: s.x,
            oy: s.y,
            heading: s.h,
            cos: s.h.cos(),
            sin: s.h.sin(),
        }
    }

    fn vector(&self, x: f64, y: f64) -> [f64; 2] {
        [self.cos * x + self.sin * y, -self.sin * x + self.cos * y]
    }

    fn point(&self, p: [f64; 2]) -> [f64; 2] {
        self.vector(p[0] - self.ox, p[1] - self.oy)
    }

    fn state(&self, s: &AgentState) -> AgentState {
        let [x, y] = self.point([s.x, s.y]);
        let [ax, ay] = self.vector(s.ax, s.ay);
        AgentState {
            x,
            y,
            h: wrap_angle(s.h - self.heading),
            v: s.v,
            ax,
            ay,
        }
    }

    fn track(&self, t: &AgentTrack) -> AgentTrack {
        AgentTrack {
            states: t.states.iter().map(|s| self.state(s)).collect(),
            ..t.clone()
        }
    }

    fn polyline(&self, p: &Polyline) -> Polyline {
        Polyline {
            points: p.points.iter().map(|&q| self.point(q)).collect(),
            kind: p.kind,
        }
    }
}

/// Finite-difference velocity at `t` using `t-1 → t`, or `t → t+1` when
/// the earlier sample is missing and `t+1 <= limit`. Returns the vector,
/// the displacement used, and whether it was backfilled.
fn velocity(track: &AgentTrack, t: usize, limit: usize, dt: f64) -> Option<([f64; 2], bool)> {
    if !track.is_valid(t) {
        return None;
    }
    let p = track.states[t].position();
    if t > 0 && track.is_valid(t - 1) {
        let q = track.states[t - 1].position();
        return Some(([(p[0] - q[0]) / dt, (p[1] - q[1]) / dt], false));
    }
    if t + 1 <= limit && track.is_valid(t + 1) {
        let q = track.states[t + 1].position();
        return Some(([(q[0] - p[0]) / dt, (q[1] - p[1]) / dt], true));
    }
    None
}

/// The six absolute kinematic features of one track at `t`, plus a
/// backfill flag. Tracks must already be in the target frame.
fn absolute_features(track: &AgentTrack, t: usize, limit: usize, dt: f64) -> ([f64; 6], bool) {
    let s = &track.states[t];
    let mut flagged = false;
    let (vel, v) = match velocity(track, t, limit, dt) {
        Some((vel, back)) => {
            flagged |= back;
            let speed = vel[0].hypot(vel[1]);
            let along = vel[0] * s.h.cos() + vel[1] * s.h.sin();
            let signed = if speed * dt > 1e-6 && along < 0.0 { -speed } else { speed };
            (vel, signed)
        }
        None => {
            flagged = true;
            ([0.0; 2], 0.0)
        }
    };
    let prev = if t > 0 { velocity(track, t - 1, limit, dt) } else { None };
    let acc = match prev {
        Some((pv, back)) => {
            flagged |= back;
            [(vel[0] - pv[0]) / dt, (vel[1] - pv[1]) / dt]
        }
        None => match velocity(track, t + 1, limit, dt).filter(|_| t + 1 <= limit) {
            Some((nv, _)) => {
                flagged = true;
                [(nv[0] - vel[0]) / dt, (nv[1] - vel[1]) / dt]
            }
            None => {
                flagged = true;
                [0.0; 2]
            }
        },
    };
    ([s.x, s.y, s.h, v, acc[0], acc[1]], flagged)
}

/// 12-dimensional feature vector of `track` at `t` relative to `ego`.
/// Both tracks must be expressed in the same frame. Samples after
/// `limit` are never read. Relative entries are zero when the ego is not
/// observed at `t`.
pub fn compute_features(
    track: &AgentTrack,
    ego: &AgentTrack,
    t: usize,
    limit: usize,
    dt: f64,
) -> Result<([f64; AGENT_FEATURES], bool)> {
    if !track.is_valid(t) {
        return Err(Error::Contract(format!(
            "agent {} has no state at t={t}",
            track.id
        )));
    }
    let (abs, flagged) = absolute_features(track, t, limit, dt);
    let mut out = [0.0; AGENT_FEATURES];
    out[..6].copy_from_slice(&abs);
    if ego.is_valid(t) {
        let (e, _) = absolute_features(ego, t, limit, dt);
        for k in 0..6 {
            out[6 + k] = abs[k] - e[k];
        }
        out[8] = wrap_angle(abs[2] - e[2]);
    }
    Ok((out, flagged))
}

/// Builds the ego-centric sample for `ego_id` at prediction time `t0`.
pub fn ego_transform(scene: &Scene, ego_id: u64, t0: usize, cfg: &SampleConfig) -> Result<EgoSample> {
    ego_transform_indexed(scene, 0, ego_id, t0, cfg)
}

pub(crate) fn ego_transform_indexed(
    scene: &Scene,
    scene_index: usize,
    ego_id: u64,
    t0: usize,
    cfg: &SampleConfig,
) -> Result<EgoSample> {
    let ego = scene
        .agent(ego_id)
        .ok_or_else(|| Error::Rejected(format!("no agent with id {ego_id}")))?;
    let ego_state = ego
        .state(t0)
        .ok_or_else(|| Error::Rejected(format!("ego {ego_id} not observed at t0={t0}")))?;
    if t0 + 1 < cfg.t_past || t0 + cfg.t_future >= scene.steps() {
        return Err(Error::Rejected(format!(
            "t0={t0} leaves no room for {} past and {} future steps in {}",
            cfg.t_past,
            cfg.t_future,
            scene.steps()
        )));
    }
    let frame = Frame::at(ego_state);
    let ego_local = frame.track(ego);

    let mut others: Vec<(f64, &AgentTrack)> = scene
        .agents
        .iter()
        .filter(|a| a.id != ego_id)
        .filter_map(|a| a.state(t0).map(|s| (dist(s.position(), ego_state.position()), a)))
        .filter(|(d, _)| *d <= cfg.radius)
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    others.truncate(cfg.max_agents.saturating_sub(1));

    let mut tracks = vec![ego_local.clone()];
    tracks.extend(others.iter().map(|(_, a)| frame.track(a)));

    let n = tracks.len();
    let (tp, tf) = (cfg.t_past, cfg.t_future);
    let first = t0 + 1 - tp;
    let mut features = vec![0.0; n * tp * AGENT_FEATURES];
    let mut agent_valid = vec![false; n * tp];
    let mut backfilled = vec![false; n];
    let mut future = vec![0.0; n * tf * 2];
    let mut future_valid = vec![false; n * tf];
    for (i, tr) in tracks.iter().enumerate() {
        for k in 0..tp {
            let t = first + k;
            if !tr.is_valid(t) {
                continue;
            }
            let (f, flag) = compute_features(tr, &ego_local, t, t0, scene.dt)?;
            let off = (i * tp + k) * AGENT_FEATURES;
            features[off..off + AGENT_FEATURES].copy_from_slice(&f);
            agent_valid[i * tp + k] = true;
            backfilled[i] |= flag;
        }
        for k in 0..tf {
            if let Some(s) = tr.state(t0 + 1 + k) {
                future[(i * tf + k) * 2] = s.x;
                future[(i * tf + k) * 2 + 1] = s.y;
                future_valid[i * tf + k] = true;
            }
        }
    }

    let near = |p: &&Polyline| p.distance_to(ego_state.position()) <= cfg.radius;
    Ok(EgoSample {
        scene_index,
        t0,
        ego_id,
        t_past: tp,
        t_future: tf,
        agent_ids: tracks.iter().map(|t| t.id).collect(),
        agent_types: tracks.iter().map(|t| t.agent_type).collect(),
        features,
        agent_valid,
        backfilled,
        soft: scene.map.soft.iter().filter(near).map(|p| frame.polyline(p)).collect(),
        hard: scene.map.hard.iter().filter(near).map(|p| frame.polyline(p)).collect(),
        future,
        future_valid,
    })
}

/// Which samples to cut from each scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub sample: SampleConfig,
    /// Spacing between prediction times within a scene.
    pub t0_stride: usize,
    /// Egos per prediction time; vehicles are taken in id order.
    pub egos_per_t0: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample: SampleConfig::default(),
            t0_stride: 10,
            egos_per_t0: 2,
        }
    }
}

/// Cuts ego-centric samples from every scene. Only vehicles serve as ego.
/// The iteration order (scene, t0, ego id) is deterministic.
pub fn build_samples(scenes: &[Scene], cfg: &DatasetConfig) -> Result<Vec<EgoSample>> {
    cfg.sample.validate()?;
    let stride = cfg.t0_stride.max(1);
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let steps = scene.steps();
        if steps < cfg.sample.t_past + cfg.sample.t_future {
            continue;
        }
        let mut t0 = cfg.sample.t_past - 1;
        while t0 + cfg.sample.t_future < steps {
            let mut egos: Vec<&AgentTrack> = scene
                .agents
                .iter()
                .filter(|a| a.agent_type == AgentType::Vehicle && a.is_valid(t0))
                .collect();
            egos.sort_by_key(|a| a.id);
            for ego in egos.into_iter().take(cfg.egos_per_t0) {
                out.push(ego_transform_indexed(scene, si, ego.id, t0, &cfg.sample)?);
            }
            t0 += stride;
        }
    }
    Ok(out)
}
