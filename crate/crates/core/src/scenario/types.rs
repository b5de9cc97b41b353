use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Nominal sampling interval of every recording, seconds.
pub const DT: f64 = 0.4;
/// Points per map polyline after arc-length resampling.
pub const POLYLINE_POINTS: usize = 10;
/// Number of polyline type codes (one-hot width).
pub const POLYLINE_TYPES: usize = 4;
/// Per-point map feature width: x, y and a one-hot type code.
pub const MAP_FEATURES: usize = 2 + POLYLINE_TYPES;
/// Width of the per-timestamp agent feature vector.
pub const AGENT_FEATURES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentType {
    Vehicle,
    Pedestrian,
}

impl AgentType {
    pub const ALL: [AgentType; 2] = [AgentType::Vehicle, AgentType::Pedestrian];

    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
        }
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "vehicle" => Ok(AgentType::Vehicle),
            "pedestrian" => Ok(AgentType::Pedestrian),
            other => Err(Error::Contract(format!("unknown agent type {other:?}"))),
        }
    }
}

/// Recorded state at one timestamp. `v` is signed: negative while the
/// agent moves against its heading.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub v: f64,
    pub ax: f64,
    pub ay: f64,
}

impl AgentState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.h, self.v, self.ax, self.ay]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            h: a[2],
            v: a[3],
            ax: a[4],
            ay: a[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: u64,
    pub agent_type: AgentType,
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
}

impl AgentTrack {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.valid.get(t).copied().unwrap_or(false)
    }

    pub fn state(&self, t: usize) -> Option<&AgentState> {
        self.is_valid(t).then(|| &self.states[t])
    }
}

/// Map polyline type codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolylineKind {
    LaneEdge = 0,
    SpotBoundary = 1,
    Crosswalk = 2,
    Obstacle = 3,
}

impl PolylineKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PolylineKind::LaneEdge),
            1 => Some(PolylineKind::SpotBoundary),
            2 => Some(PolylineKind::Crosswalk),
            3 => Some(PolylineKind::Obstacle),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub kind: PolylineKind,
}

impl Polyline {
    /// Builds a polyline resampled to [`POLYLINE_POINTS`] points.
    pub fn resampled(points: &[[f64; 2]], kind: PolylineKind) -> Self {
        Self {
            points: resample_polyline(points, POLYLINE_POINTS),
            kind,
        }
    }

    /// Smallest distance from `p` to any segment of the polyline.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        match self.points.len() {
            0 => f64::INFINITY,
            1 => dist(self.points[0], p),
            _ => self
                .points
                .windows(2)
                .map(|w| point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneMap {
    /// Crossable markings: lane edges, spot boundaries, crosswalks.
    pub soft: Vec<Polyline>,
    /// Obstacle outlines such as parked-vehicle footprints.
    pub hard: Vec<Polyline>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dt: f64,
    pub agents: Vec<AgentTrack>,
    pub map: SceneMap,
}

impl Scene {
    pub fn steps(&self) -> usize {
        self.agents.iter().map(AgentTrack::len).max().unwrap_or(0)
    }

    pub fn agent(&self, id: u64) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Applies a rotation by `theta` followed by a translation to every
    /// pose, acceleration and map point.
    pub fn transformed(&self, theta: f64, tx: f64, ty: f64) -> Scene {
        let (s, c) = theta.sin_cos();
        let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
        let agents = self
            .agents
            .iter()
            .map(|a| AgentTrack {
                states: a
                    .states
                    .iter()
                    .map(|st| {
                        let (x, y) = rot(st.x, st.y);
                        let (ax, ay) = rot(st.ax, st.ay);
                        AgentState {
                            x: x + tx,
                            y: y + ty,
                            h: wrap_angle(st.h + theta),
                            v: st.v,
                            ax,
                            ay,
                        }
                    })
                    .collect(),
                ..a.clone()
            })
            .collect();
        let tp = |p: &Polyline| Polyline {
            points: p
                .points
                .iter()
                .map(|q| {
                    let (x, y) = rot(q[0], q[1]);
                    [x + tx, y + ty]
                })
                .collect(),
            kind: p.kind,
        };
        Scene {
            dt: self.dt,
            agents,
            map: SceneMap {
                soft: self.map.soft.iter().map(tp).collect(),
                hard: self.map.hard.iter().map(tp).collect(),
            },
        }
    }
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Resamples a polyline to `n` points evenly spaced by arc length,
/// keeping both endpoints.
pub fn resample_polyline(points: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    assert!(n >= 2, "need at least two output points");
    match points.len() {
        0 => return vec![[0.0, 0.0]; n],
        1 => return vec![points[0]; n],
        _ => {}
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![points[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out[n - 1] = *points.last().unwrap();
    out
}
