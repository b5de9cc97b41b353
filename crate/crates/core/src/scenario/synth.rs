//! Synthetic parking-lot scenes.
//!
//! A lot is a stack of horizontal aisles, each flanked by a row of
//! perpendicular spots on both sides, joined by vertical connector lanes at
//! the left and right ends. Vehicles follow lane centerlines made of
//! straight segments and quarter-circle arcs with a speed profile that is
//! piecewise constant in acceleration. Pedestrians walk smoothed random
//! walks between parked cars, aisle ends and crosswalks, around parked cars.
//! The whole lot is then placed at a random pose.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{
    dist, wrap_angle, AgentState, AgentTrack, AgentType, Polyline, PolylineKind, Scene, SceneMap, DT,
};
use crate::error::{Error, Result};
use crate::kinematics::MU_G;

/// Longitudinal acceleration limit of generated vehicles, m/s².
const VEHICLE_LON_ACCEL: f64 = 1.5;
/// Lateral (centripetal) acceleration limit of generated vehicles, m/s².
const VEHICLE_LAT_ACCEL: f64 = 2.5;
const PEDESTRIAN_MAX_SPEED: f64 = 2.0;
const SUBSTEPS: usize = 8;
const PROFILE_DS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    /// Aisles; each carries a row of spots on both sides.
    pub rows_of_spots: usize,
    pub spots_per_row: usize,
    pub lane_width: f64,
    pub spot_width: f64,
    pub spot_depth: f64,
    /// Fraction of spots not used by moving vehicles that hold a parked car.
    pub occupancy: f64,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub episode_steps: usize,
    pub crosswalks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 64,
            rows_of_spots: 2,
            spots_per_row: 12,
            lane_width: 6.5,
            spot_width: 2.6,
            spot_depth: 5.2,
            occupancy: 0.55,
            vehicles: 6,
            pedestrians: 3,
            episode_steps: 40,
            crosswalks: 2,
        }
    }
}

impl SynthConfig {
    pub fn spot_count(&self) -> usize {
        self.rows_of_spots * 2 * self.spots_per_row
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows_of_spots == 0 || self.spots_per_row < 4 {
            return Err(Error::Config(
                "need at least one aisle and four spots per row".into(),
            ));
        }
        if self.spot_count() < self.vehicles {
            return Err(Error::Config(format!(
                "{} spots cannot host {} vehicles",
                self.spot_count(),
                self.vehicles
            )));
        }
        if !(self.lane_width >= 4.0 && self.spot_width > 1.5 && self.spot_depth > 3.0) {
            return Err(Error::Config("lot dimensions out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return Err(Error::Config("occupancy must lie in [0, 1]".into()));
        }
        if self.episode_steps < 2 {
            return Err(Error::Config("episode_steps must be at least 2".into()));
        }
        Ok(())
    }
}

/// Lot geometry in its own frame; `[0, width] × [0, height]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LotLayout {
    pub width: f64,
    pub height: f64,
    pub lane_width: f64,
    pub spot_width: f64,
    pub spot_depth: f64,
    pub rows: usize,
    pub spots_per_row: usize,
    /// Placement of the lot frame in the world: rotation then translation.
    pub placement: (f64, f64, f64),
}

impl LotLayout {
    fn from_config(c: &SynthConfig) -> Self {
        let width = 2.0 * c.lane_width + c.spots_per_row as f64 * c.spot_width;
        let height = c.rows_of_spots as f64 * (c.lane_width + 2.0 * c.spot_depth);
        Self {
            width,
            height,
            lane_width: c.lane_width,
            spot_width: c.spot_width,
            spot_depth: c.spot_depth,
            rows: c.rows_of_spots,
            spots_per_row: c.spots_per_row,
            placement: (0.0, 0.0, 0.0),
        }
    }

    fn aisle_y(&self, j: usize) -> f64 {
        self.spot_depth
            + 0.5 * self.lane_width
            + j as f64 * (self.lane_width + 2.0 * self.spot_depth)
    }

    fn left_x(&self) -> f64 {
        0.5 * self.lane_width
    }

    fn right_x(&self) -> f64 {
        self.width - 0.5 * self.lane_width
    }

    fn spots_x0(&self) -> f64 {
        self.lane_width
    }

    fn spot(&self, s: Spot) -> SpotGeom {
        let cx = self.spots_x0() + (s.index as f64 + 0.5) * self.spot_width;
        let y_aisle = self.aisle_y(s.aisle);
        let sign = if s.upper { 1.0 } else { -1.0 };
        let edge = y_aisle + sign * 0.5 * self.lane_width;
        SpotGeom {
            center: [cx, edge + sign * 0.5 * self.spot_depth],
            entrance_y: edge,
            aisle_y: y_aisle,
            sign,
        }
    }

    /// Half width and half depth of a parked car's footprint.
    fn car_half_extent(&self) -> (f64, f64) {
        (0.5 * self.spot_width - 0.35, 0.5 * self.spot_depth - 0.3)
    }

    /// Maps a lot-frame point to the world.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (theta, tx, ty) = self.placement;
        let (s, c) = theta.sin_cos();
        [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty]
    }

    /// Maps a world point back into the lot frame.
    pub fn to_lot(&self, p: [f64; 2]) -> [f64; 2] {
        let (theta, tx, ty) = self.placement;
        let (s, c) = theta.sin_cos();
        let (x, y) = (p[0] - tx, p[1] - ty);
        [c * x + s * y, -s * x + c * y]
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let q = self.to_lot(p);
        q[0] >= -tol && q[0] <= self.width + tol && q[1] >= -tol && q[1] <= self.height + tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Spot {
    aisle: usize,
    upper: bool,
    index: usize,
}

#[derive(Clone, Copy, Debug)]
struct Crosswalk {
    aisle: usize,
    x: f64,
}

struct SpotGeom {
    center: [f64; 2],
    entrance_y: f64,
    aisle_y: f64,
    sign: f64,
}

#[derive(Clone, Copy, Debug)]
enum Segment {
    Line { from: [f64; 2], to: [f64; 2] },
    /// Circular arc starting at `start_angle` (angle of the radius vector)
    /// sweeping `sweep` radians (positive = counter-clockwise).
    Arc { center: [f64; 2], radius: f64, start_angle: f64, sweep: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to } => (to[0] - from[0]).hypot(to[1] - from[1]),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point, tangent angle and signed curvature at arc length `s`.
    fn eval(&self, s: f64) -> ([f64; 2], f64, f64) {
        match *self {
            Segment::Line { from, to } => {
                let len = self.length().max(1e-12);
                let t = (s / len).clamp(0.0, 1.0);
                let p = [from[0] + t * (to[0] - from[0]), from[1] + t * (to[1] - from[1])];
                (p, (to[1] - from[1]).atan2(to[0] - from[0]), 0.0)
            }
            Segment::Arc { center, radius, start_angle, sweep } => {
                let dir = sweep.signum();
                let a = start_angle + dir * (s / radius).clamp(0.0, sweep.abs());
                let p = [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                (p, a + dir * FRAC_PI_2, dir / radius)
            }
        }
    }
}

/// A drivable path: consecutive segments, traversed in order.
#[derive(Clone, Debug, Default)]
struct Path {
    segments: Vec<Segment>,
}

impl Path {
    fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    fn eval(&self, mut s: f64) -> ([f64; 2], f64, f64) {
        for seg in &self.segments {
            let l = seg.length();
            if s <= l {
                return seg.eval(s);
            }
            s -= l;
        }
        let last = self.segments.last().expect("non-empty path");
        last.eval(last.length())
    }

    fn line_to(&mut self, from: [f64; 2], to: [f64; 2]) {
        if (to[0] - from[0]).hypot(to[1] - from[1]) > 1e-9 {
            self.segments.push(Segment::Line { from, to });
        }
    }

    /// Quarter turn from `start` with tangent angle `heading`; `left` turns
    /// counter-clockwise.
    fn quarter_turn(&mut self, start: [f64; 2], heading: f64, radius: f64, left: bool) -> [f64; 2] {
        let dir = if left { 1.0 } else { -1.0 };
        let normal = heading + dir * FRAC_PI_2;
        let center = [start[0] + radius * normal.cos(), start[1] + radius * normal.sin()];
        let start_angle = normal + PI;
        let seg = Segment::Arc {
            center,
            radius,
            start_angle,
            sweep: dir * FRAC_PI_2,
        };
        self.segments.push(seg);
        seg.eval(seg.length()).0
    }
}

/// Time-parameterized motion along one path.
#[derive(Clone, Debug)]
struct Leg {
    path: Path,
    reverse: bool,
    start_time: f64,
    s_grid: Vec<f64>,
    v_grid: Vec<f64>,
    t_grid: Vec<f64>,
}

impl Leg {
    /// Builds a time-optimal profile under speed, longitudinal and lateral
    /// acceleration limits. Within each grid cell the acceleration is
    /// constant.
    fn new(path: Path, reverse: bool, start_time: f64, v_start: f64, v_end: f64, v_cruise: f64) -> Self {
        let len = path.length();
        let n = ((len / PROFILE_DS).ceil() as usize).max(1);
        let ds = len / n as f64;
        let s_grid: Vec<f64> = (0..=n).map(|i| i as f64 * ds).collect();
        let v_lim: Vec<f64> = s_grid
            .iter()
            .map(|&s| {
                let k = path.eval(s).2.abs();
                if k > 1e-9 {
                    v_cruise.min((VEHICLE_LAT_ACCEL / k).sqrt())
                } else {
                    v_cruise
                }
            })
            .collect();
        let mut v = v_lim.clone();
        v[0] = v_start.min(v_lim[0]);
        for i in 0..n {
            v[i + 1] = v[i + 1].min((v[i] * v[i] + 2.0 * VEHICLE_LON_ACCEL * ds).sqrt());
        }
        v[n] = v[n].min(v_end);
        for i in (0..n).rev() {
            v[i] = v[i].min((v[i + 1] * v[i + 1] + 2.0 * VEHICLE_LON_ACCEL * ds).sqrt());
        }
        let mut t_grid = vec![0.0; n + 1];
        for i in 0..n {
            let vm = v[i] + v[i + 1];
            t_grid[i + 1] = t_grid[i] + if vm > 0.0 { 2.0 * ds / vm } else { 0.0 };
        }
        Self {
            path,
            reverse,
            start_time,
            s_grid,
            v_grid: v,
            t_grid,
        }
    }

    fn duration(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    /// Arc length, speed and tangential acceleration at local time `tau`.
    fn kinematics(&self, tau: f64) -> (f64, f64, f64) {
        let n = self.s_grid.len() - 1;
        if tau <= 0.0 {
            return (0.0, self.v_grid[0], 0.0);
        }
        if tau >= self.duration() {
            return (self.s_grid[n], self.v_grid[n], 0.0);
        }
        let i = match self.t_grid.binary_search_by(|t| t.total_cmp(&tau)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i - 1,
        };
        let ds = self.s_grid[i + 1] - self.s_grid[i];
        let a = (self.v_grid[i + 1].powi(2) - self.v_grid[i].powi(2)) / (2.0 * ds);
        let d = tau - self.t_grid[i];
        let s = self.s_grid[i] + self.v_grid[i] * d + 0.5 * a * d * d;
        (s.min(self.s_grid[i + 1]), (self.v_grid[i] + a * d).max(0.0), a)
    }

    fn state(&self, time: f64) -> AgentState {
        let (s, speed, a_t) = self.kinematics(time - self.start_time);
        let (p, tangent, kappa) = self.path.eval(s);
        let moving = time > self.start_time && time < self.end_time();
        let (a_t, a_n) = if moving { (a_t, speed * speed * kappa) } else { (0.0, 0.0) };
        let (ts, tc) = tangent.sin_cos();
        let ax = a_t * tc - a_n * ts;
        let ay = a_t * ts + a_n * tc;
        let (h, v) = if self.reverse {
            (wrap_angle(tangent + PI), -speed)
        } else {
            (wrap_angle(tangent), speed)
        };
        AgentState { x: p[0], y: p[1], h, v, ax, ay }
    }
}

/// Vehicle plan: consecutive legs; the vehicle rests at the start of the
/// first leg before it begins and at the end of the last leg afterwards.
struct VehiclePlan {
    legs: Vec<Leg>,
}

impl VehiclePlan {
    fn state(&self, time: f64) -> AgentState {
        let first = &self.legs[0];
        if time <= first.start_time {
            return first.state(first.start_time);
        }
        for (i, leg) in self.legs.iter().enumerate() {
            let next_start = self.legs.get(i + 1).map_or(f64::INFINITY, |l| l.start_time);
            if time < next_start {
                return leg.state(time.min(leg.end_time()));
            }
        }
        let last = self.legs.last().unwrap();
        last.state(last.end_time())
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    lot: LotLayout,
    rng: ChaCha8Rng,
}

/// Generates `cfg.scenes` scenes; fully determined by `seed`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<Scene>> {
    Ok(synth_generate_with_layouts(cfg, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// As [`synth_generate`], also returning each scene's lot geometry.
pub fn synth_generate_with_layouts(cfg: &SynthConfig, seed: u64) -> Result<Vec<(Scene, LotLayout)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.scenes)
        .map(|_| {
            let scene_seed = rng.random::<u64>();
            Generator::new(cfg, scene_seed).scene()
        })
        .collect()
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lot = LotLayout::from_config(cfg);
        lot.placement = (
            rng.random_range(-PI..PI),
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
        );
        Self { cfg, lot, rng }
    }

    fn all_spots(&self) -> Vec<Spot> {
        let mut v = Vec::new();
        for aisle in 0..self.lot.rows {
            for upper in [false, true] {
                for index in 0..self.lot.spots_per_row {
                    v.push(Spot { aisle, upper, index });
                }
            }
        }
        v
    }

    fn scene(mut self) -> Result<(Scene, LotLayout)> {
        let mut spots = self.all_spots();
        spots.shuffle(&mut self.rng);
        // spots reserved for moving vehicles (parking targets or origins)
        let reserved: Vec<Spot> = spots.drain(..self.cfg.vehicles).collect();
        let parked: Vec<Spot> = spots
            .into_iter()
            .filter(|_| self.rng.random_bool(self.cfg.occupancy))
            .collect();
        let crosswalks = self.crosswalks();

        let steps = self.cfg.episode_steps;
        let mut agents = Vec::new();
        for (i, &spot) in reserved.iter().enumerate() {
            let plan = self.vehicle_plan(spot);
            let states: Vec<AgentState> = (0..steps).map(|k| plan.state(k as f64 * DT)).collect();
            agents.push(AgentTrack {
                id: i as u64 + 1,
                agent_type: AgentType::Vehicle,
                valid: vec![true; steps],
                states,
            });
        }
        for j in 0..self.cfg.pedestrians {
            let id = (self.cfg.vehicles + j) as u64 + 1;
            agents.push(self.pedestrian(id, &parked, &crosswalks));
        }

        let map = self.map(&parked, &crosswalks);
        let (theta, tx, ty) = self.lot.placement;
        let scene = Scene {
            dt: DT,
            agents,
            map,
        }
        .transformed(theta, tx, ty);
        Ok((scene, self.lot))
    }

    fn vehicle_plan(&mut self, spot: Spot) -> VehiclePlan {
        match self.rng.random_range(0..10) {
            0..=3 => self.park_in(spot),
            4..=6 => self.park_out(spot),
            _ => self.cruise(),
        }
    }

    fn cruise_speed(&mut self) -> f64 {
        self.rng.random_range(2.0..4.5)
    }

    /// Approach along the aisle and turn into `spot`, stopping at its center.
    fn park_in(&mut self, spot: Spot) -> VehiclePlan {
        let g = self.lot.spot(spot);
        let r = 0.5 * self.lot.lane_width;
        let eastbound = self.rng.random_bool(0.5);
        let dir = if eastbound { 1.0 } else { -1.0 };
        let turn_x = g.center[0] - dir * r;
        let approach = self.rng.random_range(6.0..28.0);
        let lo = self.lot.left_x();
        let hi = self.lot.right_x();
        let start_x = (turn_x - dir * approach).clamp(lo, hi);
        let mut path = Path::default();
        path.line_to([start_x, g.aisle_y], [turn_x, g.aisle_y]);
        let heading = if eastbound { 0.0 } else { PI };
        // turning toward +y is a left turn when heading east
        let left = (g.sign > 0.0) == eastbound;
        let end = path.quarter_turn([turn_x, g.aisle_y], heading, r, left);
        path.line_to(end, g.center);
        // already moving when the episode begins
        let v0 = self.cruise_speed();
        VehiclePlan {
            legs: vec![Leg::new(path, false, 0.0, v0, 0.0, v0)],
        }
    }

    /// Reverse out of `spot` into the aisle, pause, then drive off.
    fn park_out(&mut self, spot: Spot) -> VehiclePlan {
        let g = self.lot.spot(spot);
        let r = 0.5 * self.lot.lane_width;
        let eastbound = self.rng.random_bool(0.5);
        let dir = if eastbound { 1.0 } else { -1.0 };
        // reverse straight to the spot entrance, then arc backwards so the
        // vehicle ends on the centerline facing along `dir`
        let mut back = Path::default();
        let entrance = [g.center[0], g.entrance_y];
        back.line_to(g.center, entrance);
        let travel = if g.sign > 0.0 { -FRAC_PI_2 } else { FRAC_PI_2 };
        let left = (g.sign > 0.0) == eastbound;
        let end = back.quarter_turn(entrance, travel, r, left);
        let wait = self.rng.random_range(0.0..6.0);
        let reverse = Leg::new(back, true, wait, 0.0, 0.0, 1.8);

        let mut fwd = Path::default();
        let target_x = if eastbound { self.lot.right_x() } else { self.lot.left_x() };
        let target = [target_x, g.aisle_y];
        if (target[0] - end[0]) * dir > 1.0 {
            fwd.line_to(end, target);
        } else {
            fwd.line_to(end, [end[0] + dir * 1.0, g.aisle_y]);
        }
        let pause = self.rng.random_range(0.4..1.6);
        let v = self.cruise_speed();
        let drive = Leg::new(fwd, false, reverse.end_time() + pause, 0.0, 0.0, v);
        VehiclePlan {
            legs: vec![reverse, drive],
        }
    }

    /// Loop between two adjacent aisles through the connector lanes.
    fn cruise(&mut self) -> VehiclePlan {
        let lot = self.lot.clone();
        let r = 0.5 * lot.lane_width;
        let j = self.rng.random_range(0..lot.rows);
        let eastbound = self.rng.random_bool(0.5);
        let (lo, hi) = (lot.left_x(), lot.right_x());
        let start_x = self.rng.random_range(lo + r..hi - r);
        let mut path = Path::default();
        let mut pos = [start_x, lot.aisle_y(j)];
        let mut east = eastbound;
        let mut aisle = j;
        let other = if lot.rows > 1 {
            Some(if j + 1 < lot.rows { j + 1 } else { j - 1 })
        } else {
            None
        };
        let v = self.cruise_speed();
        let Some(other) = other else {
            let end_x = if east { hi } else { lo };
            path.line_to(pos, [end_x, pos[1]]);
            return VehiclePlan {
                legs: vec![Leg::new(path, false, 0.0, v, 0.0, v)],
            };
        };
        for _ in 0..4 {
            let heading = if east { 0.0 } else { PI };
            let turn_x = if east { hi - r } else { lo + r };
            path.line_to(pos, [turn_x, pos[1]]);
            let next = if aisle == j { other } else { j };
            let up = lot.aisle_y(next) > lot.aisle_y(aisle);
            let left = up == east;
            let p = path.quarter_turn([turn_x, pos[1]], heading, r, left);
            let vy = if up { 1.0 } else { -1.0 };
            let conn_end = [p[0], lot.aisle_y(next) - vy * r];
            path.line_to(p, conn_end);
            let vert = if up { FRAC_PI_2 } else { -FRAC_PI_2 };
            // after the connector, head back the other way along `next`
            let left2 = up != east;
            pos = path.quarter_turn(conn_end, vert, r, !left2);
            east = !east;
            aisle = next;
        }
        VehiclePlan {
            legs: vec![Leg::new(path, false, 0.0, v, 0.0, v)],
        }
    }

    fn crosswalks(&mut self) -> Vec<Crosswalk> {
        let x0 = self.lot.spots_x0();
        let x1 = x0 + self.lot.spots_per_row as f64 * self.lot.spot_width;
        (0..self.cfg.crosswalks)
            .map(|_| Crosswalk {
                aisle: self.rng.random_range(0..self.lot.rows),
                x: self.rng.random_range(x0 + 1.0..x1 - 1.0),
            })
            .collect()
    }

    /// A pedestrian stays in one aisle and walks between the driver doors of
    /// parked cars, the ends of the aisle and the crosswalks, crossing a
    /// crosswalk whenever it reaches one end of it. Parked cars are obstacles.
    fn pedestrian(&mut self, id: u64, parked: &[Spot], crosswalks: &[Crosswalk]) -> AgentTrack {
        let lot = self.lot.clone();
        let steps = self.cfg.episode_steps;
        let margin = 0.3;
        let aisle = self.rng.random_range(0..lot.rows);
        let y = lot.aisle_y(aisle);
        let half = 0.5 * lot.lane_width;
        let mut waypoints: Vec<[f64; 2]> = parked
            .iter()
            .filter(|s| s.aisle == aisle)
            .map(|&s| {
                let g = lot.spot(s);
                [g.center[0], g.entrance_y - g.sign * 0.7]
            })
            .collect();
        waypoints.push([lot.left_x(), y]);
        waypoints.push([lot.right_x(), y]);
        // crosswalk ends come in pairs so a walker can cross to the far one
        let ends: Vec<[[f64; 2]; 2]> = crosswalks
            .iter()
            .filter(|c| c.aisle == aisle)
            .map(|c| [[c.x, y - half - 0.5], [c.x, y + half + 0.5]])
            .collect();
        let (hw, hd) = lot.car_half_extent();
        let obstacles: Vec<([f64; 2], [f64; 2])> = parked
            .iter()
            .map(|&s| {
                let c = lot.spot(s).center;
                ([c[0] - hw - 0.25, c[1] - hd - 0.25], [c[0] + hw + 0.25, c[1] + hd + 0.25])
            })
            .collect();
        let blocked = |p: [f64; 2]| {
            obstacles
                .iter()
                .any(|(lo, hi)| p[0] > lo[0] && p[0] < hi[0] && p[1] > lo[1] && p[1] < hi[1])
        };
        // goal plus the point to head for once it is reached, if fixed
        let pick = |rng: &mut ChaCha8Rng, from: [f64; 2]| -> ([f64; 2], Option<[f64; 2]>) {
            loop {
                let (goal, then) = if !ends.is_empty() && rng.random_bool(0.4) {
                    let pair = ends[rng.random_range(0..ends.len())];
                    let near = usize::from(dist(from, pair[1]) < dist(from, pair[0]));
                    (pair[near], Some(pair[1 - near]))
                } else {
                    (waypoints[rng.random_range(0..waypoints.len())], None)
                };
                if dist(from, goal) > 2.0 {
                    return (goal, then);
                }
            }
        };
        let start = waypoints[self.rng.random_range(0..waypoints.len())];
        let mut pos = [
            start[0] + self.rng.random_range(-0.5..0.5),
            (start[1] + self.rng.random_range(-0.5..0.5)).clamp(y - half, y + half),
        ];
        let (mut goal, mut then) = pick(&mut self.rng, pos);
        let mut speed: f64 = self.rng.random_range(0.9..1.6);
        let mut drift = 0.0f64;
        let noise = Normal::new(0.0, 0.35).expect("valid std");
        let first_valid = if self.rng.random_bool(0.3) {
            self.rng.random_range(1..steps / 2)
        } else {
            0
        };
        let h = DT / SUBSTEPS as f64;
        let mut samples: Vec<[f64; 2]> = Vec::with_capacity(steps);
        for _ in 0..steps {
            samples.push(pos);
            for _ in 0..SUBSTEPS {
                let (dx, dy) = (goal[0] - pos[0], goal[1] - pos[1]);
                if dx.hypot(dy) < 0.6 {
                    (goal, then) = match then {
                        Some(next) => (next, None),
                        None => pick(&mut self.rng, pos),
                    };
                    speed = self.rng.random_range(0.9..1.6);
                    continue;
                }
                // Ornstein–Uhlenbeck heading offset keeps the walk smooth
                drift += -1.5 * drift * h + noise.sample(&mut self.rng) * h.sqrt();
                let bearing = dy.atan2(dx) + drift;
                let v = speed.min(PEDESTRIAN_MAX_SPEED);
                let step = [v * bearing.cos() * h, v * bearing.sin() * h];
                // slide along an obstacle instead of entering it
                for cand in [step, [step[0], 0.0], [0.0, step[1]]] {
                    let next = [
                        (pos[0] + cand[0]).clamp(margin, lot.width - margin),
                        (pos[1] + cand[1]).clamp(margin, lot.height - margin),
                    ];
                    if !blocked(next) {
                        pos = next;
                        break;
                    }
                }
            }
        }
        let mut states = vec![AgentState::default(); steps];
        for k in 0..steps {
            let p = samples[k];
            let (vel, heading) = if k + 1 < steps {
                let q = samples[k + 1];
                ([(q[0] - p[0]) / DT, (q[1] - p[1]) / DT], (q[1] - p[1]).atan2(q[0] - p[0]))
            } else {
                let q = samples[k - 1];
                ([(p[0] - q[0]) / DT, (p[1] - q[1]) / DT], (p[1] - q[1]).atan2(p[0] - q[0]))
            };
            states[k] = AgentState {
                x: p[0],
                y: p[1],
                h: wrap_angle(heading),
                v: vel[0].hypot(vel[1]),
                ax: 0.0,
                ay: 0.0,
            };
        }
        for k in 0..steps {
            let prev = if k > 0 { k - 1 } else { 0 };
            let next = (k + 1).min(steps - 1);
            let span = (next - prev).max(1) as f64 * DT;
            let vel = |s: &AgentState| [s.v * s.h.cos(), s.v * s.h.sin()];
            let (a, b) = (vel(&states[prev]), vel(&states[next]));
            states[k].ax = (b[0] - a[0]) / span;
            states[k].ay = (b[1] - a[1]) / span;
        }
        let mut valid = vec![true; steps];
        for (k, v) in valid.iter_mut().enumerate() {
            if k < first_valid {
                *v = false;
                states[k] = AgentState::default();
            }
        }
        AgentTrack {
            id,
            agent_type: AgentType::Pedestrian,
            states,
            valid,
        }
    }

    fn map(&self, parked: &[Spot], crosswalks: &[Crosswalk]) -> SceneMap {
        let lot = &self.lot;
        let mut soft = Vec::new();
        let x0 = lot.spots_x0();
        let x1 = x0 + lot.spots_per_row as f64 * lot.spot_width;
        for j in 0..lot.rows {
            let y = lot.aisle_y(j);
            for sign in [-1.0, 1.0] {
                let edge = y + sign * 0.5 * lot.lane_width;
                soft.push(Polyline::resampled(&[[x0, edge], [x1, edge]], PolylineKind::LaneEdge));
                let back = edge + sign * lot.spot_depth;
                for k in 0..=lot.spots_per_row {
                    let x = x0 + k as f64 * lot.spot_width;
                    soft.push(Polyline::resampled(&[[x, edge], [x, back]], PolylineKind::SpotBoundary));
                }
            }
        }
        for x in [lot.lane_width, lot.width - lot.lane_width] {
            soft.push(Polyline::resampled(&[[x, 0.0], [x, lot.height]], PolylineKind::LaneEdge));
        }
        for x in [0.0, lot.width] {
            soft.push(Polyline::resampled(&[[x, 0.0], [x, lot.height]], PolylineKind::LaneEdge));
        }
        let half = 0.5 * lot.lane_width;
        for c in crosswalks {
            let y = lot.aisle_y(c.aisle);
            soft.push(Polyline::resampled(&[[c.x, y - half], [c.x, y + half]], PolylineKind::Crosswalk));
        }

        let mut hard = Vec::new();
        for &s in parked {
            let g = lot.spot(s);
            let (hw, hd) = lot.car_half_extent();
            let c = g.center;
            let corners = [
                [c[0] - hw, c[1] - hd],
                [c[0] + hw, c[1] - hd],
                [c[0] + hw, c[1] + hd],
                [c[0] - hw, c[1] + hd],
                [c[0] - hw, c[1] - hd],
            ];
            hard.push(Polyline::resampled(&corners, PolylineKind::Obstacle));
        }
        SceneMap { soft, hard }
    }
}

/// Largest recorded acceleration norm over all vehicle states.
pub fn max_vehicle_acceleration(scenes: &[Scene]) -> f64 {
    scenes
        .iter()
        .flat_map(|s| s.agents.iter())
        .filter(|a| a.agent_type == AgentType::Vehicle)
        .flat_map(|a| a.states.iter().zip(&a.valid).filter(|(_, &v)| v).map(|(s, _)| s))
        .map(|s| s.ax.hypot(s.ay))
        .fold(0.0, f64::max)
}

/// Checks the feasibility invariants of generated scenes.
pub fn check_feasibility(scenes: &[(Scene, LotLayout)]) -> Result<()> {
    for (i, (scene, lot)) in scenes.iter().enumerate() {
        for a in &scene.agents {
            for (t, s) in a.states.iter().enumerate() {
                if !a.valid[t] {
                    continue;
                }
                if !lot.contains([s.x, s.y], 1e-6) {
                    return Err(Error::Contract(format!(
                        "scene {i} agent {} leaves the lot at t={t}",
                        a.id
                    )));
                }
                match a.agent_type {
                    AgentType::Vehicle if s.ax.hypot(s.ay) > MU_G => {
                        return Err(Error::Contract(format!(
                            "scene {i} vehicle {} exceeds mu*g at t={t}",
                            a.id
                        )));
                    }
                    AgentType::Pedestrian if s.v.abs() > PEDESTRIAN_MAX_SPEED + 1e-9 => {
                        return Err(Error::Contract(format!(
                            "scene {i} pedestrian {} too fast at t={t}",
                            a.id
                        )));
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}
