//! Multi-vehicle kinematic microsimulator.
//!
//! Vehicles are discs following reference routes built from lane
//! polylines. Each step integrates a kinematic bicycle model, flags
//! agent-agent and agent-map collisions, and respawns colliding vehicles (and
//! those that finished an open route) at a free spawn point so the vehicle
//! count stays constant over an episode.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topo::{normalize_angle, Pose2};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
/// Ego features: speed fraction, heading error, lateral offset, curvature
/// ahead, route progress fraction.
pub const EGO_FEATURES: usize = 5;
/// Neighbor features: relative x, relative y, sin and cos of the relative
/// heading, relative speed.
pub const NBR_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    /// Center polyline, meters.
    pub points: Vec<[f64; 2]>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    /// Lane ids traversed in order.
    pub lanes: Vec<usize>,
    #[serde(default)]
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub route: usize,
    /// Arc length along the route, meters.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub lanes: Vec<Lane>,
    pub routes: Vec<RouteSpec>,
    pub spawns: Vec<SpawnSpec>,
    pub n_vehicles: usize,
    /// Steps per episode.
    pub episode_len: usize,
    /// Seconds.
    pub dt: f64,
    pub v_max: f64,
    /// Longitudinal acceleration at full command, m/s^2.
    pub a_max: f64,
    /// Steering angle at full command, radians.
    pub steer_max: f64,
    pub wheelbase: f64,
    pub vehicle_radius: f64,
    /// Initial speed as a fraction of `v_max`.
    pub init_speed: f64,
    /// Uniform jitter on spawn offsets at reset, meters.
    pub spawn_jitter: f64,
    /// Minimum distance to other vehicles for a spawn to count as free.
    pub spawn_clearance: f64,
    /// Normalization scale for neighbor positions, meters.
    pub obs_range: f64,
    /// Lookahead used for the curvature feature, meters.
    pub lookahead: f64,
}

impl Scenario {
    fn base(name: &str, lanes: Vec<Lane>, routes: Vec<RouteSpec>, spawns: Vec<SpawnSpec>) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: name.to_string(),
            lanes,
            routes,
            n_vehicles: spawns.len(),
            spawns,
            episode_len: 300,
            dt: 0.05,
            v_max: 8.0,
            a_max: 4.0,
            steer_max: 0.5,
            wheelbase: 2.5,
            vehicle_radius: 0.75,
            init_speed: 0.75,
            spawn_jitter: 4.0,
            spawn_clearance: 8.0,
            obs_range: 20.0,
            lookahead: 8.0,
        }
    }

    /// Two-lane on-ramp merge.
    pub fn merge() -> Self {
        let w = 5.0;
        let lanes = vec![
            Lane { points: vec![[0.0, 0.0], [60.0, 0.0]], width: w },
            Lane { points: vec![[60.0, 0.0], [100.0, 0.0]], width: w },
            Lane {
                points: vec![[0.0, -14.0], [20.0, -12.5], [35.0, -8.5], [47.0, -3.5], [55.0, -0.8], [60.0, 0.0]],
                width: w,
            },
        ];
        let routes = vec![RouteSpec { lanes: vec![0, 1], closed: false }, RouteSpec { lanes: vec![2, 1], closed: false }];
        let spawns = vec![
            SpawnSpec { route: 0, offset: 20.0 },
            SpawnSpec { route: 1, offset: 22.0 },
            SpawnSpec { route: 0, offset: 6.0 },
            SpawnSpec { route: 1, offset: 8.0 },
        ];
        Self::base("merge", lanes, routes, spawns)
    }

    /// Skewed crossing of two straight flows.
    pub fn weave() -> Self {
        let w = 5.0;
        let lanes = vec![
            Lane { points: vec![[0.0, 0.0], [80.0, 0.0]], width: w },
            Lane { points: vec![[12.0, -28.0], [68.0, 28.0]], width: w },
        ];
        let routes = vec![RouteSpec { lanes: vec![0], closed: false }, RouteSpec { lanes: vec![1], closed: false }];
        let spawns = vec![
            SpawnSpec { route: 0, offset: 18.0 },
            SpawnSpec { route: 1, offset: 18.0 },
            SpawnSpec { route: 0, offset: 4.0 },
            SpawnSpec { route: 1, offset: 4.0 },
        ];
        Self::base("weave", lanes, routes, spawns)
    }

    /// Closed circuit with a bypass branch that rejoins it.
    pub fn loop_bypass() -> Self {
        let w = 5.0;
        let r = 25.0;
        let arc = |from: f64, to: f64, n: usize| -> Vec<[f64; 2]> {
            (0..=n)
                .map(|k| {
                    let a = from + (to - from) * k as f64 / n as f64;
                    [r * a.cos(), r * a.sin()]
                })
                .collect()
        };
        let a0 = -PI / 3.0;
        let a1 = PI / 3.0;
        let right = arc(a0, a1, 16);
        let left = arc(a1, a0 + 2.0 * PI, 32);
        let start = right[0];
        let end = right[right.len() - 1];
        let bypass = vec![start, [17.5, -12.0], [19.0, 0.0], [17.5, 12.0], end];
        let lanes = vec![
            Lane { points: right, width: w },
            Lane { points: left, width: w },
            Lane { points: bypass, width: w },
        ];
        let routes = vec![RouteSpec { lanes: vec![0, 1], closed: true }, RouteSpec { lanes: vec![2, 1], closed: false }];
        let spawns = vec![
            SpawnSpec { route: 0, offset: 0.0 },
            SpawnSpec { route: 1, offset: 2.0 },
            SpawnSpec { route: 0, offset: 60.0 },
            SpawnSpec { route: 0, offset: 110.0 },
        ];
        Self::base("loop", lanes, routes, spawns)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "merge" => Some(Self::merge()),
            "weave" => Some(Self::weave()),
            "loop" | "bypass" => Some(Self::loop_bypass()),
            _ => None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Loads a scenario file, or a builtin when `path` names one.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(sc) = path.to_str().and_then(Self::builtin) {
                return Ok(sc);
            }
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported scenario schema_version {}", self.schema_version)));
        }
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("steer_max", self.steer_max),
            ("wheelbase", self.wheelbase),
            ("vehicle_radius", self.vehicle_radius),
            ("obs_range", self.obs_range),
            ("lookahead", self.lookahead),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if self.steer_max >= PI / 2.0 {
            return Err(Error::Config("`steer_max` must be below pi/2".into()));
        }
        if self.n_vehicles == 0 || self.n_vehicles > self.spawns.len() {
            return Err(Error::Config(format!(
                "n_vehicles = {} must be in 1..={} (number of spawns)",
                self.n_vehicles,
                self.spawns.len()
            )));
        }
        if self.episode_len == 0 {
            return Err(Error::Config("`episode_len` must be >= 1".into()));
        }
        for (k, lane) in self.lanes.iter().enumerate() {
            if lane.points.len() < 2 || !(lane.width > 2.0 * self.vehicle_radius) {
                return Err(Error::Config(format!("lane {k} needs >= 2 points and width > 2 * vehicle_radius")));
            }
            if lane_self_intersects(&lane.points) {
                return Err(Error::Config(format!("lane {k} polyline self-intersects")));
            }
        }
        for (k, r) in self.routes.iter().enumerate() {
            if r.lanes.is_empty() || r.lanes.iter().any(|&l| l >= self.lanes.len()) {
                return Err(Error::Config(format!("route {k} references unknown lanes")));
            }
        }
        for (k, s) in self.spawns.iter().enumerate() {
            if s.route >= self.routes.len() {
                return Err(Error::Config(format!("spawn {k} references unknown route {}", s.route)));
            }
        }
        Ok(())
    }
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

fn lane_self_intersects(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    for i in 0..n.saturating_sub(1) {
        for j in i + 2..n - 1 {
            if segments_cross(pts[i], pts[i + 1], pts[j], pts[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Arc-length parameterized polyline.
#[derive(Debug, Clone)]
pub struct Polyline {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    closed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub s: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub lateral: f64,
    pub heading: f64,
}

impl Polyline {
    pub fn new(mut pts: Vec<[f64; 2]>, closed: bool) -> Self {
        pts.dedup_by(|a, b| (a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9);
        if closed {
            let (f, l) = (pts[0], pts[pts.len() - 1]);
            if (f[0] - l[0]).hypot(f[1] - l[1]) < 1e-9 {
                pts.pop();
            }
            pts.push(pts[0]);
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum[cum.len() - 1] + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        Self { pts, cum, closed }
    }

    pub fn length(&self) -> f64 {
        self.cum[self.cum.len() - 1]
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length())
        } else {
            s.clamp(0.0, self.length())
        }
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(k) => k.min(self.pts.len() - 2),
            Err(k) => (k.max(1) - 1).min(self.pts.len() - 2),
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = self.wrap(s);
        let k = self.segment_at(s);
        let seg = self.cum[k + 1] - self.cum[k];
        let u = if seg > 0.0 { (s - self.cum[k]) / seg } else { 0.0 };
        let (a, b) = (self.pts[k], self.pts[k + 1]);
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let k = self.segment_at(self.wrap(s));
        let (a, b) = (self.pts[k], self.pts[k + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Nearest point on the polyline.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for k in 0..self.pts.len() - 1 {
            let (a, b) = (self.pts[k], self.pts[k + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let q = [a[0] + u * dx, a[1] + u * dy];
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            if dist < best.0 {
                let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                let sign = if cross >= 0.0 { 1.0 } else { -1.0 };
                best = (dist, self.cum[k] + u * len2.sqrt(), sign * dist, dy.atan2(dx));
            }
        }
        Projection { s: best.1, lateral: best.2, heading: best.3 }
    }

    /// Signed progress from `s0` to `s1`, unwrapping across the seam of a
    /// closed route.
    pub fn progress_delta(&self, s0: f64, s1: f64) -> f64 {
        let d = s1 - s0;
        if self.closed {
            let len = self.length();
            (d + len / 2.0).rem_euclid(len) - len / 2.0
        } else {
            d
        }
    }
}

/// A scenario with its routes resolved into polylines.
#[derive(Debug, Clone)]
pub struct World {
    pub scenario: Scenario,
    pub routes: Vec<Polyline>,
    pub route_widths: Vec<f64>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let mut routes = Vec::new();
        let mut widths = Vec::new();
        for r in &scenario.routes {
            let pts: Vec<[f64; 2]> = r.lanes.iter().flat_map(|&l| scenario.lanes[l].points.iter().copied()).collect();
            routes.push(Polyline::new(pts, r.closed));
            widths.push(r.lanes.iter().map(|&l| scenario.lanes[l].width).fold(f64::INFINITY, f64::min));
        }
        Ok(Self { scenario, routes, route_widths: widths })
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.n_vehicles
    }

    fn spawn_vehicle(&self, spawn: &SpawnSpec, offset: f64, command: [f64; 2]) -> VehicleState {
        let route = &self.routes[spawn.route];
        let p = route.point_at(offset);
        let heading = route.heading_at(offset);
        VehicleState {
            pose: Pose2 { x: p[0], y: p[1], heading: normalize_angle(heading) },
            speed: self.scenario.init_speed * self.scenario.v_max,
            route: spawn.route,
            progress: route.project(p).s,
            command,
            alive: true,
        }
    }

    /// Initial joint state; vehicle `k` starts at spawn `k` with offset
    /// jitter drawn from `rng`.
    pub fn reset<R: Rng>(&self, rng: &mut R) -> JointState {
        let sc = &self.scenario;
        let vehicles = (0..sc.n_vehicles)
            .map(|k| {
                let sp = &sc.spawns[k];
                let jitter = if sc.spawn_jitter > 0.0 { rng.random_range(-sc.spawn_jitter..=sc.spawn_jitter) } else { 0.0 };
                let len = self.routes[sp.route].length();
                let off = if self.routes[sp.route].is_closed() { sp.offset + jitter } else { (sp.offset + jitter).clamp(0.0, len) };
                self.spawn_vehicle(sp, off, [0.0, 0.0])
            })
            .collect();
        JointState { vehicles, t: 0 }
    }

    /// Advances one vehicle by the kinematic bicycle model.
    pub fn integrate(&self, v: &VehicleState, command: [f64; 2]) -> VehicleState {
        let sc = &self.scenario;
        let lon = clamp_unit(command[0]);
        let steer = clamp_unit(command[1]);
        let speed = (v.speed + lon * sc.a_max * sc.dt).clamp(0.0, sc.v_max);
        let heading = v.pose.heading + (v.speed / sc.wheelbase) * (steer * sc.steer_max).tan() * sc.dt;
        let x = v.pose.x + speed * sc.dt * heading.cos();
        let y = v.pose.y + speed * sc.dt * heading.sin();
        let proj = self.routes[v.route].project([x, y]);
        VehicleState {
            pose: Pose2 { x, y, heading: normalize_angle(heading) },
            speed,
            route: v.route,
            progress: proj.s,
            command: [lon, steer],
            alive: v.alive,
        }
    }

    pub fn detect_collisions(&self, vehicles: &[VehicleState]) -> Vec<CollisionFlags> {
        let sc = &self.scenario;
        let reach = 2.0 * sc.vehicle_radius;
        vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let agent_agent = vehicles.iter().enumerate().any(|(j, w)| {
                    j != i && w.alive && (v.pose.x - w.pose.x).hypot(v.pose.y - w.pose.y) < reach
                });
                let lateral = self.routes[v.route].project(v.pose.position()).lateral.abs();
                let agent_map = lateral > self.route_widths[v.route] / 2.0 - sc.vehicle_radius;
                CollisionFlags { agent_agent, agent_map }
            })
            .collect()
    }

    fn free_spawn(&self, others: &[[f64; 2]]) -> usize {
        let clearance = |sp: &SpawnSpec| {
            let p = self.routes[sp.route].point_at(sp.offset);
            others.iter().map(|o| (o[0] - p[0]).hypot(o[1] - p[1])).fold(f64::INFINITY, f64::min)
        };
        let sc = &self.scenario;
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, sp) in sc.spawns.iter().enumerate() {
            let c = clearance(sp);
            if c >= sc.spawn_clearance {
                return k;
            }
            if c > best.0 {
                best = (c, k);
            }
        }
        best.1
    }

    /// Applies `commands` to every vehicle. Commands are clamped to
    /// `[-1, 1]`.
    pub fn step(&self, state: &JointState, commands: &[[f64; 2]]) -> Result<StepResult> {
        if commands.len() != state.vehicles.len() {
            return Err(Error::Shape(format!("{} commands for {} vehicles", commands.len(), state.vehicles.len())));
        }
        let integrated: Vec<VehicleState> =
            state.vehicles.iter().zip(commands).map(|(v, &c)| self.integrate(v, c)).collect();
        let flags = self.detect_collisions(&integrated);
        let mut next = integrated.clone();
        let mut events = Vec::with_capacity(next.len());
        for (k, (prev, now)) in state.vehicles.iter().zip(&integrated).enumerate() {
            let route = &self.routes[now.route];
            let progress_delta = route.progress_delta(prev.progress, now.progress);
            let route_done = !route.is_closed() && now.progress >= route.length() - 1e-6;
            let respawn = flags[k].agent_agent || flags[k].agent_map || route_done;
            events.push(AgentEvents { collision: flags[k], progress_delta, route_done, respawned: respawn });
        }
        for k in 0..next.len() {
            if events[k].respawned {
                let others: Vec<[f64; 2]> =
                    next.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v.pose.position()).collect();
                let sp = self.scenario.spawns[self.free_spawn(&others)];
                next[k] = self.spawn_vehicle(&sp, sp.offset, next[k].command);
            }
        }
        Ok(StepResult { state: JointState { vehicles: next, t: state.t + 1 }, integrated, events })
    }

    /// Local observation of `agent` with `m` neighbor slots.
    pub fn observe(&self, state: &JointState, agent: usize, m: usize) -> Result<Observation> {
        let sc = &self.scenario;
        let ego = state.vehicles.get(agent).ok_or_else(|| Error::InvalidInput(format!("no agent {agent}")))?;
        if !ego.alive {
            return Err(Error::DeadAgent(agent));
        }
        let route = &self.routes[ego.route];
        let proj = route.project(ego.pose.position());
        let ahead = route.heading_at(proj.s + sc.lookahead);
        let curvature = normalize_angle(ahead - proj.heading) / sc.lookahead;
        let ego_features = EgoFeatures {
            speed_frac: ego.speed / sc.v_max,
            heading_error: normalize_angle(ego.pose.heading - proj.heading),
            lateral_offset: proj.lateral,
            curvature,
            progress_frac: proj.s / route.length(),
        };
        let mut cands: Vec<(f64, usize)> = state
            .vehicles
            .iter()
            .enumerate()
            .filter(|(j, v)| *j != agent && v.alive)
            .map(|(j, v)| ((v.pose.x - ego.pose.x).hypot(v.pose.y - ego.pose.y), j))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut neighbors: Vec<NeighborSlot> = cands
            .into_iter()
            .take(m)
            .map(|(_, j)| {
                let v = &state.vehicles[j];
                NeighborSlot {
                    agent: Some(j),
                    rel_pos: ego.pose.to_local(v.pose.position()),
                    rel_heading: normalize_angle(v.pose.heading - ego.pose.heading),
                    rel_speed: v.speed - ego.speed,
                }
            })
            .collect();
        neighbors.resize(m, NeighborSlot::empty());
        Ok(Observation {
            ego: ego_features,
            neighbors,
            v_max: sc.v_max,
            obs_range: sc.obs_range,
            half_width: self.route_widths[ego.route] / 2.0,
            lookahead: sc.lookahead,
        })
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2,
    /// m/s in `[0, v_max]`.
    pub speed: f64,
    pub route: usize,
    /// Arc length along the route.
    pub progress: f64,
    /// Last applied `(lon, steer)`, each in `[-1, 1]`.
    pub command: [f64; 2],
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub vehicles: Vec<VehicleState>,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollisionFlags {
    pub agent_agent: bool,
    pub agent_map: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentEvents {
    pub collision: CollisionFlags,
    /// Route progress gained during the step, before any respawn.
    pub progress_delta: f64,
    pub route_done: bool,
    pub respawned: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// State after respawns; the input to the next step.
    pub state: JointState,
    /// Vehicles right after integration, before respawns.
    pub integrated: Vec<VehicleState>,
    pub events: Vec<AgentEvents>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoFeatures {
    pub speed_frac: f64,
    /// Radians.
    pub heading_error: f64,
    /// Meters, positive left of the route.
    pub lateral_offset: f64,
    /// 1/m at the lookahead point.
    pub curvature: f64,
    pub progress_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborSlot {
    /// `None` for padding.
    pub agent: Option<usize>,
    /// Meters, in the ego frame.
    pub rel_pos: [f64; 2],
    pub rel_heading: f64,
    /// m/s, neighbor minus ego.
    pub rel_speed: f64,
}

impl NeighborSlot {
    pub fn empty() -> Self {
        Self { agent: None, rel_pos: [0.0; 2], rel_heading: 0.0, rel_speed: 0.0 }
    }

    pub fn valid(&self) -> bool {
        self.agent.is_some()
    }
}

/// Ego features plus `M` neighbor slots, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ego: EgoFeatures,
    pub neighbors: Vec<NeighborSlot>,
    pub v_max: f64,
    pub obs_range: f64,
    pub half_width: f64,
    pub lookahead: f64,
}

impl Observation {
    pub fn m(&self) -> usize {
        self.neighbors.len()
    }

    /// Normalized ego feature vector.
    pub fn ego_vector(&self) -> [f64; EGO_FEATURES] {
        let e = &self.ego;
        [
            e.speed_frac,
            e.heading_error,
            e.lateral_offset / self.half_width,
            e.curvature * self.lookahead,
            e.progress_frac,
        ]
    }

    /// Normalized neighbor features; zeros for padding.
    pub fn neighbor_vector(&self, slot: usize) -> [f64; NBR_FEATURES] {
        let n = &self.neighbors[slot];
        if !n.valid() {
            return [0.0; NBR_FEATURES];
        }
        let (s, c) = n.rel_heading.sin_cos();
        [
            (n.rel_pos[0] / self.obs_range).clamp(-3.0, 3.0),
            (n.rel_pos[1] / self.obs_range).clamp(-3.0, 3.0),
            s,
            c,
            n.rel_speed / self.v_max,
        ]
    }

    pub fn validity(&self) -> Vec<bool> {
        self.neighbors.iter().map(NeighborSlot::valid).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub progress: f64,
    pub agent_collision: f64,
    pub map_collision: f64,
    pub smoothness: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { progress: 1.0, agent_collision: 10.0, map_collision: 10.0, smoothness: 0.1 }
    }
}

/// Shaped per-agent reward for one transition.
pub fn reward(prev: &VehicleState, next: &VehicleState, events: &AgentEvents, weights: &RewardWeights, scenario: &Scenario) -> f64 {
    let progress = events.progress_delta / (scenario.v_max * scenario.dt);
    let dc = (next.command[0] - prev.command[0]).abs() + (next.command[1] - prev.command[1]).abs();
    weights.progress * progress
        - weights.agent_collision * f64::from(u8::from(events.collision.agent_agent))
        - weights.map_collision * f64::from(u8::from(events.collision.agent_map))
        - weights.smoothness * dc / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub lon: f64,
    pub steer: f64,
    pub coll_aa: bool,
    pub coll_am: bool,
}

/// Per-step, per-agent record of an episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<Vec<AgentRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    t: usize,
    agent: usize,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    lon: f64,
    steer: f64,
    coll_aa: u8,
    coll_am: u8,
}

impl EpisodeLog {
    pub fn push_step(&mut self, result: &StepResult) {
        self.steps.push(
            result
                .integrated
                .iter()
                .zip(&result.events)
                .map(|(v, e)| AgentRecord {
                    x: v.pose.x,
                    y: v.pose.y,
                    heading: v.pose.heading,
                    speed: v.speed,
                    lon: v.command[0],
                    steer: v.command[1],
                    coll_aa: e.collision.agent_agent,
                    coll_am: e.collision.agent_map,
                })
                .collect(),
        );
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (t, step) in self.steps.iter().enumerate() {
            for (agent, r) in step.iter().enumerate() {
                wr.serialize(LogRow {
                    t,
                    agent,
                    x: r.x,
                    y: r.y,
                    heading: r.heading,
                    speed: r.speed,
                    lon: r.lon,
                    steer: r.steer,
                    coll_aa: u8::from(r.coll_aa),
                    coll_am: u8::from(r.coll_am),
                })?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut log = EpisodeLog::default();
        for row in rdr.deserialize() {
            let row: LogRow = row?;
            if row.t == log.steps.len() {
                log.steps.push(Vec::new());
            }
            let step = log
                .steps
                .get_mut(row.t)
                .ok_or_else(|| Error::Format(format!("episode log rows out of order at t={}", row.t)))?;
            if row.agent != step.len() {
                return Err(Error::Format(format!("episode log agent rows out of order at t={}", row.t)));
            }
            step.push(AgentRecord {
                x: row.x,
                y: row.y,
                heading: row.heading,
                speed: row.speed,
                lon: row.lon,
                steer: row.steer,
                coll_aa: row.coll_aa != 0,
                coll_am: row.coll_am != 0,
            });
        }
        Ok(log)
    }
}

/// Collision, speed and smoothness metrics, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Metrics {
    pub CR: f64,
    pub CR_AA: f64,
    pub CR_AM: f64,
    pub AS: f64,
    pub SM: f64,
    pub SM_LO: f64,
    pub SM_LA: f64,
}

impl Metrics {
    pub fn from_log(log: &EpisodeLog, v_max: f64, beta: f64) -> Result<Self> {
        let (cr, cr_aa, cr_am) = collision_rate(log)?;
        let (sm, sm_lo, sm_la) = smoothness(log, beta)?;
        Ok(Self { CR: cr, CR_AA: cr_aa, CR_AM: cr_am, AS: average_speed(log, v_max)?, SM: sm, SM_LO: sm_lo, SM_LA: sm_la })
    }

    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        let cr_aa = sum(|m| m.CR_AA);
        let cr_am = sum(|m| m.CR_AM);
        let sm_lo = sum(|m| m.SM_LO);
        let sm_la = sum(|m| m.SM_LA);
        Metrics { CR: cr_aa + cr_am, CR_AA: cr_aa, CR_AM: cr_am, AS: sum(|m| m.AS), SM: sum(|m| m.SM), SM_LO: sm_lo, SM_LA: sm_la }
    }
}

/// SM weighting between longitudinal and lateral components.
pub const SMOOTHNESS_BETA: f64 = 0.5;
/// Width of the `[-1, 1]` command space.
const COMMAND_RANGE: f64 = 2.0;

/// `(CR, CR_AA, CR_AM)`: percent of steps with at least one event.
pub fn collision_rate(log: &EpisodeLog) -> Result<(f64, f64, f64)> {
    if log.is_empty() {
        return Err(Error::InvalidInput("empty episode log".into()));
    }
    let t = log.len() as f64;
    let aa = log.steps.iter().filter(|s| s.iter().any(|r| r.coll_aa)).count() as f64;
    let am = log.steps.iter().filter(|s| s.iter().any(|r| r.coll_am)).count() as f64;
    let cr_aa = 100.0 * aa / t;
    let cr_am = 100.0 * am / t;
    Ok((cr_aa + cr_am, cr_aa, cr_am))
}

/// Mean speed over agents and steps as a percentage of `v_max`.
pub fn average_speed(log: &EpisodeLog, v_max: f64) -> Result<f64> {
    if log.is_empty() || log.n_agents() == 0 {
        return Err(Error::InvalidInput("empty episode log".into()));
    }
    let total: f64 = log.steps.iter().flatten().map(|r| r.speed.abs() / v_max).sum();
    Ok(100.0 * total / (log.n_agents() * log.len()) as f64)
}

/// `(SM, SM_LO, SM_LA)` from step-to-step command changes normalized by the
/// command range.
pub fn smoothness(log: &EpisodeLog, beta: f64) -> Result<(f64, f64, f64)> {
    if log.len() < 2 {
        return Err(Error::InvalidInput(format!("smoothness needs T >= 2, got {}", log.len())));
    }
    let n = log.n_agents();
    let (mut lo, mut la) = (0.0, 0.0);
    for w in log.steps.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            lo += (b.lon - a.lon).abs() / COMMAND_RANGE;
            la += (b.steer - a.steer).abs() / COMMAND_RANGE;
        }
    }
    let denom = (n * (log.len() - 1)) as f64;
    let sm_lo = 100.0 * lo / denom;
    let sm_la = 100.0 * la / denom;
    Ok((beta * sm_lo + (1.0 - beta) * sm_la, sm_lo, sm_la))
}
