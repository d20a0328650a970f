//! Agent-centric frames, near-crossing scores and soft pairwise priorities.
//!
//! For an ordered pair `(i, j)` the future trajectory of `j` is expressed in
//! the lateral-longitudinal frame of `i`. The lateral gap between the two
//! profiles is scanned for steps where it is small and changes sign; the
//! smallest such score is the directed weaving distance `d_{i<-j}`. A
//! two-class softmax over `d_{i<-j}` and `d_{j<-i}` gives the priority pair.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weaving distance assigned when a pair has fewer than two overlapping
/// trajectory points.
pub const SENTINEL_DISTANCE: f64 = 1e9;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && heading.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pose ({x}, {y}, {heading})")));
        }
        Ok(Self { x, y, heading: normalize_angle(heading) })
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Maps a world point into this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Inverse of [`Pose2::to_local`].
    pub fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * q[0] - s * q[1], self.y + s * q[0] + c * q[1]]
    }
}

/// A horizon of 2-D positions for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<[f64; 2]>,
    pub start_time: usize,
}

impl Trajectory {
    pub fn new(positions: Vec<[f64; 2]>, start_time: usize) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "trajectory needs at least 2 points, got {}",
                positions.len()
            )));
        }
        check_finite(&positions)?;
        Ok(Self { positions, start_time })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_local_frame(&self, ego: &Pose2) -> Result<Trajectory> {
        Ok(Trajectory { positions: to_local_frame(&self.positions, ego)?, start_time: self.start_time })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeaveParams {
    /// Stabilizer added to the crossing denominator.
    pub epsilon: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// Label horizon in steps; trajectories carry `horizon + 1` points.
    pub horizon: usize,
}

impl Default for WeaveParams {
    fn default() -> Self {
        Self { epsilon: 0.1, tau: 1.0, horizon: 25 }
    }
}

impl WeaveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_finite(points: &[[f64; 2]]) -> Result<()> {
    if let Some(p) = points.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::InvalidInput(format!("non-finite point ({}, {})", p[0], p[1])));
    }
    Ok(())
}

/// Rotates and translates `points` into the frame of `ego`.
pub fn to_local_frame(points: &[[f64; 2]], ego: &Pose2) -> Result<Vec<[f64; 2]>> {
    check_finite(points)?;
    if !(ego.x.is_finite() && ego.y.is_finite() && ego.heading.is_finite()) {
        return Err(Error::InvalidInput("non-finite ego pose".into()));
    }
    Ok(points.iter().map(|&p| ego.to_local(p)).collect())
}

/// Elementwise `ego - nbr` of two lateral profiles.
pub fn lateral_gap(ego_lateral: &[f64], nbr_lateral: &[f64]) -> Result<Vec<f64>> {
    if ego_lateral.len() != nbr_lateral.len() {
        return Err(Error::InvalidInput(format!(
            "lateral profiles differ in length ({} vs {})",
            ego_lateral.len(),
            nbr_lateral.len()
        )));
    }
    Ok(ego_lateral.iter().zip(nbr_lateral).map(|(a, b)| a - b).collect())
}

/// Per-step near-crossing scores over consecutive gap pairs.
pub fn near_crossing_scores(gap: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    if gap.len() < 2 {
        return Err(Error::InvalidInput(format!("gap needs at least 2 entries, got {}", gap.len())));
    }
    Ok(gap
        .windows(2)
        .map(|w| {
            let num = w[0].abs().min(w[1].abs());
            let den = epsilon + (-w[0] * w[1]).max(0.0);
            num / den
        })
        .collect())
}

/// Minimum near-crossing score over the horizon.
pub fn weaving_distance(scores: &[f64]) -> Result<f64> {
    scores
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::InvalidInput("empty score sequence".into()))
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class softmax over negated, temperature-scaled distances.
///
/// Returns `(p_{i<-j}, p_{j<-i})` with the second computed as `1 - p` so the
/// pair sums to one exactly.
pub fn pairwise_priority(d_ij: f64, d_ji: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    if !(d_ij >= 0.0 && d_ji >= 0.0) {
        return Err(Error::InvalidInput(format!("distances must be >= 0, got ({d_ij}, {d_ji})")));
    }
    // exp(-d_ij/tau) / (exp(-d_ij/tau) + exp(-d_ji/tau)) == logistic((d_ji - d_ij)/tau)
    let p_ij = logistic((d_ji - d_ij) / tau);
    Ok((p_ij, 1.0 - p_ij))
}

/// Antisymmetric preference `A_{i<-j} = p_{j<-i} - p_{i<-j}`.
pub fn preference_signal(p_ij: f64, p_ji: f64) -> Result<f64> {
    if !((p_ij + p_ji - 1.0).abs() <= 1e-12) {
        return Err(Error::InvalidInput(format!("reciprocity violated: {p_ij} + {p_ji} != 1")));
    }
    Ok(p_ji - p_ij)
}

/// Directed weaving distance `d_{i<-j}` seen from the frame of `ego_pose`.
///
/// Both futures are truncated to their common length (capped at
/// `horizon + 1`). Fewer than two common points yields
/// [`SENTINEL_DISTANCE`].
pub fn directed_weaving_distance(
    ego_future: &[[f64; 2]],
    nbr_future: &[[f64; 2]],
    ego_pose: &Pose2,
    params: &WeaveParams,
) -> Result<f64> {
    params.validate()?;
    let n = ego_future.len().min(nbr_future.len()).min(params.horizon + 1);
    if n < 2 {
        return Ok(SENTINEL_DISTANCE);
    }
    let ego_lat: Vec<f64> = to_local_frame(&ego_future[..n], ego_pose)?.iter().map(|p| p[1]).collect();
    let nbr_lat: Vec<f64> = to_local_frame(&nbr_future[..n], ego_pose)?.iter().map(|p| p[1]).collect();
    let gap = lateral_gap(&ego_lat, &nbr_lat)?;
    weaving_distance(&near_crossing_scores(&gap, params.epsilon)?)
}

/// Poses indexed by agent and step, loaded from a trajectory CSV with
/// columns `agent_id,t,x,y,heading`.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryTable {
    pub poses: BTreeMap<u64, BTreeMap<usize, Pose2>>,
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    agent_id: u64,
    t: usize,
    x: f64,
    y: f64,
    heading: f64,
}

/// One agent's pose at a step plus its contiguous future positions.
#[derive(Debug, Clone)]
pub struct AgentSnapshot {
    pub agent_id: u64,
    pub pose: Pose2,
    pub future: Vec<[f64; 2]>,
}

impl TrajectoryTable {
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["agent_id", "t", "x", "y", "heading"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::CsvLine { line: 1, msg: format!("missing column `{col}`") });
            }
        }
        let mut table = TrajectoryTable::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::CsvLine {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let row: TrajectoryRow =
                rec.deserialize(Some(&headers)).map_err(|e| Error::CsvLine { line, msg: e.to_string() })?;
            let pose = Pose2::new(row.x, row.y, row.heading).map_err(|e| Error::CsvLine { line, msg: e.to_string() })?;
            if table.poses.entry(row.agent_id).or_default().insert(row.t, pose).is_some() {
                return Err(Error::CsvLine {
                    line,
                    msg: format!("duplicate row for agent {} at t={}", row.agent_id, row.t),
                });
            }
        }
        if table.poses.is_empty() {
            return Err(Error::InvalidInput("trajectory file has no rows".into()));
        }
        Ok(table)
    }

    /// Sorted set of all steps present for any agent.
    pub fn steps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.poses.values().flat_map(|m| m.keys().copied()).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    /// Agents present at `t` with their futures over at most `horizon + 1`
    /// consecutive steps.
    pub fn snapshot(&self, t: usize, horizon: usize) -> Vec<AgentSnapshot> {
        self.poses
            .iter()
            .filter_map(|(&agent_id, track)| {
                let pose = *track.get(&t)?;
                let future = (t..=t + horizon).map_while(|k| track.get(&k).map(|p| p.position())).collect();
                Some(AgentSnapshot { agent_id, pose, future })
            })
            .collect()
    }
}
