//! Directed priority graphs, the least-squares score field, de-cycling and
//! label generation.
//!
//! An edge `from = j, to = i` carries `p = p_{i<-j}`, the probability that
//! `j` dominates `i`. Scores `s` are fitted so that `s_i - s_j` tracks the
//! preference `A_{i<-j} = 1 - 2p`, weighted by the confidence
//! `c = |p - 1/2|^alpha`, with a zero-sum gauge per connected component.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::topo::{self, logistic, Pose2, TrajectoryTable, WeaveParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedEdge {
    /// Influencing agent `j`.
    pub from: usize,
    /// Influenced agent `i`.
    pub to: usize,
    /// `p_{i<-j}`.
    pub p: f64,
    pub confidence: f64,
    /// `A_{i<-j} = 1 - 2p`.
    pub preference: f64,
}

impl DirectedEdge {
    pub fn new(from: usize, to: usize, p: f64, alpha: f64) -> Self {
        Self { from, to, p, confidence: confidence_weights(p, alpha), preference: 1.0 - 2.0 * p }
    }

    /// Sets the edge to an exact tie with zero confidence.
    pub fn neutralize(&mut self) {
        self.p = 0.5;
        self.confidence = 0.0;
        self.preference = 0.0;
    }

    pub fn is_neutral(&self) -> bool {
        self.p == 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityGraph {
    pub node_ids: Vec<usize>,
    pub edges: Vec<DirectedEdge>,
    /// Per-node scores aligned with `node_ids`.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldParams {
    /// Confidence exponent.
    pub alpha: f64,
    /// Temperature of the score-induced probability.
    pub tau_s: f64,
    /// Meters; pairs farther apart carry no edge.
    pub interaction_radius: f64,
    /// Each agent keeps edges only from its nearest `max_neighbors`.
    pub max_neighbors: usize,
    pub max_cycle_len: usize,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self { alpha: 1.0, tau_s: 1.0, interaction_radius: 15.0, max_neighbors: 4, max_cycle_len: 3 }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::InvalidParameter(format!("tau_s must be > 0, got {}", self.tau_s)));
        }
        if !(self.interaction_radius > 0.0) {
            return Err(Error::InvalidParameter("interaction_radius must be > 0".into()));
        }
        if self.max_cycle_len < 2 {
            return Err(Error::InvalidParameter("max_cycle_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// `|p - 1/2|^alpha`, with exact ties mapped to zero for every `alpha`.
pub fn confidence_weights(p: f64, alpha: f64) -> f64 {
    let d = (p - 0.5).abs();
    if d == 0.0 {
        0.0
    } else {
        d.powf(alpha)
    }
}

/// `logistic((s_j - s_i) / tau_s)`: probability that `j` dominates `i`
/// implied by the scores. Requires `tau_s > 0`.
pub fn score_induced_prob(s_i: f64, s_j: f64, tau_s: f64) -> f64 {
    debug_assert!(tau_s > 0.0);
    logistic((s_j - s_i) / tau_s)
}

impl PriorityGraph {
    pub fn new(node_ids: Vec<usize>, edges: Vec<DirectedEdge>) -> Result<Self> {
        let g = Self { node_ids, edges, scores: None };
        g.validate()?;
        Ok(g)
    }

    pub fn index_of(&self) -> HashMap<usize, usize> {
        self.node_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect()
    }

    /// Looks up the edge `to <- from`.
    pub fn edge(&self, to: usize, from: usize) -> Option<&DirectedEdge> {
        self.edges.iter().find(|e| e.to == to && e.from == from)
    }

    pub fn score_of(&self, id: usize) -> Option<f64> {
        let k = self.node_ids.iter().position(|&n| n == id)?;
        self.scores.as_ref().map(|s| s[k])
    }

    pub fn validate(&self) -> Result<()> {
        let idx = self.index_of();
        if idx.len() != self.node_ids.len() {
            return Err(Error::InvalidInput("duplicate node ids".into()));
        }
        let mut pairs: HashMap<(usize, usize), f64> = HashMap::new();
        for e in &self.edges {
            if e.from == e.to {
                return Err(Error::InvalidInput(format!("self-loop on node {}", e.from)));
            }
            if !idx.contains_key(&e.from) || !idx.contains_key(&e.to) {
                return Err(Error::InvalidInput(format!("edge {}<-{} references unknown node", e.to, e.from)));
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(Error::InvalidInput(format!("edge probability {} outside [0,1]", e.p)));
            }
            if !(e.confidence >= 0.0) {
                return Err(Error::InvalidInput(format!("negative confidence {}", e.confidence)));
            }
            if pairs.insert((e.to, e.from), e.p).is_some() {
                return Err(Error::InvalidInput(format!("duplicate edge {}<-{}", e.to, e.from)));
            }
        }
        for (&(to, from), &p) in &pairs {
            if let Some(&q) = pairs.get(&(from, to)) {
                if (p + q - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("edges {to}<-{from} and {from}<-{to} violate reciprocity")));
                }
            }
        }
        if let Some(s) = &self.scores {
            if s.len() != self.node_ids.len() {
                return Err(Error::Shape(format!("{} scores for {} nodes", s.len(), self.node_ids.len())));
            }
            let sum: f64 = s.iter().sum();
            if sum.abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("scores violate the gauge: sum = {sum:e}")));
            }
        }
        Ok(())
    }

    /// Connected components over edges with positive confidence, as lists of
    /// node indices in ascending order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.node_ids.len();
        let idx = self.index_of();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in self.edges.iter().filter(|e| e.confidence > 0.0) {
            let a = find(&mut parent, idx[&e.from]);
            let b = find(&mut parent, idx[&e.to]);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for k in 0..n {
            let r = find(&mut parent, k);
            groups.entry(r).or_default().push(k);
        }
        groups.into_values().collect()
    }

    /// Value of the weighted least-squares objective at `scores`.
    pub fn objective(&self, scores: &[f64]) -> f64 {
        let idx = self.index_of();
        0.5 * self
            .edges
            .iter()
            .map(|e| {
                let r = (scores[idx[&e.to]] - scores[idx[&e.from]]) - e.preference;
                e.confidence * r * r
            })
            .sum::<f64>()
    }

    /// Gradient of [`PriorityGraph::objective`] with respect to the scores.
    pub fn objective_gradient(&self, scores: &[f64]) -> Vec<f64> {
        let idx = self.index_of();
        let mut g = vec![0.0; scores.len()];
        for e in &self.edges {
            let (i, j) = (idx[&e.to], idx[&e.from]);
            let r = e.confidence * ((scores[i] - scores[j]) - e.preference);
            g[i] += r;
            g[j] -= r;
        }
        g
    }
}

/// Solves the confidence-weighted least-squares score field.
///
/// Each component (over positive-confidence edges) is solved independently
/// through its Laplacian normal equations `L s = b`; the rank-one term
/// `11^T / n` pins the solution to the zero-mean subspace, where the system
/// is positive definite.
pub fn solve_score_field(graph: &PriorityGraph) -> Result<Vec<f64>> {
    let n = graph.node_ids.len();
    if n == 0 {
        return Err(Error::InvalidInput("graph has no nodes".into()));
    }
    let idx = graph.index_of();
    let mut scores = vec![0.0; n];
    for comp in graph.components() {
        let m = comp.len();
        if m < 2 {
            continue;
        }
        let local: HashMap<usize, usize> = comp.iter().enumerate().map(|(k, &g)| (g, k)).collect();
        let mut lap = DMatrix::<f64>::from_element(m, m, 1.0 / m as f64);
        let mut rhs = DVector::<f64>::zeros(m);
        for e in graph.edges.iter().filter(|e| e.confidence > 0.0) {
            let (Some(&i), Some(&j)) = (local.get(&idx[&e.to]), local.get(&idx[&e.from])) else {
                continue;
            };
            let c = e.confidence;
            lap[(i, i)] += c;
            lap[(j, j)] += c;
            lap[(i, j)] -= c;
            lap[(j, i)] -= c;
            rhs[i] += c * e.preference;
            rhs[j] -= c * e.preference;
        }
        let sol = match lap.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => lap
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("score-field system".into()))?,
        };
        let mean = sol.mean();
        for (k, &g) in comp.iter().enumerate() {
            scores[g] = sol[k] - mean;
        }
    }
    Ok(scores)
}

/// Finds every simple directed cycle of length `2..=max_len` among
/// oriented edges (`p > 1/2`, pointing from dominant to dominated).
/// Returns each cycle as a list of edge indices.
pub fn short_cycles(graph: &PriorityGraph, max_len: usize) -> Vec<Vec<usize>> {
    let n = graph.node_ids.len();
    let idx = graph.index_of();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, e) in graph.edges.iter().enumerate() {
        if e.p > 0.5 {
            adj[idx[&e.from]].push((idx[&e.to], k));
        }
    }
    let mut cycles = Vec::new();
    let mut path_nodes = Vec::new();
    let mut path_edges = Vec::new();
    fn dfs(
        start: usize,
        node: usize,
        max_len: usize,
        adj: &[Vec<(usize, usize)>],
        path_nodes: &mut Vec<usize>,
        path_edges: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        for &(next, edge) in &adj[node] {
            if next == start && path_edges.len() + 1 >= 2 {
                let mut cyc = path_edges.clone();
                cyc.push(edge);
                out.push(cyc);
            } else if next > start && !path_nodes.contains(&next) && path_edges.len() + 1 < max_len {
                path_nodes.push(next);
                path_edges.push(edge);
                dfs(start, next, max_len, adj, path_nodes, path_edges, out);
                path_nodes.pop();
                path_edges.pop();
            }
        }
    }
    for s in 0..n {
        path_nodes.clear();
        path_nodes.push(s);
        dfs(s, s, max_len, &adj, &mut path_nodes, &mut path_edges, &mut cycles);
    }
    cycles
}

/// Breaks short directed cycles by neutralizing, one at a time, the
/// lowest-confidence edge that lies on any remaining cycle. The reverse
/// orientation of a neutralized pair is neutralized too so reciprocity is
/// kept. Scores are dropped since they no longer match the edges.
pub fn decycle(graph: &PriorityGraph, max_cycle_len: usize) -> PriorityGraph {
    let mut out = graph.clone();
    loop {
        let cycles = short_cycles(&out, max_cycle_len);
        if cycles.is_empty() {
            break;
        }
        let in_cycle: HashSet<usize> = cycles.into_iter().flatten().collect();
        let victim = in_cycle
            .into_iter()
            .min_by(|&a, &b| {
                let ka = (out.edges[a].p - 0.5).abs();
                let kb = (out.edges[b].p - 0.5).abs();
                ka.total_cmp(&kb).then(a.cmp(&b))
            })
            .expect("non-empty cycle set");
        let (from, to) = (out.edges[victim].from, out.edges[victim].to);
        for e in out.edges.iter_mut() {
            if (e.from == from && e.to == to) || (e.from == to && e.to == from) {
                e.neutralize();
            }
        }
    }
    if out != *graph {
        out.scores = None;
    }
    out
}

/// Ordered interaction-relevant pairs `(from = j, to = i)`: `j` within
/// `radius` of `i` and among the `max_neighbors` nearest to `i`
/// (ties broken by agent id).
pub fn interaction_pairs(agents: &[(usize, [f64; 2])], radius: f64, max_neighbors: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for &(i, pi) in agents {
        let mut cands: Vec<(f64, usize)> = agents
            .iter()
            .filter(|(j, _)| *j != i)
            .map(|&(j, pj)| (((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt(), j))
            .filter(|(d, _)| *d <= radius)
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.extend(cands.into_iter().take(max_neighbors).map(|(_, j)| (j, i)));
    }
    pairs
}

/// One agent's ground-truth input to label generation.
#[derive(Debug, Clone)]
pub struct LabelAgent {
    pub id: usize,
    pub pose: Pose2,
    /// Future positions starting at the current step.
    pub future: Vec<[f64; 2]>,
}

/// Builds the de-cycled priority graph with solved scores for one step.
pub fn build_labels(agents: &[LabelAgent], weave: &WeaveParams, field: &FieldParams) -> Result<PriorityGraph> {
    weave.validate()?;
    field.validate()?;
    if agents.is_empty() {
        return Err(Error::InvalidInput("no agents".into()));
    }
    let by_id: HashMap<usize, &LabelAgent> = agents.iter().map(|a| (a.id, a)).collect();
    if by_id.len() != agents.len() {
        return Err(Error::InvalidInput("duplicate agent ids".into()));
    }
    let positions: Vec<(usize, [f64; 2])> = agents.iter().map(|a| (a.id, a.pose.position())).collect();
    let pairs = interaction_pairs(&positions, field.interaction_radius, field.max_neighbors);
    let mut cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut distance = |to: usize, from: usize| -> Result<f64> {
        if let Some(&d) = cache.get(&(to, from)) {
            return Ok(d);
        }
        let (ego, nbr) = (by_id[&to], by_id[&from]);
        let d = topo::directed_weaving_distance(&ego.future, &nbr.future, &ego.pose, weave)?;
        cache.insert((to, from), d);
        Ok(d)
    };
    let mut edges = Vec::with_capacity(pairs.len());
    for (j, i) in pairs {
        let d_ij = distance(i, j)?;
        let d_ji = distance(j, i)?;
        let (p, _) = topo::pairwise_priority(d_ij, d_ji, weave.tau)?;
        edges.push(DirectedEdge::new(j, i, p, field.alpha));
    }
    let graph = PriorityGraph::new(agents.iter().map(|a| a.id).collect(), edges)?;
    let mut graph = decycle(&graph, field.max_cycle_len);
    graph.scores = Some(solve_score_field(&graph)?);
    Ok(graph)
}

pub const LABEL_PARAMS_SCHEMA_VERSION: u32 = 1;

/// Labeling parameters file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelParams {
    pub schema_version: u32,
    pub weave: WeaveParams,
    pub field: FieldParams,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self { schema_version: LABEL_PARAMS_SCHEMA_VERSION, weave: WeaveParams::default(), field: FieldParams::default() }
    }
}

impl LabelParams {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: LabelParams = toml::from_str(s)?;
        if p.schema_version != LABEL_PARAMS_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", p.schema_version)));
        }
        p.weave.validate()?;
        p.field.validate()?;
        Ok(p)
    }
}

/// Labels every step of a trajectory table. Futures stop at the first
/// missing step of each agent.
pub fn label_table(table: &TrajectoryTable, weave: &WeaveParams, field: &FieldParams, exec: Exec) -> Result<LabelSet> {
    let steps = table.steps();
    let graphs = par::map(exec, &steps, |&t| {
        let agents: Vec<LabelAgent> = table
            .snapshot(t, weave.horizon)
            .into_iter()
            .map(|a| LabelAgent { id: a.agent_id as usize, pose: a.pose, future: a.future })
            .collect();
        build_labels(&agents, weave, field)
    });
    Ok(LabelSet { steps: steps.into_iter().zip(graphs).map(|(t, g)| g.map(|g| (t, g))).collect::<Result<_>>()? })
}

/// Labels for a sequence of steps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub steps: Vec<(usize, PriorityGraph)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelSummary {
    pub steps: usize,
    pub edges: usize,
    pub neutral_edges: usize,
    pub nodes: usize,
    pub mean_abs_preference: f64,
    pub max_abs_score: f64,
}

impl LabelSet {
    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "i", "j", "p", "c", "A"])?;
        for (t, g) in &self.steps {
            for e in &g.edges {
                wr.write_record([
                    t.to_string(),
                    e.to.to_string(),
                    e.from.to_string(),
                    e.p.to_string(),
                    e.confidence.to_string(),
                    e.preference.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_nodes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "i", "s"])?;
        for (t, g) in &self.steps {
            let scores = g.scores.clone().unwrap_or_else(|| vec![0.0; g.node_ids.len()]);
            for (id, s) in g.node_ids.iter().zip(scores) {
                wr.write_record([t.to_string(), id.to_string(), s.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> LabelSummary {
        let edges: Vec<&DirectedEdge> = self.steps.iter().flat_map(|(_, g)| g.edges.iter()).collect();
        let nodes = self.steps.iter().map(|(_, g)| g.node_ids.len()).sum();
        let max_abs_score = self
            .steps
            .iter()
            .filter_map(|(_, g)| g.scores.as_ref())
            .flatten()
            .fold(0.0f64, |m, s| m.max(s.abs()));
        LabelSummary {
            steps: self.steps.len(),
            edges: edges.len(),
            neutral_edges: edges.iter().filter(|e| e.is_neutral()).count(),
            nodes,
            mean_abs_preference: if edges.is_empty() {
                0.0
            } else {
                edges.iter().map(|e| e.preference.abs()).sum::<f64>() / edges.len() as f64
            },
            max_abs_score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn edge(from: usize, to: usize, p: f64) -> DirectedEdge {
        DirectedEdge::new(from, to, p, 1.0)
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_weights(0.5, 0.0), 0.0);
        assert_eq!(confidence_weights(0.5, 3.0), 0.0);
        assert_eq!(confidence_weights(1.0, 1.0), 0.5);
        assert_abs_diff_eq!(confidence_weights(0.9, 2.0), 0.16, epsilon = 1e-12);
    }

    #[test]
    fn two_node_field() {
        let mut e = edge(1, 0, 0.2);
        e.preference = 0.6;
        e.confidence = 1.0;
        let g = PriorityGraph::new(vec![0, 1], vec![e]).unwrap();
        let s = solve_score_field(&g).unwrap();
        assert_abs_diff_eq!(s[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], -0.3, epsilon = 1e-12);
    }

    #[test]
    fn cyclic_symmetry_gives_zero() {
        let edges = vec![edge(0, 1, 0.8), edge(1, 2, 0.8), edge(2, 0, 0.8)];
        let g = PriorityGraph::new(vec![0, 1, 2], edges).unwrap();
        let s = solve_score_field(&g).unwrap();
        for v in s {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_confidence_gives_zero_scores() {
        let g = PriorityGraph::new(vec![3, 4], vec![edge(3, 4, 0.5), edge(4, 3, 0.5)]).unwrap();
        assert_eq!(solve_score_field(&g).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn components_are_gauged_separately() {
        let edges = vec![edge(0, 1, 0.9), edge(2, 3, 0.2), edge(3, 4, 0.7)];
        let g = PriorityGraph::new(vec![0, 1, 2, 3, 4, 5], edges).unwrap();
        let s = solve_score_field(&g).unwrap();
        assert_abs_diff_eq!(s[0] + s[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2] + s[3] + s[4], 0.0, epsilon = 1e-12);
        assert_eq!(s[5], 0.0);
        let grad = g.objective_gradient(&s);
        assert!(grad.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn two_node_order_consistency() {
        for p in [0.05, 0.3, 0.49, 0.51, 0.7, 0.99] {
            let g = PriorityGraph::new(vec![0, 1], vec![edge(1, 0, p)]).unwrap();
            let s = solve_score_field(&g).unwrap();
            assert_eq!((s[0] - s[1]).signum(), (1.0 - 2.0 * p).signum());
        }
    }

    #[test]
    fn score_induced_prob_examples() {
        assert_eq!(score_induced_prob(1.3, 1.3, 0.7), 0.5);
        assert_abs_diff_eq!(score_induced_prob(0.0, 0.5, 0.5), 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_eq!(score_induced_prob(0.0, 1e308, 1.0), 1.0);
        let (a, b) = (score_induced_prob(0.2, -0.9, 0.4), score_induced_prob(-0.9, 0.2, 0.4));
        assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn decycle_acyclic_is_fixpoint() {
        let g = PriorityGraph::new(vec![0, 1, 2], vec![edge(0, 1, 0.9), edge(1, 2, 0.8), edge(0, 2, 0.7)]).unwrap();
        assert_eq!(decycle(&g, 3), g);
    }

    #[test]
    fn decycle_drops_weakest_edge() {
        let g = PriorityGraph::new(vec![0, 1, 2], vec![edge(0, 1, 0.9), edge(1, 2, 0.8), edge(2, 0, 0.6)]).unwrap();
        let d = decycle(&g, 3);
        assert_eq!(d.edges[0].p, 0.9);
        assert_eq!(d.edges[1].p, 0.8);
        assert_eq!(d.edges[2].p, 0.5);
        assert_eq!(d.edges[2].confidence, 0.0);
        assert_eq!(d.edges[2].preference, 0.0);
        assert!(short_cycles(&d, 3).is_empty());
    }

    #[test]
    fn decycle_neutralizes_both_orientations() {
        let edges = vec![edge(0, 1, 0.9), edge(1, 0, 0.1), edge(1, 2, 0.8), edge(2, 0, 0.6), edge(0, 2, 0.4)];
        let g = PriorityGraph::new(vec![0, 1, 2], edges).unwrap();
        let d = decycle(&g, 3);
        assert_eq!(d.edges[3].p, 0.5);
        assert_eq!(d.edges[4].p, 0.5);
        d.validate().unwrap();
    }

    #[test]
    fn longer_cycles_survive_short_cutoff() {
        let edges = vec![edge(0, 1, 0.9), edge(1, 2, 0.9), edge(2, 3, 0.9), edge(3, 0, 0.9)];
        let g = PriorityGraph::new(vec![0, 1, 2, 3], edges).unwrap();
        assert_eq!(decycle(&g, 3), g);
        assert_eq!(short_cycles(&g, 4).len(), 1);
    }

    #[test]
    fn validation_errors() {
        assert!(PriorityGraph::new(vec![0, 0], vec![]).is_err());
        assert!(PriorityGraph::new(vec![0, 1], vec![edge(0, 0, 0.6)]).is_err());
        assert!(PriorityGraph::new(vec![0, 1], vec![edge(0, 1, 0.6), edge(1, 0, 0.6)]).is_err());
        assert!(PriorityGraph::new(vec![0, 1], vec![edge(0, 1, 1.5)]).is_err());
        assert!(PriorityGraph::new(vec![0], vec![edge(0, 7, 0.5)]).is_err());
    }

    #[test]
    fn interaction_pairs_cap_and_radius() {
        let agents = vec![(0, [0.0, 0.0]), (1, [1.0, 0.0]), (2, [2.0, 0.0]), (3, [50.0, 0.0])];
        let pairs = interaction_pairs(&agents, 15.0, 1);
        assert!(pairs.contains(&(1, 0)));
        assert!(!pairs.contains(&(2, 0)));
        assert!(!pairs.iter().any(|&(j, i)| j == 3 || i == 3));
    }

    #[test]
    fn single_agent_labels() {
        let a = LabelAgent { id: 4, pose: Pose2::new(0.0, 0.0, 0.0).unwrap(), future: vec![[0.0, 0.0], [1.0, 0.0]] };
        let g = build_labels(&[a], &WeaveParams::default(), &FieldParams::default()).unwrap();
        assert_eq!(g.node_ids, vec![4]);
        assert!(g.edges.is_empty());
        assert_eq!(g.scores, Some(vec![0.0]));
        assert!(build_labels(&[], &WeaveParams::default(), &FieldParams::default()).is_err());
    }

    #[test]
    fn parallel_agents_are_neutral() {
        let mk = |id, y: f64| LabelAgent {
            id,
            pose: Pose2::new(0.0, y, 0.0).unwrap(),
            future: (0..=25).map(|h| [h as f64, y]).collect(),
        };
        let g = build_labels(&[mk(0, 0.0), mk(1, 10.0)], &WeaveParams::default(), &FieldParams::default()).unwrap();
        assert_eq!(g.edges.len(), 2);
        for e in &g.edges {
            assert_eq!(e.p, 0.5);
        }
        assert_eq!(g.scores, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn label_files() {
        let mk = |id, y: f64| LabelAgent {
            id,
            pose: Pose2::new(0.0, y, 0.0).unwrap(),
            future: (0..=5).map(|h| [h as f64, y]).collect(),
        };
        let g = build_labels(&[mk(0, 0.0), mk(1, 3.0)], &WeaveParams::default(), &FieldParams::default()).unwrap();
        let set = LabelSet { steps: vec![(0, g.clone()), (1, g)] };
        let mut buf = Vec::new();
        set.write_edges_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,i,j,p,c,A"));
        let mut buf = Vec::new();
        set.write_nodes_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
        let s = set.summary();
        assert_eq!((s.steps, s.edges, s.nodes), (2, 4, 4));
    }
}
