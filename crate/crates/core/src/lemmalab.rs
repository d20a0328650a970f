//! Exact tabular checks for the follower-side Stackelberg Bellman operator.
//!
//! Two identities are verified numerically on small random MDPs:
//! the value gap caused by replacing the leader policy with a prediction is
//! bounded by the one-step operator gap divided by `1 - gamma`, and the
//! performance-difference identity relating two follower policies through
//! the discounted visitation distribution.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{rng_from, stream};

const ROW_TOL: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Tabular MDP with a follower action channel and a leader action channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSemdp {
    pub n_states: usize,
    pub n_follower: usize,
    pub n_leader: usize,
    /// `p[((s * nf + af) * nl + al) * ns + s']`.
    pub p: Vec<f64>,
    /// `r[(s * nf + af) * nl + al]`.
    pub r: Vec<f64>,
    pub gamma: f64,
}

impl TabularSemdp {
    pub fn new(n_states: usize, n_follower: usize, n_leader: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self> {
        let m = Self { n_states, n_follower, n_leader, p, r, gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nf, nl) = (self.n_states, self.n_follower, self.n_leader);
        if ns == 0 || nf == 0 || nl == 0 {
            return Err(Error::Shape("empty state or action set".into()));
        }
        if self.r.len() != ns * nf * nl || self.p.len() != ns * nf * nl * ns {
            return Err(Error::Shape(format!(
                "expected |r| = {} and |P| = {}, got {} and {}",
                ns * nf * nl,
                ns * nf * nl * ns,
                self.r.len(),
                self.p.len()
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if self.r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("reward".into()));
        }
        for row in self.p.chunks(ns) {
            if row.iter().any(|&x| !(x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidInput("transition slice is not a distribution".into()));
            }
        }
        Ok(())
    }

    /// Random instance with Dirichlet(1) transitions and rewards in `[-1, 1]`.
    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_follower: usize, n_leader: usize, gamma: f64) -> Self {
        let k = n_states * n_follower * n_leader;
        let mut p = Vec::with_capacity(k * n_states);
        for _ in 0..k {
            p.extend(random_simplex(rng, n_states));
        }
        let r = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { n_states, n_follower, n_leader, p, r, gamma }
    }

    fn idx(&self, s: usize, af: usize, al: usize) -> usize {
        (s * self.n_follower + af) * self.n_leader + al
    }

    pub fn reward(&self, s: usize, af: usize, al: usize) -> f64 {
        self.r[self.idx(s, af, al)]
    }

    pub fn next(&self, s: usize, af: usize, al: usize) -> &[f64] {
        let i = self.idx(s, af, al) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn r_max(&self) -> f64 {
        self.r.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn v_max(&self) -> f64 {
        self.r_max() / (1.0 - self.gamma)
    }

    pub fn scale_rewards(&self, lambda: f64) -> Self {
        let mut m = self.clone();
        m.r.iter_mut().for_each(|x| *x *= lambda);
        m
    }
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Per-state distribution over a finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

pub type LeaderPolicy = Policy;
pub type FollowerPolicy = Policy;

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let p = Self { n_states, n_actions, probs };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n_states * self.n_actions || self.n_actions == 0 {
            return Err(Error::Shape(format!("policy has {} entries for {}x{}", self.probs.len(), self.n_states, self.n_actions)));
        }
        for row in self.probs.chunks(self.n_actions) {
            if row.iter().any(|&x| !(x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidInput("policy row is not a distribution".into()));
            }
        }
        Ok(())
    }

    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> Self {
        let probs = (0..n_states).flat_map(|_| random_simplex(rng, n_actions)).collect();
        Self { n_states, n_actions, probs }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self { n_states: actions.len(), n_actions, probs }
    }

    /// `(1 - eta) * self + eta * other`.
    pub fn mix(&self, other: &Policy, eta: f64) -> Policy {
        let probs = self.probs.iter().zip(&other.probs).map(|(a, b)| (1.0 - eta) * a + eta * b).collect();
        Policy { n_states: self.n_states, n_actions: self.n_actions, probs }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// The chosen action per state, if every row is one-hot.
    pub fn as_deterministic(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                let a = row.iter().position(|&x| x == 1.0)?;
                row.iter().enumerate().all(|(b, &x)| b == a || x == 0.0).then_some(a)
            })
            .collect()
    }
}

fn check_shapes(mdp: &TabularSemdp, follower: &Policy, leader: &Policy) -> Result<()> {
    if follower.n_states != mdp.n_states || follower.n_actions != mdp.n_follower {
        return Err(Error::Shape("follower policy does not match the MDP".into()));
    }
    if leader.n_states != mdp.n_states || leader.n_actions != mdp.n_leader {
        return Err(Error::Shape("leader policy does not match the MDP".into()));
    }
    Ok(())
}

/// One application of the Stackelberg Bellman operator.
pub fn se_bellman_backup(v: &[f64], mdp: &TabularSemdp, follower: &Policy, leader: &Policy) -> Result<Vec<f64>> {
    check_shapes(mdp, follower, leader)?;
    if v.len() != mdp.n_states {
        return Err(Error::Shape(format!("value has {} entries for {} states", v.len(), mdp.n_states)));
    }
    Ok(backup_unchecked(v, mdp, follower, leader))
}

fn backup_unchecked(v: &[f64], mdp: &TabularSemdp, follower: &Policy, leader: &Policy) -> Vec<f64> {
    (0..mdp.n_states)
        .map(|s| {
            let mut acc = 0.0;
            for (af, &pf) in follower.row(s).iter().enumerate() {
                for (al, &pl) in leader.row(s).iter().enumerate() {
                    let ev: f64 = mdp.next(s, af, al).iter().zip(v).map(|(p, x)| p * x).sum();
                    acc += pf * pl * (mdp.reward(s, af, al) + mdp.gamma * ev);
                }
            }
            acc
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Iterates the backup from zero until the Bellman residual is below `tol`.
pub fn fixed_point(mdp: &TabularSemdp, follower: &Policy, leader: &Policy, tol: f64) -> Result<Vec<f64>> {
    check_shapes(mdp, follower, leader)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let g = mdp.gamma;
    let mut v = vec![0.0; mdp.n_states];
    if g == 0.0 {
        return Ok(backup_unchecked(&v, mdp, follower, leader));
    }
    let threshold = tol * (1.0 - g) / g;
    let cap = (10.0 * (1.0 / tol).ln() / (1.0 / g).ln()).ceil().max(1.0) as usize;
    let mut change = f64::INFINITY;
    for _ in 0..cap {
        let next = backup_unchecked(&v, mdp, follower, leader);
        change = max_abs_diff(&next, &v);
        v = next;
        if change < threshold {
            return Ok(v);
        }
    }
    Err(Error::NonConvergence { iterations: cap, residual: change })
}

/// Policy-induced reward vector and transition matrix.
pub fn induced(mdp: &TabularSemdp, follower: &Policy, leader: &Policy) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(mdp, follower, leader)?;
    let n = mdp.n_states;
    let mut r = DVector::zeros(n);
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for (af, &pf) in follower.row(s).iter().enumerate() {
            for (al, &pl) in leader.row(s).iter().enumerate() {
                let w = pf * pl;
                r[s] += w * mdp.reward(s, af, al);
                for (s2, &q) in mdp.next(s, af, al).iter().enumerate() {
                    p[(s, s2)] += w * q;
                }
            }
        }
    }
    Ok((r, p))
}

/// Exact values from `(I - gamma P) V = r`.
pub fn exact_values(mdp: &TabularSemdp, follower: &Policy, leader: &Policy) -> Result<Vec<f64>> {
    let (r, p) = induced(mdp, follower, leader)?;
    let a = DMatrix::identity(mdp.n_states, mdp.n_states) - p * mdp.gamma;
    let v = a.lu().solve(&r).ok_or_else(|| Error::Singular("I - gamma P".into()))?;
    Ok(v.iter().copied().collect())
}

/// Follower action values `Q(s, a_f)` with the leader marginalized.
pub fn q_values(mdp: &TabularSemdp, leader: &Policy, v: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; mdp.n_states * mdp.n_follower];
    for s in 0..mdp.n_states {
        for af in 0..mdp.n_follower {
            q[s * mdp.n_follower + af] = leader
                .row(s)
                .iter()
                .enumerate()
                .map(|(al, &pl)| {
                    let ev: f64 = mdp.next(s, af, al).iter().zip(v).map(|(p, x)| p * x).sum();
                    pl * (mdp.reward(s, af, al) + mdp.gamma * ev)
                })
                .sum();
        }
    }
    q
}

/// Certified bound on `sup_{|V| <= V_max} |T V - T_pred V|_inf`.
pub fn operator_gap_bound(mdp: &TabularSemdp, follower: &Policy, leader: &Policy, predicted: &Policy) -> Result<f64> {
    check_shapes(mdp, follower, leader)?;
    check_shapes(mdp, follower, predicted)?;
    let v_max = mdp.v_max();
    let mut eps: f64 = 0.0;
    for s in 0..mdp.n_states {
        let delta: Vec<f64> = leader.row(s).iter().zip(predicted.row(s)).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for (af, &pf) in follower.row(s).iter().enumerate() {
            // delta sums to zero, so terms are centered on leader action 0
            let r0 = mdp.reward(s, af, 0);
            let p0 = mdp.next(s, af, 0);
            let dr: f64 = delta.iter().enumerate().map(|(al, d)| d * (mdp.reward(s, af, al) - r0)).sum();
            let dp_l1: f64 = (0..mdp.n_states)
                .map(|s2| delta.iter().enumerate().map(|(al, d)| d * (mdp.next(s, af, al)[s2] - p0[s2])).sum::<f64>().abs())
                .sum();
            acc += pf * (dr.abs() + mdp.gamma * v_max * dp_l1);
        }
        eps = eps.max(acc);
    }
    Ok(eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares the value gap under a predicted leader with the operator-gap bound.
pub fn verify_bellman_bound(mdp: &TabularSemdp, follower: &Policy, leader: &Policy, predicted: &Policy, tol: f64) -> Result<BoundReport> {
    let v = fixed_point(mdp, follower, leader, tol)?;
    let v_pred = fixed_point(mdp, follower, predicted, tol)?;
    let lhs = max_abs_diff(&v, &v_pred);
    let rhs = operator_gap_bound(mdp, follower, leader, predicted)? / (1.0 - mdp.gamma);
    Ok(BoundReport { lhs, rhs, holds: lhs <= rhs + tol })
}

/// Normalized discounted state visitation from `start`.
pub fn visitation_distribution(mdp: &TabularSemdp, follower: &Policy, leader: &Policy, start: &[f64]) -> Result<Vec<f64>> {
    if start.len() != mdp.n_states {
        return Err(Error::Shape("start distribution length".into()));
    }
    if start.iter().any(|&x| !(x >= 0.0)) || (start.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput("start is not a distribution".into()));
    }
    let (_, p) = induced(mdp, follower, leader)?;
    let a = DMatrix::identity(mdp.n_states, mdp.n_states) - p.transpose() * mdp.gamma;
    let d = a
        .lu()
        .solve(&DVector::from_column_slice(start))
        .ok_or_else(|| Error::Singular("I - gamma P^T".into()))?;
    Ok(d.iter().map(|x| x * (1.0 - mdp.gamma)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdlReport {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    /// State-form right-hand side, present when `pi` is deterministic.
    pub state_form: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Performance-difference identity between follower policies `pi` and
/// `pi_tilde` under a fixed leader.
pub fn verify_pdl(mdp: &TabularSemdp, pi: &Policy, pi_tilde: &Policy, leader: &Policy, start: &[f64]) -> Result<PdlReport> {
    check_shapes(mdp, pi_tilde, leader)?;
    let v = exact_values(mdp, pi, leader)?;
    let v_t = exact_values(mdp, pi_tilde, leader)?;
    let lhs = dot(start, &v) - dot(start, &v_t);
    let d = visitation_distribution(mdp, pi, leader, start)?;
    let q_t = q_values(mdp, leader, &v_t);
    let nf = mdp.n_follower;
    let adv = |s: usize, a: usize| q_t[s * nf + a] - v_t[s];
    let scale = 1.0 / (1.0 - mdp.gamma);
    let rhs = scale * (0..mdp.n_states).map(|s| d[s] * (0..nf).map(|a| pi.row(s)[a] * adv(s, a)).sum::<f64>()).sum::<f64>();
    let state_form = pi
        .as_deterministic()
        .map(|acts| scale * (0..mdp.n_states).map(|s| d[s] * adv(s, acts[s])).sum::<f64>());
    Ok(PdlReport { lhs, rhs, abs_diff: (lhs - rhs).abs(), state_form })
}

/// One JSONL record of a randomized suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub lemma: u8,
    pub index: usize,
    pub seed: u64,
    pub gamma: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Deterministic-policy form agreement, when checked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_form_exact: Option<bool>,
}

pub const SUITE_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
pub const PDL_TOL: f64 = 1e-8;

fn suite_gamma(gammas: &[f64], per_gamma: usize, i: usize) -> Result<f64> {
    let g = gammas[i / per_gamma];
    if !(0.0..1.0).contains(&g) {
        return Err(Error::InvalidParameter(format!("gamma must be in [0, 1), got {g}")));
    }
    Ok(g)
}

/// Bellman-bound checks on `per_gamma` random 5-state, 3x3-action instances
/// for each discount in `gammas`.
pub fn lemma1_suite(per_gamma: usize, gammas: &[f64], seed: u64, exec: Exec) -> Result<Vec<SuiteRecord>> {
    lemma1_suite_scaled(per_gamma, gammas, seed, exec, 1.0)
}

/// As [`lemma1_suite`] with the certified bound multiplied by `rhs_scale`.
/// Values below one deliberately weaken the bound; used to exercise the
/// failure path.
pub fn lemma1_suite_scaled(per_gamma: usize, gammas: &[f64], seed: u64, exec: Exec, rhs_scale: f64) -> Result<Vec<SuiteRecord>> {
    par::map_range(exec, per_gamma * gammas.len(), |i| {
        let gamma = suite_gamma(gammas, per_gamma, i)?;
        let mut rng = rng_from(seed, &[stream::LEMMA1, i as u64]);
        let mdp = TabularSemdp::random(&mut rng, 5, 3, 3, gamma);
        let follower = Policy::random(&mut rng, 5, 3);
        let leader = Policy::random(&mut rng, 5, 3);
        let eta = rng.random_range(0.0..1.0);
        let predicted = leader.mix(&Policy::random(&mut rng, 5, 3), eta);
        let rep = verify_bellman_bound(&mdp, &follower, &leader, &predicted, DEFAULT_TOL)?;
        let rhs = rep.rhs * rhs_scale;
        Ok(SuiteRecord {
            lemma: 1,
            index: i,
            seed,
            gamma,
            lhs: rep.lhs,
            rhs,
            holds: rep.lhs <= rhs + PDL_TOL,
            state_form_exact: None,
        })
    })
    .into_iter()
    .collect()
}

/// Performance-difference checks on `per_gamma` random triples for each
/// discount in `gammas`. Every other instance uses a deterministic `pi` so
/// the state form is exercised.
pub fn lemma2_suite(per_gamma: usize, gammas: &[f64], seed: u64, exec: Exec) -> Result<Vec<SuiteRecord>> {
    par::map_range(exec, per_gamma * gammas.len(), |i| {
        let gamma = suite_gamma(gammas, per_gamma, i)?;
        let mut rng = rng_from(seed, &[stream::LEMMA2, i as u64]);
        let mdp = TabularSemdp::random(&mut rng, 5, 3, 3, gamma);
        let pi = if i % 2 == 0 {
            Policy::random(&mut rng, 5, 3)
        } else {
            let acts: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            Policy::deterministic(3, &acts)
        };
        let pi_tilde = Policy::random(&mut rng, 5, 3);
        let leader = Policy::random(&mut rng, 5, 3);
        let start = random_simplex(&mut rng, 5);
        let rep = verify_pdl(&mdp, &pi, &pi_tilde, &leader, &start)?;
        let state_form_exact = rep.state_form.map(|sf| sf == rep.rhs);
        Ok(SuiteRecord {
            lemma: 2,
            index: i,
            seed,
            gamma,
            lhs: rep.lhs,
            rhs: rep.rhs,
            holds: rep.abs_diff < PDL_TOL && state_form_exact.unwrap_or(true),
            state_form_exact,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[SuiteRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
