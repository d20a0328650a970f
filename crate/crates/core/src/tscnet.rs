//! Priority-conditioned actor-critic network with a hand-written backward
//! pass.
//!
//! Per agent the network encodes the ego features and each neighbor slot,
//! decodes per-neighbor priority probabilities and a scalar node score,
//! keeps the Top-K neighbors by predicted priority, aggregates them with
//! single-head attention, and maps the result to a tanh-squashed Gaussian
//! policy. Leaders (selected neighbors with priority above `0.5 + delta_p`)
//! get a one-step action prediction that conditions the critic only.
//!
//! All parameters live in one flat vector addressed by [`Layout`]; gradients
//! use the same indexing.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Observation, EGO_FEATURES, NBR_FEATURES};
use crate::topo::logistic;

const STD_FLOOR: f64 = 1e-3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub ego_features: usize,
    pub nbr_features: usize,
    pub d_e: usize,
    pub d_n: usize,
    pub d_t: usize,
    pub d_c: usize,
    /// Decision-state width.
    pub d_u: usize,
    /// Hidden width of every two-layer sub-map.
    pub hidden: usize,
    /// Neighbor slots.
    pub m: usize,
    /// Top-K size.
    pub k: usize,
    pub delta_p: f64,
    pub action_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            ego_features: EGO_FEATURES,
            nbr_features: NBR_FEATURES,
            d_e: 32,
            d_n: 32,
            d_t: 16,
            d_c: 32,
            d_u: 32,
            hidden: 32,
            m: 4,
            k: 2,
            delta_p: 0.05,
            action_dim: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("ego_features", self.ego_features),
            ("nbr_features", self.nbr_features),
            ("d_e", self.d_e),
            ("d_n", self.d_n),
            ("d_t", self.d_t),
            ("d_c", self.d_c),
            ("d_u", self.d_u),
            ("hidden", self.hidden),
            ("m", self.m),
            ("action_dim", self.action_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("net `{name}` must be positive")));
            }
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!("net `k` must be in 1..=m, got k={} m={}", self.k, self.m)));
        }
        if !(0.0..0.5).contains(&self.delta_p) {
            return Err(Error::Config(format!("net `delta_p` must be in [0, 0.5), got {}", self.delta_p)));
        }
        Ok(())
    }

    /// Small widths for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self { d_e: 4, d_n: 4, d_t: 3, d_c: 4, d_u: 4, hidden: 5, m: 3, k: 2, ..Self::default() }
    }

    fn value_in(&self) -> usize {
        self.d_u + self.k * (self.action_dim + 1) + 1
    }
}

/// Affine map `y = W x + b` stored row-major at `off`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseRef {
    pub off: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub bias: bool,
}

impl DenseRef {
    pub fn len(&self) -> usize {
        self.n_in * self.n_out + if self.bias { self.n_out } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let w = &p[self.off..self.off + self.n_in * self.n_out];
        (0..self.n_out)
            .map(|o| {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                let b = if self.bias { p[self.off + self.n_in * self.n_out + o] } else { 0.0 };
                row.iter().zip(x).fold(b, |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `g` and input gradients into `dx`.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        let n = self.n_in;
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let gw = &mut g[self.off + o * n..self.off + (o + 1) * n];
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += d * xi;
            }
            if self.bias {
                g[self.off + n * self.n_out + o] += d;
            }
        }
        if let Some(dx) = dx {
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &p[self.off + o * n..self.off + (o + 1) * n];
                for (dxi, w) in dx.iter_mut().zip(row) {
                    *dxi += d * w;
                }
            }
        }
    }
}

/// `act(W2 tanh(W1 x + b1) + b2)` with `act` tanh or identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub l1: DenseRef,
    pub l2: DenseRef,
    pub tanh_out: bool,
}

impl Mlp2 {
    /// Parameter span covering both layers.
    pub fn range(&self) -> Range<usize> {
        self.l1.off.min(self.l2.off)..(self.l1.off + self.l1.len()).max(self.l2.off + self.l2.len())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mlp2Cache {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub y: Vec<f64>,
}

impl Mlp2 {
    fn forward(&self, p: &[f64], x: Vec<f64>) -> Mlp2Cache {
        let h: Vec<f64> = self.l1.forward(p, &x).into_iter().map(f64::tanh).collect();
        let mut y = self.l2.forward(p, &h);
        if self.tanh_out {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        Mlp2Cache { x, h, y }
    }

    fn backward(&self, p: &[f64], c: &Mlp2Cache, dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        let dpre2: Vec<f64> =
            if self.tanh_out { dy.iter().zip(&c.y).map(|(d, y)| d * (1.0 - y * y)).collect() } else { dy.to_vec() };
        let mut dh = vec![0.0; c.h.len()];
        self.l2.backward(p, &c.h, &dpre2, g, Some(&mut dh));
        let dpre1: Vec<f64> = dh.iter().zip(&c.h).map(|(d, h)| d * (1.0 - h * h)).collect();
        self.l1.backward(p, &c.x, &dpre1, g, dx);
    }
}

/// Named array inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub ego_enc: Mlp2,
    pub nbr_enc: Mlp2,
    pub topo_dec: Mlp2,
    pub topo_head: DenseRef,
    pub node_head: Mlp2,
    pub wq: DenseRef,
    pub wk: DenseRef,
    pub wv: DenseRef,
    pub wo: DenseRef,
    pub ego_dec: Mlp2,
    pub pol_mean: DenseRef,
    pub pol_std: DenseRef,
    pub predict: Mlp2,
    pub value: Mlp2,
    pub len: usize,
    /// Parameters of the value head; the only region with a target copy.
    pub value_range: Range<usize>,
    pub arrays: Vec<ArrayInfo>,
}

struct Builder {
    off: usize,
    arrays: Vec<ArrayInfo>,
}

impl Builder {
    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, bias: bool) -> DenseRef {
        let d = DenseRef { off: self.off, n_in, n_out, bias };
        self.arrays.push(ArrayInfo { name: format!("{name}.w"), shape: vec![n_out, n_in], offset: self.off });
        if bias {
            self.arrays.push(ArrayInfo { name: format!("{name}.b"), shape: vec![n_out], offset: self.off + n_in * n_out });
        }
        self.off += d.len();
        d
    }

    fn mlp(&mut self, name: &str, n_in: usize, hidden: usize, n_out: usize, tanh_out: bool) -> Mlp2 {
        let l1 = self.dense(&format!("{name}.l1"), n_in, hidden, true);
        let l2 = self.dense(&format!("{name}.l2"), hidden, n_out, true);
        Mlp2 { l1, l2, tanh_out }
    }
}

impl Layout {
    pub fn new(c: &NetConfig) -> Self {
        let mut b = Builder { off: 0, arrays: Vec::new() };
        let hid = c.hidden;
        let ego_enc = b.mlp("ego_enc", c.ego_features, hid, c.d_e, true);
        let nbr_enc = b.mlp("nbr_enc", c.nbr_features, hid, c.d_n, true);
        let topo_dec = b.mlp("topo_dec", c.d_e + c.d_n, hid, c.d_t, true);
        let topo_head = b.dense("topo_head", c.d_t, 1, true);
        let node_head = b.mlp("node_head", c.d_e + c.d_t, hid, 1, false);
        let wq = b.dense("attn.q", c.d_e, c.d_c, false);
        let wk = b.dense("attn.k", c.d_n, c.d_c, false);
        let wv = b.dense("attn.v", c.d_n, c.d_c, false);
        let wo = b.dense("attn.o", c.d_e + c.d_c, c.d_c, true);
        let ego_dec = b.mlp("ego_dec", c.d_c + 1, hid, c.d_u, true);
        let pol_mean = b.dense("policy.mean", c.d_u, c.action_dim, true);
        let pol_std = b.dense("policy.std", c.d_u, c.action_dim, true);
        let predict = b.mlp("predict", c.d_n + 1, hid, c.action_dim, true);
        let v0 = b.off;
        let value = b.mlp("value", c.value_in(), hid, 1, false);
        Self {
            ego_enc,
            nbr_enc,
            topo_dec,
            topo_head,
            node_head,
            wq,
            wk,
            wv,
            wo,
            ego_dec,
            pol_mean,
            pol_std,
            predict,
            value,
            len: b.off,
            value_range: v0..b.off,
            arrays: b.arrays,
        }
    }
}

/// Shared parameters for every agent plus the target copy of the value head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub cfg: NetConfig,
    pub layout: Layout,
    pub online: Vec<f64>,
    /// Same layout as `online`; only `layout.value_range` is read.
    pub target: Vec<f64>,
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl ParamStore {
    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let n = layout.len;
        Ok(Self { cfg, layout, online: vec![0.0; n], target: vec![0.0; n] })
    }

    /// Glorot-uniform weights, zero biases, initial policy std 0.5.
    pub fn init<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeros(cfg)?;
        let l = s.layout.clone();
        let dense = [
            l.ego_enc.l1, l.ego_enc.l2, l.nbr_enc.l1, l.nbr_enc.l2, l.topo_dec.l1, l.topo_dec.l2, l.topo_head,
            l.node_head.l1, l.node_head.l2, l.wq, l.wk, l.wv, l.wo, l.ego_dec.l1, l.ego_dec.l2, l.pol_mean,
            l.pol_std, l.predict.l1, l.predict.l2, l.value.l1, l.value.l2,
        ];
        for d in dense {
            let a = (6.0 / (d.n_in + d.n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for w in &mut s.online[d.off..d.off + d.n_in * d.n_out] {
                *w = dist.sample(rng);
            }
        }
        for d in [l.pol_mean, l.pol_std, l.value.l2] {
            s.online[d.off..d.off + d.n_in * d.n_out].iter_mut().for_each(|w| *w *= 0.1);
        }
        let sb = l.pol_std.off + l.pol_std.n_in * l.pol_std.n_out;
        let b = inv_softplus(0.5 - STD_FLOOR);
        s.online[sb..sb + l.pol_std.n_out].iter_mut().for_each(|x| *x = b);
        s.target = s.online.clone();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online.is_empty()
    }

    /// `target <- (1 - rho) target + rho online` on the value head.
    pub fn soft_update(&mut self, rho: f64) {
        let r = self.layout.value_range.clone();
        for (t, o) in self.target[r.clone()].iter_mut().zip(&self.online[r]) {
            *t = (1.0 - rho) * *t + rho * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.online.iter().chain(&self.target[self.layout.value_range.clone()]).all(|x| x.is_finite())
    }
}

/// Network input for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetInput {
    pub ego: Vec<f64>,
    pub nbr: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

impl NetInput {
    pub fn from_observation(obs: &Observation) -> Self {
        Self {
            ego: obs.ego_vector().to_vec(),
            nbr: (0..obs.m()).map(|k| obs.neighbor_vector(k).to_vec()).collect(),
            valid: obs.validity(),
        }
    }

    pub fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.ego.len() != cfg.ego_features
            || self.nbr.len() != cfg.m
            || self.valid.len() != cfg.m
            || self.nbr.iter().any(|n| n.len() != cfg.nbr_features)
        {
            return Err(Error::Shape(format!(
                "input ({} ego, {} slots) does not match net ({} ego, {} slots x {})",
                self.ego.len(),
                self.nbr.len(),
                cfg.ego_features,
                cfg.m,
                cfg.nbr_features
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    ego: Mlp2Cache,
    nbr: Vec<Option<Mlp2Cache>>,
    pub h_e: Vec<f64>,
    /// Zero for invalid slots.
    pub h_n: Vec<Vec<f64>>,
}

/// Ego and per-slot neighbor embeddings; invalid slots are gated to zero.
pub fn encode(store: &ParamStore, input: &NetInput) -> Encoded {
    let (p, l, c) = (&store.online, &store.layout, &store.cfg);
    let ego = l.ego_enc.forward(p, input.ego.clone());
    let mut h_n = Vec::with_capacity(c.m);
    let mut nbr = Vec::with_capacity(c.m);
    for (x, &v) in input.nbr.iter().zip(&input.valid) {
        let cache = l.nbr_enc.forward(p, x.clone());
        if v {
            h_n.push(cache.y.clone());
            nbr.push(Some(cache));
        } else {
            h_n.push(vec![0.0; c.d_n]);
            nbr.push(None);
        }
    }
    Encoded { h_e: ego.y.clone(), ego, nbr, h_n }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoOut {
    dec: Vec<Option<Mlp2Cache>>,
    node: Mlp2Cache,
    n_valid: usize,
    pub logits: Vec<f64>,
    /// Exactly 0.5 for invalid slots.
    pub p_hat: Vec<f64>,
    pub s_hat: f64,
}

/// Per-neighbor priority probabilities and the ego node score.
pub fn topo_decode(store: &ParamStore, enc: &Encoded, valid: &[bool]) -> TopoOut {
    let (p, l, c) = (&store.online, &store.layout, &store.cfg);
    let mut dec = Vec::with_capacity(c.m);
    let mut logits = vec![0.0; c.m];
    let mut p_hat = vec![0.5; c.m];
    let mut zbar = vec![0.0; c.d_t];
    let mut n_valid = 0;
    for k in 0..c.m {
        if !valid[k] {
            dec.push(None);
            continue;
        }
        let x: Vec<f64> = enc.h_e.iter().chain(&enc.h_n[k]).copied().collect();
        let cache = l.topo_dec.forward(p, x);
        logits[k] = l.topo_head.forward(p, &cache.y)[0];
        p_hat[k] = logistic(logits[k]);
        zbar.iter_mut().zip(&cache.y).for_each(|(a, z)| *a += z);
        n_valid += 1;
        dec.push(Some(cache));
    }
    if n_valid > 0 {
        zbar.iter_mut().for_each(|a| *a /= n_valid as f64);
    }
    let node = l.node_head.forward(p, enc.h_e.iter().chain(&zbar).copied().collect());
    TopoOut { s_hat: node.y[0], dec, node, n_valid, logits, p_hat }
}

/// Indices of the `k` valid slots with the largest priority, ties to the
/// lower index; returned in descending priority order.
pub fn topk_select(p_hat: &[f64], valid: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p_hat.len()).filter(|&i| valid[i]).collect();
    idx.sort_by(|&a, &b| p_hat[b].total_cmp(&p_hat[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Positions (into `p_sel`) with priority strictly above `0.5 + delta_p`.
pub fn leader_set(p_sel: &[f64], delta_p: f64) -> Vec<usize> {
    (0..p_sel.len()).filter(|&q| p_sel[q] > 0.5 + delta_p).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOut {
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    wo_in: Vec<f64>,
    pub alpha: Vec<f64>,
    pub c: Vec<f64>,
}

/// Ego-query attention over the selected neighbor embeddings.
pub fn topo_attention(store: &ParamStore, h_e: &[f64], selected: &[&[f64]]) -> AttnOut {
    let (p, l, c) = (&store.online, &store.layout, &store.cfg);
    let q = l.wq.forward(p, h_e);
    let keys: Vec<Vec<f64>> = selected.iter().map(|h| l.wk.forward(p, h)).collect();
    let vals: Vec<Vec<f64>> = selected.iter().map(|h| l.wv.forward(p, h)).collect();
    let scale = 1.0 / (c.d_c as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| scale * k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()).collect();
    let alpha = softmax(&scores);
    let mut a = vec![0.0; c.d_c];
    for (w, v) in alpha.iter().zip(&vals) {
        a.iter_mut().zip(v).for_each(|(x, y)| *x += w * y);
    }
    let wo_in: Vec<f64> = h_e.iter().chain(&a).copied().collect();
    let out: Vec<f64> = l.wo.forward(p, &wo_in).into_iter().map(f64::tanh).collect();
    AttnOut { q, keys, vals, wo_in, alpha, c: out }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Pre-squash Gaussian sample.
    pub raw: Vec<f64>,
    /// `tanh(raw)`, within `[-1, 1]`.
    pub action: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    dec: Mlp2Cache,
    pub u: Vec<f64>,
    pub mean: Vec<f64>,
    pub pre_std: Vec<f64>,
    pub std: Vec<f64>,
}

impl Decision {
    pub fn deterministic(&self) -> PolicyOutput {
        let action: Vec<f64> = self.mean.iter().map(|m| m.tanh()).collect();
        let log_prob = squashed_log_prob(&self.mean, &self.mean, &self.std);
        PolicyOutput { mean: self.mean.clone(), std: self.std.clone(), raw: self.mean.clone(), action, log_prob }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> PolicyOutput {
        let raw: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let xi: f64 = StandardNormal.sample(rng);
                m + s * xi
            })
            .collect();
        self.with_raw(raw)
    }

    pub fn with_raw(&self, raw: Vec<f64>) -> PolicyOutput {
        let action = raw.iter().map(|z| z.tanh()).collect();
        let log_prob = squashed_log_prob(&raw, &self.mean, &self.std);
        PolicyOutput { mean: self.mean.clone(), std: self.std.clone(), raw, action, log_prob }
    }
}

/// `ln(1 - tanh(z)^2)`, stable for large `|z|`.
pub fn log_squash_jacobian(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

/// Log density of `tanh(raw)` under a diagonal Gaussian on `raw`.
pub fn squashed_log_prob(raw: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    raw.iter()
        .zip(mean)
        .zip(std)
        .map(|((z, m), s)| {
            let e = (z - m) / s;
            -0.5 * e * e - s.ln() - 0.5 * LN_2PI - log_squash_jacobian(*z)
        })
        .sum()
}

/// Decision state and policy distribution from the context and node score.
pub fn decide(store: &ParamStore, c: &[f64], s_hat: f64) -> Decision {
    let (p, l) = (&store.online, &store.layout);
    let dec = l.ego_dec.forward(p, c.iter().copied().chain(std::iter::once(s_hat)).collect());
    let u = dec.y.clone();
    let mean = l.pol_mean.forward(p, &u);
    let pre_std = l.pol_std.forward(p, &u);
    let std = pre_std.iter().map(|x| softplus(*x) + STD_FLOOR).collect();
    Decision { dec, u, mean, pre_std, std }
}

/// One-step action predictions for the given slots.
pub fn predict_leader_actions(store: &ParamStore, h_sel: &[&[f64]], p_sel: &[f64]) -> Vec<Mlp2Cache> {
    let (p, l) = (&store.online, &store.layout);
    h_sel
        .iter()
        .zip(p_sel)
        .map(|(h, &ph)| l.predict.forward(p, h.iter().copied().chain(std::iter::once(ph)).collect()))
        .collect()
}

/// Critic input: `u`, then `k` slots of `(predicted action, 1)` for leaders
/// and zeros otherwise, then the leader count over `k`.
pub fn value_input(cfg: &NetConfig, u: &[f64], leaders: &[(usize, &[f64])]) -> Vec<f64> {
    let a = cfg.action_dim;
    let mut x = vec![0.0; cfg.value_in()];
    x[..cfg.d_u].copy_from_slice(u);
    for &(q, act) in leaders {
        let base = cfg.d_u + q * (a + 1);
        x[base..base + a].copy_from_slice(act);
        x[base + a] = 1.0;
    }
    x[cfg.d_u + cfg.k * (a + 1)] = leaders.len() as f64 / cfg.k as f64;
    x
}

/// Critic value, through the target copy when `use_target`.
pub fn value(store: &ParamStore, x: Vec<f64>, use_target: bool) -> Mlp2Cache {
    let p = if use_target { &store.target } else { &store.online };
    store.layout.value.forward(p, x)
}

/// Structural switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions<'a> {
    /// Replaces the priorities used for Top-K and leader selection.
    pub priority_override: Option<&'a [f64]>,
    /// Empties every leader set.
    pub no_stackelberg: bool,
    /// Skips the prediction and value heads.
    pub actor_only: bool,
    /// Constant leader actions for the critic input, one per leader; the
    /// live predictions are used when absent.
    pub critic_leaders: Option<&'a [Vec<f64>]>,
}

/// Full per-agent forward pass with everything needed for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentForward {
    pub enc: Encoded,
    pub topo: TopoOut,
    pub selected: Vec<usize>,
    pub attn: AttnOut,
    pub dec: Decision,
    /// Predictions for every selected slot, in `selected` order.
    pub pred: Vec<Mlp2Cache>,
    /// Positions into `selected`.
    pub leaders: Vec<usize>,
    pub val: Option<Mlp2Cache>,
}

impl AgentForward {
    pub fn value(&self) -> f64 {
        self.val.as_ref().map_or(0.0, |v| v.y[0])
    }

    pub fn leader_slots(&self) -> Vec<usize> {
        self.leaders.iter().map(|&q| self.selected[q]).collect()
    }

    pub fn predicted(&self, q: usize) -> &[f64] {
        &self.pred[q].y
    }
}

pub fn forward_agent(store: &ParamStore, input: &NetInput, opts: ForwardOptions) -> AgentForward {
    let cfg = &store.cfg;
    let enc = encode(store, input);
    let topo = topo_decode(store, &enc, &input.valid);
    let sel_p = opts.priority_override.unwrap_or(&topo.p_hat);
    let selected = topk_select(sel_p, &input.valid, cfg.k);
    let h_sel: Vec<&[f64]> = selected.iter().map(|&j| enc.h_n[j].as_slice()).collect();
    let attn = topo_attention(store, &enc.h_e, &h_sel);
    let dec = decide(store, &attn.c, topo.s_hat);
    if opts.actor_only {
        return AgentForward { enc, topo, selected, attn, dec, pred: Vec::new(), leaders: Vec::new(), val: None };
    }
    let p_live: Vec<f64> = selected.iter().map(|&j| topo.p_hat[j]).collect();
    let pred = predict_leader_actions(store, &h_sel, &p_live);
    let leaders = if opts.no_stackelberg {
        Vec::new()
    } else {
        let p_sel: Vec<f64> = selected.iter().map(|&j| sel_p[j]).collect();
        leader_set(&p_sel, cfg.delta_p)
    };
    let lead: Vec<(usize, &[f64])> = match opts.critic_leaders {
        Some(fixed) => leaders.iter().zip(fixed).map(|(&q, a)| (q, a.as_slice())).collect(),
        None => leaders.iter().map(|&q| (q, pred[q].y.as_slice())).collect(),
    };
    let val = value(store, value_input(cfg, &dec.u, &lead), false);
    AgentForward { enc, topo, selected, attn, dec, pred, leaders, val: Some(val) }
}

/// Target-critic value for a state, using online trunk parameters.
pub fn target_value(store: &ParamStore, input: &NetInput, opts: ForwardOptions) -> f64 {
    let f = forward_agent(store, input, ForwardOptions { actor_only: true, ..opts });
    let cfg = &store.cfg;
    let sel_p = opts.priority_override.unwrap_or(&f.topo.p_hat);
    let p_live: Vec<f64> = f.selected.iter().map(|&j| f.topo.p_hat[j]).collect();
    let h_sel: Vec<&[f64]> = f.selected.iter().map(|&j| f.enc.h_n[j].as_slice()).collect();
    let pred = predict_leader_actions(store, &h_sel, &p_live);
    let leaders = if opts.no_stackelberg {
        Vec::new()
    } else {
        leader_set(&f.selected.iter().map(|&j| sel_p[j]).collect::<Vec<_>>(), cfg.delta_p)
    };
    let lead: Vec<(usize, &[f64])> = leaders.iter().map(|&q| (q, pred[q].y.as_slice())).collect();
    value(store, value_input(cfg, &f.dec.u, &lead), true).y[0]
}

/// Upstream gradients on the outputs of one agent's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub d_logit: Vec<f64>,
    pub d_p_hat: Vec<f64>,
    pub d_s_hat: f64,
    pub d_mean: Vec<f64>,
    pub d_pre_std: Vec<f64>,
    pub d_value: f64,
    /// Per selected position.
    pub d_pred: Vec<Vec<f64>>,
}

impl AgentGrads {
    pub fn zeros(cfg: &NetConfig, n_selected: usize) -> Self {
        Self {
            d_logit: vec![0.0; cfg.m],
            d_p_hat: vec![0.0; cfg.m],
            d_s_hat: 0.0,
            d_mean: vec![0.0; cfg.action_dim],
            d_pre_std: vec![0.0; cfg.action_dim],
            d_value: 0.0,
            d_pred: vec![vec![0.0; cfg.action_dim]; n_selected],
        }
    }
}

/// Accumulates parameter gradients of `sum(upstream * outputs)` into `g`.
/// Predicted leader actions enter the critic without gradient.
pub fn backward_agent(store: &ParamStore, fwd: &AgentForward, up: &AgentGrads, g: &mut [f64]) {
    let (p, l, cfg) = (&store.online, &store.layout, &store.cfg);
    let mut du = vec![0.0; cfg.d_u];
    if let (Some(val), true) = (&fwd.val, up.d_value != 0.0) {
        let mut dx = vec![0.0; cfg.value_in()];
        l.value.backward(p, val, &[up.d_value], g, Some(&mut dx));
        du.iter_mut().zip(&dx[..cfg.d_u]).for_each(|(a, b)| *a += b);
    }
    l.pol_mean.backward(p, &fwd.dec.u, &up.d_mean, g, Some(&mut du));
    l.pol_std.backward(p, &fwd.dec.u, &up.d_pre_std, g, Some(&mut du));

    let mut d_dec_in = vec![0.0; cfg.d_c + 1];
    l.ego_dec.backward(p, &fwd.dec.dec, &du, g, Some(&mut d_dec_in));
    let dc = &d_dec_in[..cfg.d_c];
    let mut ds = up.d_s_hat + d_dec_in[cfg.d_c];

    let mut dh_e = vec![0.0; cfg.d_e];
    let mut dh_n = vec![vec![0.0; cfg.d_n]; cfg.m];
    let mut dp_hat = up.d_p_hat.clone();

    for (q, cache) in fwd.pred.iter().enumerate() {
        let dy = &up.d_pred[q];
        if dy.iter().all(|&x| x == 0.0) {
            continue;
        }
        let j = fwd.selected[q];
        let mut dx = vec![0.0; cfg.d_n + 1];
        l.predict.backward(p, cache, dy, g, Some(&mut dx));
        dh_n[j].iter_mut().zip(&dx[..cfg.d_n]).for_each(|(a, b)| *a += b);
        dp_hat[j] += dx[cfg.d_n];
    }

    attention_backward(store, fwd, dc, g, &mut dh_e, &mut dh_n);

    let mut d_node_in = vec![0.0; cfg.d_e + cfg.d_t];
    if ds != 0.0 {
        l.node_head.backward(p, &fwd.topo.node, &[ds], g, Some(&mut d_node_in));
        ds = 0.0;
    }
    let _ = ds;
    dh_e.iter_mut().zip(&d_node_in[..cfg.d_e]).for_each(|(a, b)| *a += b);
    let dzbar = &d_node_in[cfg.d_e..];
    let nv = fwd.topo.n_valid.max(1) as f64;

    for k in 0..cfg.m {
        let Some(cache) = &fwd.topo.dec[k] else { continue };
        let ph = fwd.topo.p_hat[k];
        let dlogit = up.d_logit[k] + dp_hat[k] * ph * (1.0 - ph);
        let mut dz: Vec<f64> = dzbar.iter().map(|d| d / nv).collect();
        l.topo_head.backward(p, &cache.y, &[dlogit], g, Some(&mut dz));
        let mut dx = vec![0.0; cfg.d_e + cfg.d_n];
        l.topo_dec.backward(p, cache, &dz, g, Some(&mut dx));
        dh_e.iter_mut().zip(&dx[..cfg.d_e]).for_each(|(a, b)| *a += b);
        dh_n[k].iter_mut().zip(&dx[cfg.d_e..]).for_each(|(a, b)| *a += b);
    }
    for k in 0..cfg.m {
        if let Some(cache) = &fwd.enc.nbr[k] {
            l.nbr_enc.backward(p, cache, &dh_n[k], g, None);
        }
    }
    l.ego_enc.backward(p, &fwd.enc.ego, &dh_e, g, None);
}

fn attention_backward(
    store: &ParamStore,
    fwd: &AgentForward,
    dc: &[f64],
    g: &mut [f64],
    dh_e: &mut [f64],
    dh_n: &mut [Vec<f64>],
) {
    let (p, l, cfg) = (&store.online, &store.layout, &store.cfg);
    let at = &fwd.attn;
    let dpre: Vec<f64> = dc.iter().zip(&at.c).map(|(d, c)| d * (1.0 - c * c)).collect();
    let mut d_in = vec![0.0; cfg.d_e + cfg.d_c];
    l.wo.backward(p, &at.wo_in, &dpre, g, Some(&mut d_in));
    dh_e.iter_mut().zip(&d_in[..cfg.d_e]).for_each(|(a, b)| *a += b);
    let da = &d_in[cfg.d_e..];
    let n = fwd.selected.len();
    if n == 0 {
        return;
    }
    let dalpha: Vec<f64> = at.vals.iter().map(|v| v.iter().zip(da).map(|(x, y)| x * y).sum()).collect();
    let mean_d: f64 = at.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let scale = 1.0 / (cfg.d_c as f64).sqrt();
    let mut dq = vec![0.0; cfg.d_c];
    for q in 0..n {
        let j = fwd.selected[q];
        let h_j = &fwd.enc.h_n[j];
        let dscore = at.alpha[q] * (dalpha[q] - mean_d);
        let dv: Vec<f64> = da.iter().map(|x| at.alpha[q] * x).collect();
        let dk: Vec<f64> = at.q.iter().map(|x| dscore * scale * x).collect();
        dq.iter_mut().zip(&at.keys[q]).for_each(|(a, k)| *a += dscore * scale * k);
        l.wv.backward(p, h_j, &dv, g, Some(&mut dh_n[j]));
        l.wk.backward(p, h_j, &dk, g, Some(&mut dh_n[j]));
    }
    l.wq.backward(p, &fwd.enc.h_e, &dq, g, Some(dh_e));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_topo: f64,
    pub lambda_lead: f64,
    pub lambda_node: f64,
    pub lambda_cons: f64,
    /// Temperature of the score-induced probability.
    pub tau_s: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_v: 0.5, lambda_topo: 1.0, lambda_lead: 1.0, lambda_node: 1.0, lambda_cons: 1.0, tau_s: 1.0, gamma: 0.95 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_topo", self.lambda_topo),
            ("lambda_lead", self.lambda_lead),
            ("lambda_node", self.lambda_node),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be nonnegative, got {v}")));
            }
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::Config("`tau_s` must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("`gamma` must be in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// One supervised edge of the topological loss. `node` and `nbr` index the
/// node-score arrays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopoEdge {
    pub node: usize,
    pub nbr: usize,
    pub logit: f64,
    pub label: f64,
    /// Whether the edge enters the BCE term; the consistency term always
    /// uses it.
    pub include: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoLoss {
    pub edge: f64,
    pub node: f64,
    pub cons: f64,
    pub total: f64,
    pub d_logit: Vec<f64>,
    pub d_s_hat: Vec<f64>,
}

/// `BCE(logistic(z), p)` computed from the logit.
pub fn bce_logit(z: f64, p: f64) -> f64 {
    p * softplus(-z) + (1.0 - p) * softplus(z)
}

/// Edge BCE, node regression and score/edge consistency.
pub fn loss_topo(edges: &[TopoEdge], s_hat: &[f64], s_label: &[f64], w: &LossWeights) -> Result<TopoLoss> {
    if s_hat.len() != s_label.len() {
        return Err(Error::Shape("node score and label lengths differ".into()));
    }
    let mut out = TopoLoss {
        edge: 0.0,
        node: 0.0,
        cons: 0.0,
        total: 0.0,
        d_logit: vec![0.0; edges.len()],
        d_s_hat: vec![0.0; s_hat.len()],
    };
    for (e, d_logit) in edges.iter().zip(out.d_logit.iter_mut()) {
        if !(0.0..=1.0).contains(&e.label) {
            return Err(Error::InvalidInput(format!("edge label {} outside [0, 1]", e.label)));
        }
        if e.node >= s_hat.len() || e.nbr >= s_hat.len() {
            return Err(Error::Shape("edge references a missing node".into()));
        }
        let ph = logistic(e.logit);
        if e.include {
            out.edge += bce_logit(e.logit, e.label);
            *d_logit += ph - e.label;
        }
        let pt = logistic((s_hat[e.nbr] - s_hat[e.node]) / w.tau_s);
        let r = ph - pt;
        out.cons += r * r;
        *d_logit += w.lambda_cons * 2.0 * r * ph * (1.0 - ph);
        let ds = w.lambda_cons * 2.0 * r * pt * (1.0 - pt) / w.tau_s;
        out.d_s_hat[e.nbr] -= ds;
        out.d_s_hat[e.node] += ds;
    }
    for ((s, l), d) in s_hat.iter().zip(s_label).zip(out.d_s_hat.iter_mut()) {
        out.node += (s - l) * (s - l);
        *d += w.lambda_node * 2.0 * (s - l);
    }
    out.total = out.edge + w.lambda_node * out.node + w.lambda_cons * out.cons;
    Ok(out)
}

/// Squared error between predicted and realized leader actions.
pub fn loss_lead(pred: &[&[f64]], realized: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    if pred.len() != realized.len() {
        return Err(Error::Shape("leader prediction and realization counts differ".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (a, b) in pred.iter().zip(realized) {
        if a.len() != b.len() {
            return Err(Error::Shape("action dimension mismatch".into()));
        }
        let g: Vec<f64> = a.iter().zip(*b).map(|(x, y)| 2.0 * (x - y)).collect();
        loss += a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        grads.push(g);
    }
    Ok((loss, grads))
}

/// `y = r + gamma * V_target(next)` (or `r` when terminal) and `A = y - V`.
pub fn td_target_and_advantage(reward: f64, v_next_target: f64, v_current: f64, terminal: bool, gamma: f64) -> (f64, f64) {
    let y = if terminal { reward } else { reward + gamma * v_next_target };
    (y, y - v_current)
}

/// Ground-truth label for one valid neighbor slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotLabel {
    pub slot: usize,
    /// Index of the neighbor within its step group.
    pub nbr: usize,
    pub p: f64,
    pub include: bool,
}

/// Everything stored for one agent at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSample {
    pub agent: usize,
    pub input: NetInput,
    pub raw_action: Vec<f64>,
    /// Realized squashed action.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub priority_override: Option<Vec<f64>>,
    pub slots: Vec<SlotLabel>,
    pub node_label: f64,
    pub reward: f64,
    pub terminal: bool,
    /// Next observation of the same agent, absent when terminal.
    pub next_input: Option<NetInput>,
    pub next_override: Option<Vec<f64>>,
    /// TD target; fixed before the loss is evaluated.
    pub y: f64,
    /// Detached advantage.
    pub adv: f64,
}

/// All agents of one simulator step; the unit of minibatch sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGroup {
    pub t: usize,
    pub agents: Vec<AgentSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub edge: f64,
    pub node: f64,
    pub cons: f64,
    pub topo: f64,
    pub lead: f64,
    pub total: f64,
    pub samples: usize,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.policy += o.policy;
        self.value += o.value;
        self.edge += o.edge;
        self.node += o.node;
        self.cons += o.cons;
        self.topo += o.topo;
        self.lead += o.lead;
        self.total += o.total;
        self.samples += o.samples;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            policy: self.policy * s,
            value: self.value * s,
            edge: self.edge * s,
            node: self.node * s,
            cons: self.cons * s,
            topo: self.topo * s,
            lead: self.lead * s,
            total: self.total * s,
            samples: self.samples,
        }
    }
}

/// Ablation switches that change the network's structure at train time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Structure {
    pub no_stackelberg: bool,
}

/// Total loss of one step group and, when `grad` is given, its gradient
/// accumulated into `grad`.
pub fn group_loss(
    store: &ParamStore,
    group: &StepGroup,
    w: &LossWeights,
    structure: Structure,
    grad: Option<&mut [f64]>,
) -> Result<LossTerms> {
    group_loss_detached(store, group, w, structure, None, grad)
}

/// Leader actions each agent's critic currently receives.
pub fn critic_leader_inputs(store: &ParamStore, group: &StepGroup, structure: Structure) -> Vec<Vec<Vec<f64>>> {
    group
        .agents
        .iter()
        .map(|a| {
            let f = forward_agent(store, &a.input, agent_options(a, structure, None));
            f.leaders.iter().map(|&q| f.predicted(q).to_vec()).collect()
        })
        .collect()
}

fn agent_options<'a>(a: &'a AgentSample, structure: Structure, leaders: Option<&'a [Vec<f64>]>) -> ForwardOptions<'a> {
    ForwardOptions {
        priority_override: a.priority_override.as_deref(),
        no_stackelberg: structure.no_stackelberg,
        actor_only: false,
        critic_leaders: leaders,
    }
}

/// As [`group_loss`], with the critic's leader inputs held at `detached`
/// (per agent, per leader). The returned gradient is the same either way
/// since those inputs never carry gradient; this form makes the loss a
/// function of the parameters alone for finite-difference checks.
pub fn group_loss_detached(
    store: &ParamStore,
    group: &StepGroup,
    w: &LossWeights,
    structure: Structure,
    detached: Option<&[Vec<Vec<f64>>]>,
    grad: Option<&mut [f64]>,
) -> Result<LossTerms> {
    let cfg = &store.cfg;
    let fwds: Vec<AgentForward> = group
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            a.input.check(cfg)?;
            let fixed = detached.map(|d| d[i].as_slice());
            Ok(forward_agent(store, &a.input, agent_options(a, structure, fixed)))
        })
        .collect::<Result<_>>()?;
    let n = fwds.len();

    let mut edges = Vec::new();
    let mut edge_src = Vec::new();
    for (i, a) in group.agents.iter().enumerate() {
        for sl in &a.slots {
            if sl.nbr >= n || sl.slot >= cfg.m || !a.input.valid[sl.slot] {
                return Err(Error::Shape(format!("slot label {sl:?} is inconsistent with the group")));
            }
            edges.push(TopoEdge { node: i, nbr: sl.nbr, logit: fwds[i].topo.logits[sl.slot], label: sl.p, include: sl.include });
            edge_src.push((i, sl.slot));
        }
    }
    let s_hat: Vec<f64> = fwds.iter().map(|f| f.topo.s_hat).collect();
    let s_label: Vec<f64> = group.agents.iter().map(|a| a.node_label).collect();
    let topo = loss_topo(&edges, &s_hat, &s_label, w)?;

    let mut terms = LossTerms { edge: topo.edge, node: topo.node, cons: topo.cons, topo: topo.total, samples: n, ..Default::default() };
    let mut ups: Vec<AgentGrads> = fwds.iter().map(|f| AgentGrads::zeros(cfg, f.selected.len())).collect();
    for (&(i, slot), d) in edge_src.iter().zip(&topo.d_logit) {
        ups[i].d_logit[slot] += w.lambda_topo * d;
    }
    for (i, d) in topo.d_s_hat.iter().enumerate() {
        ups[i].d_s_hat += w.lambda_topo * d;
    }

    for (i, (a, f)) in group.agents.iter().zip(&fwds).enumerate() {
        // leaders: realized actions of the neighbors in leader slots
        let slot_nbr = |slot: usize| a.slots.iter().find(|s| s.slot == slot).map(|s| s.nbr);
        let mut preds = Vec::new();
        let mut real = Vec::new();
        let mut qs = Vec::new();
        for &q in &f.leaders {
            let slot = f.selected[q];
            let j = slot_nbr(slot).ok_or_else(|| Error::Shape(format!("leader slot {slot} has no label")))?;
            preds.push(f.predicted(q));
            real.push(group.agents[j].action.as_slice());
            qs.push(q);
        }
        let (lead, lead_g) = loss_lead(&preds, &real)?;
        terms.lead += lead;
        for (q, gq) in qs.into_iter().zip(lead_g) {
            ups[i].d_pred[q] = gq.into_iter().map(|x| w.lambda_lead * x).collect();
        }

        let v = f.value();
        terms.value += (v - a.y) * (v - a.y);
        ups[i].d_value = w.lambda_v * 2.0 * (v - a.y);

        if a.raw_action.len() != cfg.action_dim {
            return Err(Error::Shape("stored action dimension".into()));
        }
        let lp = squashed_log_prob(&a.raw_action, &f.dec.mean, &f.dec.std);
        terms.policy += -lp * a.adv;
        for d in 0..cfg.action_dim {
            let (m, s) = (f.dec.mean[d], f.dec.std[d]);
            let e = a.raw_action[d] - m;
            let dlp_dm = e / (s * s);
            let dlp_ds = e * e / (s * s * s) - 1.0 / s;
            ups[i].d_mean[d] = -a.adv * dlp_dm;
            ups[i].d_pre_std[d] = -a.adv * dlp_ds * logistic(f.dec.pre_std[d]);
        }
    }
    terms.total = terms.policy + w.lambda_v * terms.value + w.lambda_topo * terms.topo + w.lambda_lead * terms.lead;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}: {terms:?}", group.t)));
    }
    if let Some(g) = grad {
        for (f, up) in fwds.iter().zip(&ups) {
            backward_agent(store, f, up, g);
        }
    }
    Ok(terms)
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` in place so its norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = global_norm(g);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

const MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    net: NetConfig,
    n_params: usize,
    arrays: Vec<ArrayInfo>,
    /// Offset, in values, of the target value-head block.
    target_offset: usize,
    target_len: usize,
}

impl ParamStore {
    /// Writes `TSCK`, a little-endian `u32` header length, a JSON header,
    /// then the online parameters and the target value head as `f64` LE.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let vr = self.layout.value_range.clone();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            net: self.cfg,
            n_params: self.len(),
            arrays: self.layout.arrays.clone(),
            target_offset: self.len(),
            target_len: vr.len(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for x in self.online.iter().chain(&self.target[vr]) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let h: CheckpointHeader = serde_json::from_slice(&json)?;
        if h.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", h.format_version)));
        }
        let mut store = Self::zeros(h.net)?;
        let vr = store.layout.value_range.clone();
        if h.n_params != store.len() || h.target_len != vr.len() || h.arrays != store.layout.arrays {
            return Err(Error::Format("checkpoint layout does not match its net config".into()));
        }
        let mut buf = [0u8; 8];
        for x in store.online.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        store.target = store.online.clone();
        for x in store.target[vr].iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        if !store.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        ParamStore::init(NetConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn input<R: Rng>(rng: &mut R, cfg: &NetConfig, n_valid: usize) -> NetInput {
        NetInput {
            ego: (0..cfg.ego_features).map(|_| rng.random_range(-1.0..1.0)).collect(),
            nbr: (0..cfg.m)
                .map(|k| if k < n_valid { (0..cfg.nbr_features).map(|_| rng.random_range(-1.0..1.0)).collect() } else { vec![0.0; cfg.nbr_features] })
                .collect(),
            valid: (0..cfg.m).map(|k| k < n_valid).collect(),
        }
    }

    #[test]
    fn zero_params_give_bias_only_outputs() {
        let mut s = ParamStore::zeros(NetConfig::tiny()).unwrap();
        let l = s.layout.clone();
        let b = l.nbr_enc.l2.off + l.nbr_enc.l2.n_in * l.nbr_enc.l2.n_out;
        s.online[b] = 0.3;
        let vb = l.value.l2.off + l.value.l2.n_in;
        s.online[vb] = 1.7;
        s.target = s.online.clone();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let inp = input(&mut r, &s.cfg, 3);
        let f = forward_agent(&s, &inp, ForwardOptions::default());
        let h0 = &f.enc.h_n[0];
        assert!((h0[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!(f.enc.h_n.iter().all(|h| h == h0));
        assert_eq!(f.value(), 1.7);
    }

    #[test]
    fn invalid_slots_are_gated() {
        let s = store(2);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let inp = input(&mut r, &s.cfg, 1);
        let enc = encode(&s, &inp);
        assert_eq!(enc.h_e.len(), s.cfg.d_e);
        assert_eq!(enc.h_n.len(), s.cfg.m);
        assert!(enc.h_n.iter().all(|h| h.len() == s.cfg.d_n));
        assert!(enc.h_n[1].iter().chain(&enc.h_n[2]).all(|&x| x == 0.0));
        let t = topo_decode(&s, &enc, &inp.valid);
        assert_eq!(&t.p_hat[1..], &[0.5, 0.5]);
        assert!(t.p_hat[0] > 0.0 && t.p_hat[0] < 1.0);
        let none = input(&mut r, &s.cfg, 0);
        let t = topo_decode(&s, &encode(&s, &none), &none.valid);
        assert!(t.p_hat.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn topk_examples() {
        let all = [true; 4];
        assert_eq!(topk_select(&[0.9, 0.1, 0.8, 0.2], &all, 2), vec![0, 2]);
        assert_eq!(topk_select(&[0.5; 4], &all, 2), vec![0, 1]);
        assert_eq!(topk_select(&[0.9, 0.1, 0.8, 0.2], &[false, false, true, false], 2), vec![2]);
        assert_eq!(topk_select(&[0.3, 0.2, 0.9, 0.1], &all, 4).len(), 4);
    }

    #[test]
    fn leader_set_examples() {
        assert_eq!(leader_set(&[0.9, 0.4], 0.05), vec![0]);
        assert_eq!(leader_set(&[0.55, 0.7], 0.05), vec![1]);
        assert!(leader_set(&[0.1, 0.49], 0.05).is_empty());
    }

    #[test]
    fn attention_weights() {
        let s = store(3);
        let h_e = vec![0.1, -0.2, 0.3, 0.4];
        let a = vec![0.5, 0.1, -0.3, 0.2];
        let one = topo_attention(&s, &h_e, &[&a]);
        assert_eq!(one.alpha, vec![1.0]);
        let two = topo_attention(&s, &h_e, &[&a, &a]);
        assert_eq!(two.alpha, vec![0.5, 0.5]);
        let none = topo_attention(&s, &h_e, &[]);
        assert!(none.alpha.is_empty());
        assert_eq!(none.c.len(), s.cfg.d_c);
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        for (m, sd) in [(0.0, 0.5), (0.7, 0.3), (-1.5, 1.2), (2.0, 0.8)] {
            let n = 200_000;
            let h = 2.0 / n as f64;
            let total: f64 = (0..n)
                .map(|i| {
                    let a = -1.0 + (i as f64 + 0.5) * h;
                    squashed_log_prob(&[a.atanh()], &[m], &[sd]).exp() * h
                })
                .sum();
            assert!((total - 1.0).abs() < 0.01, "mass {total} for mean {m} std {sd}");
        }
    }

    #[test]
    fn sampled_log_prob_matches_density_formula() {
        let s = store(4);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let inp = input(&mut r, &s.cfg, 2);
        let f = forward_agent(&s, &inp, ForwardOptions::default());
        for _ in 0..50 {
            let out = f.dec.sample(&mut r);
            assert!(out.action.iter().all(|a| a.abs() <= 1.0));
            assert!(out.log_prob.is_finite());
            let mut want = 0.0;
            for d in 0..2 {
                let a: f64 = out.action[d];
                let sd = out.std[d];
                let z = out.raw[d];
                let gauss = (-(z - out.mean[d]).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                want += (gauss / (1.0 - a * a)).ln();
            }
            assert!((out.log_prob - want).abs() < 1e-8 * want.abs().max(1.0));
        }
        let mut narrow = f.dec.clone();
        narrow.std = vec![1e-12; 2];
        let out = narrow.sample(&mut r);
        for d in 0..2 {
            assert!((out.action[d] - narrow.mean[d].tanh()).abs() < 1e-10);
        }
    }

    #[test]
    fn predictions_are_slotwise() {
        let s = store(5);
        let a = [0.1, 0.2, -0.3, 0.4];
        let b = [-0.5, 0.0, 0.3, 0.9];
        let fwd = predict_leader_actions(&s, &[&a, &b], &[0.7, 0.6]);
        let rev = predict_leader_actions(&s, &[&b, &a], &[0.6, 0.7]);
        assert_eq!(fwd[0].y, rev[1].y);
        assert_eq!(fwd[1].y, rev[0].y);
        assert!(fwd.iter().flat_map(|c| &c.y).all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn value_depends_on_leader_prediction() {
        let s = store(6);
        let u = vec![0.1; s.cfg.d_u];
        let a = [0.3, -0.2];
        let b = [0.31, -0.2];
        let va = value(&s, value_input(&s.cfg, &u, &[(0, &a)]), false).y[0];
        let vb = value(&s, value_input(&s.cfg, &u, &[(0, &b)]), false).y[0];
        assert_ne!(va, vb);
        let x = value_input(&s.cfg, &u, &[]);
        assert_eq!(x[s.cfg.d_u..].iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn loss_topo_examples() {
        let w = LossWeights::default();
        let edges: Vec<TopoEdge> =
            (0..3).map(|k| TopoEdge { node: 0, nbr: k + 1, logit: 0.0, label: 0.5, include: true }).collect();
        let s = [0.0; 4];
        let l = loss_topo(&edges, &s, &s, &w).unwrap();
        assert!((l.edge - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.node, 0.0);
        assert_eq!(l.cons, 0.0);

        // labels induced exactly by the score field
        let scores = [0.4, -0.3, 1.1];
        let mut e = Vec::new();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let p = logistic((scores[j] - scores[i]) / w.tau_s);
            e.push(TopoEdge { node: i, nbr: j, logit: (p / (1.0 - p)).ln(), label: p, include: true });
        }
        let l = loss_topo(&e, &scores, &scores, &w).unwrap();
        assert_eq!(l.node, 0.0);
        assert!(l.cons < 1e-28);

        let bad = [TopoEdge { node: 0, nbr: 1, logit: 0.0, label: 1.2, include: true }];
        assert!(matches!(loss_topo(&bad, &[0.0, 0.0], &[0.0, 0.0], &w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn loss_lead_examples() {
        let a = [0.2, -0.4];
        assert_eq!(loss_lead(&[&a], &[&a]).unwrap().0, 0.0);
        assert_eq!(loss_lead(&[], &[]).unwrap().0, 0.0);
        let b = [0.0, 0.1];
        assert!((loss_lead(&[&a], &[&b]).unwrap().0 - (0.04 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn td_examples() {
        assert_eq!(td_target_and_advantage(1.5, 10.0, 0.0, false, 0.0), (1.5, 1.5));
        assert_eq!(td_target_and_advantage(1.0, 2.0, 0.0, false, 0.5), (2.0, 2.0));
        assert_eq!(td_target_and_advantage(1.0, 2.0, 0.5, true, 0.5), (1.0, 0.5));
    }

    #[test]
    fn checkpoint_roundtrip_and_rejection() {
        let mut s = store(7);
        s.soft_update(0.3);
        s.target[s.layout.value_range.start] += 0.25;
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.online, s.online);
        assert_eq!(back.target[s.layout.value_range.clone()], s.target[s.layout.value_range.clone()]);
        buf[0] = b'X';
        assert!(ParamStore::read_checkpoint(buf.as_slice()).is_err());
        assert!(ParamStore::read_checkpoint(&b"TSCK"[..]).is_err());
    }

    #[test]
    fn soft_update_extremes() {
        let mut s = store(8);
        let r = s.layout.value_range.clone();
        s.online[r.start] += 1.0;
        s.soft_update(1.0);
        assert_eq!(s.target[r.clone()], s.online[r.clone()]);
        let before = s.target.clone();
        s.online[r.start] += 1.0;
        s.soft_update(0.0);
        assert_eq!(s.target, before);
    }
}
