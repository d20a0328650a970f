#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsc_core::tscnet::*;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`.
pub fn fd_check<F: Fn(&ParamStore) -> f64>(store: &ParamStore, analytic: &[f64], f: F) -> f64 {
    let mut s = store.clone();
    let mut worst: f64 = 0.0;
    for i in 0..s.online.len() {
        let x = s.online[i];
        s.online[i] = x + FD_STEP;
        let up = f(&s);
        s.online[i] = x - FD_STEP;
        let dn = f(&s);
        s.online[i] = x;
        let num = (up - dn) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], num));
    }
    worst
}

pub fn random_input<R: Rng>(rng: &mut R, cfg: &NetConfig, valid: &[bool]) -> NetInput {
    NetInput {
        ego: (0..cfg.ego_features).map(|_| rng.random_range(-1.0..1.0)).collect(),
        nbr: valid
            .iter()
            .map(|&v| if v { (0..cfg.nbr_features).map(|_| rng.random_range(-1.0..1.0)).collect() } else { vec![0.0; cfg.nbr_features] })
            .collect(),
        valid: valid.to_vec(),
    }
}

/// Random config with small widths.
pub fn random_config<R: Rng>(rng: &mut R) -> NetConfig {
    let m = rng.random_range(2..=4);
    NetConfig {
        d_e: rng.random_range(2..=5),
        d_n: rng.random_range(2..=5),
        d_t: rng.random_range(2..=4),
        d_c: rng.random_range(2..=5),
        d_u: rng.random_range(2..=5),
        hidden: rng.random_range(2..=5),
        m,
        k: rng.random_range(1..=m),
        ..NetConfig::default()
    }
}

/// A step group of `n` agents where every agent sees every other agent.
/// With `override_priority`, selection uses random stored priorities so
/// leader sets are non-trivial.
pub fn random_group<R: Rng>(rng: &mut R, cfg: &NetConfig, n: usize, override_priority: bool) -> StepGroup {
    let agents = (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let n_valid = others.len().min(cfg.m);
            let valid: Vec<bool> = (0..cfg.m).map(|k| k < n_valid).collect();
            let slots = (0..n_valid)
                .map(|k| SlotLabel { slot: k, nbr: others[k], p: rng.random_range(0.0..=1.0), include: rng.random_bool(0.8) })
                .collect();
            let raw: Vec<f64> = (0..cfg.action_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            StepGroup::agent_placeholder(
                i,
                random_input(rng, cfg, &valid),
                raw,
                override_priority.then(|| (0..cfg.m).map(|_| rng.random_range(0.0..1.0)).collect()),
                slots,
                rng.random_range(-1.0..1.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    StepGroup { t: 0, agents }
}

pub trait Placeholder {
    #[allow(clippy::too_many_arguments)]
    fn agent_placeholder(
        agent: usize,
        input: NetInput,
        raw: Vec<f64>,
        priority_override: Option<Vec<f64>>,
        slots: Vec<SlotLabel>,
        node_label: f64,
        y: f64,
        adv: f64,
    ) -> AgentSample;
}

impl Placeholder for StepGroup {
    fn agent_placeholder(
        agent: usize,
        input: NetInput,
        raw: Vec<f64>,
        priority_override: Option<Vec<f64>>,
        slots: Vec<SlotLabel>,
        node_label: f64,
        y: f64,
        adv: f64,
    ) -> AgentSample {
        AgentSample {
            agent,
            input,
            action: raw.iter().map(|z| z.tanh()).collect(),
            raw_action: raw,
            log_prob: 0.0,
            priority_override,
            slots,
            node_label,
            reward: 0.0,
            terminal: true,
            next_input: None,
            next_override: None,
            y,
            adv,
        }
    }
}

/// Loss weights isolating one named term, or all terms for `"total"`. The
/// node and consistency terms are only reachable alongside the edge term.
pub fn isolate(term: &str) -> LossWeights {
    let base = LossWeights::default();
    let zero = LossWeights { lambda_v: 0.0, lambda_topo: 0.0, lambda_lead: 0.0, lambda_node: 0.0, lambda_cons: 0.0, ..base };
    match term {
        "value" => LossWeights { lambda_v: 1.0, ..zero },
        "edge" => LossWeights { lambda_topo: 1.0, ..zero },
        "node" => LossWeights { lambda_topo: 1.0, lambda_node: 1.0, ..zero },
        "cons" => LossWeights { lambda_topo: 1.0, lambda_cons: 1.0, ..zero },
        "lead" => LossWeights { lambda_lead: 1.0, ..zero },
        "policy" => zero,
        _ => base,
    }
}

pub fn term_value(t: &LossTerms, term: &str) -> f64 {
    match term {
        "value" => t.value,
        "edge" => t.edge,
        "node" => t.node,
        "cons" => t.cons,
        "lead" => t.lead,
        "policy" => t.policy,
        _ => t.total,
    }
}

pub const TERMS: [&str; 7] = ["policy", "value", "edge", "node", "cons", "lead", "total"];

/// Worst FD error over each differentiable output map for one config.
pub fn map_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let store = ParamStore::init(cfg, &mut r).unwrap();
    let n_valid = r.random_range(1..=cfg.m);
    let valid: Vec<bool> = (0..cfg.m).map(|k| k < n_valid).collect();
    let input = random_input(&mut r, &cfg, &valid);
    let over: Vec<f64> = (0..cfg.m).map(|_| r.random_range(0.0..1.0)).collect();
    let opts = ForwardOptions { priority_override: Some(&over), ..Default::default() };
    let f0 = forward_agent(&store, &input, opts);
    let ns = f0.selected.len();
    let frozen: Vec<Vec<f64>> = f0.leaders.iter().map(|&q| f0.predicted(q).to_vec()).collect();
    let opts = ForwardOptions { critic_leaders: Some(&frozen), ..opts };
    let mut wr = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
    let w_logit = wr(cfg.m);
    let w_p = wr(cfg.m);
    let w_s = wr(1)[0];
    let w_mean = wr(cfg.action_dim);
    let w_std = wr(cfg.action_dim);
    let w_v = wr(1)[0];
    let w_pred: Vec<Vec<f64>> = (0..ns).map(|_| wr(cfg.action_dim)).collect();

    let mut out = Vec::new();
    let mut check = |name: &'static str, up: AgentGrads, f: &dyn Fn(&AgentForward) -> f64| {
        let mut g = vec![0.0; store.len()];
        backward_agent(&store, &f0, &up, &mut g);
        let err = fd_check(&store, &g, |s| f(&forward_agent(s, &input, opts)));
        out.push((name, err));
    };
    let zero = AgentGrads::zeros(&cfg, ns);
    let valid_c = valid.clone();
    check("topo_logits_and_score", AgentGrads { d_logit: w_logit.clone(), d_s_hat: w_s, ..zero.clone() }, &|f| {
        (0..cfg.m).filter(|&k| valid_c[k]).map(|k| w_logit[k] * f.topo.logits[k]).sum::<f64>() + w_s * f.topo.s_hat
    });
    check("topo_probs", AgentGrads { d_p_hat: w_p.clone(), ..zero.clone() }, &|f| {
        f.topo.p_hat.iter().zip(&w_p).map(|(a, b)| a * b).sum()
    });
    check("attention_decide_policy", AgentGrads { d_mean: w_mean.clone(), d_pre_std: w_std.clone(), ..zero.clone() }, &|f| {
        f.dec.mean.iter().zip(&w_mean).map(|(a, b)| a * b).sum::<f64>()
            + f.dec.pre_std.iter().zip(&w_std).map(|(a, b)| a * b).sum::<f64>()
    });
    check("predict", AgentGrads { d_pred: w_pred.clone(), ..zero.clone() }, &|f| {
        f.pred.iter().zip(&w_pred).map(|(c, w)| c.y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
    });
    check("value", AgentGrads { d_value: w_v, ..zero.clone() }, &|f| w_v * f.value());
    out
}

/// Worst FD error of each loss term on a random group.
pub fn loss_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let store = ParamStore::init(cfg, &mut r).unwrap();
    let n = r.random_range(2..=4);
    let group = random_group(&mut r, &cfg, n, seed % 2 == 0);
    TERMS
        .iter()
        .map(|&term| {
            let w = isolate(term);
            let st = Structure::default();
            let frozen = critic_leader_inputs(&store, &group, st);
            let mut g = vec![0.0; store.len()];
            group_loss(&store, &group, &w, st, Some(&mut g)).unwrap();
            let err = fd_check(&store, &g, |s| {
                group_loss_detached(s, &group, &w, st, Some(&frozen), None).unwrap().total
            });
            (term, err)
        })
        .collect()
}
