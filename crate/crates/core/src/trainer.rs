//! Centralized training with decentralized execution.
//!
//! One [`ParamStore`] drives every vehicle. Collection runs several
//! independent simulator instances from fresh resets; priority labels are
//! computed afterwards from the realized future positions, cut at respawns.
//! Minibatches are sampled as whole step groups so the consistency term can
//! read every agent's node score at that step. Per-group gradients are
//! summed in a fixed order, so parallel and sequential runs agree bit for
//! bit.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{build_labels, FieldParams, LabelAgent};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, rng_from, stream};
use crate::sim::{reward, EpisodeLog, JointState, Metrics, RewardWeights, Scenario, World, SMOOTHNESS_BETA};
use crate::topo::WeaveParams;
use crate::tscnet::{
    clip_global_norm, forward_agent, group_loss, target_value, AgentSample, ForwardOptions, LossTerms, LossWeights,
    NetConfig, NetInput, ParamStore, PolicyOutput, SlotLabel, StepGroup, Structure,
};

pub const TRAIN_SCHEMA_VERSION: u32 = 1;
pub const STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    RandomPriority,
    NoStackelberg,
    NoTopk,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::RandomPriority, Ablation::NoStackelberg, Ablation::NoTopk];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::RandomPriority => "random_priority",
            Ablation::NoStackelberg => "no_stackelberg",
            Ablation::NoTopk => "no_topk",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, random_priority, no_stackelberg or no_topk)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub iterations: usize,
    /// Joint environment steps collected per iteration.
    pub steps_per_iter: usize,
    /// Simulator instances sharing the per-iteration step budget.
    pub n_envs: usize,
    /// Step groups per minibatch.
    pub batch_size: usize,
    pub updates_per_iter: usize,
    pub learning_rate: f64,
    /// Target-critic soft-update coefficient.
    pub target_update: f64,
    /// Buffer capacity in step groups.
    pub replay_capacity: usize,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
    /// Standardize advantages over the buffer before each iteration.
    pub normalize_advantages: bool,
    pub ablation: Ablation,
    /// Builtin scenario name or scenario file path.
    pub scenario: String,
    pub eval_episodes: usize,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub weave: WeaveParams,
    pub field: FieldParams,
    pub reward: RewardWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: TRAIN_SCHEMA_VERSION,
            seed: 0,
            iterations: 250,
            steps_per_iter: 4096,
            n_envs: 4,
            batch_size: 32,
            updates_per_iter: 16,
            learning_rate: 0.02,
            target_update: 0.01,
            replay_capacity: 8192,
            max_grad_norm: 1.0,
            optimizer: OptimizerKind::Sgd,
            normalize_advantages: true,
            ablation: Ablation::Full,
            scenario: "merge".into(),
            eval_episodes: 4,
            eval_every: 0,
            net: NetConfig::default(),
            loss: LossWeights::default(),
            weave: WeaveParams::default(),
            field: FieldParams::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced budget: 60 iterations of 1024 steps on the merge scenario.
    pub fn toy(seed: u64) -> Self {
        Self { seed, iterations: 60, steps_per_iter: 1024, replay_capacity: 2048, ..Self::default() }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != TRAIN_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        for (k, v) in [
            ("n_envs", self.n_envs),
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("`learning_rate` must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.target_update) {
            return Err(Error::Config("`target_update` must be in [0, 1]".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("`max_grad_norm` must be positive".into()));
        }
        self.net.validate()?;
        self.loss.validate()?;
        self.weave.validate()?;
        self.field.validate()?;
        if self.net.action_dim != 2 {
            return Err(Error::Config("the simulator needs `net.action_dim = 2`".into()));
        }
        Ok(())
    }

    /// Network config after the ablation's structural change.
    pub fn effective_net(&self) -> NetConfig {
        let mut n = self.net;
        if self.ablation == Ablation::NoTopk {
            n.k = n.m;
        }
        n
    }

    pub fn structure(&self) -> Structure {
        Structure { no_stackelberg: self.ablation == Ablation::NoStackelberg }
    }

    pub fn world(&self) -> Result<World> {
        World::new(Scenario::load(Path::new(&self.scenario))?)
    }
}

fn draw_priorities<R: Rng>(rng: &mut R, ablation: Ablation, m: usize) -> Option<Vec<f64>> {
    (ablation == Ablation::RandomPriority).then(|| (0..m).map(|_| rng.random::<f64>()).collect())
}

fn options(ov: Option<&[f64]>, ablation: Ablation, actor_only: bool) -> ForwardOptions<'_> {
    ForwardOptions {
        priority_override: ov,
        no_stackelberg: ablation == Ablation::NoStackelberg,
        actor_only,
        critic_leaders: None,
    }
}

/// Stochastic action of one agent from its own observation.
pub fn act<R: Rng>(store: &ParamStore, input: &NetInput, ov: Option<&[f64]>, rng: &mut R) -> PolicyOutput {
    forward_agent(store, input, options(ov, Ablation::Full, true)).dec.sample(rng)
}

/// Deterministic action `tanh(mean)`.
pub fn act_deterministic(store: &ParamStore, input: &NetInput, ov: Option<&[f64]>) -> PolicyOutput {
    forward_agent(store, input, options(ov, Ablation::Full, true)).dec.deterministic()
}

fn to_command(a: &[f64]) -> [f64; 2] {
    [a[0], a[1]]
}

/// Transitions collected in one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub groups: Vec<StepGroup>,
    /// Steps on which at least one agent-agent collision occurred.
    pub aa_steps: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        let (s, n) = self.groups.iter().flat_map(|g| &g.agents).fold((0.0, 0usize), |(s, n), a| (s + a.reward, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

struct StepRecord {
    state: JointState,
    inputs: Vec<NetInput>,
    overrides: Vec<Option<Vec<f64>>>,
    slot_agents: Vec<Vec<Option<usize>>>,
    outs: Vec<PolicyOutput>,
    rewards: Vec<f64>,
    terminal: bool,
}

/// Runs `n_steps` joint steps in one simulator from a fresh reset.
fn collect_env(world: &World, store: &ParamStore, cfg: &TrainConfig, n_steps: usize, rng: &mut ChaCha8Rng, exec: Exec) -> Result<(Vec<StepGroup>, usize)> {
    let n = world.n_agents();
    let m = store.cfg.m;
    let observe_all = |state: &JointState| -> Result<(Vec<NetInput>, Vec<Vec<Option<usize>>>)> {
        let mut inputs = Vec::with_capacity(n);
        let mut slots = Vec::with_capacity(n);
        for i in 0..n {
            let obs = world.observe(state, i, m)?;
            slots.push(obs.neighbors.iter().map(|s| s.agent).collect());
            inputs.push(NetInput::from_observation(&obs));
        }
        Ok((inputs, slots))
    };

    let mut state = world.reset(rng);
    let mut ep_t = 0;
    let mut recs: Vec<StepRecord> = Vec::with_capacity(n_steps);
    // segment ids change whenever a vehicle is teleported (respawn or reset)
    let mut segs: Vec<Vec<usize>> = Vec::with_capacity(n_steps + 1);
    let mut seg = vec![0usize; n];
    let mut next_seg = n;
    let mut aa_steps = 0;
    for _ in 0..n_steps {
        let (inputs, slot_agents) = observe_all(&state)?;
        let overrides: Vec<Option<Vec<f64>>> = (0..n).map(|_| draw_priorities(rng, cfg.ablation, m)).collect();
        let outs: Vec<PolicyOutput> = (0..n).map(|i| act(store, &inputs[i], overrides[i].as_deref(), rng)).collect();
        let cmds: Vec<[f64; 2]> = outs.iter().map(|o| to_command(&o.action)).collect();
        let res = world.step(&state, &cmds)?;
        let rewards = (0..n)
            .map(|i| reward(&state.vehicles[i], &res.integrated[i], &res.events[i], &cfg.reward, &world.scenario))
            .collect();
        aa_steps += usize::from(res.events.iter().any(|e| e.collision.agent_agent));
        ep_t += 1;
        let terminal = ep_t == world.scenario.episode_len;
        segs.push(seg.clone());
        for i in 0..n {
            if terminal || res.events[i].respawned {
                seg[i] = next_seg;
                next_seg += 1;
            }
        }
        recs.push(StepRecord { state, inputs, overrides, slot_agents, outs, rewards, terminal });
        state = if terminal {
            ep_t = 0;
            world.reset(rng)
        } else {
            res.state
        };
    }
    segs.push(seg);
    let (final_inputs, _) = observe_all(&state)?;
    let final_overrides: Vec<Option<Vec<f64>>> = (0..n).map(|_| draw_priorities(rng, cfg.ablation, m)).collect();
    let mut positions: Vec<Vec<[f64; 2]>> = recs.iter().map(|r| r.state.vehicles.iter().map(|v| v.pose.position()).collect()).collect();
    positions.push(state.vehicles.iter().map(|v| v.pose.position()).collect());

    let horizon = cfg.weave.horizon;
    let labels: Vec<Result<(Vec<Vec<SlotLabel>>, Vec<f64>)>> = par::map_range(exec, recs.len(), |t| {
        let agents: Vec<LabelAgent> = (0..n)
            .map(|i| {
                let future = (t..=(t + horizon).min(n_steps))
                    .take_while(|&s| segs[s][i] == segs[t][i])
                    .map(|s| positions[s][i])
                    .collect();
                LabelAgent { id: i, pose: recs[t].state.vehicles[i].pose, future }
            })
            .collect();
        let graph = build_labels(&agents, &cfg.weave, &cfg.field)?;
        let slots = (0..n)
            .map(|i| {
                recs[t].slot_agents[i]
                    .iter()
                    .enumerate()
                    .filter_map(|(k, a)| a.map(|j| (k, j)))
                    .map(|(k, j)| match graph.edge(i, j) {
                        Some(e) => SlotLabel { slot: k, nbr: j, p: e.p, include: !e.is_neutral() },
                        None => SlotLabel { slot: k, nbr: j, p: 0.5, include: false },
                    })
                    .collect()
            })
            .collect();
        let nodes = (0..n).map(|i| graph.score_of(i).unwrap_or(0.0)).collect();
        Ok((slots, nodes))
    });

    let mut groups = Vec::with_capacity(recs.len());
    for (t, (rec, lab)) in recs.iter().zip(labels).enumerate() {
        let (slots, nodes) = lab?;
        let (next_inputs, next_ov) = if t + 1 < recs.len() {
            (&recs[t + 1].inputs, &recs[t + 1].overrides)
        } else {
            (&final_inputs, &final_overrides)
        };
        let agents = (0..n)
            .map(|i| AgentSample {
                agent: i,
                input: rec.inputs[i].clone(),
                raw_action: rec.outs[i].raw.clone(),
                action: rec.outs[i].action.clone(),
                log_prob: rec.outs[i].log_prob,
                priority_override: rec.overrides[i].clone(),
                slots: slots[i].clone(),
                node_label: nodes[i],
                reward: rec.rewards[i],
                terminal: rec.terminal,
                next_input: (!rec.terminal).then(|| next_inputs[i].clone()),
                next_override: if rec.terminal { None } else { next_ov[i].clone() },
                y: 0.0,
                adv: 0.0,
            })
            .collect();
        groups.push(StepGroup { t, agents });
    }
    Ok((groups, aa_steps))
}

/// Collects `n_steps` joint steps split over `cfg.n_envs` simulators, each
/// seeded from `seed`.
pub fn collect(world: &World, store: &ParamStore, cfg: &TrainConfig, n_steps: usize, seed: u64, exec: Exec) -> Result<RolloutBatch> {
    let envs = cfg.n_envs.min(n_steps.max(1));
    let per = n_steps / envs;
    let extra = n_steps % envs;
    let parts = par::map_range(exec, envs, |e| {
        let mut rng = rng_from(seed, &[stream::COLLECT, e as u64]);
        collect_env(world, store, cfg, per + usize::from(e < extra), &mut rng, exec)
    });
    let mut batch = RolloutBatch { groups: Vec::with_capacity(n_steps), aa_steps: 0 };
    for p in parts {
        let (g, aa) = p?;
        batch.groups.extend(g);
        batch.aa_steps += aa;
    }
    Ok(batch)
}

/// Fills TD targets and detached advantages for every sample.
pub fn compute_targets(store: &ParamStore, groups: &mut [StepGroup], cfg: &TrainConfig, exec: Exec) {
    let gamma = cfg.loss.gamma;
    let abl = cfg.ablation;
    let vals: Vec<Vec<(f64, f64)>> = par::map(exec, groups, |g| {
        g.agents
            .iter()
            .map(|a| {
                let v = forward_agent(store, &a.input, options(a.priority_override.as_deref(), abl, false)).value();
                let v_next = match &a.next_input {
                    Some(ni) => target_value(store, ni, options(a.next_override.as_deref(), abl, false)),
                    None => 0.0,
                };
                crate::tscnet::td_target_and_advantage(a.reward, v_next, v, a.terminal, gamma)
            })
            .collect()
    });
    for (g, vs) in groups.iter_mut().zip(vals) {
        for (a, (y, adv)) in g.agents.iter_mut().zip(vs) {
            a.y = y;
            a.adv = adv;
        }
    }
    if cfg.normalize_advantages {
        let all: Vec<f64> = groups.iter().flat_map(|g| g.agents.iter().map(|a| a.adv)).collect();
        if all.len() > 1 {
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
            let sd = var.sqrt() + 1e-8;
            for a in groups.iter_mut().flat_map(|g| g.agents.iter_mut()) {
                a.adv = (a.adv - mean) / sd;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut [f64], g: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => params.iter_mut().zip(g).for_each(|(p, d)| *p -= self.lr * d),
            OptimizerKind::Adam => {
                let b1t = 1.0 - self.beta1.powi(self.t as i32);
                let b2t = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    params[i] -= self.lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + self.eps);
                }
            }
        }
    }
}

/// Per-iteration summary; losses are means per agent sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub iteration: usize,
    pub losses: LossTerms,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_reward: f64,
    /// Percent of collected steps with an agent-agent collision.
    pub collect_cr_aa: f64,
    pub eval: Option<Metrics>,
}

pub const LOG_HEADER: [&str; 17] = [
    "iteration", "policy", "value", "edge", "node", "cons", "topo", "lead", "total", "grad_norm", "mean_reward",
    "collect_cr_aa", "CR", "CR_AA", "CR_AM", "AS", "SM",
];

impl IterStats {
    pub fn csv_record(&self) -> Vec<String> {
        let l = &self.losses;
        let mut r: Vec<String> = vec![self.iteration.to_string()];
        r.extend([l.policy, l.value, l.edge, l.node, l.cons, l.topo, l.lead, l.total, self.grad_norm, self.mean_reward, self.collect_cr_aa].map(|x| x.to_string()));
        match &self.eval {
            Some(m) => r.extend([m.CR, m.CR_AA, m.CR_AM, m.AS, m.SM].map(|x| x.to_string())),
            None => r.extend(std::iter::repeat_n(String::new(), 5)),
        }
        r
    }
}

/// Writes the training log header followed by `rows`.
pub fn write_log<W: Write>(w: W, rows: &[IterStats]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(LOG_HEADER)?;
    for r in rows {
        wr.write_record(r.csv_record())?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    format_version: u32,
    config: TrainConfig,
    iteration: usize,
    optimizer: Optimizer,
    buffer: Vec<StepGroup>,
    history: Vec<IterStats>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.tsck";
pub const STATE_FILE: &str = "trainer_state.json";

pub struct Trainer {
    pub cfg: TrainConfig,
    pub world: World,
    pub store: ParamStore,
    pub opt: Optimizer,
    pub buffer: VecDeque<StepGroup>,
    pub iteration: usize,
    pub history: Vec<IterStats>,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let world = cfg.world()?;
        let store = ParamStore::init(cfg.effective_net(), &mut rng_from(cfg.seed, &[stream::INIT]))?;
        let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, store.len());
        Ok(Self { cfg, world, store, opt, buffer: VecDeque::new(), iteration: 0, history: Vec::new(), exec })
    }

    /// Applies `updates_per_iter` minibatch updates on the current buffer.
    pub fn update(&mut self, minibatch_seed: u64) -> Result<(LossTerms, f64)> {
        if self.buffer.is_empty() {
            return Err(Error::InvalidInput("training buffer is empty".into()));
        }
        let mut rng = rng_from(minibatch_seed, &[stream::MINIBATCH]);
        let structure = self.cfg.structure();
        let mut mean_terms = LossTerms::default();
        let mut norm_sum = 0.0;
        let n_updates = self.cfg.updates_per_iter;
        for _ in 0..n_updates {
            let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.random_range(0..self.buffer.len())).collect();
            let store = &self.store;
            let buf = &self.buffer;
            let loss = &self.cfg.loss;
            let parts = par::map(self.exec, &idx, |&gi| -> Result<(Vec<f64>, LossTerms)> {
                let mut g = vec![0.0; store.len()];
                let t = group_loss(store, &buf[gi], loss, structure, Some(&mut g))?;
                Ok((g, t))
            });
            let mut grad = vec![0.0; self.store.len()];
            let mut terms = LossTerms::default();
            for p in parts {
                let (g, t): (Vec<f64>, LossTerms) = p?;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                terms.add(&t);
            }
            let inv = 1.0 / terms.samples.max(1) as f64;
            grad.iter_mut().for_each(|x| *x *= inv);
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at iteration {}", self.iteration)));
            }
            norm_sum += clip_global_norm(&mut grad, self.cfg.max_grad_norm);
            self.opt.step(&mut self.store.online, &grad);
            self.store.soft_update(self.cfg.target_update);
            mean_terms.add(&terms.scaled(inv / n_updates as f64));
        }
        mean_terms.samples = n_updates * self.cfg.batch_size;
        if !self.store.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {}", self.iteration)));
        }
        Ok((mean_terms, norm_sum / n_updates.max(1) as f64))
    }

    /// Collect, label, fit, and optionally evaluate once.
    pub fn train_iteration(&mut self) -> Result<IterStats> {
        let it = self.iteration as u64;
        let seed = derive_seed(self.cfg.seed, &[stream::COLLECT, it]);
        let batch = collect(&self.world, &self.store, &self.cfg, self.cfg.steps_per_iter, seed, self.exec)?;
        let mean_reward = batch.mean_reward();
        let collect_cr_aa = 100.0 * batch.aa_steps as f64 / batch.len().max(1) as f64;
        self.buffer.extend(batch.groups);
        while self.buffer.len() > self.cfg.replay_capacity {
            self.buffer.pop_front();
        }
        compute_targets(&self.store, self.buffer.make_contiguous(), &self.cfg, self.exec);
        let (losses, grad_norm) = self.update(derive_seed(self.cfg.seed, &[stream::MINIBATCH, it]))?;
        self.iteration += 1;
        let eval = if self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0 {
            let seed = derive_seed(self.cfg.seed, &[stream::EVAL, self.iteration as u64]);
            Some(evaluate(&self.store, &self.world, self.cfg.eval_episodes, seed, self.cfg.ablation, self.exec)?.metrics)
        } else {
            None
        };
        let stats = IterStats { iteration: self.iteration, losses, grad_norm, mean_reward, collect_cr_aa, eval };
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Trains until `cfg.iterations` iterations have run in total.
    pub fn run<F: FnMut(&IterStats) -> Result<()>>(&mut self, mut on_iter: F) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let s = self.train_iteration()?;
            on_iter(&s)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join(CHECKPOINT_FILE))?;
        let state = TrainerState {
            format_version: STATE_FORMAT_VERSION,
            config: self.cfg.clone(),
            iteration: self.iteration,
            optimizer: self.opt.clone(),
            buffer: self.buffer.iter().cloned().collect(),
            history: self.history.clone(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join(STATE_FILE))?);
        serde_json::to_writer(f, &state)?;
        Ok(())
    }

    /// Restores a saved run. `cfg` may extend `iterations`; every other
    /// setting must match the saved run.
    pub fn resume(dir: &Path, cfg: TrainConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let state: TrainerState = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(dir.join(STATE_FILE))?))?;
        if state.format_version != STATE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported trainer state version {}", state.format_version)));
        }
        let mut saved = state.config.clone();
        saved.iterations = cfg.iterations;
        if saved != cfg {
            return Err(Error::Config("resume config differs from the saved run in more than `iterations`".into()));
        }
        let store = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
        if store.cfg != cfg.effective_net() {
            return Err(Error::Config("checkpoint network does not match the config".into()));
        }
        Ok(Self {
            world: cfg.world()?,
            cfg,
            store,
            opt: state.optimizer,
            buffer: state.buffer.into(),
            iteration: state.iteration,
            history: state.history,
            exec,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean over episodes.
    pub metrics: Metrics,
    pub per_episode: Vec<Metrics>,
    pub logs: Vec<EpisodeLog>,
}

/// Deterministic-policy rollouts. Each agent acts on its own observation
/// only; labels and neighbor actions are never read.
pub fn evaluate(store: &ParamStore, world: &World, n_episodes: usize, seed: u64, ablation: Ablation, exec: Exec) -> Result<Evaluation> {
    if n_episodes == 0 {
        return Err(Error::InvalidInput("evaluation needs at least one episode".into()));
    }
    let m = store.cfg.m;
    let n = world.n_agents();
    let logs = par::map_range(exec, n_episodes, |e| -> Result<EpisodeLog> {
        let mut rng = rng_from(seed, &[stream::EVAL, e as u64]);
        let mut state = world.reset(&mut rng);
        let mut log = EpisodeLog::default();
        for _ in 0..world.scenario.episode_len {
            let mut cmds = Vec::with_capacity(n);
            for i in 0..n {
                let input = NetInput::from_observation(&world.observe(&state, i, m)?);
                let ov = draw_priorities(&mut rng, ablation, m);
                cmds.push(to_command(&act_deterministic(store, &input, ov.as_deref()).action));
            }
            let res = world.step(&state, &cmds)?;
            log.push_step(&res);
            state = res.state;
        }
        Ok(log)
    });
    let logs: Vec<EpisodeLog> = logs.into_iter().collect::<Result<_>>()?;
    let per_episode: Vec<Metrics> =
        logs.iter().map(|l| Metrics::from_log(l, world.scenario.v_max, SMOOTHNESS_BETA)).collect::<Result<_>>()?;
    Ok(Evaluation { metrics: Metrics::mean(&per_episode), per_episode, logs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Ablation,
    pub seed: u64,
    pub metrics: Metrics,
    pub final_losses: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: Ablation, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.seed == seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Seeds on which `full` has strictly lower CR_AA than `other`.
    pub fn wins(&self, other: Ablation) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.get(Ablation::Full, s), self.get(other, s)) {
                (Some(f), Some(o)) => f.metrics.CR_AA < o.metrics.CR_AA,
                _ => false,
            })
            .count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["mode", "seed", "CR", "CR_AA", "CR_AM", "AS", "SM", "SM_LO", "SM_LA", "final_total_loss"])?;
        for r in &self.rows {
            let m = &r.metrics;
            let mut rec = vec![r.mode.to_string(), r.seed.to_string()];
            rec.extend([m.CR, m.CR_AA, m.CR_AM, m.AS, m.SM, m.SM_LO, m.SM_LA, r.final_losses.total].map(|x| x.to_string()));
            wr.write_record(rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Trains and evaluates each mode on each seed under identical budgets.
/// Evaluation seeds depend only on the training seed, so modes are paired.
pub fn run_ablation(base: &TrainConfig, modes: &[Ablation], seeds: &[u64], exec: Exec) -> Result<AblationTable> {
    let jobs: Vec<(Ablation, u64)> = seeds.iter().flat_map(|&s| modes.iter().map(move |&m| (m, s))).collect();
    let rows = par::map(exec, &jobs, |&(mode, seed)| -> Result<AblationRow> {
        let cfg = TrainConfig { seed, ablation: mode, ..base.clone() };
        let mut tr = Trainer::new(cfg, exec)?;
        tr.run(|_| Ok(()))?;
        let eval_seed = derive_seed(seed, &[stream::EVAL]);
        let ev = evaluate(&tr.store, &tr.world, base.eval_episodes, eval_seed, mode, exec)?;
        let final_losses = tr.history.last().map(|s| s.losses).unwrap_or_default();
        Ok(AblationRow { mode, seed, metrics: ev.metrics, final_losses })
    });
    Ok(AblationTable { rows: rows.into_iter().collect::<Result<_>>()? })
}
