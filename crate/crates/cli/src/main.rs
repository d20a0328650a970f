//! `tsc`: labeling, training, evaluation, lemma verification and ablations.
//!
//! Every command writes `manifest.json` into its output directory before any
//! other side effect and rewrites it with the finish time on success.
//! Exit codes: 0 success, 1 validation or verification failure, 2 usage error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tsc_core::field::{label_table, LabelParams};
use tsc_core::lemmalab::{self, SuiteRecord, SUITE_GAMMAS};
use tsc_core::rng::{derive_seed, stream};
use tsc_core::sim::{Scenario, World, EGO_FEATURES, NBR_FEATURES};
use tsc_core::topo::TrajectoryTable;
use tsc_core::trainer::{self, Ablation, TrainConfig, Trainer};
use tsc_core::tscnet::ParamStore;
use tsc_core::Exec;

/// Default output root when `--out-dir` is absent.
const OUT_ENV: &str = "TSC_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "tsc", version, about = "Topology-conditioned Stackelberg coordination lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config: training config for train/ablation, label parameters for label.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `$TSC_OUT_DIR/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run every parallel section on the calling thread.
    #[arg(long, global = true)]
    single_thread: bool,
    /// Overrides the config ablation mode.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Priority labels for a trajectory CSV (`agent_id,t,x,y,heading`).
    Label {
        trajectories: PathBuf,
    },
    /// Train from a config; writes the checkpoint, trainer state and log.
    Train {
        /// Overrides the config iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue the run saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Deterministic evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Builtin scenario name or scenario file.
        #[arg(long, default_value = "merge")]
        scenario: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Randomized Bellman-bound and performance-difference suites.
    VerifyLemmas {
        /// Instances per discount factor.
        #[arg(long, default_value_t = 100)]
        n_instances: usize,
        #[arg(long, value_delimiter = ',', default_values_t = SUITE_GAMMAS.to_vec())]
        gammas: Vec<f64>,
        /// Multiplies every certified bound; harness self-test only.
        #[arg(long, hide = true, default_value_t = 1.0)]
        rhs_scale: f64,
    },
    /// Train and evaluate each ablation mode on paired seeds.
    Ablation {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
        modes: Option<Vec<Ablation>>,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: tsc_core::Error| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Label { .. } => "label",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::VerifyLemmas { .. } => "verify-lemmas",
            Command::Ablation { .. } => "ablation",
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    exec: &'static str,
    config: serde_json::Value,
    artifacts: Vec<PathBuf>,
    started_unix: f64,
    finished_unix: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(dir: PathBuf, command: &str, seed: Option<u64>, exec: Exec, config: serde_json::Value, artifacts: &[&str]) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            exec: if exec.is_parallel() { "parallel" } else { "sequential" },
            config,
            artifacts: artifacts.iter().map(|a| dir.join(a)).collect(),
            started_unix: now(),
            finished_unix: None,
        };
        let run = Run { dir, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let f = File::create(self.dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &self.manifest)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn finish(mut self, produced: Vec<PathBuf>) -> Result<()> {
        self.manifest.artifacts = produced;
        self.manifest.finished_unix = Some(now());
        self.write_manifest()
    }
}

fn out_dir(g: &Global, command: &str) -> PathBuf {
    g.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(command)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(a) = g.ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_label(g: &Global, exec: Exec, trajectories: &Path) -> Result<ExitCode> {
    let params = match &g.config {
        Some(p) => LabelParams::from_toml_str(&fs::read_to_string(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => LabelParams::default(),
    };
    // parse before touching the output directory so bad input leaves nothing behind
    let table = TrajectoryTable::from_csv_reader(File::open(trajectories).with_context(|| format!("opening {}", trajectories.display()))?)
        .with_context(|| format!("reading {}", trajectories.display()))?;
    let run = Run::start(out_dir(g, "label"), "label", None, exec, serde_json::to_value(params)?, &["edges.csv", "nodes.csv"])?;
    let labels = label_table(&table, &params.weave, &params.field, exec)?;
    labels.write_edges_csv(create(&run.path("edges.csv"))?)?;
    labels.write_nodes_csv(create(&run.path("nodes.csv"))?)?;
    let s = labels.summary();
    println!(
        "labeled {} steps: {} edges ({} neutral), mean |A| {:.4}, max |s| {:.4}",
        s.steps, s.edges, s.neutral_edges, s.mean_abs_preference, s.max_abs_score
    );
    let produced = vec![run.path("edges.csv"), run.path("nodes.csv")];
    run.finish(produced)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(g: &Global, exec: Exec, iterations: Option<usize>, resume: bool) -> Result<ExitCode> {
    let mut cfg = train_config(g)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let dir = out_dir(g, "train");
    let run = Run::start(
        dir.clone(),
        "train",
        Some(cfg.seed),
        exec,
        serde_json::to_value(&cfg)?,
        &[trainer::CHECKPOINT_FILE, trainer::STATE_FILE, "train_log.csv", "config.toml"],
    )?;
    fs::write(run.path("config.toml"), cfg.to_toml_string()?)?;
    let mut tr = if resume { Trainer::resume(&dir, cfg, exec)? } else { Trainer::new(cfg, exec)? };
    let log_path = run.path("train_log.csv");
    trainer::write_log(create(&log_path)?, &tr.history)?;
    let mut history = tr.history.clone();
    tr.run(|s| {
        history.push(s.clone());
        trainer::write_log(create(&log_path).map_err(|e| tsc_core::Error::InvalidInput(e.to_string()))?, &history)?;
        println!("iter {:>4}  loss {:.5}  reward {:.4}  grad {:.4}", s.iteration, s.losses.total, s.mean_reward, s.grad_norm);
        Ok(())
    })?;
    tr.save(&dir)?;
    println!("trained {} iterations; checkpoint at {}", tr.iteration, run.path(trainer::CHECKPOINT_FILE).display());
    let produced = [trainer::CHECKPOINT_FILE, trainer::STATE_FILE, "train_log.csv", "config.toml"].iter().map(|a| run.path(a)).collect();
    run.finish(produced)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    scenario: &'a str,
    episodes: usize,
    seed: u64,
    ablation: Ablation,
    metrics: tsc_core::sim::Metrics,
    per_episode: &'a [tsc_core::sim::Metrics],
}

fn cmd_eval(g: &Global, exec: Exec, checkpoint: &Path, scenario: &str, episodes: usize) -> Result<ExitCode> {
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let store = ParamStore::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let sc = Scenario::load(Path::new(scenario)).with_context(|| format!("loading scenario `{scenario}`"))?;
    if store.cfg.ego_features != EGO_FEATURES || store.cfg.nbr_features != NBR_FEATURES || store.cfg.action_dim != 2 {
        bail!(
            "checkpoint expects {} ego / {} neighbor features and {} actions; the simulator provides {EGO_FEATURES} / {NBR_FEATURES} and 2",
            store.cfg.ego_features,
            store.cfg.nbr_features,
            store.cfg.action_dim
        );
    }
    let world = World::new(sc)?;
    let seed = g.seed.unwrap_or(0);
    let ablation = g.ablation.unwrap_or_default();
    let names: Vec<String> = (0..episodes).map(|e| format!("episode_{e:03}.csv")).collect();
    let mut planned: Vec<&str> = vec!["metrics.json"];
    planned.extend(names.iter().map(String::as_str));
    let config = serde_json::json!({ "checkpoint": checkpoint, "scenario": scenario, "episodes": episodes, "ablation": ablation });
    let run = Run::start(out_dir(g, "eval"), "eval", Some(seed), exec, config, &planned)?;
    let ev = trainer::evaluate(&store, &world, episodes, derive_seed(seed, &[stream::EVAL]), ablation, exec)?;
    let mut produced = vec![run.path("metrics.json")];
    for (log, name) in ev.logs.iter().zip(&names) {
        log.write_csv(create(&run.path(name))?)?;
        produced.push(run.path(name));
    }
    let report = EvalReport { scenario, episodes, seed, ablation, metrics: ev.metrics, per_episode: &ev.per_episode };
    serde_json::to_writer_pretty(create(&run.path("metrics.json"))?, &report)?;
    let m = ev.metrics;
    println!("CR {:.4}  CR_AA {:.4}  CR_AM {:.4}  AS {:.3}  SM {:.4}", m.CR, m.CR_AA, m.CR_AM, m.AS, m.SM);
    run.finish(produced)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SuiteSummary {
    instances: usize,
    failures: usize,
    failed_indices: Vec<usize>,
    max_lhs_over_rhs: f64,
    max_abs_diff: f64,
}

fn summarize(recs: &[SuiteRecord]) -> SuiteSummary {
    let failed: Vec<usize> = recs.iter().filter(|r| !r.holds).map(|r| r.index).collect();
    SuiteSummary {
        instances: recs.len(),
        failures: failed.len(),
        failed_indices: failed,
        max_lhs_over_rhs: recs.iter().filter(|r| r.rhs > 0.0).map(|r| r.lhs / r.rhs).fold(0.0, f64::max),
        max_abs_diff: recs.iter().map(|r| (r.lhs - r.rhs).abs()).fold(0.0, f64::max),
    }
}

fn cmd_verify(g: &Global, exec: Exec, n: usize, gammas: &[f64], rhs_scale: f64) -> Result<ExitCode> {
    if n == 0 {
        bail!("--n-instances must be at least 1");
    }
    if gammas.is_empty() || gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
        bail!("--gammas must be a nonempty list of values in [0, 1)");
    }
    let seed = g.seed.unwrap_or(0);
    let config = serde_json::json!({ "n_instances": n, "gammas": gammas, "rhs_scale": rhs_scale });
    let run = Run::start(out_dir(g, "verify-lemmas"), "verify-lemmas", Some(seed), exec, config, &["lemma1.jsonl", "lemma2.jsonl", "report.json"])?;
    let l1 = lemmalab::lemma1_suite_scaled(n, gammas, seed, exec, rhs_scale)?;
    let l2 = lemmalab::lemma2_suite(n, gammas, seed, exec)?;
    lemmalab::write_jsonl(create(&run.path("lemma1.jsonl"))?, &l1)?;
    lemmalab::write_jsonl(create(&run.path("lemma2.jsonl"))?, &l2)?;
    let (s1, s2) = (summarize(&l1), summarize(&l2));
    let passed = s1.failures == 0 && s2.failures == 0;
    let report = serde_json::json!({ "seed": seed, "passed": passed, "bellman_bound": s1, "performance_difference": s2 });
    serde_json::to_writer_pretty(create(&run.path("report.json"))?, &report)?;
    println!("bellman bound: {}/{} hold (max lhs/rhs {:.4})", s1.instances - s1.failures, s1.instances, s1.max_lhs_over_rhs);
    println!("performance difference: {}/{} hold (max |lhs - rhs| {:.3e})", s2.instances - s2.failures, s2.instances, s2.max_abs_diff);
    for (name, recs) in [("bellman bound", &l1), ("performance difference", &l2)] {
        for r in recs.iter().filter(|r| !r.holds) {
            eprintln!("violation: {name} instance {} (seed {}, gamma {}): lhs {:e} rhs {:e}", r.index, r.seed, r.gamma, r.lhs, r.rhs);
        }
    }
    let produced = ["lemma1.jsonl", "lemma2.jsonl", "report.json"].iter().map(|a| run.path(a)).collect();
    run.finish(produced)?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_ablation(g: &Global, exec: Exec, seeds: &[u64], modes: Option<&[Ablation]>) -> Result<ExitCode> {
    let cfg = train_config(g)?;
    let modes = modes.unwrap_or(&Ablation::ALL);
    if seeds.is_empty() || modes.is_empty() {
        bail!("need at least one seed and one mode");
    }
    let config = serde_json::json!({ "base": cfg, "seeds": seeds, "modes": modes });
    let run = Run::start(out_dir(g, "ablation"), "ablation", None, exec, config, &["ablation.csv", "ablation.json"])?;
    let table = trainer::run_ablation(&cfg, modes, seeds, exec)?;
    table.write_csv(create(&run.path("ablation.csv"))?)?;
    serde_json::to_writer_pretty(create(&run.path("ablation.json"))?, &table)?;
    for &m in modes {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.mode == m).collect();
        let mean = rows.iter().map(|r| r.metrics.CR_AA).sum::<f64>() / rows.len() as f64;
        let wins = if m == Ablation::Full || !modes.contains(&Ablation::Full) {
            String::new()
        } else {
            format!("  full lower on {}/{} seeds", table.wins(m), seeds.len())
        };
        println!("{:<16} mean CR_AA {:.4}{wins}", m.name(), mean);
    }
    let produced = vec![run.path("ablation.csv"), run.path("ablation.json")];
    run.finish(produced)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let exec = Exec::from_single_thread(g.single_thread);
    match &cli.cmd {
        Command::Label { trajectories } => cmd_label(g, exec, trajectories),
        Command::Train { iterations, resume } => cmd_train(g, exec, *iterations, *resume),
        Command::Eval { checkpoint, scenario, episodes } => cmd_eval(g, exec, checkpoint, scenario, *episodes),
        Command::VerifyLemmas { n_instances, gammas, rhs_scale } => cmd_verify(g, exec, *n_instances, gammas, *rhs_scale),
        Command::Ablation { seeds, modes } => cmd_ablation(g, exec, seeds, modes.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.cmd.name();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tsc {name}: error: {e:#}");
            ExitCode::from(1)
        }
    }
}
