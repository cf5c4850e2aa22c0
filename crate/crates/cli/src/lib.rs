//! Command-line driver: training, evaluation, single planning calls and
//! the correctness checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vbsd::autodiff::{load_checkpoint, op_gradcheck_suite, save_checkpoint};
use vbsd::belief::BeliefParams;
use vbsd::config::RunConfig;
use vbsd::envs::{EnvSpec, MetaEnv};
use vbsd::models::{Hidden, Model};
use vbsd::oracle::{run_benchmark, BenchmarkConfig};
use vbsd::planner::learned::{LearnedBelief, LearnedModel, LearnedState};
use vbsd::planner::plan;
use vbsd::trainer::{eval, full_loss_gradcheck, IterationMetrics, Trainer};
use vbsd::{Error, RngStream};

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "vbsd", version, about = "Bayes-adaptive SMC planning with variational beliefs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent and write metrics.csv plus checkpoints.
    Train(Common),
    /// Evaluate a checkpoint over whole lifetimes.
    Eval(Common),
    /// Run one planning call and report q̂*, V̂′ and ESS.
    Plan {
        #[command(flatten)]
        common: Common,
        /// JSON file with `obs`, `t` and optionally `start`, `belief` and `hidden`.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Compare the planner against the exact tilted policy.
    OracleCheck(Common),
    /// Finite-difference checks of every op and of the full loss.
    Gradcheck(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

struct ConfigError(String);

impl std::fmt::Debug for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Runs the CLI on `argv` (including the program name) and returns the
/// exit status.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    limit_threads();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_CONFIG
            } else {
                1
            }
        }
    }
}

fn limit_threads() {
    if let Some(n) = std::env::var("VBSD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Config(msg) => anyhow::Error::new(ConfigError(msg)),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(i) = common.iterations {
        cfg.iterations = i;
    }
    if let Some(e) = common.episodes {
        cfg.eval_episodes = e;
    }
    cfg.validate().map_err(|m| anyhow::Error::new(ConfigError(m)))?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let common = match &cli.command {
        Command::Train(c) | Command::Eval(c) | Command::OracleCheck(c) | Command::Gradcheck(c) => c.clone(),
        Command::Plan { common, .. } => common.clone(),
    };
    let cfg = resolve(&common)?;
    if common.print_config {
        println!("{}", cfg.to_json());
        return Ok(0);
    }
    match cli.command {
        Command::Train(_) => train(&cfg, common.checkpoint.as_deref()),
        Command::Eval(_) => evaluate(&cfg, common.checkpoint.as_deref()),
        Command::Plan { state, .. } => plan_once(&cfg, common.checkpoint.as_deref(), state.as_deref()),
        Command::OracleCheck(_) => oracle_check(&cfg),
        Command::Gradcheck(_) => gradcheck(&cfg),
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<Model> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let params = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(Model::with_params(&cfg.env, &cfg.model, params)?)
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<i32> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.json"), cfg.to_json())?;
    let model = match resume {
        Some(path) => load_model(cfg, path)?,
        None => Model::new(&cfg.env, &cfg.model, cfg.seed)?,
    };
    let mut trainer = Trainer::with_model(model, &cfg.planner, &cfg.train, cfg.seed)?;
    let mut metrics = format!("{}\n", IterationMetrics::CSV_HEADER);
    let mut timing = String::from("iteration,collect_seconds,train_seconds\n");
    for _ in 0..cfg.iterations {
        let (m, t) = trainer.iterate()?;
        metrics.push_str(&m.csv_row());
        metrics.push('\n');
        writeln!(timing, "{},{:.3},{:.3}", m.iteration, t.collect, t.train)?;
        fs::write(cfg.out.join("metrics.csv"), &metrics)?;
        if cfg.checkpoint_interval > 0 && (m.iteration + 1) % cfg.checkpoint_interval == 0 {
            save_checkpoint(&trainer.model.params, &cfg.out.join(format!("checkpoint_{:06}.vbsd", m.iteration + 1)))?;
        }
        eprintln!(
            "iteration {} return {} loss {:.4}",
            m.iteration,
            m.mean_return.map_or("-".to_string(), |r| format!("{r:.3}")),
            m.loss
        );
    }
    fs::write(cfg.out.join("metrics.csv"), &metrics)?;
    fs::write(cfg.out.join("timing.csv"), &timing)?;
    save_checkpoint(&trainer.model.params, &cfg.out.join("final.vbsd"))?;
    let a = &trainer.audit;
    println!(
        "trained {} iterations, {} env steps; belief audit: {} meta resets, {} inner resets, {} violations",
        cfg.iterations, trainer.env_steps, a.meta_resets, a.inner_resets, a.violations
    );
    Ok(if a.is_clean() { 0 } else { 1 })
}

fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<i32> {
    let Some(checkpoint) = checkpoint else { bail!("eval needs --checkpoint") };
    let model = load_model(cfg, checkpoint)?;
    let records = eval::evaluate(eval::Agent::Planner { model: &model, planner: &cfg.planner }, &cfg.env, cfg.eval_episodes, cfg.seed)?;
    fs::create_dir_all(&cfg.out)?;
    let mut returns = String::from("episode,return,regret\n");
    for (i, r) in records.iter().enumerate() {
        let regret = r.regret().map(|v| format!("{v:.9}")).unwrap_or_default();
        writeln!(returns, "{i},{:.9},{regret}", r.total_return())?;
    }
    fs::write(cfg.out.join("returns.csv"), returns)?;
    if cfg.env.is_grid() {
        let mut occ = String::from("inner_episode,tile,visit_fraction\n");
        for (e, tile, f) in eval::occupancy(&cfg.env, &records) {
            writeln!(occ, "{e},{tile},{f:.9}")?;
        }
        fs::write(cfg.out.join("occupancy.csv"), occ)?;
    }
    let mean = records.iter().map(|r| r.total_return()).sum::<f64>() / records.len() as f64;
    println!("evaluated {} lifetimes, mean return {mean:.4}", records.len());
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanInput {
    obs: Vec<f64>,
    #[serde(default)]
    t: usize,
    #[serde(default)]
    start: Option<Vec<f64>>,
    #[serde(default)]
    belief: Option<BeliefParams>,
    #[serde(default)]
    hidden: Option<Hidden>,
}

fn plan_once(cfg: &RunConfig, checkpoint: Option<&Path>, state: Option<&Path>) -> anyhow::Result<i32> {
    let model = match checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => Model::new(&cfg.env, &cfg.model, cfg.seed)?,
    };
    let input = match state {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", p.display()))))?
        }
        None => {
            let env = MetaEnv::new(cfg.env.clone(), &mut RngStream::new(cfg.seed).split_named("plan-task"));
            PlanInput { obs: env.obs().to_vec(), t: 0, start: None, belief: None, hidden: None }
        }
    };
    if input.obs.len() != cfg.env.obs_dim() {
        return Err(ConfigError(format!("state obs has {} values, the env needs {}", input.obs.len(), cfg.env.obs_dim())).into());
    }
    let hidden = input.hidden.unwrap_or_else(|| model.initial_hidden());
    let belief = match input.belief {
        Some(phi) => LearnedBelief { hidden, phi },
        None => {
            let x = model.step_input(None, &input.obs);
            let (h, phi) = model.infer_step(&[&hidden], &[x])?;
            LearnedBelief { hidden: h.into_iter().next().expect("one row"), phi: phi.into_iter().next().expect("one row") }
        }
    };
    if belief.phi.dim() != model.latent_dim() {
        return Err(ConfigError(format!("belief has {} dims, the model needs {}", belief.phi.dim(), model.latent_dim())).into());
    }
    let start = input.start.unwrap_or_else(|| input.obs.clone());
    let root = LearnedState::new(input.obs, input.t, start);
    let rng = RngStream::new(cfg.seed).split_named("plan");
    let result = plan(&LearnedModel { model: &model }, root, belief, &cfg.planner, &rng)?;
    let mut report = String::new();
    writeln!(report, "particles {} nested {} depth {} temperature {}", cfg.planner.particles, cfg.planner.nested, cfg.planner.depth, cfg.planner.temperature)?;
    writeln!(report, "value {:.9}", result.value)?;
    writeln!(report, "ess {}", result.ess.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join(" "))?;
    writeln!(report, "policy")?;
    for (a, w) in &result.policy {
        writeln!(report, "  {a:?} {w:.9}")?;
    }
    print!("{report}");
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("plan.txt"), report)?;
    Ok(0)
}

fn oracle_check(cfg: &RunConfig) -> anyhow::Result<i32> {
    let bench = BenchmarkConfig::default();
    let res = run_benchmark(&bench, cfg.seed)?;
    let mut report = String::from("particles,mean_tv\n");
    for (i, k) in bench.particle_counts.iter().enumerate() {
        writeln!(report, "{k},{:.6}", res.mean_tv(i))?;
    }
    let last = res.mean_tv(bench.particle_counts.len() - 1);
    let growth = res.increase_pvalues();
    let monotone = growth.iter().all(|p| *p >= 0.05);
    print!("{report}");
    let pass = last < 0.05 && monotone;
    println!(
        "oracle-check {}: TV {:.4} at K = {} (threshold 0.05), non-increasing {}",
        if pass { "PASS" } else { "FAIL" },
        last,
        bench.particle_counts.last().expect("counts"),
        monotone
    );
    if cfg.out != RunConfig::default().out || cfg.out.exists() {
        fs::create_dir_all(&cfg.out)?;
        fs::write(cfg.out.join("oracle.csv"), report)?;
    }
    Ok(if pass { 0 } else { 1 })
}

fn gradcheck(cfg: &RunConfig) -> anyhow::Result<i32> {
    let mut ok = true;
    let mut worst = 0.0f64;
    for (name, err) in op_gradcheck_suite(3)? {
        worst = worst.max(err);
        if err >= 1e-4 {
            ok = false;
            println!("op {name}: {err:.3e} FAIL");
        }
    }
    println!("ops: max relative error {worst:.3e} (threshold 1e-4)");
    for env in [EnvSpec::fourier(), EnvSpec::Grid { side: 3, inner_steps: 4, inner_episodes: 2, allow_goal_at_start: false }] {
        let r = full_loss_gradcheck(&env, cfg.seed, 4)?;
        let kind = if env.is_grid() { "grid" } else { "function" };
        println!("full loss ({kind}): max relative error {:.3e} over {} entries (threshold 1e-3)", r.max_rel_error, r.checked);
        ok &= r.max_rel_error < 1e-3;
    }
    println!("gradcheck {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}
