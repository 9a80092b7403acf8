use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sculptdiff_core::baselines::{HeuristicMode, HeuristicPolicy, NnDatabase, NnPolicy};
use sculptdiff_core::dataset::{self, DatasetSplit, Trajectory};
use sculptdiff_core::metrics::{chamfer, MetricReport};
use sculptdiff_core::pointcloud::sdpc;
use sculptdiff_core::policy::{self, rollout, Policy, SculptDiff, TrainOptions};
use sculptdiff_core::sim::{self, ClayConfig, ShapeRecipe};
use sculptdiff_core::Config;
use sculptdiff_service::{ServiceConfig, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "sculptdiff", version, about = "Goal-conditioned diffusion policy for simulated clay sculpting")]
struct Cli {
    /// JSON config file; missing fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set policy.learning_rate=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scripted recipes in the simulator and save the demonstrations.
    GenDemos {
        #[arg(long)]
        shape: ShapeRecipe,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// First demo seed; demo i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split raw demos by source, then add rotated copies about the stage center.
    Augment {
        #[arg(long)]
        shape: ShapeRecipe,
        #[arg(long, default_value_t = 1.0)]
        increment_deg: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the diffusion policy on an augmented dataset.
    Train {
        #[arg(long)]
        shape: ShapeRecipe,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path (default: <checkpoint_dir>/<shape>.sdck).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop rollouts toward a recipe's goal shape.
    Rollout(RolloutArgs),
    /// Compare two SDPC clouds.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        goal: PathBuf,
    },
    /// Serve the HTTP/WebSocket API.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Diffusion,
    Heuristic,
    Nn,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long, value_enum)]
    policy: PolicyKind,
    #[arg(long)]
    shape: ShapeRecipe,
    /// Diffusion or nn checkpoint (default: <checkpoint_dir>/<shape>.sdck).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    max_grasps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs with seeds seed, seed + 1, ...
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Heuristic mode.
    #[arg(long)]
    mode: Option<HeuristicMode>,
    /// Neighbors for the nn policy.
    #[arg(long)]
    k: Option<usize>,
}

/// Exit status classes: 2 config, 3 data, 4 runtime.
#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, err: e.into() })
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 3, err: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 4, err: e.into() })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": format!("{:#}", f.err), "code": f.code }));
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => {
            let raw = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice(&raw).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Config::default(),
    };
    let mut value = serde_json::to_value(&cfg)?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not KEY=VALUE"))?;
        let slot = key
            .split('.')
            .try_fold(&mut value, |v, part| v.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config field {key:?}"))?;
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    let cfg: Config = serde_json::from_value(value).context("applying overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(v: &Value) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{v}").runtime()
}

fn shape_dir(cfg: &Config, shape: ShapeRecipe) -> PathBuf {
    cfg.paths.data_dir.join(shape.name())
}

fn default_checkpoint(cfg: &Config, shape: ShapeRecipe) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("{}.sdck", shape.name()))
}

fn load_all(root: &Path) -> Result<Vec<Trajectory>, Failure> {
    if !root.is_dir() {
        return Err(anyhow!("dataset directory {} does not exist", root.display())).data();
    }
    let dirs = dataset::find_trajectories(root).with_context(|| format!("scanning {}", root.display())).data()?;
    if dirs.is_empty() {
        return Err(anyhow!("no trajectories under {}", root.display())).data();
    }
    dirs.iter().map(|d| dataset::load(d).with_context(|| format!("loading {}", d.display())).data()).collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides).config()?;
    match cli.command {
        Command::GenDemos { shape, count, seed } => gen_demos(&cfg, shape, count, seed),
        Command::Augment { shape, increment_deg, seed } => {
            augment(&cfg, shape, increment_deg, seed.unwrap_or(cfg.split_seed))
        }
        Command::Train { shape, seed, out } => train(&cfg, shape, seed, out),
        Command::Rollout(args) => run_rollouts(&cfg, &args),
        Command::Eval { pred, goal } => {
            let p = sdpc::load(&pred).data()?;
            let g = sdpc::load(&goal).data()?;
            emit(&serde_json::to_value(MetricReport::compute(&p, &g).data()?).runtime()?)
        }
        Command::Serve { port, host } => {
            let rt = tokio::runtime::Runtime::new().runtime()?;
            let addr = std::net::SocketAddr::new(host, port);
            rt.block_on(sculptdiff_service::serve(ServiceConfig::from_config(&cfg), addr))
                .with_context(|| format!("serving on {addr}"))
                .runtime()
        }
    }
}

fn gen_demos(cfg: &Config, shape: ShapeRecipe, count: usize, seed: u64) -> Result<(), Failure> {
    if count == 0 {
        return Err(anyhow!("--count must be > 0")).config();
    }
    let dir = shape_dir(cfg, shape).join("raw");
    let mut finals = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let demo = sim::scripted_demo(shape, &cfg.clay, &cfg.frame, &cfg.demos, seed + i).runtime()?;
        finals.push(chamfer(demo.states.last().expect("demo has states"), &demo.goal).runtime()?);
        let path = dir.join(format!("demo-{:03}", seed + i));
        dataset::save(&demo, &path).with_context(|| format!("writing {}", path.display())).data()?;
    }
    emit(&json!({ "shape": shape.name(), "written": count, "dir": dir, "final_chamfers": finals }))
}

fn augment(cfg: &Config, shape: ShapeRecipe, increment_deg: f64, seed: u64) -> Result<(), Failure> {
    let root = shape_dir(cfg, shape);
    let raw = load_all(&root.join("raw"))?;
    let aug = dataset::split(raw, cfg.train_fraction, seed)
        .and_then(|s| s.augmented(increment_deg.to_radians(), &cfg.frame))
        .config()?;
    let out = root.join("aug");
    if out.exists() {
        std::fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display())).data()?;
    }
    for (part, list) in [("train", &aug.train), ("val", &aug.val)] {
        let mut copies: std::collections::HashMap<&str, usize> = Default::default();
        for t in list.iter() {
            let k = copies.entry(t.source.as_str()).or_default();
            let path = out.join(part).join(format!("{}-r{:04}", t.source, k));
            *k += 1;
            dataset::save(t, &path).with_context(|| format!("writing {}", path.display())).data()?;
        }
    }
    emit(&json!({
        "shape": shape.name(),
        "increment_deg": increment_deg,
        "total": aug.train.len() + aug.val.len(),
        "train": aug.train.len(),
        "val": aug.val.len(),
        "dir": out,
    }))
}

fn load_split(cfg: &Config, shape: ShapeRecipe, seed: u64) -> Result<DatasetSplit, Failure> {
    let aug = shape_dir(cfg, shape).join("aug");
    let val_dir = aug.join("val");
    let val = if val_dir.is_dir() { load_all(&val_dir)? } else { Vec::new() };
    Ok(DatasetSplit { train: load_all(&aug.join("train"))?, val, seed })
}

fn train(cfg: &Config, shape: ShapeRecipe, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut pcfg = cfg.policy.clone();
    if let Some(s) = seed {
        pcfg.seed = s;
    }
    let split = load_split(cfg, shape, pcfg.seed)?;
    let out = out.unwrap_or_else(|| default_checkpoint(cfg, shape));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).data()?;
    }
    let mut stdout = std::io::stdout();
    let opts = TrainOptions { log: Some(&mut stdout), checkpoint: Some(&out), ..Default::default() };
    let outcome = policy::train(&split, &cfg.encoder, &pcfg, opts).runtime()?;
    emit(&json!({
        "checkpoint": out,
        "steps": outcome.steps,
        "best_epoch": outcome.best_epoch,
        "train_trajectories": split.train.len(),
        "val_trajectories": split.val.len(),
    }))
}

fn load_model(path: &Path) -> Result<SculptDiff, Failure> {
    if !path.is_file() {
        return Err(anyhow!("checkpoint {} does not exist", path.display())).data();
    }
    SculptDiff::load(path).with_context(|| format!("loading checkpoint {}", path.display())).data()
}

fn build_policy(cfg: &Config, args: &RolloutArgs) -> Result<Box<dyn Policy>, Failure> {
    let ckpt = || args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg, args.shape));
    Ok(match args.policy {
        PolicyKind::Diffusion => Box::new(load_model(&ckpt())?),
        PolicyKind::Heuristic => {
            let mut h = cfg.heuristic.clone();
            if let Some(m) = args.mode {
                h.mode = m;
            }
            Box::new(HeuristicPolicy { cfg: h, frame: cfg.frame })
        }
        PolicyKind::Nn => {
            let model = load_model(&ckpt())?;
            let train = load_all(&shape_dir(cfg, args.shape).join("aug").join("train"))?;
            let db = NnDatabase::build(&model, &train).data()?;
            let k = args.k.unwrap_or(cfg.rollout.nn_k);
            if k == 0 {
                return Err(anyhow!("--k must be > 0")).config();
            }
            Box::new(NnPolicy { model, db, k })
        }
    })
}

fn run_rollouts(cfg: &Config, args: &RolloutArgs) -> Result<(), Failure> {
    if args.runs == 0 {
        return Err(anyhow!("--runs must be > 0")).config();
    }
    let mut policy = build_policy(cfg, args)?;
    let goal = sim::goal_cloud(args.shape, &cfg.clay, &cfg.frame, cfg.encoder.cloud_size).runtime()?;
    let mut rc = cfg.rollout_config(args.seed);
    if let Some(m) = args.max_grasps {
        if m == 0 {
            return Err(anyhow!("--max-grasps must be > 0")).config();
        }
        rc.max_grasps = m;
    }
    for run in 0..args.runs {
        let seed = args.seed + run as u64;
        rc.seed = seed;
        let env = sim::init(&ClayConfig { seed, ..cfg.clay.clone() }, &cfg.frame).runtime()?;
        let r = rollout(&env, &goal, policy.as_mut(), &rc, |_| {}).runtime()?;
        let last = r.trajectory.states.last().expect("rollout has states");
        let report = MetricReport::compute(last, &goal).runtime()?;
        emit(&json!({
            "run": run,
            "seed": seed,
            "policy": format!("{:?}", args.policy).to_lowercase(),
            "shape": args.shape.name(),
            "grasps": r.trajectory.num_grasps(),
            "initial_chamfer": r.initial_chamfer(),
            "final": report,
            "actions": r.trajectory.actions,
        }))?;
    }
    Ok(())
}
