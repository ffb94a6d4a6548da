mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{parse_assignment, Config, ConfigError};
use ptrack::eval::{self, Rung};
use ptrack::learn::{self, LearnError, Policy, ReplayDb, TrainEvent};
use ptrack::par::Execution;
use ptrack::qnet::{QNet, QNetError};
use ptrack::sim::{derive_seed, generate_episode, export_episode, seed_tags, ScenarioSpec, SimError};
use ptrack_serve::{record_run, ServeError, Service};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Learned tracking policies on simulated video.
#[derive(Parser)]
#[command(name = "ptrack", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of every random choice; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Q-network weights; overrides `qnet.checkpoint`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Reward stride; sets both `learn.stride` and `serve.stride`.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Constant exploration rate for training.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Constant supervised-loss weight for training.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Dotted config override such as `learn.lr=1e-3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic episodes (frames as PNG plus ground truth) to disk.
    Simulate,
    /// Train the Q-network with oracle rewards.
    Train,
    /// F1 of the online rule, or of the network given by --checkpoint.
    Eval,
    /// Run the ablation ladder and count IGNORE choices under occlusion.
    Diagnose {
        /// Supervised classifier weights; overrides `qnet.classifier`.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Frames needed to find the target again after a cut with REINIT.
    Recovery,
    /// Record tracker runs and serve them for annotation.
    Serve {
        /// Overrides `serve.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Summarize a replay database file.
    ReplayInspect {
        path: PathBuf,
        /// Print one CSV line per tuple.
        #[arg(long)]
        dump: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PTRACK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprint!("{}", e.render());
            eprintln!("{}", json!({"error": {"kind": "usage", "message": e.kind().to_string()}}));
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", json!({"error": {"kind": error_kind(&e), "message": format!("{e:#}")}}));
        std::process::exit(1);
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<QNetError>() {
            return "checkpoint";
        }
        if cause.is::<SimError>() {
            return "sim";
        }
        if cause.is::<LearnError>() {
            return "learn";
        }
        if cause.is::<ServeError>() {
            return "serve";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

fn overrides(g: &Global) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for s in &g.set {
        out.push(parse_assignment(s)?);
    }
    if let Some(s) = g.seed {
        out.push(("seed".into(), json!(s)));
    }
    if let Some(p) = &g.checkpoint {
        out.push(("qnet.checkpoint".into(), json!(p)));
    }
    if let Some(s) = g.stride {
        out.push(("learn.stride".into(), json!(s)));
        out.push(("serve.stride".into(), json!(s)));
    }
    if let Some(e) = g.epsilon {
        out.push(("learn.epsilon_start".into(), json!(e)));
        out.push(("learn.epsilon_end".into(), json!(e)));
    }
    if let Some(l) = g.lambda {
        out.push(("learn.lambda_start".into(), json!(l)));
        out.push(("learn.lambda_end".into(), json!(l)));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Command::ReplayInspect { path, dump } = &cli.command {
        return replay_inspect(path, *dump);
    }
    let mut cfg = Config::load(g.config.as_deref(), &overrides(g)?)?;
    let exec = match g.jobs {
        Some(0) => Err(ConfigError("--jobs must be positive".into()))?,
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    if let Command::Serve { bind: Some(b) } = &cli.command {
        cfg.serve.bind = b.clone();
    }
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let out = g.out_dir.as_path();
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    match cli.command {
        Command::Simulate => simulate(&cfg, out),
        Command::Train => train(&cfg, out, exec),
        Command::Eval => evaluate(&cfg, out, exec),
        Command::Diagnose { classifier } => diagnose(&cfg, classifier, out, exec),
        Command::Recovery => recovery(&cfg, out, exec),
        Command::Serve { .. } => serve(cfg, out),
        Command::ReplayInspect { .. } => unreachable!("handled above"),
    }
}

fn load_net(path: &Path) -> Result<QNet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    QNet::load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn save_net(net: &QNet, path: &Path) -> Result<()> {
    fs::write(path, net.save_checkpoint()).with_context(|| format!("writing {}", path.display()))
}

fn simulate(cfg: &Config, out: &Path) -> Result<()> {
    let base = cfg.sim.scenario()?;
    for k in 0..cfg.sim.episodes {
        let spec = base.clone().with_seed(learn::train_episode_seed(cfg.seed, k));
        let episode = generate_episode(&spec)?;
        let dir = out.join(format!("episode_{k}"));
        export_episode(&dir, &episode)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
        log::info!("wrote {}", dir.display());
    }
    println!("{}", json!({"episodes": cfg.sim.episodes, "out_dir": out}));
    Ok(())
}

fn train(cfg: &Config, out: &Path, exec: Execution) -> Result<()> {
    let spec = cfg.sim.scenario()?;
    let init = cfg.qnet.checkpoint.as_deref().map(load_net).transpose()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut failure: Option<anyhow::Error> = None;
    let outcome = learn::train(&spec, &cfg.backend, &cfg.learn, init, exec, |ev| {
        let res: Result<()> = match ev {
            // rows are flushed as they come so a long run can be watched
            TrainEvent::Episode(row) => metrics
                .serialize(row)
                .and_then(|_| metrics.flush().map_err(Into::into))
                .map_err(Into::into),
            TrainEvent::Checkpoint { episode, net } => {
                save_net(net, &ckpt_dir.join(format!("episode_{:05}.ptrk", episode + 1)))
            }
        };
        if let (Err(e), None) = (res, &failure) {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_net(&outcome.net, &out.join("final.ptrk"))?;
    outcome.replay.write_jsonl(BufWriter::new(File::create(out.join("replay.jsonl"))?))?;
    let last = outcome.metrics.last();
    println!(
        "{}",
        json!({
            "episodes": outcome.metrics.len(),
            "replay_size": outcome.replay.len(),
            "final_f1": last.map(|r| r.f1),
            "final_loss": last.and_then(|r| r.loss),
        })
    );
    Ok(())
}

/// Held-out episodes: the configured scenario under the evaluation seed
/// namespace.
fn suite(cfg: &Config) -> Result<Vec<ScenarioSpec>> {
    let base = cfg.sim.scenario()?;
    Ok((0..cfg.eval.episodes)
        .map(|k| {
            base.clone()
                .with_seed(derive_seed(cfg.seed, seed_tags::EVAL, k as u64))
                .with_len(cfg.eval.episode_len)
        })
        .collect())
}

fn write_summary(result: &eval::AblationResult, rungs: &[Rung<'_>]) -> Value {
    let mut summary = BTreeMap::new();
    for r in rungs {
        let c = result.ignore(r.name).unwrap_or_default();
        summary.insert(
            r.name,
            json!({
                "mean_f1": result.mean_f1(r.name),
                "ignore_occluded_rate": c.occluded_rate(),
                "ignore_visible_rate": c.visible_rate(),
            }),
        );
    }
    json!(summary)
}

fn evaluate(cfg: &Config, out: &Path, exec: Execution) -> Result<()> {
    let net = cfg.qnet.checkpoint.as_deref().map(load_net).transpose()?;
    let rung = match &net {
        Some(n) => Rung {
            name: eval::Q_LEARNED,
            policy: Policy::net(),
            net: Some(n),
        },
        None => Rung {
            name: eval::ONLINE,
            policy: Policy::online(cfg.eval.tau),
            net: None,
        },
    };
    let result = eval::run_ablation(&suite(cfg)?, &[rung], &cfg.backend, cfg.seed, exec)?;
    eval::write_ablation_csv(File::create(out.join("eval.csv"))?, &result.rows)?;
    println!("{}", write_summary(&result, &[rung]));
    Ok(())
}

fn diagnose(cfg: &Config, classifier: Option<PathBuf>, out: &Path, exec: Execution) -> Result<()> {
    let Some(q_path) = &cfg.qnet.checkpoint else {
        bail!(ConfigError("diagnose needs a Q-network (--checkpoint or qnet.checkpoint)".into()));
    };
    let Some(c_path) = classifier.or(cfg.qnet.classifier.clone()) else {
        bail!(ConfigError("diagnose needs a classifier (--classifier or qnet.classifier)".into()));
    };
    let (q_net, classifier) = (load_net(q_path)?, load_net(&c_path)?);
    let rungs = eval::ladder(&classifier, &q_net, cfg.eval.tau);
    let result = eval::run_ablation(&suite(cfg)?, &rungs, &cfg.backend, cfg.seed, exec)?;
    eval::write_ablation_csv(File::create(out.join("ablation.csv"))?, &result.rows)?;
    let mut w = csv::Writer::from_path(out.join("ignore.csv"))?;
    w.write_record(["policy", "occluded_ignore", "occluded", "visible_ignore", "visible", "z"])?;
    for (name, c) in &result.ignore_counts {
        w.write_record([
            name.clone(),
            c.occluded_ignore.to_string(),
            c.occluded.to_string(),
            c.visible_ignore.to_string(),
            c.visible.to_string(),
            c.z_statistic().to_string(),
        ])?;
    }
    w.flush()?;
    println!("{}", write_summary(&result, &rungs));
    Ok(())
}

fn recovery(cfg: &Config, out: &Path, exec: Execution) -> Result<()> {
    let specs = eval::recovery_suite(cfg.eval.recovery_episodes, cfg.eval.recovery_len, cfg.seed)?;
    let rows = eval::reinit_recovery_stats(&specs, &cfg.backend, cfg.seed, exec)?;
    eval::write_recovery_csv(File::create(out.join("recovery.csv"))?, &rows)?;
    println!(
        "{}",
        json!({
            "cuts": rows.len(),
            "reacquired": rows.iter().filter(|r| r.frames_to_reacquire.is_some()).count(),
            "median_frames_to_reacquire": eval::median_frames_to_reacquire(&rows),
        })
    );
    Ok(())
}

fn serve(cfg: Config, out: &Path) -> Result<()> {
    let net = cfg.qnet.checkpoint.as_deref().map(load_net).transpose()?;
    let policy = match net {
        Some(_) => Policy::net(),
        None => Policy::online(cfg.eval.tau),
    };
    let base = cfg.sim.scenario()?;
    let mut svc = Service::new(cfg.serve.clone(), cfg.learn.clone(), net.clone().unwrap_or_else(|| QNet::init(cfg.seed)))
        .with_checkpoint_out(out.join("served.ptrk"));
    for k in 0..cfg.serve.episodes {
        let spec = base.clone().with_seed(learn::train_episode_seed(cfg.seed, k));
        let id = format!("e{k}");
        svc.add_episode(id.clone(), spec.clone());
        let seed = derive_seed(cfg.seed, seed_tags::AGENT, k as u64);
        let run = record_run(&spec, net.as_ref(), &policy, cfg.serve.stride, &cfg.backend, &id, seed)?;
        svc.add_run(format!("r{k}"), run)?;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.bind)
            .await
            .with_context(|| format!("binding {}", cfg.serve.bind))?;
        println!("{}", json!({"listening": listener.local_addr()?.to_string()}));
        std::io::stdout().flush()?;
        ptrack_serve::serve(listener, Arc::new(svc)).await?;
        Ok(())
    })
}

fn replay_inspect(path: &Path, dump: bool) -> Result<()> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let db = ReplayDb::read_jsonl(BufReader::new(f), usize::MAX)?;
    if dump {
        let mut w = csv::Writer::from_writer(std::io::stdout().lock());
        w.write_record(["episode", "frame", "motion", "appearance", "reward", "terminal"])?;
        for t in db.iter() {
            w.serialize((
                t.episode_id,
                t.frame_index,
                t.action.motion,
                t.action.appearance,
                t.reward,
                t.is_terminal(),
            ))?;
        }
        w.flush()?;
        return Ok(());
    }
    let mut actions: BTreeMap<String, usize> = BTreeMap::new();
    let mut episodes = std::collections::BTreeSet::new();
    let (mut rewarded, mut terminal, mut labelled) = (0usize, 0usize, 0usize);
    for t in db.iter() {
        *actions
            .entry(format!("{}/{}", json!(t.action.motion).as_str().unwrap_or("?"), json!(t.action.appearance).as_str().unwrap_or("?")))
            .or_default() += 1;
        episodes.insert(t.episode_id);
        rewarded += t.reward as usize;
        terminal += t.is_terminal() as usize;
        labelled += t.labels.is_some() as usize;
    }
    let n = db.len();
    println!(
        "{}",
        json!({
            "tuples": n,
            "episodes": episodes.len(),
            "mean_reward": (n > 0).then(|| rewarded as f64 / n as f64),
            "terminal": terminal,
            "labelled": labelled,
            "actions": actions,
        })
    );
    Ok(())
}
