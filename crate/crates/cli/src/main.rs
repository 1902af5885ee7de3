use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowrl::env::{EnvKind, DEFAULT_PORT};
use flowrl::par::Execution;
use flowrl::trainer::{CsvMetrics, RunConfig, Trainer};
use flowrl::verify::{run_suite, toy, toy_checks, Suite};
use flowrl::Error;
use ndarray::Array2;
use serde_json::{json, Value};

const VERSION: &str = env!("FLOWRL_VERSION");

const CONFIG_FILE: &str = "config.txt";
const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "flowrl", version = VERSION, about = "Flow-matching policies for online RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Weighted flow matching on the ten-mode Gaussian ring.
    ToyGmm(ToyArgs),
    /// Run a verification suite; one JSON report per check.
    Verify(VerifyArgs),
    /// Describe the remote environment protocol.
    ServeInfo(ServeInfoArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// pendulum, gmm-bandit, point-mass or remote:<host>[:<port>]
    #[arg(long, required_unless_present = "resume")]
    env: Option<String>,
    /// Environment for evaluation rollouts. Defaults to `--env`, or for remote
    /// envs to the same host on the next port.
    #[arg(long)]
    eval_env: Option<String>,
    /// Config file listing every key as `key = value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the environment recorded in the checkpoint.
    #[arg(long)]
    env: Option<String>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flow-matching steps per model.
    #[arg(long)]
    steps: Option<usize>,
    /// Run without the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = Suite::NAMES)]
    suite: String,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ServeInfoArgs {
    /// Also print the `spec` reply a host should send for this built-in env.
    #[arg(long)]
    env: Option<String>,
}

enum Failure {
    /// Bad invocation or config; exit 2.
    Usage(String),
    /// Runtime error or failed check; exit 1.
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ToyGmm(a) => toy_gmm(a),
        Command::Verify(a) => verify(a),
        Command::ServeInfo(a) => serve_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.total_env_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_env_kind(kind: &EnvKind, explicit: Option<&str>) -> Result<EnvKind, Failure> {
    Ok(match (explicit, kind) {
        (Some(name), _) => EnvKind::parse(name)?,
        (None, EnvKind::Remote { host, port }) => EnvKind::Remote {
            host: host.clone(),
            port: port.checked_add(1).ok_or_else(|| Failure::Usage("no port after 65535".into()))?,
        },
        (None, k) => k.clone(),
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Failure::Run(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let kind = match (&args.env, &args.resume) {
        (Some(name), _) => EnvKind::parse(name)?,
        (None, Some(path)) => EnvKind::parse(Trainer::load(path)?.env_label())?,
        (None, None) => unreachable!("clap requires --env without --resume"),
    };
    let mut env = kind.build().map_err(|e| Failure::Run(e.to_string()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if t.env_spec() != env.spec() {
                return Err(Failure::Usage(format!("{} does not match the checkpoint's environment", kind.name())));
            }
            if let Some(steps) = args.steps {
                t.set_total_env_steps(steps);
            }
            t
        }
        None => Trainer::new(resolve_config(&args)?, env.spec().clone(), kind.name())?,
    };
    let eval_kind = eval_env_kind(&kind, args.eval_env.as_deref())?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(CONFIG_FILE), trainer.config().to_text())?;
    let metrics_file = BufWriter::new(File::create(args.out.join(METRICS_FILE))?);
    let mut metrics = CsvMetrics::new(metrics_file)?;

    let outcome = eval_kind
        .build()
        .and_then(|mut eval_env| trainer.run(env.as_mut(), eval_env.as_mut(), &mut metrics));
    drop(env);
    metrics.into_inner()?.flush()?;
    // the checkpoint is written even when the run aborted, so it can resume
    trainer.save(&args.out.join(CHECKPOINT_FILE))?;

    let (status, error, report) = match &outcome {
        Ok(r) => ("completed", Value::Null, serde_json::to_value(r).map_err(|e| Failure::Run(e.to_string()))?),
        Err(e) => ("aborted", Value::String(e.to_string()), Value::Null),
    };
    let manifest = json!({
        "version": VERSION,
        "command": "train",
        "status": status,
        "error": error,
        "seed": trainer.config().seed,
        "env": kind.name(),
        "eval_env": eval_kind.name(),
        "resumed_from": args.resume.as_ref().map(|p| p.display().to_string()),
        "env_steps": trainer.env_steps(),
        "gradient_steps": trainer.gradient_steps(),
        "episodes": trainer.episodes(),
        "files": {
            "config": CONFIG_FILE,
            "metrics": METRICS_FILE,
            "checkpoint": CHECKPOINT_FILE,
        },
        "report": report,
    });
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    match outcome {
        Ok(r) => {
            println!(
                "{}",
                json!({"status": status, "env_steps": r.env_steps, "final_eval_return": r.final_eval_return})
            );
            Ok(())
        }
        Err(e) => Err(Failure::Run(format!(
            "run aborted at env step {}: {e}; resumable checkpoint in {}",
            trainer.env_steps(),
            args.out.join(CHECKPOINT_FILE).display()
        ))),
    }
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if args.episodes == 0 {
        return Err(Failure::Usage("--episodes must be >= 1".into()));
    }
    let trainer = Trainer::load(&args.checkpoint)?;
    let kind = EnvKind::parse(args.env.as_deref().unwrap_or(trainer.env_label()))?;
    let mut env = kind.build().map_err(|e| Failure::Run(e.to_string()))?;
    let mean = trainer.evaluate(env.as_mut(), args.episodes, args.seed)?;
    println!(
        "{}",
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "env": kind.name(),
            "episodes": args.episodes,
            "seed": args.seed,
            "env_steps": trainer.env_steps(),
            "mean_return": mean,
        })
    );
    Ok(())
}

fn write_points(path: &Path, points: &Array2<f64>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Run(e.to_string()))?;
    let run = |w: &mut csv::Writer<File>| -> csv::Result<()> {
        w.write_record(["x", "y"])?;
        for row in points.rows() {
            w.write_record([row[0].to_string(), row[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| Failure::Run(e.to_string()))
}

fn toy_gmm(args: ToyArgs) -> Result<(), Failure> {
    let mut cfg = toy::ToyConfig {
        seed: args.seed,
        ..Default::default()
    };
    if let Some(steps) = args.steps {
        if steps == 0 {
            return Err(Failure::Usage("--steps must be >= 1".into()));
        }
        cfg.train_steps = steps;
    }
    let report = toy::run_toy(&cfg, exec(args.sequential))?;
    fs::create_dir_all(&args.out)?;
    write_points(&args.out.join("guided_samples.csv"), &report.guided_samples)?;
    write_points(&args.out.join("unguided_samples.csv"), &report.unguided_samples)?;
    if let Some(oracle) = &report.oracle {
        let mut w = csv::Writer::from_path(args.out.join("oracle.csv")).map_err(|e| Failure::Run(e.to_string()))?;
        let mut run = || -> csv::Result<()> {
            w.write_record(["x", "y", "mass"])?;
            for (c, m) in oracle.masses.iter().enumerate() {
                let p = oracle.grid.cell_center(c);
                w.write_record([p[0].to_string(), p[1].to_string(), m.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        run().map_err(|e| Failure::Run(e.to_string()))?;
    }
    let checks = toy_checks(&report);
    let scores = json!({
        "version": VERSION,
        "config": cfg,
        "report": report,
        "checks": checks,
    });
    write_json(&args.out.join("scores.json"), &scores)?;
    println!(
        "{}",
        json!({
            "guided_tv_to_oracle": report.guided.tv_to_oracle,
            "unguided_tv_to_oracle": report.unguided.tv_to_oracle,
            "guided_near_target_modes": report.guided.near_target_modes,
            "oracle_near_target_modes": report.oracle_near_target_modes,
        })
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let suite = Suite::parse(&args.suite).expect("clap restricts the names");
    let reports = run_suite(suite, exec(args.sequential))?;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Failure::Run(e.to_string()))?)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("failed checks: {}", failed.join(", "))))
    }
}

fn serve_info(args: ServeInfoArgs) -> Result<(), Failure> {
    let spec = match &args.env {
        Some(name) => {
            let kind = EnvKind::parse(name)?;
            if !kind.is_local() {
                return Err(Failure::Usage("serve-info --env takes a built-in environment".into()));
            }
            let env = kind.build()?;
            serde_json::to_value(env.spec()).map_err(|e| Failure::Run(e.to_string()))?
        }
        None => Value::Null,
    };
    let info = json!({
        "version": VERSION,
        "transport": "TCP, one JSON object per line, one connection per environment instance",
        "default_port": DEFAULT_PORT,
        "requests": {
            "spec": {"send": {"cmd": "spec"}, "reply": ["state_dim", "action_dim", "action_low", "action_high", "max_episode_steps?"]},
            "reset": {"send": {"cmd": "reset", "seed": "u53 integer"}, "reply": ["state"]},
            "step": {"send": {"cmd": "step", "action": "[f64]"}, "reply": ["state", "reward", "terminal", "truncated?", "clipped?"]},
            "close": {"send": {"cmd": "close"}, "reply": null},
        },
        "errors": "any reply with an \"error\" key aborts the run with a resumable checkpoint",
        "client": "train --env remote:<host>[:<port>]; evaluation connects to <port>+1 unless --eval-env is given",
        "spec": spec,
    });
    println!("{}", serde_json::to_string_pretty(&info).map_err(|e| Failure::Run(e.to_string()))?);
    Ok(())
}
