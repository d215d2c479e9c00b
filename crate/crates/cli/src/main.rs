use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use loopkit::features::FeatureGroup;
use loopkit::http::ServerConfig;
use loopkit::optimizer::ParamSpace;
use loopkit::policy::{evaluate, parse_policy, EvalContext};
use loopkit::reaper::{reap, ReapParams};
use loopkit::service::{Platform, PlatformConfig};
use loopkit::sim::load::{concurrent_load, trained_platform, LOAD_USECASE};
use loopkit::sim::tune::{tune_prefetch, TuneConfig};
use loopkit::sim::{run_scenario, InProcess, Remote, ScenarioConfig, ScenarioKind, DEFAULT_START};

#[derive(Parser)]
#[command(name = "loopkit", version, about = "Closed-loop ML decision platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataDir {
    /// Platform state directory.
    #[arg(long, default_value = "loopkit-data")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Feature store maintenance.
    Features {
        #[command(subcommand)]
        op: FeaturesOp,
    },
    /// Offline jobs over the training table.
    Etl {
        #[command(subcommand)]
        op: EtlOp,
    },
    /// Parse or evaluate a decision policy.
    Policy {
        #[command(subcommand)]
        op: PolicyOp,
    },
    /// Train a model for a blueprint version and publish it as a canary.
    Train {
        #[arg(long)]
        usecase: String,
        #[arg(long)]
        blueprint: Option<u32>,
        /// Report metrics without publishing.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Tune blueprint parameters against the prefetch simulator.
    Tune {
        #[arg(long, default_value = "prefetch")]
        usecase: String,
        /// JSON parameter space; defaults to `threshold` in [0, 1].
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        budget: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5_000)]
        decisions_per_trial: usize,
        /// Trial ledger, appended as NDJSON.
        #[arg(long, default_value = "trials.ndjson")]
        ledger: PathBuf,
    },
    /// Remove low-importance features from the live blueprint.
    Reap {
        #[arg(long)]
        usecase: String,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value_t = 0.005)]
        tolerance: f64,
        #[arg(long, default_value_t = 5)]
        max_rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Run a simulated product against the platform.
    Sim {
        #[arg(long, default_value = "prefetch")]
        scenario: String,
        /// Defaults depend on the scenario.
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        qpd: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Drive a running server instead of an in-process platform.
        #[arg(long)]
        remote: Option<String>,
        #[arg(long)]
        no_retrain: bool,
        #[arg(long)]
        drift_day: Option<u32>,
    },
    /// Measure concurrent get_decision throughput.
    Load {
        #[arg(long, default_value_t = 50)]
        features: usize,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 50_000)]
        requests: usize,
    },
    /// Serve the HTTP API.
    Serve {
        /// TOML server config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "LOOPKIT_PORT")]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FeaturesOp {
    /// Register a feature group from a JSON definition.
    Register {
        file: PathBuf,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Bulk-load NDJSON rows into a group.
    Load {
        #[arg(long)]
        group: String,
        file: PathBuf,
        #[command(flatten)]
        dir: DataDir,
    },
}

#[derive(Subcommand)]
enum EtlOp {
    /// Apply delayed observations in [since, until) to stored rows.
    Join {
        #[arg(long)]
        since: i64,
        #[arg(long)]
        until: i64,
        #[command(flatten)]
        dir: DataDir,
    },
}

#[derive(Subcommand)]
enum PolicyOp {
    /// Parse a policy and list the names it references.
    Check { file: PathBuf },
    /// Evaluate a policy on given values.
    Eval {
        file: PathBuf,
        #[arg(long = "pred", value_parser = parse_kv)]
        preds: Vec<(String, f64)>,
        #[arg(long = "param", value_parser = parse_kv)]
        params: Vec<(String, f64)>,
        #[arg(long = "feature", value_parser = parse_kv)]
        features: Vec<(String, f64)>,
    },
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.to_string(), v))
}

fn open_platform(dir: &Path) -> Result<std::sync::Arc<Platform>> {
    let config = PlatformConfig { data_dir: Some(dir.to_path_buf()), ..PlatformConfig::default() };
    Ok(Platform::new(config)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Features { op: FeaturesOp::Register { file, dir } } => {
            let group: FeatureGroup = serde_json::from_reader(BufReader::new(File::open(&file)?))
                .with_context(|| format!("reading {}", file.display()))?;
            let p = open_platform(&dir.data_dir)?;
            p.features.register_group(group.clone())?;
            p.save_features()?;
            println!("registered group `{}`", group.name);
        }
        Command::Features { op: FeaturesOp::Load { group, file, dir } } => {
            let p = open_platform(&dir.data_dir)?;
            let n = p.features.load_ndjson(&group, BufReader::new(File::open(&file)?))?;
            p.save_features()?;
            println!("loaded {n} rows into `{group}`");
        }
        Command::Etl { op: EtlOp::Join { since, until, dir } } => {
            let p = open_platform(&dir.data_dir)?;
            let n = p.offline_join(since, until)?;
            println!("updated {n} rows");
        }
        Command::Policy { op: PolicyOp::Check { file } } => {
            let src = std::fs::read_to_string(&file)?;
            match parse_policy(&src) {
                Ok(p) => print_json(&serde_json::json!({
                    "ok": true,
                    "kind": p.kind(),
                    "canonical": p.to_string(),
                    "predictions": p.predictions,
                    "features": p.features,
                    "parameters": p.parameters,
                }))?,
                Err(e) => bail!("{}: {e}", file.display()),
            }
        }
        Command::Policy { op: PolicyOp::Eval { file, preds, params, features } } => {
            let program = parse_policy(&std::fs::read_to_string(&file)?)?;
            let ctx = EvalContext {
                predictions: preds.into_iter().collect(),
                parameters: params.into_iter().collect(),
                features: features.into_iter().collect(),
            };
            print_json(&evaluate(&program, &ctx)?)?;
        }
        Command::Train { usecase, blueprint, dry_run, dir } => {
            let p = open_platform(&dir.data_dir)?;
            let (model, report) = p.train(&usecase, blueprint)?;
            if !dry_run {
                p.publish(model, &report)?;
            }
            print_json(&report)?;
        }
        Command::Tune { usecase, space, budget, seed, decisions_per_trial, ledger } => {
            let mut cfg = TuneConfig::prefetch(budget, seed);
            cfg.scenario.usecase = usecase;
            cfg.decisions_per_trial = decisions_per_trial;
            cfg.ledger = Some(ledger);
            if let Some(path) = space {
                cfg.space = serde_json::from_reader::<_, ParamSpace>(BufReader::new(File::open(&path)?))
                    .with_context(|| format!("reading {}", path.display()))?;
            }
            print_json(&tune_prefetch(&cfg)?)?;
        }
        Command::Reap { usecase, step, tolerance, max_rounds, seed, dir } => {
            let p = open_platform(&dir.data_dir)?;
            let (report, _) = reap(&p, &usecase, &ReapParams { step_fraction: step, tolerance, max_rounds, seed })?;
            print_json(&report)?;
        }
        Command::Sim { scenario, days, qpd, seed, report, remote, no_retrain, drift_day } => {
            let kind: ScenarioKind = scenario.parse()?;
            let base = ScenarioConfig::new(kind);
            let cfg = ScenarioConfig {
                days: days.unwrap_or(base.days),
                decisions_per_day: qpd.unwrap_or(base.decisions_per_day),
                seed,
                retrain: !no_retrain,
                drift_day,
                ..base
            };
            let out = match remote {
                Some(url) => run_scenario(&Remote::new(&url)?, &cfg)?,
                None => run_scenario(&InProcess::new(PlatformConfig::default(), DEFAULT_START)?, &cfg)?,
            };
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_vec_pretty(&out)?)?;
            }
            print_json(&serde_json::json!({
                "scenario": out.scenario,
                "first_model_day": out.first_model_day,
                "summary": out.summary,
                "elapsed_ms": out.elapsed_ms,
            }))?;
        }
        Command::Load { features, trees, threads, requests } => {
            let api = trained_platform(features, trees, 1)?;
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(8, |n| n.get().max(8)));
            print_json(&concurrent_load(&api.platform, LOAD_USECASE, features, threads, requests, 2))?;
        }
        Command::Serve { config, port, data_dir } => {
            let mut cfg: ServerConfig = match &config {
                Some(path) => toml::from_str(&std::fs::read_to_string(path)?)
                    .with_context(|| format!("reading {}", path.display()))?,
                None => ServerConfig::default(),
            };
            if let Some(port) = port {
                cfg.port = port;
            }
            if data_dir.is_some() {
                cfg.platform.data_dir = data_dir;
            }
            let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port).parse()?;
            let platform = Platform::new(cfg.platform)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(loopkit::http::serve(platform, addr))?;
        }
    }
    Ok(())
}

