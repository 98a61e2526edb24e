use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use target_batcher::config::Config;
use target_batcher::estimator::ModelSet;
use target_batcher::features::FeatureSpec;
use target_batcher::model::{
    BatchSizeReason, BuildFlags, ContextKind, ExecutionContext, Priority, RequestInfo, Target,
};
use target_batcher::pipeline::{log_span_days, read_logs, train_all};
use target_batcher::report::write_report;
use target_batcher::service::{
    serve, BatchPlanner, BuildCreator, EstimatorPlanner, RecordingBackend, ServiceDeps,
};
use target_batcher::simulator::{
    generate_logs, generate_workload, logs_jsonl, run_experiment, train_on_simulated_logs, LogParams, Metrics,
    Policy,
};

#[derive(Parser)]
#[command(name = "target-batcher", version, about = "Batch build targets under memory and occupancy cutoffs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic workload and prior-build logs.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        n_targets: usize,
        /// Number of prior builds to log; defaults to the config value.
        #[arg(long)]
        builds: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train memory and occupancy models from execution logs.
    Train {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 17)]
        window_days: u32,
        #[arg(long)]
        out: PathBuf,
        /// Base feature spec (TOML); bucket edges are refit.
        #[arg(long)]
        feature_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a batching policy end to end against the simulated cluster.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        n_targets: usize,
        /// naiveN, btbs or oracle.
        #[arg(long)]
        policy: Policy,
        /// Trained models for btbs; without it, btbs trains on simulated logs first.
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        cluster_config: Option<PathBuf>,
        /// Where to write metrics.json and the report tables; otherwise the
        /// metrics go to stdout.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Batch a target list offline and print the batches as JSON lines.
    Batch {
        /// JSON lines of targets, or one label per line.
        #[arg(long)]
        targets_file: PathBuf,
        /// Space-separated build flags, e.g. "--jobs=200 --keep_going".
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        flags: String,
        #[arg(long, default_value = "medium")]
        priority: Priority,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the streaming enqueue endpoint.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write CSV tables from a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Generate { seed, n_targets, builds, out_dir, config } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let workload = generate_workload(seed, n_targets, &cfg.workload)?;
            let mut cluster = cfg.cluster.clone();
            cluster.seed = seed;
            let params = LogParams { seed, builds: builds.unwrap_or(cfg.logs.builds), ..cfg.logs.clone() };
            let logs = generate_logs(&workload, &cluster, &params)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("targets.jsonl"), workload.targets_jsonl()?)?;
            std::fs::write(out_dir.join("logs.jsonl"), logs_jsonl(&logs)?)?;
            println!("wrote {} targets and {} log records to {}", workload.len(), logs.len(), out_dir.display());
        }
        Command::Train { logs, window_days, out, feature_spec, seed, config } => {
            let mut cfg = Config::load_or_default(config.as_deref())?;
            let file = File::open(&logs).with_context(|| format!("opening {}", logs.display()))?;
            let (records, skipped) = read_logs(BufReader::new(file))?;
            if skipped > 0 {
                warn!("skipped {skipped} malformed log lines");
            }
            if records.is_empty() {
                bail!("no usable log records in {}", logs.display());
            }
            let span = log_span_days(&records);
            if window_days as f64 > span {
                warn!("window of {window_days} days exceeds the {span:.1} days of logs; using all of them");
            }
            let now = records.iter().map(|r| r.finished_at_s).fold(f64::NEG_INFINITY, f64::max);
            let base = match feature_spec {
                Some(p) => FeatureSpec::from_toml(&std::fs::read_to_string(&p)?)?,
                None => FeatureSpec::default(),
            };
            cfg.pipeline.primary_window_days = window_days;
            cfg.pipeline.memory.seed = seed;
            cfg.pipeline.occupancy.seed = seed;
            if let Some(r) = cfg.pipeline.recent_memory.as_mut() {
                r.seed = seed;
            }
            let trained = train_all(&records, now, &base, &cfg.pipeline)?;
            ModelSet::from_trained(&trained).save(&out)?;
            let r = &trained.report;
            println!("records: {} used, {} skipped", r.counts.used, skipped);
            println!("memory train mse: {:.4}", r.memory_train_mse);
            println!("memory recent train mse: {:.4}", r.memory_recent_train_mse);
            println!("memory validation mse: {:.4}", r.memory_validation_mse);
            println!("occupancy train mse: {:.4}", r.occupancy_train_mse);
            println!("occupancy validation mse: {:.4}", r.occupancy_validation_mse);
            println!("models written to {}", out.display());
        }
        Command::Simulate { seed, n_targets, policy, models_dir, cluster_config, out_dir } => {
            let cfg = Config::load_or_default(cluster_config.as_deref())?;
            let workload = generate_workload(seed, n_targets, &cfg.workload)?;
            let mut cluster = cfg.cluster.clone();
            cluster.seed = seed;
            let models = match (policy, models_dir) {
                (Policy::Btbs, Some(dir)) => Some(ModelSet::load(&dir)?),
                (Policy::Btbs, None) => {
                    info!("no models given; training on {} simulated prior builds", cfg.logs.builds);
                    let params = LogParams { seed, ..cfg.logs.clone() };
                    Some(train_on_simulated_logs(&workload, &cluster, &params, &cfg.pipeline)?.0)
                }
                _ => None,
            };
            let mut exp = cfg.experiment.clone();
            exp.seed = seed;
            let metrics = run_experiment(policy, &workload, &cluster, &cfg.batching, models.as_ref(), &exp)?;
            let json = metrics.to_json()?;
            match out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("metrics.json"), &json)?;
                    write_report(&metrics, &dir)?;
                }
                None => println!("{json}"),
            }
            eprintln!(
                "{}: builds={} oom_rate={:.4} type_i={} type_ii={} retries={}",
                metrics.policy,
                metrics.build_count,
                metrics.oom_rate,
                metrics.type_i_de_count,
                metrics.type_ii_de_count,
                metrics.retries
            );
            if !metrics.invariant_violations.is_empty() {
                for v in &metrics.invariant_violations {
                    eprintln!("invariant violation: {v}");
                }
                return Ok(ExitCode::from(3));
            }
        }
        Command::Batch { targets_file, flags, priority, models_dir, config } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let targets = read_targets(&targets_file)?;
            let flags = BuildFlags::parse_args(&flags.split_whitespace().collect::<Vec<_>>())?;
            let info = RequestInfo::new(
                ExecutionContext { kind: ContextKind::Workspace, id: "offline".into() },
                flags,
                priority,
            );
            let models = load_models(models_dir.as_deref());
            let planner = EstimatorPlanner::from_models(cfg.batching.clone(), models.as_ref());
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (types, group) in cfg.executors.group_and_sort(&targets) {
                for batch in planner.plan(&group, &info) {
                    let line = serde_json::json!({
                        "executor_types": types.to_string(),
                        "reason": batch.reason,
                        "targets": batch.targets.iter().map(|t| t.label.as_str()).collect::<Vec<_>>(),
                    });
                    writeln!(out, "{line}")?;
                }
            }
        }
        Command::Serve { listen, models_dir, config } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let models = load_models(models_dir.as_deref());
            let deps = ServiceDeps {
                rules: cfg.executors.clone(),
                planner: Arc::new(EstimatorPlanner::from_models(cfg.batching.clone(), models.as_ref())),
                creator: Arc::new(LoggingBackend(RecordingBackend::new(rand::random()))),
            };
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            info!("listening on {}", listener.local_addr()?);
            serve(listener, Arc::new(deps))?;
        }
        Command::Report { metrics, out_dir } => {
            let text = std::fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let m: Metrics = serde_json::from_str(&text)?;
            for p in write_report(&m, &out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Missing or unreadable models are not fatal: batching falls back to the
/// default batch size.
fn load_models(dir: Option<&Path>) -> Option<ModelSet> {
    let dir = dir?;
    match ModelSet::load(dir) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("could not load models from {}: {e}; using fallback batches", dir.display());
            None
        }
    }
}

fn read_targets(path: &Path) -> anyhow::Result<Vec<Target>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut targets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t = if line.starts_with('{') {
            let t: Target = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
            t.validate()?;
            t
        } else {
            Target::parse(line, BTreeSet::new(), "")?
        };
        targets.push(t);
    }
    Ok(targets)
}

/// Hands out ids and logs each build; nothing is kept.
struct LoggingBackend(RecordingBackend);

impl BuildCreator for LoggingBackend {
    fn create_build(&self, targets: Vec<Target>, info: &RequestInfo, reason: BatchSizeReason) -> target_batcher::Result<String> {
        let n = targets.len();
        let id = self.0.create_build(targets, info, reason)?;
        self.0.take_builds();
        info!("build {id}: {n} targets, {reason}, priority {}", info.priority.as_str());
        Ok(id)
    }
}
