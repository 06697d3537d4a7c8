//! Command line: argument parsing, config resolution and subcommand dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use safeseq_core::envs::{degrade_bottom, degrade_imbalance, generate_episode, BehaviorPolicySpec, EnvSpec, GridSpec};
use safeseq_core::eval::{aggregate, episode_jobs, run_job, EvalReport, ReturnReference, SequencePolicy};
use safeseq_core::oracle::PickRule;
use safeseq_core::rng::seeded;
use safeseq_core::trainer::{MetricsRow, Trainer, Variant};
use safeseq_core::trajectory::TrajectoryDataset;
use safeseq_core::weighting::{dataset_weights, prop1_gradient_check, trajectory_weight, MeanNetwork, Prop1Config};
use safeseq_core::Real;

use crate::checkpoint::{AnyCheckpoint, Checkpoint, Precision};
use crate::config::{self, GlobalConfig, Preset};
use crate::format::{self, FormatError};
use crate::report::{self, ReportError};
use crate::verify::{sweep, SweepConfig};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nprecision: f32 (default), f64",
    "\ndataset format: 1",
    "\ncheckpoint format: 1"
);

#[derive(Debug, Parser)]
#[command(name = "safeseq", version, long_version = LONG_VERSION, about = "Offline safe RL with return/cost conditioned transformers")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate and print the effective config, then exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Threads for data generation, evaluation and oracle sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// JSON config merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out a behavior mixture and write a dataset.
    GenData(GenDataArgs),
    /// Train one variant and write a checkpoint.
    Train(TrainArgs),
    /// Zero-shot evaluation of a checkpoint over cost thresholds.
    Eval(EvalArgs),
    /// Alignment-gap sweep over random tabular CMDPs.
    OracleVerify(OracleArgs),
    /// Trajectory weights of a dataset.
    WeightsInspect(WeightsArgs),
    /// Expert-KL versus reweighted NLL gradient agreement.
    Prop1Check(Prop1Args),
    /// Dataset summary statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `corridor`, `grid` or a JSON env file.
    #[arg(long)]
    pub env: Option<String>,
    /// e.g. `aggressive=0.4,cautious=0.4,random=0.2`.
    #[arg(long)]
    pub behavior_mix: Option<String>,
    #[arg(long)]
    pub action_noise: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep only the bottom rho% by return.
    #[arg(long, conflicts_with = "degrade_imbalance")]
    pub degrade_bottom: Option<f64>,
    /// Keep only the top and bottom rho% by return.
    #[arg(long)]
    pub degrade_imbalance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Metrics CSV; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the env stored in the checkpoint.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long)]
    pub clamp_ctg: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    /// Perturbed outcomes also change reward and cost.
    #[arg(long)]
    pub noise: bool,
    #[arg(long, default_value = "max-coverage")]
    pub rule: String,
    #[arg(long, default_value_t = 10.0)]
    pub c_const: f64,
    /// Per-instance CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub c_lim: Option<f64>,
    /// Per-trajectory CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Prop1Args {
    /// Defaults to a small generated corridor dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0.25)]
    pub sigma_sq: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_kl: f64,
    /// Share of highest-return trajectories treated as expert.
    #[arg(long, default_value_t = 0.2)]
    pub expert_fraction: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// A failure with a stable kind and an exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: i32,
}

impl CliError {
    fn usage(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), code: 2 }
    }

    fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), code: 1 }
    }

    fn missing(flag: &str) -> Self {
        Self::usage("missing-flag", format!("required flag {flag} was not given"))
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<safeseq_core::Error> for CliError {
    fn from(e: safeseq_core::Error) -> Self {
        Self::runtime("core", e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::runtime(e.kind(), e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        Self::runtime("report", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args`, runs the command and returns the exit code; errors go to `err` as one line.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "{}", CliError::usage("usage", first).line());
            return 2;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.code
        }
    }
}

fn base_config(cli: &Cli) -> CliResult<GlobalConfig> {
    let base = GlobalConfig::preset(cli.preset.unwrap_or_default());
    let mut cfg = match &cli.config {
        Some(path) => config::load(&base, path).map_err(|e| CliError::usage("config", e.to_string()))?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    Ok(cfg)
}

fn finalize(cfg: GlobalConfig) -> CliResult<GlobalConfig> {
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::usage("config", config::ConfigError(v).to_string()))
    }
}

fn parse_env(s: &str) -> CliResult<EnvSpec> {
    match s {
        "corridor" => Ok(EnvSpec::default()),
        "grid" => Ok(EnvSpec::TabularGrid(GridSpec::default())),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage("env", format!("{path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage("env", format!("{path}: {e}")))
        }
    }
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::runtime("threads", e.to_string()))
}

fn require<'a, T>(v: &'a Option<T>, fallback: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().or(fallback.as_ref()).ok_or_else(|| CliError::missing(flag))
}

fn env_sidecar(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".env.json");
    PathBuf::from(s)
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> CliResult<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn print_effective(out: &mut dyn Write, cfg: &GlobalConfig) -> CliResult<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::GenData(a) => {
            if let Some(e) = &a.env {
                cfg.env = parse_env(e)?;
            }
            if let Some(mix) = &a.behavior_mix {
                let noise = a.action_noise.unwrap_or(cfg.behavior.action_noise);
                cfg.behavior = BehaviorPolicySpec::parse_mix(mix, noise).map_err(|e| CliError::usage("behavior-mix", e.to_string()))?;
            } else if let Some(noise) = a.action_noise {
                cfg.behavior.action_noise = noise;
            }
            if let Some(n) = a.episodes {
                cfg.episodes = n;
            }
            let out_path = require(&a.out, &cfg.paths.dataset, "--out")?.clone();
            cfg.paths.dataset = Some(out_path.clone());
            let cfg = finalize(cfg)?;
            if cli.dry_run {
                return print_effective(out, &cfg);
            }
            let trajs = pool(cli.workers)?.install(|| {
                (0..cfg.episodes as u64).into_par_iter().map(|i| generate_episode(&cfg.env, &cfg.behavior, cfg.seed, i)).collect::<Result<Vec<_>, _>>()
            })?;
            let mut ds = TrajectoryDataset::new(trajs, cfg.env.c_max())?;
            if let Some(rho) = a.degrade_bottom {
                ds = degrade_bottom(&ds, rho)?;
            }
            if let Some(rho) = a.degrade_imbalance {
                ds = degrade_imbalance(&ds, rho)?;
            }
            format::save_dataset(&out_path, &ds)?;
            report::write_json(&env_sidecar(&out_path), &cfg.env)?;
            emit(out, json!({ "dataset": out_path, "summary": ds.summary() }))
        }
        Command::Train(a) => {
            if let Some(v) = a.variant {
                cfg.train.variant = v;
            }
            if let Some(n) = a.iters {
                cfg.train.total_iters = n;
                cfg.train.critic_warmup_iters = cfg.train.critic_warmup_iters.min(n);
            }
            if let Some(eta) = a.eta {
                cfg.train.eta = eta;
            }
            if let Some(p) = a.precision {
                cfg.precision = p;
            }
            cfg.paths.dataset = Some(require(&a.dataset, &cfg.paths.dataset, "--dataset")?.clone());
            cfg.paths.checkpoint = Some(require(&a.out, &cfg.paths.checkpoint, "--out")?.clone());
            let cfg = finalize(cfg)?;
            if cli.dry_run {
                return print_effective(out, &cfg);
            }
            let ds_path = cfg.paths.dataset.clone().expect("set above");
            let ds = format::load_dataset(&ds_path)?;
            let env = std::fs::read_to_string(env_sidecar(&ds_path)).ok().and_then(|t| serde_json::from_str::<EnvSpec>(&t).ok());
            let (ckpt, rows) = match cfg.precision {
                Precision::F32 => train_as::<f32>(&cfg, &ds, env).map(|(c, r)| (AnyCheckpoint::F32(c), r))?,
                Precision::F64 => train_as::<f64>(&cfg, &ds, env).map(|(c, r)| (AnyCheckpoint::F64(c), r))?,
            };
            let ck_path = cfg.paths.checkpoint.clone().expect("set above");
            ckpt.save(&ck_path)?;
            let metrics = a.metrics.clone().unwrap_or_else(|| {
                let mut s = ck_path.as_os_str().to_owned();
                s.push(".metrics.csv");
                PathBuf::from(s)
            });
            report::write_metrics(&metrics, &rows)?;
            let h = ckpt.header();
            emit(out, json!({ "checkpoint": ck_path, "metrics": metrics, "variant": h.variant, "iters": h.iter, "lambda": h.lambda, "checksum": format!("{:016x}", h.policy_checksum) }))
        }
        Command::Eval(a) => {
            if let Some(t) = &a.thresholds {
                cfg.eval.thresholds = t.clone();
            }
            if let Some(n) = a.episodes {
                cfg.eval.episodes_per_threshold = n;
            }
            cfg.eval.deterministic = !a.stochastic;
            cfg.eval.clamp_ctg |= a.clamp_ctg;
            cfg.paths.checkpoint = Some(require(&a.checkpoint, &cfg.paths.checkpoint, "--checkpoint")?.clone());
            cfg.paths.out_dir = Some(require(&a.out_dir, &cfg.paths.out_dir, "--out-dir")?.clone());
            let explicit_env = a.env.as_deref().map(parse_env).transpose()?;
            if let Some(e) = &explicit_env {
                cfg.env = e.clone();
            }
            let cfg = finalize(cfg)?;
            if cli.dry_run {
                return print_effective(out, &cfg);
            }
            let ckpt = AnyCheckpoint::load(cfg.paths.checkpoint.as_ref().expect("set above"))?;
            let env = explicit_env.or_else(|| ckpt.header().env.clone()).unwrap_or_else(|| cfg.env.clone());
            let rep = evaluate_parallel(&ckpt, &env, &cfg.eval, &ckpt.header().returns, cli.workers)?;
            let dir = cfg.paths.out_dir.clone().expect("set above");
            let paths = report::emit_report(&rep, &dir)?;
            emit(
                out,
                json!({
                    "summary": paths.summary_json, "episodes": paths.episodes_csv, "plot": paths.plot_csv,
                    "averaged": rep.averaged, "safe": rep.safe,
                }),
            )
        }
        Command::OracleVerify(a) => {
            let rule: PickRule = serde_json::from_value(json!(a.rule)).map_err(|_| CliError::usage("rule", format!("unknown rule {:?}; expected max-return, min-cost or max-coverage", a.rule)))?;
            let sweep_cfg = SweepConfig { epsilon: a.epsilon, reward_cost_noise: a.noise, rule, c_const: a.c_const, seeds: a.seeds, base_seed: cfg.seed, ..SweepConfig::default() };
            if !(a.epsilon >= 0.0 && a.epsilon <= 1.0) {
                return Err(CliError::usage("epsilon", format!("epsilon {} outside [0, 1]", a.epsilon)));
            }
            if cli.dry_run {
                return emit(out, serde_json::to_value(&sweep_cfg).expect("serializes"));
            }
            let rows = pool(cli.workers)?.install(|| sweep(&sweep_cfg))?;
            if let Some(p) = &a.out {
                report::write_csv(p, &rows)?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            let max_gap = rows.iter().map(|r| r.max_gap()).fold(0.0, f64::max);
            emit(out, json!({ "instances": rows.len(), "passed": rows.len() - failed, "max_gap": max_gap, "epsilon": a.epsilon }))?;
            if failed > 0 {
                return Err(CliError::runtime("verification-failed", format!("{failed} of {} instances failed", rows.len())));
            }
            Ok(())
        }
        Command::WeightsInspect(a) => {
            let w = &mut cfg.train.weighting;
            w.alpha = a.alpha.unwrap_or(w.alpha);
            w.gamma = a.gamma.unwrap_or(w.gamma);
            w.c_lim = a.c_lim.unwrap_or(w.c_lim);
            cfg.paths.dataset = Some(require(&a.dataset, &cfg.paths.dataset, "--dataset")?.clone());
            let cfg = finalize(cfg)?;
            if cli.dry_run {
                return print_effective(out, &cfg);
            }
            let ds = format::load_dataset(cfg.paths.dataset.as_ref().expect("set above"))?;
            let weights = dataset_weights(&ds, &cfg.train.weighting)?;
            let raw_cfg = safeseq_core::weighting::WeightConfig { normalize_to_mean_one: false, ..cfg.train.weighting };
            let rows: Vec<_> = ds
                .trajectories()
                .iter()
                .zip(&weights)
                .enumerate()
                .map(|(i, (t, &w))| Ok(json!({ "index": i, "return": t.ret(), "cost": t.cost(), "raw_weight": trajectory_weight(t.ret(), t.cost(), &raw_cfg)?, "weight": w })))
                .collect::<Result<_, safeseq_core::Error>>()?;
            if let Some(p) = &a.out {
                let mut wtr = csv::Writer::from_path(p).map_err(ReportError::from)?;
                wtr.write_record(["index", "return", "cost", "raw_weight", "weight"]).map_err(ReportError::from)?;
                for r in &rows {
                    wtr.write_record(["index", "return", "cost", "raw_weight", "weight"].map(|k| r[k].to_string())).map_err(ReportError::from)?;
                }
                wtr.flush()?;
            }
            let sum: f64 = weights.iter().sum();
            let ess = sum * sum / weights.iter().map(|w| w * w).sum::<f64>();
            emit(
                out,
                json!({
                    "trajectories": weights.len(),
                    "min": weights.iter().copied().fold(f64::INFINITY, f64::min),
                    "max": weights.iter().copied().fold(0.0, f64::max),
                    "mean": sum / weights.len() as f64,
                    "effective_sample_size": ess,
                    "config": cfg.train.weighting,
                }),
            )
        }
        Command::Prop1Check(a) => {
            if cli.dry_run {
                return print_effective(out, &finalize(cfg)?);
            }
            let ds = match &a.dataset {
                Some(p) => format::load_dataset(p)?,
                None => {
                    let env = EnvSpec::PointCorridor(safeseq_core::envs::CorridorSpec { horizon: 20, ..Default::default() });
                    safeseq_core::envs::generate_dataset(&env, &BehaviorPolicySpec::default(), 12, cfg.seed)?
                }
            };
            let returns = ds.returns();
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.sort_by(|&x, &y| returns[y].total_cmp(&returns[x]).then(x.cmp(&y)));
            let n_exp = ((a.expert_fraction * ds.len() as f64).ceil() as usize).clamp(1, ds.len());
            let p1 = Prop1Config { sigma_sq: a.sigma_sq, alpha_kl: a.alpha_kl, expert_indices: order[..n_exp].iter().copied().collect() };
            let net = MeanNetwork::new(ds.state_dim(), ds.action_dim(), &[16], &mut seeded(cfg.seed));
            let rep = prop1_gradient_check(&ds, &p1, &net, a.points, cfg.seed)?;
            emit(
                out,
                json!({
                    "points": rep.points.len(), "max_rel_grad_diff": rep.max_rel_grad_diff, "offset_spread": rep.offset_spread,
                    "predicted_offset": rep.predicted_offset, "max_offset_error": rep.max_offset_error, "pass": rep.pass,
                }),
            )?;
            if !rep.pass {
                return Err(CliError::runtime("verification-failed", "gradient or offset tolerance exceeded"));
            }
            Ok(())
        }
        Command::Stats(a) => {
            cfg.paths.dataset = Some(require(&a.dataset, &cfg.paths.dataset, "--dataset")?.clone());
            if cli.dry_run {
                return print_effective(out, &finalize(cfg)?);
            }
            let ds = format::load_dataset(cfg.paths.dataset.as_ref().expect("set above"))?;
            emit(out, serde_json::to_value(ds.summary()).expect("serializes"))
        }
    }
}

fn train_as<T: Real>(cfg: &GlobalConfig, ds: &TrajectoryDataset, env: Option<EnvSpec>) -> CliResult<(Checkpoint<T>, Vec<MetricsRow>)> {
    let policy_cfg = cfg.policy.resolve(ds);
    let mut trainer = Trainer::<T>::new(ds, policy_cfg, cfg.train.clone())?;
    let rows = trainer.run(|r| {
        eprintln!("iter {:>7} loss {:.5} nll {:.5} lambda {:.4} grad {:.3}", r.iter, r.loss, r.nll, r.lambda, r.grad_norm);
    })?;
    Ok((Checkpoint::from_trainer(&trainer, ReturnReference::from_dataset(ds), env), rows))
}

/// Parallel version of `evaluate`; episode seeds do not depend on the worker count.
pub fn evaluate_parallel<P: SequencePolicy + Sync>(
    policy: &P,
    env: &EnvSpec,
    protocol: &safeseq_core::eval::EvalProtocol,
    reference: &ReturnReference,
    workers: usize,
) -> CliResult<EvalReport> {
    protocol.validate()?;
    let before = policy.checksum();
    let records = pool(workers)?.install(|| {
        episode_jobs(protocol).into_par_iter().map(|job| run_job(policy, env, protocol, reference, job).map(|r| (job, r))).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(aggregate(protocol, records, (before, policy.checksum()))?)
}
