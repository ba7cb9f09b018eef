//! Command implementations behind the `exitlab` binary.
//!
//! Every command loads its inputs, writes its primary artifact, and finishes
//! by writing a [`RunManifest`] next to it (`<out>.run.json` for file
//! outputs, `run_manifest.json` inside directory outputs). Existing outputs
//! are never overwritten without `--force`. All computation runs in `f64`.
//!
//! Artifact paths are optional on the command line; when omitted they
//! default to fixed names under the config's `out_dir`, so the whole
//! pipeline can be driven with nothing but a config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baselines::{
    adaframe_train, fastforward_train, frameexit_train, stateless_baseline_decider,
    AdaFrameDecider, BaselineSpec, FrameExitDecider,
};
use crate::config::{config_hash, load_run_config, RunConfig, RunManifest};
use crate::detector::{
    full_observation_ap, pretrain, ConfidenceCache, Detector, DetectorMeta,
};
use crate::env::io::MANIFEST_NAME;
use crate::env::{
    generate_split_dataset_with_workers, load_feature_files, resolve_manifest, save_dataset,
    Dataset, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, export_attention, export_frontier, frontier_points, EvalSummary, NeverExit,
};
use crate::numerics::checkpoint::write_atomic;
use crate::policy::{GreedyPolicyDecider, PolicyNet};
use crate::training::{
    load_policy, save_policy, train_policy, PolicyMeta, RewardScheme, TrainLogRecord,
};
use crate::workers::worker_count;

/// Streaming early-exit mistake detection: data generation, detector and
/// exit-policy training, baselines, and evaluation.
#[derive(Debug, Parser)]
#[command(name = "exitlab", version, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clip dataset with train/val/test splits
    GenData(GenDataArgs),
    /// Pretrain the mistake detector on a dataset
    TrainDetector(TrainDetectorArgs),
    /// Train the exit policy against a frozen detector
    TrainPolicy(TrainPolicyArgs),
    /// Train (when the kind needs it) and evaluate one baseline exit rule
    RunBaseline(RunBaselineArgs),
    /// Evaluate a policy, a baseline, or the detector alone on one split
    Evaluate(EvaluateArgs),
    /// Collect evaluation summaries into one frontier CSV
    Frontier(FrontierArgs),
    /// Export the detector's attention over the observed window at one frame
    Attention(AttentionArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run config file (JSON, optional "preset": "desk" | "paper")
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Output dataset directory [default: <out_dir>/data]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads [default: $EXITLAB_WORKERS, else 1]
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Run config file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Dataset directory or manifest file [default: <out_dir>/data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output checkpoint [default: <out_dir>/detector.ckpt]
    #[arg(long, value_name = "CKPT")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    /// Run config file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Frozen detector checkpoint [default: <out_dir>/detector.ckpt]
    #[arg(long, value_name = "CKPT")]
    pub detector: Option<PathBuf>,
    /// Dataset directory or manifest file [default: <out_dir>/data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output checkpoint [default: <out_dir>/exit_policy.ckpt]
    #[arg(long, value_name = "CKPT")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunBaselineArgs {
    /// Run config file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Baseline kind (see the config's "baselines" list for parameters)
    #[arg(long, value_name = "KIND")]
    pub kind: String,
    /// Frozen detector checkpoint [default: <out_dir>/detector.ckpt]
    #[arg(long, value_name = "CKPT")]
    pub detector: Option<PathBuf>,
    /// Dataset directory or manifest file [default: <out_dir>/data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output summary JSON [default: <out_dir>/baseline_<kind>_test.summary.json]
    #[arg(long, value_name = "SUMMARY")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run config file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Frozen detector checkpoint [default: <out_dir>/detector.ckpt]
    #[arg(long, value_name = "CKPT")]
    pub detector: Option<PathBuf>,
    /// Trained exit-policy checkpoint to evaluate
    #[arg(long, value_name = "CKPT", conflicts_with = "baseline")]
    pub policy: Option<PathBuf>,
    /// Baseline to evaluate: a kind name or an inline JSON spec. Only kinds
    /// that need no training; the others go through run-baseline.
    #[arg(long, value_name = "SPEC")]
    pub baseline: Option<String>,
    /// Dataset directory or manifest file [default: <out_dir>/data]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Split to evaluate
    #[arg(long, value_name = "SPLIT", default_value = "test")]
    pub split: String,
    /// Output summary JSON [default: <out_dir>/<model>_<split>.summary.json]
    #[arg(long, value_name = "SUMMARY")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct FrontierArgs {
    /// Summary files or patterns; `*` wildcards are allowed in the final
    /// path component ("runs/desk/*.summary.json")
    #[arg(long, value_name = "GLOB", num_args = 1.., required = true)]
    pub summaries: Vec<String>,
    /// Output CSV path
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Detector checkpoint
    #[arg(long, value_name = "CKPT")]
    pub detector: PathBuf,
    /// Dataset directory or manifest file holding the clip
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Clip id (as listed in the dataset manifest)
    #[arg(long, value_name = "ID")]
    pub clip: String,
    /// Frame index of the decision point
    #[arg(long = "t", value_name = "FRAME")]
    pub t: usize,
    /// Output CSV path
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

/// Dispatches one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::TrainDetector(args) => cmd_train_detector(&args),
        Command::TrainPolicy(args) => cmd_train_policy(&args),
        Command::RunBaseline(args) => cmd_run_baseline(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Frontier(args) => cmd_frontier(&args),
        Command::Attention(args) => cmd_attention(&args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Appends `suffix` to the full file name ("detector.ckpt" + ".run.json" →
/// "detector.ckpt.run.json"), so sibling artifacts never collide.
fn append_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn run_manifest_path(out: &Path) -> PathBuf {
    append_suffix(out, ".run.json")
}

fn train_log_path(out: &Path) -> PathBuf {
    append_suffix(out, ".train_log.ndjson")
}

/// Refuses to proceed when any output already exists, unless forced.
fn ensure_writable(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(Error::WouldOverwrite(display(path)));
        }
    }
    Ok(())
}

fn create_parent_dirs(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(display(parent), e))?;
        }
    }
    Ok(())
}

fn write_ndjson<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(&serde_json::to_string(record).map_err(|e| Error::json(display(path), e))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

/// Accumulates manifest fields while a command runs; created first so
/// `started_at` covers the whole command.
struct ManifestBuilder {
    command: &'static str,
    started_at: String,
    config: Option<RunConfig>,
    artifacts: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            started_at: timestamp(),
            config: None,
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn set_config(&mut self, cfg: &RunConfig) {
        self.config = Some(cfg.clone());
    }

    fn artifact(&mut self, role: &str, path: &Path) {
        self.artifacts.insert(role.to_string(), display(path));
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    fn save(self, path: &Path) -> Result<()> {
        let (config_hash, seed) = match &self.config {
            Some(cfg) => (Some(config_hash(cfg)?), Some(cfg.seed)),
            None => (None, None),
        };
        create_parent_dirs(path)?;
        RunManifest {
            command: self.command.to_string(),
            config_hash,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: timestamp(),
            artifacts: self.artifacts,
            metrics: self.metrics,
            config: self.config,
        }
        .save(path)
    }
}

fn data_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.out_dir.join("data"))
}

fn detector_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.out_dir.join("detector.ckpt"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    load_feature_files(&resolve_manifest(path))
}

fn check_feature_dim(what: &str, expected: usize, data: &Dataset) -> Result<()> {
    if expected != data.feature_dim {
        return Err(Error::Config(format!(
            "{what} expects feature dim {expected}, dataset provides {}",
            data.feature_dim
        )));
    }
    Ok(())
}

fn progress_line(record: &TrainLogRecord) {
    let probe = match record.probe_ap {
        Some(ap) => format!("{ap:.4}"),
        None => "-".to_string(),
    };
    eprintln!(
        "step {:>9}  reward {:+.4}  or {:.3}  probe_ap {}",
        record.step, record.mean_reward, record.mean_or, probe
    );
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("gen-data");
    let cfg = load_run_config(&args.config)?;
    manifest.set_config(&cfg);
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
    let dataset_manifest = out.join(MANIFEST_NAME);
    let run_manifest = out.join("run_manifest.json");
    ensure_writable(&[&dataset_manifest, &run_manifest], args.force)?;

    let workers = worker_count(args.workers)?;
    let synth = cfg.synth_with_seed();
    let data = generate_split_dataset_with_workers(
        &synth,
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test,
        workers,
    )?;
    save_dataset(&out, &data)?;

    let mistakes = data.clips.iter().filter(|c| c.is_mistake()).count();
    manifest.artifact("data_dir", &out);
    manifest.artifact("manifest", &dataset_manifest);
    manifest.metric("n_clips", data.clips.len() as f64);
    manifest.metric("n_train", cfg.data.n_train as f64);
    manifest.metric("n_val", cfg.data.n_val as f64);
    manifest.metric("n_test", cfg.data.n_test as f64);
    manifest.metric("mistake_fraction", mistakes as f64 / data.clips.len() as f64);
    manifest.save(&run_manifest)?;
    println!("wrote {} clips to {}", data.clips.len(), out.display());
    Ok(())
}

fn cmd_train_detector(args: &TrainDetectorArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train-detector");
    let cfg = load_run_config(&args.config)?;
    manifest.set_config(&cfg);
    let data_path = data_path(&cfg, &args.data);
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("detector.ckpt"));
    let log_path = train_log_path(&out);
    ensure_writable(&[&out, &log_path, &run_manifest_path(&out)], args.force)?;

    let data = load_dataset(&data_path)?;
    check_feature_dim("detector", cfg.detector.feature_dim, &data)?;
    create_parent_dirs(&out)?;

    let seed = cfg.detector_seed();
    let mut detector = Detector::<f64>::init(&cfg.detector, seed)?;
    let report = pretrain(&mut detector, &data, &cfg.detector_train, seed)?;
    write_ndjson(&log_path, &report.records)?;
    let meta = DetectorMeta {
        config: cfg.detector.clone(),
        seed,
        steps: report.steps,
        final_loss: report.final_loss,
    };
    detector.save(&out, &meta)?;

    manifest.artifact("checkpoint", &out);
    manifest.artifact("train_log", &log_path);
    manifest.artifact("data", &data_path);
    manifest.metric("steps", report.steps as f64);
    manifest.metric("final_loss", report.final_loss);
    let val_has_mistake = data
        .clips
        .iter()
        .any(|c| c.split == Split::Val && c.is_mistake());
    if val_has_mistake {
        let val_ap = full_observation_ap(&detector, &data, Split::Val)?;
        manifest.metric("val_full_observation_ap", val_ap);
        println!(
            "trained detector for {} steps (final loss {:.4}, val full-observation AP {:.4}); wrote {}",
            report.steps,
            report.final_loss,
            val_ap,
            out.display()
        );
    } else {
        println!(
            "trained detector for {} steps (final loss {:.4}); wrote {}",
            report.steps,
            report.final_loss,
            out.display()
        );
    }
    manifest.save(&run_manifest_path(&out))?;
    Ok(())
}

fn cmd_train_policy(args: &TrainPolicyArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train-policy");
    let cfg = load_run_config(&args.config)?;
    manifest.set_config(&cfg);
    let detector_path = detector_path(&cfg, &args.detector);
    let data_path = data_path(&cfg, &args.data);
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("exit_policy.ckpt"));
    let log_path = train_log_path(&out);
    ensure_writable(&[&out, &log_path, &run_manifest_path(&out)], args.force)?;

    let (detector, _) = Detector::<f64>::load(&detector_path)?;
    let data = load_dataset(&data_path)?;
    check_feature_dim("detector", detector.cfg.feature_dim, &data)?;
    create_parent_dirs(&out)?;

    let seed = cfg.policy_seed();
    let mut policy = PolicyNet::<f64>::init(&cfg.policy, data.feature_dim, seed)?;
    let scheme = RewardScheme::Exit { weights: cfg.reward };
    let outcome = train_policy(&mut policy, &detector, &data, &scheme, &cfg.ppo, seed, |record| {
        progress_line(record);
    })?;
    write_ndjson(&log_path, &outcome.log)?;
    let meta = PolicyMeta {
        config: cfg.policy.clone(),
        feature_dim: data.feature_dim,
        seed,
        scheme,
        ppo: cfg.ppo,
        steps_trained: outcome.steps,
        final_probe_ap: outcome.final_probe_ap,
    };
    save_policy(&policy, &out, &meta)?;

    manifest.artifact("checkpoint", &out);
    manifest.artifact("train_log", &log_path);
    manifest.artifact("detector", &detector_path);
    manifest.artifact("data", &data_path);
    manifest.metric("steps", outcome.steps as f64);
    manifest.metric("episodes", outcome.episodes as f64);
    if let Some(ap) = outcome.final_probe_ap {
        manifest.metric("final_probe_ap", ap);
    }
    manifest.save(&run_manifest_path(&out))?;
    println!(
        "trained exit policy for {} steps over {} episodes; wrote {}",
        outcome.steps,
        outcome.episodes,
        out.display()
    );
    Ok(())
}

fn cmd_run_baseline(args: &RunBaselineArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("run-baseline");
    let cfg = load_run_config(&args.config)?;
    manifest.set_config(&cfg);
    let spec = cfg.baseline_for_kind(&args.kind)?;
    spec.validate()?;
    let detector_path = detector_path(&cfg, &args.detector);
    let data_path = data_path(&cfg, &args.data);
    let out = args.out.clone().unwrap_or_else(|| {
        cfg.out_dir.join(format!("baseline_{}_test.summary.json", spec.kind()))
    });
    let log_path = train_log_path(&out);
    let mut protected: Vec<&Path> = vec![&out];
    let rm_path = run_manifest_path(&out);
    protected.push(&rm_path);
    if spec.needs_training() {
        protected.push(&log_path);
    }
    ensure_writable(&protected, args.force)?;

    let (detector, _) = Detector::<f64>::load(&detector_path)?;
    let data = load_dataset(&data_path)?;
    check_feature_dim("detector", detector.cfg.feature_dim, &data)?;
    create_parent_dirs(&out)?;

    let seed = cfg.baseline_seed(spec.kind());
    let eval_seed = cfg.eval_seed();
    let hash = config_hash(&cfg)?;
    let mut cache = ConfidenceCache::new();
    let summary = match &spec {
        BaselineSpec::Frameexit { train } => {
            let outcome = frameexit_train(&detector, &data, &cfg.policy, train, seed, &mut cache)?;
            manifest.metric("selected_tau0", outcome.tau0);
            manifest.metric("selected_tau1", outcome.tau1);
            manifest.metric("val_ap", outcome.val_ap);
            manifest.metric("val_mean_or", outcome.val_or);
            let mut decider = FrameExitDecider { classifier: outcome.classifier };
            evaluate_model(
                spec.kind(),
                &mut decider,
                &detector,
                &data,
                Split::Test,
                eval_seed,
                &hash,
                &mut cache,
            )?
        }
        BaselineSpec::Fastforward { penalty } => {
            let mut policy = PolicyNet::<f64>::init(&cfg.policy, data.feature_dim, seed)?;
            let outcome = fastforward_train(
                &mut policy,
                &detector,
                &data,
                *penalty,
                &cfg.ppo,
                seed,
                progress_line,
            )?;
            write_ndjson(&log_path, &outcome.log)?;
            manifest.artifact("train_log", &log_path);
            manifest.metric("train_steps", outcome.steps as f64);
            let mut decider = GreedyPolicyDecider::new(&policy);
            evaluate_model(
                spec.kind(),
                &mut decider,
                &detector,
                &data,
                Split::Test,
                eval_seed,
                &hash,
                &mut cache,
            )?
        }
        BaselineSpec::Adaframe { value_drop, drop_count } => {
            let mut policy = PolicyNet::<f64>::init(&cfg.policy, data.feature_dim, seed)?;
            let outcome =
                adaframe_train(&mut policy, &detector, &data, &cfg.ppo, seed, progress_line)?;
            write_ndjson(&log_path, &outcome.log)?;
            manifest.artifact("train_log", &log_path);
            manifest.metric("train_steps", outcome.steps as f64);
            let mut decider = AdaFrameDecider::new(&policy, *value_drop, *drop_count)?;
            evaluate_model(
                spec.kind(),
                &mut decider,
                &detector,
                &data,
                Split::Test,
                eval_seed,
                &hash,
                &mut cache,
            )?
        }
        stateless => {
            let mut decider = stateless_baseline_decider::<f64>(stateless, seed)?;
            evaluate_model(
                spec.kind(),
                decider.as_mut(),
                &detector,
                &data,
                Split::Test,
                eval_seed,
                &hash,
                &mut cache,
            )?
        }
    };
    summary.save(&out)?;

    manifest.artifact("summary", &out);
    manifest.artifact("detector", &detector_path);
    manifest.artifact("data", &data_path);
    manifest.metric("ap", summary.ap);
    manifest.metric("mean_or", summary.mean_or);
    manifest.metric("records", summary.records.len() as f64);
    manifest.save(&rm_path)?;
    println!(
        "baseline {}: AP {:.4}, mean OR {:.4} over {} test clips; wrote {}",
        spec.kind(),
        summary.ap,
        summary.mean_or,
        summary.records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("evaluate");
    let cfg = load_run_config(&args.config)?;
    manifest.set_config(&cfg);
    let split = parse_split(&args.split)?;

    enum Target {
        Policy(PathBuf),
        Baseline(BaselineSpec),
        FullObservation,
    }
    let target = match (&args.policy, &args.baseline) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--policy and --baseline are mutually exclusive".into(),
            ))
        }
        (Some(path), None) => Target::Policy(path.clone()),
        (None, Some(text)) => {
            let trimmed = text.trim();
            let spec = if trimmed.starts_with('{') {
                serde_json::from_str::<BaselineSpec>(trimmed).map_err(|e| {
                    Error::Config(format!("invalid baseline spec {trimmed:?}: {e}"))
                })?
            } else {
                cfg.baseline_for_kind(trimmed)?
            };
            spec.validate()?;
            Target::Baseline(spec)
        }
        (None, None) => Target::FullObservation,
    };
    let model = match &target {
        Target::Policy(_) => "exit_policy".to_string(),
        Target::Baseline(spec) => spec.kind().to_string(),
        Target::FullObservation => "full_observation".to_string(),
    };

    let detector_path = detector_path(&cfg, &args.detector);
    let data_path = data_path(&cfg, &args.data);
    let out = args.out.clone().unwrap_or_else(|| {
        cfg.out_dir.join(format!("{model}_{}.summary.json", split.name()))
    });
    ensure_writable(&[&out, &run_manifest_path(&out)], args.force)?;

    let (detector, _) = Detector::<f64>::load(&detector_path)?;
    let data = load_dataset(&data_path)?;
    check_feature_dim("detector", detector.cfg.feature_dim, &data)?;
    create_parent_dirs(&out)?;

    let eval_seed = cfg.eval_seed();
    let hash = config_hash(&cfg)?;
    let mut cache = ConfidenceCache::new();
    let summary = match &target {
        Target::Policy(path) => {
            let (policy, _) = load_policy::<f64>(path)?;
            check_feature_dim("policy", policy.feature_dim, &data)?;
            manifest.artifact("policy", path);
            let mut decider = GreedyPolicyDecider::new(&policy);
            evaluate_model(&model, &mut decider, &detector, &data, split, eval_seed, &hash, &mut cache)?
        }
        Target::Baseline(spec) => {
            let mut decider =
                stateless_baseline_decider::<f64>(spec, cfg.baseline_seed(spec.kind()))?;
            evaluate_model(&model, decider.as_mut(), &detector, &data, split, eval_seed, &hash, &mut cache)?
        }
        Target::FullObservation => {
            let mut decider = NeverExit;
            evaluate_model(&model, &mut decider, &detector, &data, split, eval_seed, &hash, &mut cache)?
        }
    };
    summary.save(&out)?;

    manifest.artifact("summary", &out);
    manifest.artifact("detector", &detector_path);
    manifest.artifact("data", &data_path);
    manifest.metric("ap", summary.ap);
    manifest.metric("mean_or", summary.mean_or);
    manifest.metric("records", summary.records.len() as f64);
    manifest.save(&run_manifest_path(&out))?;
    println!(
        "{model} on {}: AP {:.4}, mean OR {:.4} over {} clips; wrote {}",
        split.name(),
        summary.ap,
        summary.mean_or,
        summary.records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_frontier(args: &FrontierArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("frontier");
    ensure_writable(&[&args.out, &run_manifest_path(&args.out)], args.force)?;
    let mut paths = Vec::new();
    for pattern in &args.summaries {
        paths.extend(expand_pattern(Path::new(pattern))?);
    }
    let mut summaries = Vec::with_capacity(paths.len());
    for path in &paths {
        summaries.push(EvalSummary::load(path)?);
    }
    let points = frontier_points(&summaries);
    create_parent_dirs(&args.out)?;
    export_frontier(&points, &args.out)?;

    manifest.artifact("frontier", &args.out);
    for (i, path) in paths.iter().enumerate() {
        manifest.artifact(&format!("summary_{i:03}"), path);
    }
    manifest.metric("points", points.len() as f64);
    manifest.save(&run_manifest_path(&args.out))?;
    println!("wrote {} frontier points to {}", points.len(), args.out.display());
    Ok(())
}

fn cmd_attention(args: &AttentionArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("attention");
    ensure_writable(&[&args.out, &run_manifest_path(&args.out)], args.force)?;
    let (detector, _) = Detector::<f64>::load(&args.detector)?;
    let data = load_dataset(&args.data)?;
    check_feature_dim("detector", detector.cfg.feature_dim, &data)?;
    let clip = data
        .clips
        .iter()
        .find(|c| c.id == args.clip)
        .ok_or_else(|| {
            Error::MissingArtifact(format!(
                "clip {:?} in dataset {}",
                args.clip,
                args.data.display()
            ))
        })?;
    if args.t >= clip.frame_count() {
        return Err(Error::Config(format!(
            "frame {} is out of range for clip {:?} with {} frames",
            args.t,
            clip.id,
            clip.frame_count()
        )));
    }
    create_parent_dirs(&args.out)?;
    export_attention(&detector, clip, args.t, &args.out)?;

    manifest.artifact("attention", &args.out);
    manifest.artifact("detector", &args.detector);
    manifest.artifact("data", &args.data);
    manifest.metric("window", detector.cfg.window as f64);
    manifest.metric("t", args.t as f64);
    manifest.save(&run_manifest_path(&args.out))?;
    println!(
        "wrote attention over the last {} frames at frame {} of {} to {}",
        detector.cfg.window,
        args.t,
        clip.id,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Pattern expansion for --summaries
// ---------------------------------------------------------------------------

/// Expands a path whose final component may contain `*` wildcards. Matches
/// come back sorted so output order is reproducible. A literal path passes
/// through unchanged (missing files then fail on load); a pattern with no
/// matches expands to nothing.
fn expand_pattern(pattern: &Path) -> Result<Vec<PathBuf>> {
    if let Some(parent) = pattern.parent() {
        if parent.to_string_lossy().contains('*') {
            return Err(Error::Config(format!(
                "wildcards are only supported in the final path component, got {}",
                pattern.display()
            )));
        }
    }
    let Some(name) = pattern.file_name().and_then(|n| n.to_str()) else {
        return Err(Error::Config(format!(
            "summary pattern {} has no file name",
            pattern.display()
        )));
    };
    if !name.contains('*') {
        return Ok(vec![pattern.to_path_buf()]);
    }
    let dir = match pattern.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut matches = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(display(&dir), e))? {
            let entry = entry.map_err(|e| Error::io(display(&dir), e))?;
            let file_name = entry.file_name();
            let Some(file_name) = file_name.to_str() else { continue };
            if glob_match(name, file_name) && entry.path().is_file() {
                matches.push(entry.path());
            }
        }
    }
    matches.sort();
    Ok(matches)
}

/// Matches `text` against a pattern where `*` stands for any character
/// sequence. After anchoring the literal prefix and suffix, scanning the
/// middle fragments left to right at their earliest positions is complete.
fn glob_match(pattern: &str, text: &str) -> bool {
    if !pattern.contains('*') {
        return pattern == text;
    }
    let parts: Vec<&str> = pattern.split('*').collect();
    let first = parts[0];
    let last = parts[parts.len() - 1];
    if text.len() < first.len() + last.len() {
        return false;
    }
    if !text.starts_with(first) || !text[first.len()..].ends_with(last) {
        return false;
    }
    let mut pos = first.len();
    let end = text.len() - last.len();
    for part in &parts[1..parts.len() - 1] {
        if part.is_empty() {
            continue;
        }
        match text[pos..end].find(part) {
            Some(i) => pos += i + part.len(),
            None => return false,
        }
    }
    true
}
