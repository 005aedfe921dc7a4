//! Command-line front end: configuration files, checkpoints and CSV output.

pub mod checkpoint;
pub mod config;
pub mod state;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::data::{sample_labeled_subset, DataError, Dataset};
use crate::pipeline::{
    evaluate_classifier, evaluate_elbo, finetune, load_datasets, reconstruction_density, sweep, test_rmse,
    DataSource, ExperimentConfig, MetricRow, MetricsLog, PipelineError, Precision, Pretrainer,
};
use crate::rng::stream_seed;
use crate::tensor::{DType, Element};
use checkpoint::{Checkpoint, CheckpointError};
use config::{config_to_toml, load_config, ConfigError};
use state::{ClassifierState, KIND_CLASSIFIER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "SMALLVAE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "smallvae", version, about = "Convolutional VAE pre-training and frozen-encoder fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the VAE; writes last.ckpt, metrics_pretrain.csv and density.csv.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier head on a pretrained checkpoint with the encoder frozen.
    Finetune(FinetuneArgs),
    /// Pretrain and fine-tune once per latent size and compare.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(EvalArgs),
    /// Print dataset statistics.
    InspectData(InspectArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Run configuration (TOML); defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CIFAR-10 binary directory (overrides data.dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from <out>/last.ckpt instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    pub resume: bool,
    /// Override pretrain.epochs (the total, not additional epochs).
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretraining checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub labels_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Latent spatial sizes; flat size is channels × s × s.
    #[arg(long, value_delimiter = ',', default_value = "8,10,12")]
    pub sizes: Vec<usize>,
    /// Total labeled counts, split evenly across classes (e.g. 250,500,1000,2000).
    #[arg(long, value_delimiter = ',')]
    pub label_budgets: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where to write density.csv and eval.csv; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

/// Parses `argv`, runs the command and maps failures to exit codes.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return EXIT_USAGE;
    }
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // A pool may already exist when called twice in one process (tests); that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// 1 for usage and configuration, 2 for data, I/O and checkpoints, 3 for NaN.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                _ if p.is_numeric() => EXIT_NUMERIC,
                PipelineError::Config(_) => EXIT_USAGE,
                PipelineError::Nn(crate::nn::NnError::Config(_)) => EXIT_USAGE,
                PipelineError::Data(_) | PipelineError::Label { .. } => EXIT_DATA,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<DataError>().is_some()
            || cause.downcast_ref::<CheckpointError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectData(a) => cmd_inspect(a),
    }
}

/// Writes `text` atomically, naming the path on failure.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_metrics_csv<R: MetricRow>(path: &Path, log: &MetricsLog<R>) -> Result<()> {
    write_text(path, &log.to_csv())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn resolve_config(args: &DataArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data.dir = Some(d.clone());
    }
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if cfg.data.source == DataSource::Cifar10 {
        if let Some(dir) = &cfg.data.dir {
            if !dir.is_dir() {
                return Err(PipelineError::Data(DataError::MissingFile(dir.clone())))
                    .context("CIFAR-10 data directory not found");
            }
        }
    }
    Ok(load_datasets(cfg)?)
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config_resolved.toml"), &config_to_toml(cfg)?)
}

fn checkpoint_dir(ckpt: &Path) -> PathBuf {
    ckpt.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    create_dir(&a.out)?;
    if a.resume {
        let ck = Checkpoint::load(&a.out.join("last.ckpt"))?;
        return match state::dtype_of(&ck)? {
            DType::F32 => resume_typed::<f32>(&a, &ck),
            DType::F64 => resume_typed::<f64>(&a, &ck),
        };
    }
    let mut cfg = resolve_config(&a.data)?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => pretrain_typed(Pretrainer::<f32>::new(cfg)?, &a.out),
        Precision::F64 => pretrain_typed(Pretrainer::<f64>::new(cfg)?, &a.out),
    }
}

fn resume_typed<T: Element>(a: &PretrainArgs, ck: &Checkpoint) -> Result<()> {
    let mut t = state::pretrainer_from_checkpoint::<T>(ck)?;
    if let Some(e) = a.epochs {
        t.config.pretrain.epochs = e;
    }
    if let Some(d) = &a.data.data {
        t.config.data.dir = Some(d.clone());
    }
    if a.seed.is_some_and(|s| s != t.config.seed) {
        bail!(PipelineError::Config("--seed cannot change on resume".into()));
    }
    eprintln!("resuming after epoch {}", t.epochs_done());
    pretrain_typed(t, &a.out)
}

fn pretrain_typed<T: Element>(mut t: Pretrainer<T>, out: &Path) -> Result<()> {
    write_resolved(out, &t.config)?;
    let (train, test) = load_data(&t.config)?;
    eprintln!(
        "pretraining on {} images ({} test), latent {}x{}x{}",
        train.len(),
        test.len(),
        t.config.latent.channels,
        t.config.latent.spatial,
        t.config.latent.spatial
    );
    t.run(&train, &test, |t| -> Result<()> {
        let r = t.log.last().expect("epoch just logged");
        eprintln!(
            "epoch {:>3}  train {:.6}  test {:.6}  rmse {:.6}  lr {:e}",
            r.epoch, r.train_total, r.test_total, r.test_rmse, r.lr
        );
        state::pretrainer_to_checkpoint(t)?.save(&out.join("last.ckpt"))?;
        write_metrics_csv(&out.join("metrics_pretrain.csv"), &t.log)
    })?;
    // Resuming a finished run still refreshes the outputs.
    state::pretrainer_to_checkpoint(&t)?.save(&out.join("last.ckpt"))?;
    write_metrics_csv(&out.join("metrics_pretrain.csv"), &t.log)?;
    let density = reconstruction_density(&t.model, &test, &t.config)?;
    write_text(&out.join("density.csv"), &density.to_csv())?;
    Ok(())
}

/// Splits a total labeled budget evenly across the classes present.
pub fn per_class_budget(total: usize, classes: usize) -> Result<usize> {
    let per = total / classes.max(1);
    if per == 0 {
        bail!(PipelineError::Config(format!(
            "label budget {total} is smaller than the {classes} classes"
        )));
    }
    Ok(per)
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    match state::dtype_of(&ck)? {
        DType::F32 => finetune_typed::<f32>(&a, &ck),
        DType::F64 => finetune_typed::<f64>(&a, &ck),
    }
}

fn finetune_typed<T: Element>(a: &FinetuneArgs, ck: &Checkpoint) -> Result<()> {
    if ck.get("kind")? == KIND_CLASSIFIER {
        bail!(PipelineError::Config(format!(
            "{} is already a fine-tuned classifier; pass a pretraining checkpoint",
            a.checkpoint.display()
        )));
    }
    let (mut cfg, mut model) = state::model_from_checkpoint::<T>(ck)?;
    if let Some(n) = a.labels_per_class {
        cfg.finetune.labels_per_class = n;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| checkpoint_dir(&a.checkpoint));
    create_dir(&out)?;
    write_resolved(&out, &cfg)?;
    let (train, test) = load_data(&cfg)?;
    let subset = sample_labeled_subset(&train, cfg.finetune.labels_per_class, stream_seed(cfg.seed, "labeled-subset"))
        .map_err(PipelineError::from)?;
    eprintln!("fine-tuning on {} labeled images", subset.indices.len());
    let outcome = finetune(&cfg, &mut model, &train, &subset, &test)?;
    for r in outcome.log.rows() {
        eprintln!(
            "epoch {:>3}  train_ce {:.6}  test_ce {:.6}  acc {:.4}",
            r.epoch, r.train_ce, r.test_ce, r.test_accuracy
        );
    }
    write_metrics_csv(&out.join("metrics_finetune.csv"), &outcome.log)?;
    let st = ClassifierState {
        config: cfg,
        model,
        classifier: outcome.classifier,
        log: outcome.log,
        source: a.checkpoint.display().to_string(),
    };
    state::classifier_to_checkpoint(&st)?.save(&out.join("classifier.ckpt"))?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.data)?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    match cfg.precision {
        Precision::F32 => sweep_typed::<f32>(&a, &cfg),
        Precision::F64 => sweep_typed::<f64>(&a, &cfg),
    }
}

fn sweep_typed<T: Element>(a: &SweepArgs, cfg: &ExperimentConfig) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    let classes = train
        .class_counts()
        .map(|c| c.len())
        .ok_or_else(|| PipelineError::Data(DataError::Unlabeled(train.source.clone())))?;
    let budgets = a
        .label_budgets
        .iter()
        .map(|&b| per_class_budget(b, classes))
        .collect::<Result<Vec<_>>>()?;
    let arm_dir = |s: usize| a.out.join(format!("arm_s{s}"));
    for &s in &a.sizes {
        create_dir(&arm_dir(s))?;
    }
    let hook = |s: usize, t: &Pretrainer<T>| -> Result<(), PipelineError> {
        let r = t.log.last().expect("epoch just logged");
        eprintln!("[s={s}] epoch {:>3}  test {:.6}  rmse {:.6}", r.epoch, r.test_total, r.test_rmse);
        let dir = arm_dir(s);
        let saved = state::pretrainer_to_checkpoint(t)
            .and_then(|ck| ck.save(&dir.join("last.ckpt")))
            .map_err(|e| e.to_string())
            .and_then(|_| write_metrics_csv(&dir.join("metrics_pretrain.csv"), &t.log).map_err(|e| format!("{e:#}")));
        // Artifact failures are reported but do not stop the arm.
        if let Err(e) = saved {
            eprintln!("[s={s}] warning: {e}");
        }
        Ok(())
    };
    let report = sweep::<T>(cfg, &a.sizes, &budgets, &train, &test, &hook)?;
    for (s, arm) in &report.arms {
        let dir = arm_dir(*s);
        match arm {
            Ok(arm) => {
                write_metrics_csv(&dir.join("metrics_pretrain.csv"), &arm.pretrain_log)?;
                write_text(&dir.join("density.csv"), &arm.density.to_csv())?;
                for b in &arm.finetunes {
                    let name = if arm.finetunes.len() == 1 {
                        "metrics_finetune.csv".to_string()
                    } else {
                        format!("metrics_finetune_l{}.csv", b.labels_per_class)
                    };
                    write_metrics_csv(&dir.join(name), &b.log)?;
                }
            }
            Err(e) => eprintln!("[s={s}] failed: {e}"),
        }
    }
    write_text(&a.out.join("sweep_report.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    if report.arms.iter().all(|(_, r)| r.is_err()) {
        bail!("every sweep arm failed");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    match state::dtype_of(&ck)? {
        DType::F32 => eval_typed::<f32>(&a, &ck),
        DType::F64 => eval_typed::<f64>(&a, &ck),
    }
}

fn eval_typed<T: Element>(a: &EvalArgs, ck: &Checkpoint) -> Result<()> {
    let (mut cfg, model) = state::model_from_checkpoint::<T>(ck)?;
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    let out = a.out.clone().unwrap_or_else(|| checkpoint_dir(&a.checkpoint));
    create_dir(&out)?;
    let (_, test) = load_data(&cfg)?;
    let elbo = evaluate_elbo(&model, &test, &cfg)?;
    let rmse = test_rmse(&model, &test)?;
    let accuracy = if ck.get("kind")? == KIND_CLASSIFIER {
        let st = state::classifier_from_checkpoint::<T>(ck)?;
        Some(evaluate_classifier(&st.model, &st.classifier, &test)?)
    } else {
        None
    };
    let fmt = crate::pipeline::format_g9;
    let mut header = vec!["test_total", "test_kl", "test_recon", "test_rmse"];
    let mut row = vec![fmt(elbo.total), fmt(elbo.kl), fmt(elbo.recon), fmt(rmse)];
    if let Some(acc) = accuracy {
        header.push("test_accuracy");
        row.push(fmt(acc));
    }
    let csv = crate::pipeline::metrics::csv_string(&header, &[row]);
    write_text(&out.join("eval.csv"), &csv)?;
    let density = reconstruction_density(&model, &test, &cfg)?;
    write_text(&out.join("density.csv"), &density.to_csv())?;
    print!("{csv}");
    Ok(())
}

fn describe(ds: &Dataset) -> String {
    let px = ds.images().data();
    let n = px.len() as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let [c, h, w] = ds.image_shape();
    let mut s = format!(
        "{}: {} images of {c}x{h}x{w} from {}, pixel mean {:.6}, std {:.6}",
        ds.split,
        ds.len(),
        ds.source,
        mean,
        var.sqrt()
    );
    match ds.class_counts() {
        Some(counts) => {
            let parts: Vec<String> = counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            s.push_str(&format!("\n  labels {}", parts.join(" ")));
        }
        None => s.push_str("\n  unlabeled"),
    }
    s
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let cfg = resolve_config(&a.data)?;
    cfg.validate()?;
    let (train, test) = load_data(&cfg)?;
    println!("{}", describe(&train));
    println!("{}", describe(&test));
    Ok(())
}
