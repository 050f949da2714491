//! The `darcnn` command: data generation and preparation, two-stage
//! training, pseudo-labelling, evaluation, and trend reproduction.

pub mod plan;
pub mod report;
pub mod reproduce;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::core::config::{AugPlacement, PipelineConfig};
use crate::core::dataset::{read_split, write_split};
use crate::core::types::{Domain, Split};
use crate::data::{
    crop_patches, generate_dataset, invert_intensity, SplitCounts, SyntheticDomainSpec,
};
use crate::error::{Error, Result};
use crate::eval::{plots, Aggregate, EvalMode};
use crate::model::checkpoint::{file_hash, load_checkpoint};
use crate::pseudolabel::{
    build_stage2_dataset, generate_pseudo_labels, load_pseudo_labels, save_pseudo_labels,
};
use crate::train::{train_stage1, train_stage2, Stage, TrainSchedule};
use crate::TrainFloat;

#[derive(Parser)]
#[command(
    name = "darcnn",
    version,
    about = "Two-stage unsupervised domain adaptation for class-agnostic instance segmentation"
)]
struct Cli {
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file (sections: pipeline, model, train, stage2).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset generation and preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Stage-1 / stage-2 training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Generate pseudo-labels from a stage-1 checkpoint.
    Pseudo(PseudoArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the five-row ablation and assert the ordinal trend.
    Reproduce(ReproduceArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic dataset (train/val/test splits) from a domain spec.
    Synth(SynthArgs),
    /// Randomly crop patches from every split of a dataset.
    Crop(CropArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Domain spec file (versioned key-value format).
    #[arg(long)]
    spec: PathBuf,
    /// Train-split sample count; val/test sizes derive from it.
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    /// Dataset root containing split directories.
    #[arg(long = "in")]
    input: PathBuf,
    /// Square patch side.
    #[arg(long)]
    size: usize,
    /// Total patches per split (distributed over images).
    #[arg(long)]
    count: usize,
    /// Invert pixel intensities after cropping.
    #[arg(long)]
    invert: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Joint source/target feature adaptation.
    Stage1(Stage1Args),
    /// Target-branch refinement on pseudo-labels.
    Stage2(Stage2Args),
}

#[derive(Args)]
struct Stage1Args {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from a source-pretrained checkpoint (copies the source branch
    /// onto the target branch).
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    /// Accept a checkpoint whose config hash differs from the current config.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Stage2Args {
    /// Completed stage-1 checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Pseudo-label directory written by `darcnn pseudo`.
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PseudoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Target dataset root (labels are generated for the train split).
    #[arg(long)]
    data: PathBuf,
    /// Confidence threshold; defaults to the config value.
    #[arg(long)]
    z: Option<f64>,
    /// Augmentation placement: train_augmented | label_augmented | both.
    #[arg(long)]
    aug_mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root containing split directories.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "val")]
    split: String,
    /// Comma-separated metric list (aji, pixf1, objf1, maxiou).
    #[arg(long, default_value = "aji,pixf1,objf1")]
    metrics: String,
    /// Report JSON output path.
    #[arg(long)]
    report: PathBuf,
    /// Inference branch: target | source.
    #[arg(long, default_value = "target")]
    branch: String,
    /// Prediction confidence floor.
    #[arg(long, default_value_t = 0.5)]
    conf: f64,
    /// Dataset-pooled aggregation instead of per-image means.
    #[arg(long)]
    pooled: bool,
    /// Emit SVG plots (metric bars; loss curve when the checkpoint sits in a
    /// run directory).
    #[arg(long)]
    plots: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, default_value = "reproduce_out")]
    out: PathBuf,
    /// Number of seeds to sweep.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Tiny smoke-scale run.
    #[arg(long)]
    quick: bool,
}

/// Entry point; returns the process exit code (0 iff no stage failed).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    cfg.ensure_valid()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Data(DataCommand::Synth(args)) => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let spec = SyntheticDomainSpec::load(&args.spec)?;
            generate_dataset(
                &spec,
                SplitCounts::from_train(args.count),
                cfg.pipeline.seed,
                &args.out,
            )?;
            cfg.save(&args.out.join("config.toml"))?;
            println!("wrote synthetic dataset to {}", args.out.display());
            Ok(0)
        }
        Command::Data(DataCommand::Crop(args)) => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            cfg.save(&args.out.join("config.toml"))?;
            for split in [Split::Train, Split::Val, Split::Test] {
                let split_dir = args.input.join(split.to_string());
                if !split_dir.is_dir() {
                    continue;
                }
                let samples = read_split(&split_dir, split)?;
                if samples.is_empty() {
                    continue;
                }
                let per_image = args.count.div_ceil(samples.len());
                let mut patches = Vec::new();
                for s in &samples {
                    for p in crop_patches(s, (args.size, args.size), per_image, cfg.pipeline.seed)?
                    {
                        if patches.len() < args.count {
                            patches.push(if args.invert { invert_intensity(&p) } else { p });
                        }
                    }
                }
                write_split(&args.out.join(split.to_string()), &patches)?;
                println!("{split}: wrote {} patches", patches.len());
            }
            Ok(0)
        }
        Command::Train(TrainCommand::Stage1(args)) => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let source = read_split(&args.source.join("train"), Split::Train)?;
            let target = read_split(&args.target.join("train"), Split::Train)?;
            let mut state = crate::model::ModelState::<TrainFloat>::new(&cfg)?;
            if let Some(init) = &args.init_ckpt {
                let loaded = load_checkpoint::<TrainFloat>(init, Some(&cfg.hash()), args.force)?;
                state = loaded.state;
                state.model.copy_source_branch_to_target();
                state.step = 0;
                state.config_hash = cfg.hash();
            }
            let schedule = TrainSchedule::from_config(&cfg, Stage::Stage1);
            let out = train_stage1(state, &source, &target, &schedule, &cfg, &args.out, None)?;
            println!(
                "stage1 done: {} steps, chosen checkpoint {}",
                out.reports.len(),
                out.chosen.path.display()
            );
            Ok(0)
        }
        Command::Train(TrainCommand::Stage2(args)) => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let loaded = load_checkpoint::<TrainFloat>(&args.ckpt, Some(&cfg.hash()), args.force)?;
            let (labels, images) = load_pseudo_labels(&args.pseudo)?;
            let stage2_data = build_stage2_dataset(
                &labels,
                &images,
                &labels.provenance.augmentation,
                labels.provenance.aug_mode,
                labels.provenance.generation_seed,
            )?;
            let mut state = loaded.state;
            state.step = 0;
            let schedule = TrainSchedule::from_config(&cfg, Stage::Stage2);
            let out = train_stage2(state, &stage2_data, &schedule, &cfg, &args.out, None)?;
            println!(
                "stage2 done: {} steps, chosen checkpoint {}",
                out.reports.len(),
                out.chosen.path.display()
            );
            Ok(0)
        }
        Command::Pseudo(args) => {
            let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
            // the checkpoint identity is the config as trained; the z and
            // aug-mode flags tune label generation, not the model
            let base_hash = cfg.hash();
            if let Some(z) = args.z {
                cfg.pipeline.z_pseudo_conf = z;
            }
            if let Some(mode) = &args.aug_mode {
                cfg.stage2.aug_mode = mode.parse::<AugPlacement>()?;
            }
            cfg.ensure_valid()?;
            let loaded = load_checkpoint::<TrainFloat>(&args.ckpt, Some(&base_hash), args.force)?;
            let images = read_split(&args.data.join("train"), Split::Train)?;
            let labels = generate_pseudo_labels(
                &loaded.state,
                &images,
                &cfg,
                cfg.pipeline.seed,
                &file_hash(&args.ckpt)?,
            )?;
            save_pseudo_labels(&args.out, &labels, &images)?;
            cfg.save(&args.out.join("config.toml"))?;
            println!(
                "wrote {} pseudo-labels over {} images to {}",
                labels.total_instances(),
                images.len(),
                args.out.display()
            );
            Ok(0)
        }
        Command::Eval(args) => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let loaded = load_checkpoint::<TrainFloat>(&args.ckpt, Some(&cfg.hash()), args.force)?;
            let split: Split = args.split.parse()?;
            let samples = read_split(&args.data.join(split.to_string()), split)?;
            let branch = match args.branch.as_str() {
                "target" => Domain::Target,
                "source" => Domain::Source,
                other => return Err(Error::Format(format!("unknown branch `{other}`"))),
            };
            let mode = EvalMode {
                aggregate: if args.pooled {
                    Aggregate::Pooled
                } else {
                    Aggregate::PerImageMean
                },
                branch,
                conf_floor: args.conf,
                object_f1_iou: crate::eval::DEFAULT_OBJECT_F1_IOU,
            };
            let result = crate::eval::evaluate_samples(&loaded.state, &samples, &cfg, mode)?;
            let wanted: Vec<&str> = args.metrics.split(',').map(|s| s.trim()).collect();
            for m in &wanted {
                let line = match *m {
                    "aji" => format!("aji\t{:.6}", result.aji),
                    "pixf1" => format!("pixel_f1\t{:.6}", result.pixel_f1),
                    "objf1" => format!("object_f1\t{:.6}", result.object_f1),
                    "maxiou" => format!(
                        "max_iou\t{}",
                        result
                            .max_iou
                            .map(|v| format!("{v:.6}"))
                            .unwrap_or_else(|| "undefined (multi-instance images)".into())
                    ),
                    other => return Err(Error::Format(format!("unknown metric `{other}`"))),
                };
                println!("{line}");
            }
            let doc = report::EvalReportDoc {
                schema: report::REPORT_SCHEMA.into(),
                kind: "eval".into(),
                checkpoint: args.ckpt.display().to_string(),
                data: args.data.display().to_string(),
                split: split.to_string(),
                metrics: report::MetricsDoc::from_result(&result),
                result,
            };
            report::write_json(&args.report, &doc)?;
            if let Some(parent) = args.report.parent() {
                if !parent.as_os_str().is_empty() {
                    cfg.save(&parent.join("config.toml"))?;
                }
            }
            if let Some(plot_dir) = &args.plots {
                let bars = plots::metric_bars_svg(&[
                    ("aji".into(), doc.metrics.aji),
                    ("pixel_f1".into(), doc.metrics.pixel_f1),
                    ("object_f1".into(), doc.metrics.object_f1),
                ]);
                plots::write_svg(&plot_dir.join("metrics.svg"), &bars)?;
                if let Some(run_dir) = args.ckpt.parent().and_then(|p| p.parent()) {
                    let log = run_dir.join(crate::train::rundir::LOSS_LOG);
                    if log.exists() {
                        let reports = crate::train::read_loss_log(&log)?;
                        plots::write_svg(
                            &plot_dir.join("loss_curve.svg"),
                            &plots::loss_curve_svg(&reports),
                        )?;
                    }
                }
            }
            println!("report written to {}", args.report.display());
            Ok(0)
        }
        Command::Reproduce(args) => {
            let seeds: Vec<u64> = {
                let base = cli.seed.unwrap_or(0);
                (0..args.seeds as u64).map(|i| base + i).collect()
            };
            let doc = reproduce::reproduce_trends(&args.out, seeds, args.quick)?;
            Ok(if doc.passed { 0 } else { 1 })
        }
    }
}
