//! Two-stage training orchestration: the joint source/target stage-1 loop,
//! the frozen-source stage-2 loop, checkpointing on the epoch-fraction grid,
//! and plateau-based stopping with rollback.

pub mod optimizer;
pub mod plateau;
pub mod rundir;
mod step;

pub use plateau::{detect_plateau, stop_on_plateau, ChosenCheckpoint};
pub use rundir::{read_chosen_path, read_loss_log, RunDir};
pub use step::{stage1_step, stage2_step};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::core::config::{OptimizerKind, PipelineConfig};
use crate::core::rng::substream_indexed;
use crate::core::types::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::checkpoint::{save_checkpoint, OptimizerSnapshot};
use crate::model::{ModelState, GROUPS};
use crate::scalar::Scalar;
use optimizer::Optimizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Resolved orchestration parameters for one training run. In stage 1 every
/// step consumes one source batch and one target batch; epochs are measured
/// as passes over the target training split.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub max_epochs: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub checkpoint_interval_epochs: f64,
    pub plateau_window_epochs: f64,
    pub plateau_epsilon: f64,
}

impl TrainSchedule {
    pub fn from_config(cfg: &PipelineConfig, stage: Stage) -> Self {
        TrainSchedule {
            stage,
            max_epochs: cfg.train.max_epochs,
            batch_source: cfg.train.batch_source,
            batch_target: cfg.train.batch_target,
            optimizer: cfg.train.optimizer,
            learning_rate: cfg.pipeline.learning_rate,
            checkpoint_interval_epochs: cfg.pipeline.checkpoint_interval_epochs,
            plateau_window_epochs: cfg.pipeline.plateau_window_epochs,
            plateau_epsilon: cfg.train.plateau_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::Config(vec!["batch sizes must be at least 1".into()]));
        }
        if self.max_epochs <= 0.0 {
            return Err(Error::Config(vec!["max_epochs must be positive".into()]));
        }
        Ok(())
    }
}

pub struct TrainOutcome<F: Scalar> {
    pub state: ModelState<F>,
    pub reports: Vec<LossReport>,
    pub chosen: ChosenCheckpoint,
}

/// Element `pos` of the infinite concatenation of per-epoch shuffles of
/// `0..len`; deterministic in (seed, name, pos).
fn planned_index(seed: u64, name: &str, len: usize, pos: u64) -> usize {
    let epoch = pos / len as u64;
    let within = (pos % len as u64) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream_indexed(seed, name, epoch));
    order[within]
}

/// Batch of dataset indices for a 1-based step.
pub fn batch_indices(seed: u64, name: &str, len: usize, batch: usize, step: u64) -> Vec<usize> {
    let start = (step - 1) * batch as u64;
    (0..batch as u64)
        .map(|i| planned_index(seed, name, len, start + i))
        .collect()
}

pub fn steps_per_epoch(target_len: usize, batch_target: usize) -> usize {
    target_len.div_ceil(batch_target).max(1)
}

struct LoopConfig<'a> {
    schedule: &'a TrainSchedule,
    cfg: &'a PipelineConfig,
    spe: usize,
    run_path: &'a Path,
    frozen_hashes: BTreeMap<String, String>,
    resume_optimizer: Option<OptimizerSnapshot>,
}

fn verify_frozen<F: Scalar>(
    state: &ModelState<F>,
    hashes: &BTreeMap<String, String>,
) -> Result<()> {
    for (group, expected) in hashes {
        let now = state.group_hash(group);
        if &now != expected {
            return Err(Error::FreezeViolation(format!(
                "frozen group `{group}` changed during training"
            )));
        }
    }
    Ok(())
}

fn param_shapes<F: Scalar>(state: &ModelState<F>) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    for group in GROUPS {
        state.model.visit_group(group, &mut |name, value| {
            shapes.insert(format!("{group}/{name}"), value.shape().to_vec());
        });
    }
    shapes
}

fn run_loop<F: Scalar>(
    mut state: ModelState<F>,
    lc: LoopConfig<'_>,
    mut step_fn: impl FnMut(&mut ModelState<F>, &mut Optimizer<F>, u64) -> Result<LossReport>,
) -> Result<TrainOutcome<F>> {
    lc.schedule.validate()?;
    let mut run = RunDir::create(lc.run_path, lc.cfg)?;
    let max_steps = (lc.schedule.max_epochs * lc.spe as f64).ceil().max(1.0) as u64;
    let ckpt_every =
        ((lc.schedule.checkpoint_interval_epochs * lc.spe as f64).round() as u64).max(1);

    let mut opt = Optimizer::new(lc.schedule.optimizer, lc.schedule.learning_rate);
    if let Some(snap) = &lc.resume_optimizer {
        opt.restore(snap, &param_shapes(&state));
    }

    let mut reports: Vec<LossReport> = Vec::new();
    let mut totals: Vec<f64> = Vec::new();
    let mut checkpoints: Vec<(u64, std::path::PathBuf)> = Vec::new();
    let start_step = state.step;

    for step in (start_step + 1)..=max_steps.max(start_step) {
        let report = step_fn(&mut state, &mut opt, step)?;
        run.append_loss(&report)?;
        totals.push(report.total);
        reports.push(report);
        state.step = step;

        if step % ckpt_every == 0 || step == max_steps {
            verify_frozen(&state, &lc.frozen_hashes)?;
            let path = run.checkpoint_path(step);
            save_checkpoint(&path, &state, lc.cfg, Some(&opt.snapshot()))?;
            checkpoints.push((step, path));

            if checkpoints.len() >= 2
                && detect_plateau(
                    &totals,
                    lc.schedule.plateau_window_epochs,
                    lc.spe,
                    lc.schedule.plateau_epsilon,
                )
                .is_some()
            {
                let chosen = stop_on_plateau(
                    &totals,
                    lc.schedule.plateau_window_epochs,
                    lc.spe,
                    lc.schedule.plateau_epsilon,
                    &checkpoints,
                )?;
                run.write_chosen(&chosen)?;
                let loaded = crate::model::checkpoint::load_checkpoint::<F>(
                    &chosen.path,
                    Some(&lc.cfg.hash()),
                    false,
                )?;
                return Ok(TrainOutcome {
                    state: loaded.state,
                    reports,
                    chosen,
                });
            }
        }
    }

    if checkpoints.is_empty() {
        verify_frozen(&state, &lc.frozen_hashes)?;
        let path = run.checkpoint_path(state.step);
        save_checkpoint(&path, &state, lc.cfg, Some(&opt.snapshot()))?;
        checkpoints.push((state.step, path));
    }
    let (step, path) = checkpoints.last().unwrap().clone();
    let chosen = ChosenCheckpoint {
        step,
        path,
        plateau_step: None,
    };
    run.write_chosen(&chosen)?;
    Ok(TrainOutcome {
        state,
        reports,
        chosen,
    })
}

/// Stage-1 training: per step, one labelled source batch and one unlabelled
/// target batch drive the four adaptation losses. Target annotations are
/// never read (the guard makes an attempt an error). Training resumes from
/// `state.step` when a checkpointed state is passed in.
pub fn train_stage1<F: Scalar>(
    mut state: ModelState<F>,
    source_train: &[ImageSample],
    target_train: &[ImageSample],
    schedule: &TrainSchedule,
    cfg: &PipelineConfig,
    run_path: &Path,
    resume_optimizer: Option<OptimizerSnapshot>,
) -> Result<TrainOutcome<F>> {
    if source_train.is_empty() || target_train.is_empty() {
        return Err(Error::EmptyBatch("train_stage1 needs data".into()));
    }
    for s in source_train {
        if s.domain != Domain::Source {
            return Err(Error::Consistency(format!(
                "stage-1 source split contains a {} sample",
                s.domain
            )));
        }
    }
    state.set_stage1_trainability();
    let spe = steps_per_epoch(target_train.len(), schedule.batch_target);
    let seed = cfg.pipeline.seed;
    let (bs, bt) = (schedule.batch_source, schedule.batch_target);
    run_loop(
        state,
        LoopConfig {
            schedule,
            cfg,
            spe,
            run_path,
            frozen_hashes: BTreeMap::new(),
            resume_optimizer,
        },
        |state, opt, step| {
            let src_idx = batch_indices(
                seed,
                "train/stage1/source_order",
                source_train.len(),
                bs,
                step,
            );
            let tgt_idx = batch_indices(
                seed,
                "train/stage1/target_order",
                target_train.len(),
                bt,
                step,
            );
            let src: Vec<&ImageSample> = src_idx.iter().map(|&i| &source_train[i]).collect();
            let tgt: Vec<&ImageSample> = tgt_idx.iter().map(|&i| &target_train[i]).collect();
            stage1_step(state, opt, &src, &tgt, spe, cfg, step)
        },
    )
}

/// Stage-2 training on a pseudo-labelled dataset: only the target branch
/// trains; frozen groups are verified bit-identical at every checkpoint.
pub fn train_stage2<F: Scalar>(
    mut state: ModelState<F>,
    stage2_data: &[ImageSample],
    schedule: &TrainSchedule,
    cfg: &PipelineConfig,
    run_path: &Path,
    resume_optimizer: Option<OptimizerSnapshot>,
) -> Result<TrainOutcome<F>> {
    if stage2_data.is_empty() {
        return Err(Error::EmptyBatch("train_stage2 needs data".into()));
    }
    for s in stage2_data {
        if !s.is_pseudo_labelled() {
            return Err(Error::Consistency(format!(
                "stage-2 sample `{}` is not pseudo-labelled; build the dataset first",
                s.id
            )));
        }
    }
    state.set_stage2_trainability(cfg.stage2.freeze_shared);
    let frozen_hashes: BTreeMap<String, String> = state
        .frozen_groups()
        .into_iter()
        .map(|g| {
            let h = state.group_hash(&g);
            (g, h)
        })
        .collect();
    let spe = steps_per_epoch(stage2_data.len(), schedule.batch_target);
    let seed = cfg.pipeline.seed;
    let bt = schedule.batch_target;
    run_loop(
        state,
        LoopConfig {
            schedule,
            cfg,
            spe,
            run_path,
            frozen_hashes,
            resume_optimizer,
        },
        |state, opt, step| {
            let idx = batch_indices(seed, "train/stage2/order", stage2_data.len(), bt, step);
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &stage2_data[i]).collect();
            stage2_step(state, opt, &batch, cfg, step)
        },
    )
}
