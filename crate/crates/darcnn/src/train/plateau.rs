//! Plateau detection and checkpoint rollback.
//!
//! The stopping rule in use: compare the moving average of the total loss
//! over a window `W` against the moving average one window earlier; when the
//! relative improvement first drops below epsilon, the flat stretch began at
//! `t - 2W + 1`, and the chosen checkpoint is the one nearest to one window
//! before that (the rollback reproduces "stop before the plateau" with the
//! information actually available).

use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChosenCheckpoint {
    pub step: u64,
    pub path: PathBuf,
    pub plateau_step: Option<u64>,
}

/// Moving average of `totals[t-w..t]` (1-based step `t`).
fn moving_average(totals: &[f64], t: usize, w: usize) -> f64 {
    totals[t - w..t].iter().sum::<f64>() / w as f64
}

/// Step (1-based) where the flat stretch begins, if any.
pub fn detect_plateau(
    totals: &[f64],
    window_epochs: f64,
    steps_per_epoch: usize,
    epsilon: f64,
) -> Option<u64> {
    let w = ((window_epochs * steps_per_epoch as f64).round() as usize).max(1);
    let n = totals.len();
    for t in (2 * w)..=n {
        let prev = moving_average(totals, t - w, w);
        let now = moving_average(totals, t, w);
        let rel = (prev - now) / prev.abs().max(1e-12);
        if rel < epsilon {
            return Some((t - 2 * w + 1) as u64);
        }
    }
    None
}

/// Chooses the checkpoint per the stopping rule: on a detected plateau, the
/// checkpoint nearest to `plateau_begin - W`; otherwise the last checkpoint.
/// `totals[i]` is the total loss at step `i + 1`; checkpoints are
/// (step, path), ascending.
pub fn stop_on_plateau(
    totals: &[f64],
    window_epochs: f64,
    steps_per_epoch: usize,
    epsilon: f64,
    checkpoints: &[(u64, PathBuf)],
) -> Result<ChosenCheckpoint> {
    if checkpoints.len() < 2 {
        return Err(Error::Format(format!(
            "plateau rule needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let w = ((window_epochs * steps_per_epoch as f64).round() as usize).max(1) as i64;
    match detect_plateau(totals, window_epochs, steps_per_epoch, epsilon) {
        None => {
            let (step, path) = checkpoints.last().unwrap().clone();
            Ok(ChosenCheckpoint {
                step,
                path,
                plateau_step: None,
            })
        }
        Some(begin) => {
            let target = begin as i64 - w;
            let chosen = checkpoints
                .iter()
                .min_by_key(|(s, _)| ((*s as i64 - target).abs(), *s))
                .unwrap()
                .clone();
            Ok(ChosenCheckpoint {
                step: chosen.0,
                path: chosen.1,
                plateau_step: Some(begin),
            })
        }
    }
}
