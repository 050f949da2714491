//! The four loss terms of the adaptation objective and the warmup scheduler.
//!
//! `total = alpha * L_sim + beta * L_diff + gamma * L_target + L_source`,
//! with `alpha` ramped linearly from its initial value over the configured
//! warmup fraction of an epoch.

mod background;
mod difference;
mod mmd;
mod supervised;

pub use background::{
    background_consistency_loss, background_consistency_on_tape, resolve_bg_regions, BgRegion,
};
pub use difference::{difference_loss, difference_loss_on_tape, orthogonality_penalty};
pub use mmd::{mmd_loss, mmd_loss_on_tape, KernelSpec};
pub use supervised::{
    build_detection_targets, source_supervised_loss, supervised_loss_on_tape, DetectionTargets,
    SourceLossBreakdown, SupervisedLossParts,
};

use serde::{Deserialize, Serialize};

use crate::core::config::PipelineConfig;
use crate::error::{Error, Result};

/// Per-term loss values and the scheduled weights at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_sim: f64,
    pub l_diff: f64,
    pub l_target: f64,
    pub l_source: f64,
    pub alpha_now: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossReport {
    /// Line-delimited log header; fields per record are
    /// `step,l_sim,l_diff,l_target,l_source,alpha_now,total`.
    pub const LOG_HEADER: &'static str = "step,l_sim,l_diff,l_target,l_source,alpha_now,total";

    pub fn log_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.l_sim, self.l_diff, self.l_target, self.l_source, self.alpha_now,
            self.total
        )
    }

    pub fn parse_log_line(line: &str) -> Result<LossReport> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!(
                "loss log line has {} fields, expected 7",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
        };
        Ok(LossReport {
            step: f[0]
                .parse()
                .map_err(|e| Error::Format(format!("bad step `{}`: {e}", f[0])))?,
            l_sim: num(f[1])?,
            l_diff: num(f[2])?,
            l_target: num(f[3])?,
            l_source: num(f[4])?,
            alpha_now: num(f[5])?,
            beta: f64::NAN,
            gamma: f64::NAN,
            total: num(f[6])?,
        })
    }
}

/// Linear warmup of the similarity weight: from `alpha_init` at step 0 to
/// `alpha_target` after `warmup_epochs` (fractions of one pass over the
/// target train split, in optimizer steps), then constant.
pub fn warmup_alpha(step: u64, steps_per_epoch: usize, cfg: &PipelineConfig) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::Config(vec![
            "steps_per_epoch must be positive".into()
        ]));
    }
    let p = &cfg.pipeline;
    let warmup_steps = p.warmup_epochs * steps_per_epoch as f64;
    let frac = (step as f64 / warmup_steps).min(1.0);
    Ok(p.alpha_init + (p.alpha_target - p.alpha_init) * frac)
}

/// Combines the four term values under the scheduled weights; any non-finite
/// term is a numerical error naming the term.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    step: u64,
    l_sim: f64,
    l_diff: f64,
    l_target: f64,
    l_source: f64,
    alpha_now: f64,
    beta: f64,
    gamma: f64,
) -> Result<LossReport> {
    for (name, v) in [
        ("l_sim", l_sim),
        ("l_diff", l_diff),
        ("l_target", l_target),
        ("l_source", l_source),
        ("alpha_now", alpha_now),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("value {v}")));
        }
    }
    let total = alpha_now * l_sim + beta * l_diff + gamma * l_target + l_source;
    if !total.is_finite() {
        return Err(Error::numerical("total", format!("value {total}")));
    }
    Ok(LossReport {
        step,
        l_sim,
        l_diff,
        l_target,
        l_source,
        alpha_now,
        beta,
        gamma,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    #[test]
    fn warmup_boundaries_and_midpoint() {
        let cfg = cfg(); // alpha_init 0, target 1, warmup 0.1 epochs
        assert_eq!(warmup_alpha(0, 1000, &cfg).unwrap(), 0.0);
        let mid = warmup_alpha(50, 1000, &cfg).unwrap();
        assert!((mid - 0.5).abs() < 1e-12, "{mid}");
        assert_eq!(warmup_alpha(100, 1000, &cfg).unwrap(), 1.0);
        assert_eq!(warmup_alpha(5000, 1000, &cfg).unwrap(), 1.0);
        assert!(matches!(
            warmup_alpha(1, 0, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn warmup_respects_alpha_init() {
        let mut cfg = cfg();
        cfg.pipeline.alpha_init = 0.2;
        assert_eq!(warmup_alpha(0, 100, &cfg).unwrap(), 0.2);
        let end = warmup_alpha(10, 100, &cfg).unwrap();
        assert!((end - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let r = total_loss(3, 2.0, 3.0, 5.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        assert!((r.total - 6.5).abs() < 1e-12);
        let zero = total_loss(0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(zero.total, 0.0);
        // alpha 0: total independent of l_sim
        let a = total_loss(0, 10.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.1).unwrap();
        let b = total_loss(0, -5.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.1).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn doubling_gamma_doubles_target_contribution() {
        let base = total_loss(0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        let doubled = total_loss(0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0, 0.2).unwrap();
        let without = total_loss(0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        let contrib_base = base.total - without.total;
        let contrib_doubled = doubled.total - without.total;
        assert!((contrib_doubled - 2.0 * contrib_base).abs() < 1e-12);
    }

    #[test]
    fn non_finite_terms_name_the_term() {
        let err = total_loss(0, f64::NAN, 0.0, 0.0, 0.0, 1.0, 1.0, 0.1).unwrap_err();
        match err {
            Error::Numerical { term, .. } => assert_eq!(term, "l_sim"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = total_loss(0, 0.0, f64::INFINITY, 0.0, 0.0, 1.0, 1.0, 0.1).unwrap_err();
        match err {
            Error::Numerical { term, .. } => assert_eq!(term, "l_diff"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn report_log_round_trip() {
        let r = total_loss(17, 0.25, 1.5, 0.125, 2.0, 0.75, 1.0, 0.1).unwrap();
        let line = r.log_line();
        let back = LossReport::parse_log_line(&line).unwrap();
        assert_eq!(back.step, 17);
        assert!((back.total - r.total).abs() < 1e-12);
        assert!((back.alpha_now - 0.75).abs() < 1e-12);
    }

    #[test]
    fn report_invariant_holds_within_tolerance() {
        let r = total_loss(1, 0.3, 0.7, 1.1, 0.9, 0.6, 1.0, 0.1).unwrap();
        let recomputed = r.alpha_now * r.l_sim + r.beta * r.l_diff + r.gamma * r.l_target + r.l_source;
        assert!((r.total - recomputed).abs() < 1e-6);
    }
}
