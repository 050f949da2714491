//! Machine-readable report documents, schema `darcnn-report/1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalResult;

pub const REPORT_SCHEMA: &str = "darcnn-report/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportDoc {
    pub schema: String,
    pub kind: String,
    pub checkpoint: String,
    pub data: String,
    pub split: String,
    pub metrics: MetricsDoc,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub aji: f64,
    pub pixel_f1: f64,
    pub object_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iou: Option<f64>,
}

impl MetricsDoc {
    pub fn from_result(r: &EvalResult) -> Self {
        MetricsDoc {
            aji: r.aji,
            pixel_f1: r.pixel_f1,
            object_f1: r.object_f1,
            max_iou: r.max_iou,
        }
    }
}

/// One ablation row of a plan or reproduce report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRow {
    pub name: String,
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsDoc>,
    pub run_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendPair {
    pub description: String,
    pub holds: bool,
    pub required: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub pairs: Vec<TrendPair>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReportDoc {
    pub schema: String,
    pub kind: String,
    pub rows: Vec<PlanRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub verdicts: Vec<SeedVerdict>,
    pub passed: bool,
}

impl PlanReportDoc {
    pub fn markdown(&self) -> String {
        let mut md = String::from("| row | seed | AJI | Pixel-F1 | Object-F1 | status |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let (aji, pf1, of1) = r
                .metrics
                .as_ref()
                .map(|m| {
                    (
                        format!("{:.4}", m.aji),
                        format!("{:.4}", m.pixel_f1),
                        format!("{:.4}", m.object_f1),
                    )
                })
                .unwrap_or_else(|| ("-".into(), "-".into(), "-".into()));
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.name, r.seed, aji, pf1, of1, r.status
            ));
        }
        if !self.verdicts.is_empty() {
            md.push('\n');
            for v in &self.verdicts {
                md.push_str(&format!(
                    "- seed {}: {}\n",
                    v.seed,
                    if v.passed { "PASS" } else { "FAIL" }
                ));
                for p in &v.pairs {
                    md.push_str(&format!(
                        "  - [{}] {} {}\n",
                        if p.holds { "ok" } else { "violated" },
                        p.description,
                        if p.required { "" } else { "(informational)" }
                    ));
                }
            }
            md.push_str(&format!(
                "\noverall: {}\n",
                if self.passed { "PASS" } else { "FAIL" }
            ));
        }
        md
    }
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(doc)?)?;
    Ok(())
}
