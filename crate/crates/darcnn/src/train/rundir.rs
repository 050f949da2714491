//! Run directory layout: resolved config copy (written before any compute),
//! `checkpoints/`, a streaming loss log, and a chosen-checkpoint marker.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::core::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::train::plateau::ChosenCheckpoint;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const CHOSEN_MARKER: &str = "chosen_checkpoint.txt";

pub struct RunDir {
    root: PathBuf,
    log: std::fs::File,
}

impl RunDir {
    /// Creates the layout and writes the exact resolved config first.
    pub fn create(root: &Path, cfg: &PipelineConfig) -> Result<RunDir> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        cfg.save(&root.join("config.toml"))?;
        let log_path = root.join(LOSS_LOG);
        let fresh = !log_path.exists();
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if fresh {
            writeln!(log, "{}", LossReport::LOG_HEADER)?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            log,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join(format!("checkpoints/step_{step:07}.ckpt"))
    }

    pub fn append_loss(&mut self, report: &LossReport) -> Result<()> {
        writeln!(self.log, "{}", report.log_line())?;
        Ok(())
    }

    pub fn write_chosen(&self, chosen: &ChosenCheckpoint) -> Result<()> {
        let text = format!(
            "step\t{}\npath\t{}\nplateau_step\t{}\n",
            chosen.step,
            chosen.path.display(),
            chosen
                .plateau_step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".into()),
        );
        std::fs::write(self.root.join(CHOSEN_MARKER), text)?;
        Ok(())
    }
}

/// Reads a loss log back into reports.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        out.push(LossReport::parse_log_line(line)?);
    }
    Ok(out)
}

/// Path recorded by the chosen-checkpoint marker.
pub fn read_chosen_path(run_dir: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(run_dir.join(CHOSEN_MARKER))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("path\t") {
            return Ok(PathBuf::from(rest));
        }
    }
    Err(Error::Format(format!(
        "no path entry in {CHOSEN_MARKER} under {run_dir:?}"
    )))
}
