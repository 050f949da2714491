//! Pipeline configuration: the versioned key-value config format with
//! sections, environment-variable overrides (`DARCNN_<SECTION>_<KEY>`), and
//! invariant validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Full resolved configuration. The `[pipeline]` section carries the loss
/// weights, thresholds, and schedule constants; `[model]`, `[train]`, and
/// `[stage2]` carry the architecture and orchestration knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub pipeline: PipelineParams,
    #[serde(default)]
    pub model: BackboneSpec,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub stage2: Stage2Params,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            pipeline: PipelineParams::default(),
            model: BackboneSpec::default(),
            train: TrainParams::default(),
            stage2: Stage2Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineParams {
    /// Final weight of the similarity loss after warmup.
    pub alpha_target: f64,
    /// Initial similarity weight; smaller for larger domain shifts.
    pub alpha_init: f64,
    /// Warmup length in epochs (fractions of one pass over the target train
    /// split, measured in optimizer steps).
    pub warmup_epochs: f64,
    /// Weight of the orthogonality difference loss.
    pub beta: f64,
    /// Weight of the background consistency loss.
    pub gamma: f64,
    /// Region confidence threshold `k` for the self-supervised loss.
    pub k_region_conf: f64,
    /// Mask probability threshold `i` below which a position is background.
    pub i_background: f64,
    /// Confidence threshold `z` for pseudo-label retention.
    pub z_pseudo_conf: f64,
    pub learning_rate: f64,
    /// Maximum detections returned per image at inference.
    pub max_detections: usize,
    pub blur_sigma: f64,
    pub contrast_scale: f64,
    /// Brightness delta in raw pixel units on the [0,255] scale.
    pub brightness_delta: f64,
    pub plateau_window_epochs: f64,
    pub checkpoint_interval_epochs: f64,
    /// Feature depth of the shared and private encoders; must be even so
    /// half-depth orthogonality is unambiguous.
    pub feature_depth: usize,
    /// Master seed; every module derives a named substream from it.
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            alpha_target: 1.0,
            alpha_init: 0.0,
            warmup_epochs: 0.1,
            beta: 1.0,
            gamma: 0.1,
            k_region_conf: 0.5,
            i_background: 0.5,
            z_pseudo_conf: 0.5,
            learning_rate: 1e-4,
            max_detections: 100,
            blur_sigma: 1.0,
            contrast_scale: 1.5,
            brightness_delta: -150.0,
            plateau_window_epochs: 0.1,
            checkpoint_interval_epochs: 0.1,
            feature_depth: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu,
    /// Smooth rectifier; useful where finite-difference checks need a
    /// kink-free forward pass.
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Instance,
}

/// Desk-scale backbone description. Each stage is a stride-2 convolution, so
/// the downsampling factor must equal `2^stage_widths.len()`; the final stage
/// width must equal the configured feature depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub stage_widths: Vec<usize>,
    pub downsample: usize,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            stage_widths: vec![16, 32],
            downsample: 4,
            nonlinearity: Nonlinearity::Relu,
            normalization: Normalization::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdLevel {
    /// One projected-and-flattened vector per image.
    Batch,
    /// Sampled spatial positions of the projected map.
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub max_epochs: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub optimizer: OptimizerKind,
    /// Relative moving-average improvement below which the loss has plateaued.
    pub plateau_epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Maximum qualifying regions per image for the background loss.
    pub bg_max_regions: usize,
    /// Maximum sampled regions per image for the supervised second-stage loss.
    pub regions_per_image: usize,
    /// Sampled anchors per image for the objectness loss.
    pub anchors_per_image: usize,
    pub mmd_level: MmdLevel,
    /// Positions sampled per domain when `mmd_level = position`.
    pub mmd_position_samples: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_epochs: 3.0,
            batch_source: 4,
            batch_target: 4,
            optimizer: OptimizerKind::Adam,
            plateau_epsilon: 1e-3,
            grad_clip: 10.0,
            bg_max_regions: 8,
            regions_per_image: 12,
            anchors_per_image: 192,
            mmd_level: MmdLevel::Batch,
            mmd_position_samples: 128,
        }
    }
}

/// Where photometric augmentation is applied in the pseudo-label stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugPlacement {
    /// Labels from clean images; training consumes augmented copies.
    TrainAugmented,
    /// Labels generated on augmented images; training on the same images.
    LabelAugmented,
    /// Augmentation at both label generation and training.
    Both,
}

impl std::str::FromStr for AugPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_augmented" => Ok(AugPlacement::TrainAugmented),
            "label_augmented" => Ok(AugPlacement::LabelAugmented),
            "both" => Ok(AugPlacement::Both),
            other => Err(Error::Format(format!("unknown aug mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Params {
    /// Freeze the shared encoder and region proposer in stage 2 instead of
    /// training them with the target branch.
    pub freeze_shared: bool,
    /// Keep the gamma-weighted background consistency loss during stage 2.
    pub keep_target_loss: bool,
    pub aug_mode: AugPlacement,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Stage2Params {
            freeze_shared: false,
            keep_target_loss: false,
            aug_mode: AugPlacement::TrainAugmented,
        }
    }
}

/// Collects invariant violations; empty iff the config is valid. Messages
/// name the offending field.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<String> {
    let mut v = Vec::new();
    let p = &cfg.pipeline;
    for (name, value) in [
        ("k_region_conf", p.k_region_conf),
        ("i_background", p.i_background),
        ("z_pseudo_conf", p.z_pseudo_conf),
    ] {
        if !(0.0..=1.0).contains(&value) {
            v.push(format!("{name} must be in [0,1]"));
        }
    }
    if p.warmup_epochs <= 0.0 {
        v.push("warmup_epochs must be positive".into());
    }
    if p.feature_depth == 0 || p.feature_depth % 2 != 0 {
        v.push("feature_depth must be even".into());
    }
    if p.max_detections == 0 {
        v.push("max_detections must be positive".into());
    }
    if p.learning_rate <= 0.0 {
        v.push("learning_rate must be positive".into());
    }
    if p.blur_sigma < 0.0 {
        v.push("blur_sigma must be nonnegative".into());
    }
    if p.contrast_scale <= 0.0 {
        v.push("contrast_scale must be positive".into());
    }
    if p.plateau_window_epochs <= 0.0 {
        v.push("plateau_window_epochs must be positive".into());
    }
    if p.checkpoint_interval_epochs <= 0.0 {
        v.push("checkpoint_interval_epochs must be positive".into());
    }

    let m = &cfg.model;
    if m.stage_widths.is_empty() || m.stage_widths.iter().any(|&w| w == 0) {
        v.push("stage_widths must be nonempty and positive".into());
    } else {
        if *m.stage_widths.last().unwrap() != p.feature_depth {
            v.push("stage_widths must end at feature_depth".into());
        }
        if m.downsample != 1usize << m.stage_widths.len() {
            v.push("downsample must equal 2^len(stage_widths)".into());
        }
    }
    if !m.downsample.is_power_of_two() {
        v.push("downsample must be a power of 2".into());
    }

    let t = &cfg.train;
    if t.batch_source == 0 || t.batch_target == 0 {
        v.push("batch sizes must be at least 1".into());
    }
    if t.max_epochs <= 0.0 {
        v.push("max_epochs must be positive".into());
    }
    if t.plateau_epsilon <= 0.0 {
        v.push("plateau_epsilon must be positive".into());
    }
    if t.bg_max_regions == 0 {
        v.push("bg_max_regions must be positive".into());
    }
    if t.regions_per_image == 0 {
        v.push("regions_per_image must be positive".into());
    }
    if t.mmd_position_samples == 0 {
        v.push("mmd_position_samples must be positive".into());
    }
    v
}

impl PipelineConfig {
    /// Loads a config file, applies `DARCNN_<SECTION>_<KEY>` environment
    /// overrides, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Format(format!("config parse error: {e}")))?;
        apply_env_overrides(&mut table, |k| std::env::var(k).ok())?;
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Format(format!("config field error: {e}")))?;
        cfg.ensure_valid()?;
        Ok(cfg)
    }

    /// Parses exactly the given text, without environment overrides; used for
    /// configs embedded in checkpoints, whose identity must not drift.
    pub fn parse_exact(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)
            .map_err(|e| Error::Format(format!("config parse error: {e}")))?;
        cfg.ensure_valid()?;
        Ok(cfg)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_config(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }

    /// Canonical serialized form; the exact text written into run
    /// directories and hashed into checkpoints.
    pub fn canonical_text(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex_string(&digest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.canonical_text())?;
        Ok(())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Replaces `section.key` values with parsed `DARCNN_<SECTION>_<KEY>`
/// environment values, keeping the original TOML type.
fn apply_env_overrides(
    root: &mut toml::Table,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<()> {
    for (section, entry) in root.iter_mut() {
        let Some(table) = entry.as_table_mut() else {
            continue;
        };
        let keys: Vec<String> = table.keys().cloned().collect();
        for key in keys {
            let env_key = format!(
                "DARCNN_{}_{}",
                section.to_uppercase(),
                key.to_uppercase()
            );
            if let Some(raw) = lookup(&env_key) {
                let parsed: toml::Value = format!("x = {raw}")
                    .parse::<toml::Table>()
                    .ok()
                    .and_then(|mut t| t.remove("x"))
                    .or_else(|| {
                        // bare strings may arrive unquoted
                        format!("x = {raw:?}")
                            .parse::<toml::Table>()
                            .ok()
                            .and_then(|mut t| t.remove("x"))
                    })
                    .ok_or_else(|| {
                        Error::Format(format!("cannot parse env override {env_key}={raw}"))
                    })?;
                table.insert(key, parsed);
            }
        }
    }
    Ok(())
}
