//! Synthetic dual-domain generation, corpus preparation (patch cropping and
//! intensity inversion), and the photometric augmentation pipeline.

mod augment;
mod patch;
mod synthetic;

pub use augment::{augment, invert_intensity, AugmentationParams};
pub use patch::crop_patches;
pub use synthetic::{
    generate_dataset, generate_synthetic, Background, DomainKind, SplitCounts, SyntheticDomainSpec,
};
