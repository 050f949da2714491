//! Shared domain types, geometry and mask primitives, configuration, and the
//! on-disk dataset format consumed by every other module.

pub mod config;
pub mod dataset;
pub mod geometry;
pub mod guard;
pub mod maskops;
pub mod rng;
pub mod types;

pub use config::{validate_config, PipelineConfig};
pub use geometry::{tight_box, PixelBox, RectF};
pub use guard::{AccessContext, AnnotationPolicy};
pub use types::{Domain, ImageSample, InstanceAnnotation, InstancePrediction, RegionProposal, Split};
