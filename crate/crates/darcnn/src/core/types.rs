//! Value types shared across the pipeline.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::core::geometry::{tight_box, PixelBox, RectF};
use crate::core::guard::{AccessContext, AnnotationPolicy, GuardedAnnotations};
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Format(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// One ground-truth (or pseudo) instance: a mask, its tight box, and an id
/// unique within the image.
#[derive(Debug, Clone)]
pub struct InstanceAnnotation {
    pub instance_id: u32,
    pub mask: Array2<bool>,
    pub bbox: PixelBox,
}

impl InstanceAnnotation {
    /// Builds the annotation, deriving the tight box from the mask.
    pub fn from_mask(instance_id: u32, mask: Array2<bool>) -> Result<Self> {
        if instance_id == 0 {
            return Err(Error::Format("instance_id must be positive".into()));
        }
        let bbox = tight_box(&mask.view())?;
        Ok(InstanceAnnotation {
            instance_id,
            mask,
            bbox,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

/// An image with an id, a domain tag, a split tag, and optional guarded
/// annotations. Pixels are 8-bit `H x W x C`; normalization to `[0,1]`
/// happens only at the model boundary.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<u8>,
    pub domain: Domain,
    pub split: Split,
    annotations: GuardedAnnotations,
}

impl ImageSample {
    /// Constructs a sample, enforcing the type invariants:
    /// minimum image side, source-train samples must be annotated,
    /// annotation masks match the image grid with distinct positive ids and
    /// tight boxes, and target ground truth becomes eval-only.
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<u8>,
        domain: Domain,
        split: Split,
        annotations: Option<Vec<InstanceAnnotation>>,
    ) -> Result<Self> {
        let policy = match domain {
            Domain::Target => AnnotationPolicy::EvalOnly,
            Domain::Source => AnnotationPolicy::Open,
        };
        Self::build(id, pixels, domain, split, annotations, policy, false)
    }

    /// Constructs a target sample whose annotations are pseudo-labels and are
    /// therefore exempt from the read guard.
    pub fn with_pseudo_annotations(
        id: impl Into<String>,
        pixels: Array3<u8>,
        split: Split,
        annotations: Vec<InstanceAnnotation>,
    ) -> Result<Self> {
        Self::build(
            id,
            pixels,
            Domain::Target,
            split,
            Some(annotations),
            AnnotationPolicy::Open,
            true,
        )
    }

    fn build(
        id: impl Into<String>,
        pixels: Array3<u8>,
        domain: Domain,
        split: Split,
        annotations: Option<Vec<InstanceAnnotation>>,
        policy: AnnotationPolicy,
        pseudo: bool,
    ) -> Result<Self> {
        let id = id.into();
        let (h, w, _c) = pixels.dim();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Size(format!(
                "image `{id}` is {h}x{w}; minimum side is {MIN_IMAGE_SIDE}"
            )));
        }
        if domain == Domain::Source && split == Split::Train && annotations.is_none() {
            return Err(Error::Format(format!(
                "source train sample `{id}` must carry annotations"
            )));
        }
        if let Some(anns) = &annotations {
            let mut ids = BTreeSet::new();
            for a in anns {
                if a.mask.dim() != (h, w) {
                    return Err(Error::Shape(format!(
                        "annotation {} mask {:?} does not match image {}x{}",
                        a.instance_id,
                        a.mask.dim(),
                        h,
                        w
                    )));
                }
                let tight = tight_box(&a.mask.view())?;
                if tight != a.bbox {
                    return Err(Error::Format(format!(
                        "annotation {} box is not tight",
                        a.instance_id
                    )));
                }
                if !ids.insert(a.instance_id) {
                    return Err(Error::Format(format!(
                        "duplicate instance_id {} in `{id}`",
                        a.instance_id
                    )));
                }
            }
        }
        Ok(ImageSample {
            id,
            pixels,
            domain,
            split,
            annotations: GuardedAnnotations::new(annotations, policy, pseudo),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn has_annotations(&self) -> bool {
        self.annotations.is_present()
    }

    pub fn annotation_policy(&self) -> AnnotationPolicy {
        self.annotations.policy()
    }

    pub fn is_pseudo_labelled(&self) -> bool {
        self.annotations.is_pseudo()
    }

    /// Guarded annotation access; see [`crate::core::guard`].
    pub fn annotations(&self, ctx: AccessContext) -> Result<Option<&[InstanceAnnotation]>> {
        self.annotations.get(ctx)
    }

    /// Unguarded access for serialization.
    pub(crate) fn annotations_raw(&self) -> Option<&[InstanceAnnotation]> {
        self.annotations.raw()
    }

    /// Replaces the pixel buffer, keeping geometry-checked annotations valid.
    /// Panics if the new buffer changes the spatial dimensions.
    pub fn with_pixels(&self, pixels: Array3<u8>) -> ImageSample {
        assert_eq!(
            (self.height(), self.width()),
            (pixels.dim().0, pixels.dim().1),
            "with_pixels must preserve geometry"
        );
        let mut out = self.clone();
        out.pixels = pixels;
        out
    }
}

/// A scored candidate box from the shared region proposer, in feature-grid
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: RectF,
    pub objectness: f64,
}

impl RegionProposal {
    pub fn new(bbox: RectF, objectness: f64) -> Result<Self> {
        if !bbox.is_valid() {
            return Err(Error::Format("proposal box must have positive extent".into()));
        }
        if !(0.0..=1.0).contains(&objectness) {
            return Err(Error::Format("objectness must be in [0,1]".into()));
        }
        Ok(RegionProposal { bbox, objectness })
    }
}

/// A class-agnostic instance prediction: pixel-unit box, sigmoid mask
/// probabilities on a fixed region grid, and a confidence in `[0,1]`.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub bbox: RectF,
    pub mask_probs: Array2<f32>,
    pub confidence: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::guard::trainer_denials;
    use ndarray::Array3;

    fn blank(h: usize, w: usize) -> Array3<u8> {
        Array3::zeros((h, w, 1))
    }

    fn one_annotation(h: usize, w: usize) -> InstanceAnnotation {
        let mut mask = Array2::from_elem((h, w), false);
        mask[(2, 3)] = true;
        InstanceAnnotation::from_mask(1, mask).unwrap()
    }

    #[test]
    fn source_train_requires_annotations() {
        let err = ImageSample::new("a", blank(16, 16), Domain::Source, Split::Train, None);
        assert!(err.is_err());
        let ok = ImageSample::new(
            "a",
            blank(16, 16),
            Domain::Source,
            Split::Train,
            Some(vec![one_annotation(16, 16)]),
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn tiny_images_are_rejected() {
        let err = ImageSample::new("a", blank(8, 32), Domain::Target, Split::Train, None);
        assert!(matches!(err, Err(Error::Size(_))));
    }

    #[test]
    fn guard_blocks_trainer_and_permits_evaluator() {
        let s = ImageSample::new(
            "t",
            blank(16, 16),
            Domain::Target,
            Split::Train,
            Some(vec![one_annotation(16, 16)]),
        )
        .unwrap();
        let before = trainer_denials();
        assert!(s.annotations(AccessContext::Trainer).is_err());
        assert_eq!(trainer_denials(), before + 1);
        assert!(s
            .annotations(AccessContext::Evaluator)
            .unwrap()
            .is_some());
    }

    #[test]
    fn pseudo_annotations_are_exempt_from_guard() {
        let s = ImageSample::with_pseudo_annotations(
            "t",
            blank(16, 16),
            Split::Train,
            vec![one_annotation(16, 16)],
        )
        .unwrap();
        assert!(s.annotations(AccessContext::Trainer).unwrap().is_some());
        assert!(s.is_pseudo_labelled());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let anns = vec![one_annotation(16, 16), one_annotation(16, 16)];
        let err = ImageSample::new("a", blank(16, 16), Domain::Source, Split::Train, Some(anns));
        assert!(err.is_err());
    }
}
