//! The domain separation module and the two-step detector.
//!
//! A shared encoder `E_c` produces domain-invariant features consumed by the
//! shared region proposer; per-domain private encoders `E_p^s` / `E_p^t`
//! produce domain-specific features consumed by the per-domain mask heads
//! `M^s` / `M^t`. A 1x1 projection head reduces shared features to a single
//! channel for the MMD similarity loss.

pub mod anchors;
pub mod checkpoint;
pub mod net;
pub mod targets;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix4};
use sha2::{Digest, Sha256};

use crate::core::config::{hex_string, Nonlinearity, Normalization, PipelineConfig};
use crate::core::geometry::{decode_deltas, RectF};
use crate::core::maskops::resize_nearest;
use crate::core::types::{Domain, ImageSample, InstancePrediction, RegionProposal};
use crate::core::rng::substream;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CropRect, Tape, VarId};

pub use anchors::{decode_proposals, AnchorSet, PROPOSAL_NMS_IOU};
pub use net::{
    BoundConv, BoundEncoder, BoundMask, BoundRpn, ConvLayer, Encoder, MaskHead, MaskOutputs,
    RpnHead, RpnOutputs, MASK_CROP, MASK_GRID,
};

/// Parameter group names, in canonical order.
pub const GROUPS: [&str; 7] = ["e_c", "e_p_s", "e_p_t", "proj", "rpn", "m_s", "m_t"];

/// Architecture constants resolved from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub in_channels: usize,
    pub feature_depth: usize,
    pub downsample: usize,
    pub stage_widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl ArchParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        ArchParams {
            in_channels: 1,
            feature_depth: cfg.pipeline.feature_depth,
            downsample: cfg.model.downsample,
            stage_widths: cfg.model.stage_widths.clone(),
            nonlinearity: cfg.model.nonlinearity,
            normalization: cfg.model.normalization,
        }
    }
}

/// The four feature maps of the separation module for one image.
#[derive(Debug, Clone)]
pub struct FeatureBundle<F: Scalar> {
    /// Domain-invariant features `[D, H_f, W_f]` from the shared encoder.
    pub h_c: Array3<F>,
    /// Domain-specific features `[D, H_f, W_f]` from the private encoder.
    pub h_p: Array3<F>,
    pub domain: Domain,
}

#[derive(Debug, Clone)]
pub struct DomainSeparationModel<F: Scalar> {
    pub arch: ArchParams,
    pub e_c: Encoder<F>,
    pub e_p_s: Encoder<F>,
    pub e_p_t: Encoder<F>,
    pub proj: ConvLayer<F>,
    pub rpn: RpnHead<F>,
    pub m_s: MaskHead<F>,
    pub m_t: MaskHead<F>,
}

impl<F: Scalar> DomainSeparationModel<F> {
    /// Seeded initialization. The shared and private encoders start from
    /// identical random weights; the mask heads start independent.
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.ensure_valid()?;
        let arch = ArchParams::from_config(cfg);
        let seed = cfg.pipeline.seed;
        let mut enc_rng = substream(seed, "model/init/encoder");
        let e_c = Encoder::init(
            arch.in_channels,
            &arch.stage_widths,
            arch.nonlinearity,
            arch.normalization,
            &mut enc_rng,
        );
        let e_p_s = e_c.clone();
        let e_p_t = e_c.clone();
        let proj = ConvLayer::gaussian_init(
            1,
            arch.feature_depth,
            1,
            1,
            0,
            (1.0 / arch.feature_depth as f64).sqrt(),
            &mut substream(seed, "model/init/proj"),
        );
        let rpn = RpnHead::init(
            arch.feature_depth,
            arch.nonlinearity,
            &mut substream(seed, "model/init/rpn"),
        );
        let m_s = MaskHead::init(
            arch.feature_depth,
            arch.nonlinearity,
            &mut substream(seed, "model/init/m_s"),
        );
        let m_t = MaskHead::init(
            arch.feature_depth,
            arch.nonlinearity,
            &mut substream(seed, "model/init/m_t"),
        );
        Ok(DomainSeparationModel {
            arch,
            e_c,
            e_p_s,
            e_p_t,
            proj,
            rpn,
            m_s,
            m_t,
        })
    }

    /// Source-pretrain handoff: the target-private encoder copies the
    /// source-private encoder and the target mask head copies the source
    /// mask head.
    pub fn copy_source_branch_to_target(&mut self) {
        self.e_p_t = self.e_p_s.clone();
        self.m_t = self.m_s.clone();
    }

    pub fn visit_group(&self, group: &str, f: &mut impl FnMut(String, &ArrayD<F>)) {
        match group {
            "e_c" => self.e_c.visit(f),
            "e_p_s" => self.e_p_s.visit(f),
            "e_p_t" => self.e_p_t.visit(f),
            "proj" => self.proj.visit("proj", f),
            "rpn" => self.rpn.visit(f),
            "m_s" => self.m_s.visit(f),
            "m_t" => self.m_t.visit(f),
            other => panic!("unknown parameter group {other}"),
        }
    }

    pub fn visit_group_mut(&mut self, group: &str, f: &mut impl FnMut(String, &mut ArrayD<F>)) {
        match group {
            "e_c" => self.e_c.visit_mut(f),
            "e_p_s" => self.e_p_s.visit_mut(f),
            "e_p_t" => self.e_p_t.visit_mut(f),
            "proj" => self.proj.visit_mut("proj", f),
            "rpn" => self.rpn.visit_mut(f),
            "m_s" => self.m_s.visit_mut(f),
            "m_t" => self.m_t.visit_mut(f),
            other => panic!("unknown parameter group {other}"),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for g in GROUPS {
            self.visit_group(g, &mut |_, v| n += v.len());
        }
        n
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: &BTreeMap<String, bool>) -> BoundModel {
        let t = |g: &str| trainable.get(g).copied().unwrap_or(false);
        BoundModel {
            e_c: self.e_c.bind(tape, t("e_c")),
            e_p_s: self.e_p_s.bind(tape, t("e_p_s")),
            e_p_t: self.e_p_t.bind(tape, t("e_p_t")),
            proj: self.proj.bind(tape, t("proj")),
            rpn: self.rpn.bind(tape, t("rpn")),
            m_s: self.m_s.bind(tape, t("m_s")),
            m_t: self.m_t.bind(tape, t("m_t")),
        }
    }
}

/// Tape-bound model for one forward/backward pass.
pub struct BoundModel {
    pub e_c: BoundEncoder,
    pub e_p_s: BoundEncoder,
    pub e_p_t: BoundEncoder,
    pub proj: BoundConv,
    pub rpn: BoundRpn,
    pub m_s: BoundMask,
    pub m_t: BoundMask,
}

impl BoundModel {
    /// Leaf ids of one group, ordered exactly like
    /// [`DomainSeparationModel::visit_group`].
    pub fn group_param_ids(&self, group: &str) -> Vec<VarId> {
        match group {
            "e_c" => self.e_c.param_ids(),
            "e_p_s" => self.e_p_s.param_ids(),
            "e_p_t" => self.e_p_t.param_ids(),
            "proj" => self.proj.param_ids().to_vec(),
            "rpn" => self.rpn.param_ids(),
            "m_s" => self.m_s.param_ids(),
            "m_t" => self.m_t.param_ids(),
            other => panic!("unknown parameter group {other}"),
        }
    }

    pub fn private_encoder(&self, domain: Domain) -> &BoundEncoder {
        match domain {
            Domain::Source => &self.e_p_s,
            Domain::Target => &self.e_p_t,
        }
    }

    pub fn mask_head(&self, domain: Domain) -> &BoundMask {
        match domain {
            Domain::Source => &self.m_s,
            Domain::Target => &self.m_t,
        }
    }

    /// Shared + private encoding of a normalized image batch.
    pub fn encode_batch<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        images: VarId,
        branch: Domain,
    ) -> (VarId, VarId) {
        let h_c = self.e_c.forward(tape, images);
        let h_p = self.private_encoder(branch).forward(tape, images);
        (h_c, h_p)
    }

    /// Stacks bilinear region crops of `h_p` into a `[R, D, 14, 14]` batch.
    /// Regions are (image index, feature-grid rect) pairs.
    pub fn crop_regions<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        h_p: VarId,
        regions: &[(usize, RectF)],
    ) -> VarId {
        assert!(!regions.is_empty(), "crop_regions needs at least one region");
        let crops: Vec<VarId> = regions
            .iter()
            .map(|(image, rect)| {
                tape.crop_resize_bilinear(
                    h_p,
                    *image,
                    CropRect {
                        x0: rect.x0,
                        y0: rect.y0,
                        x1: rect.x1,
                        y1: rect.y1,
                    },
                    MASK_CROP,
                    MASK_CROP,
                )
            })
            .collect();
        tape.concat_batch(&crops)
    }
}

/// Trainability flags per parameter group, a step counter, and the
/// config identity the parameters belong to.
#[derive(Debug, Clone)]
pub struct ModelState<F: Scalar> {
    pub model: DomainSeparationModel<F>,
    pub trainable: BTreeMap<String, bool>,
    pub step: u64,
    pub config_hash: String,
}

impl<F: Scalar> ModelState<F> {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(ModelState {
            model: DomainSeparationModel::init(cfg)?,
            trainable: GROUPS.iter().map(|g| (g.to_string(), true)).collect(),
            step: 0,
            config_hash: cfg.hash(),
        })
    }

    /// Stage-1 trains every group.
    pub fn set_stage1_trainability(&mut self) {
        for g in GROUPS {
            self.trainable.insert(g.to_string(), true);
        }
    }

    /// Stage-2 freezes the source branch (`E_p^s`, `M^s`) and the MMD
    /// projection; the target branch is `E_p^t`, `M^t`, and by default the
    /// shared `E_c` and `R`, which `freeze_shared` removes.
    pub fn set_stage2_trainability(&mut self, freeze_shared: bool) {
        for g in GROUPS {
            self.trainable.insert(g.to_string(), false);
        }
        self.trainable.insert("e_p_t".into(), true);
        self.trainable.insert("m_t".into(), true);
        if !freeze_shared {
            self.trainable.insert("e_c".into(), true);
            self.trainable.insert("rpn".into(), true);
        }
    }

    pub fn frozen_groups(&self) -> Vec<String> {
        GROUPS
            .iter()
            .filter(|g| !self.trainable.get(**g).copied().unwrap_or(false))
            .map(|g| g.to_string())
            .collect()
    }

    /// Content hash of one parameter group (order-sensitive, f64 bits).
    pub fn group_hash(&self, group: &str) -> String {
        let mut hasher = Sha256::new();
        self.model.visit_group(group, &mut |name, value| {
            hasher.update(name.as_bytes());
            for v in value.iter() {
                hasher.update(v.to_float().to_le_bytes());
            }
        });
        hex_string(&hasher.finalize())
    }
}

/// Normalizes image samples to a `[N,C,H,W]` float batch in `[0,1]`.
pub fn batch_input<F: Scalar>(samples: &[&ImageSample]) -> Result<ArrayD<F>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("batch_input".into()));
    }
    let (h, w, c) = samples[0].pixels.dim();
    for s in samples {
        if s.pixels.dim() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch mixes image sizes: {:?} vs {:?}",
                s.pixels.dim(),
                (h, w, c)
            )));
        }
    }
    let scale = F::from_float(1.0 / 255.0);
    let mut out = Array4::<F>::zeros((samples.len(), c, h, w));
    for (n, s) in samples.iter().enumerate() {
        for ((y, x, ch), &v) in s.pixels.indexed_iter() {
            out[(n, ch, y, x)] = F::from_count(v as usize) * scale;
        }
    }
    Ok(out.into_dyn())
}

fn check_min_size(sample: &ImageSample) -> Result<()> {
    if sample.height() < crate::core::types::MIN_IMAGE_SIDE
        || sample.width() < crate::core::types::MIN_IMAGE_SIDE
    {
        return Err(Error::Size(format!(
            "image {}x{} below the receptive-field minimum",
            sample.height(),
            sample.width()
        )));
    }
    Ok(())
}

fn single_to_batch<F: Scalar>(map: &Array3<F>) -> ArrayD<F> {
    let (d, h, w) = map.dim();
    map.clone()
        .into_shape_with_order((1, d, h, w))
        .unwrap()
        .into_dyn()
}

/// Extracts image `image` of a batched `[N,D,h,w]` map as `[D,h,w]`.
pub fn slice_image<F: Scalar>(map: &ArrayD<F>, image: usize) -> Array3<F> {
    batch_to_single(map, image)
}

fn batch_to_single<F: Scalar>(map: &ArrayD<F>, image: usize) -> Array3<F> {
    let v4 = map.view().into_dimensionality::<Ix4>().expect("4-D map");
    v4.index_axis(ndarray::Axis(0), image).to_owned()
}

/// Shared + private features for one sample; the private path follows the
/// sample's own domain.
pub fn encode<F: Scalar>(sample: &ImageSample, state: &ModelState<F>) -> Result<FeatureBundle<F>> {
    encode_with_branch(sample, state, sample.domain)
}

/// Like [`encode`], with an explicit private branch (used to evaluate a
/// source-trained model on target images through the source branch).
pub fn encode_with_branch<F: Scalar>(
    sample: &ImageSample,
    state: &ModelState<F>,
    branch: Domain,
) -> Result<FeatureBundle<F>> {
    check_min_size(sample)?;
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, &BTreeMap::new());
    let input = tape.constant(batch_input(&[sample])?);
    let (h_c, h_p) = bound.encode_batch(&mut tape, input, branch);
    Ok(FeatureBundle {
        h_c: batch_to_single(tape.value(h_c), 0),
        h_p: batch_to_single(tape.value(h_p), 0),
        domain: branch,
    })
}

/// 1x1 dimension-reduction projection of shared features, `[D,h,w] -> [1,h,w]`.
pub fn project_for_mmd<F: Scalar>(h_c: &Array3<F>, state: &ModelState<F>) -> Array3<F> {
    assert_eq!(
        h_c.dim().0,
        state.model.arch.feature_depth,
        "h_c depth must equal feature_depth"
    );
    let mut tape = Tape::new();
    let bound = state.model.proj.bind(&mut tape, false);
    let input = tape.constant(single_to_batch(h_c));
    let out = bound.forward(&mut tape, input);
    batch_to_single(tape.value(out), 0)
}

/// Scored, NMS-filtered region proposals from shared features, at most
/// `max_n`, sorted by descending objectness.
pub fn propose_regions<F: Scalar>(
    h_c: &Array3<F>,
    state: &ModelState<F>,
    max_n: usize,
) -> Vec<RegionProposal> {
    let (_, fh, fw) = h_c.dim();
    let mut tape = Tape::new();
    let bound = state.model.rpn.bind(&mut tape, false);
    let input = tape.constant(single_to_batch(h_c));
    let out = bound.forward(&mut tape, input);
    let anchors = AnchorSet::build(fh, fw);
    let obj = tape
        .value(out.obj_logits)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap();
    let deltas = tape
        .value(out.deltas)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap();
    decode_proposals(&obj, &deltas, &anchors, 0, max_n)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// One instance prediction per proposal: sigmoid mask probabilities on the
/// 28x28 region grid, a refined pixel-unit box, and a confidence equal to
/// the proposal objectness refined by the head's score output.
pub fn predict_masks<F: Scalar>(
    h_p: &Array3<F>,
    proposals: &[RegionProposal],
    state: &ModelState<F>,
    domain: Domain,
) -> Vec<InstancePrediction> {
    if proposals.is_empty() {
        return Vec::new();
    }
    let (_, fh, fw) = h_p.dim();
    let downsample = state.model.arch.downsample as f64;
    let mut tape: Tape<F> = Tape::new();
    let head = match domain {
        Domain::Source => state.model.m_s.bind(&mut tape, false),
        Domain::Target => state.model.m_t.bind(&mut tape, false),
    };
    let input = tape.constant(single_to_batch(h_p));
    let crops: Vec<VarId> = proposals
        .iter()
        .map(|p| {
            tape.crop_resize_bilinear(
                input,
                0,
                CropRect {
                    x0: p.bbox.x0,
                    y0: p.bbox.y0,
                    x1: p.bbox.x1,
                    y1: p.bbox.y1,
                },
                MASK_CROP,
                MASK_CROP,
            )
        })
        .collect();
    let stacked = tape.concat_batch(&crops);
    let out = head.forward(&mut tape, stacked);
    let probs_node = tape.sigmoid(out.mask_logits);
    let probs = tape
        .value(probs_node)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    let box_deltas = tape.value(out.box_deltas).clone();
    let score_delta = tape.value(out.score_delta).clone();

    proposals
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let d = [
                box_deltas[[r, 0]].to_float(),
                box_deltas[[r, 1]].to_float(),
                box_deltas[[r, 2]].to_float(),
                box_deltas[[r, 3]].to_float(),
            ];
            let refined = decode_deltas(&p.bbox, d).clipped(fw as f64, fh as f64);
            let bbox = refined.scaled(downsample);
            let confidence =
                1.0 / (1.0 + (-(logit(p.objectness) + score_delta[[r]].to_float())).exp());
            let mask_probs = Array2::from_shape_fn((MASK_GRID, MASK_GRID), |(y, x)| {
                probs[(r, 0, y, x)].to_float() as f32
            });
            InstancePrediction {
                bbox,
                mask_probs,
                confidence,
            }
        })
        .collect()
}

/// Feature-grid cells covered by a prediction and their background flags
/// (aligned mask probability below `i`, nearest-neighbor resampled).
#[derive(Debug, Clone)]
pub struct BackgroundCells {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub bg: Array2<bool>,
}

pub fn background_cells(
    pred: &InstancePrediction,
    i_background: f64,
    feat_h: usize,
    feat_w: usize,
    downsample: usize,
) -> Option<BackgroundCells> {
    let fbox = pred.bbox.scaled(1.0 / downsample as f64);
    let y0 = fbox.y0.floor().max(0.0) as usize;
    let x0 = fbox.x0.floor().max(0.0) as usize;
    let y1 = (fbox.y1.ceil() as usize).min(feat_h);
    let x1 = (fbox.x1.ceil() as usize).min(feat_w);
    if y1 <= y0 || x1 <= x0 {
        return None;
    }
    let resampled = resize_nearest(&pred.mask_probs.view(), y1 - y0, x1 - x0);
    let bg = resampled.mapv(|p| (p as f64) < i_background);
    Some(BackgroundCells { y0, y1, x0, x1, bg })
}

/// The multiset of depth-D feature vectors of `h_p` at in-region positions
/// whose aligned mask probability is below `i`; empty when no position is
/// background.
pub fn extract_background_features<F: Scalar>(
    h_p: &Array3<F>,
    pred: &InstancePrediction,
    i_background: f64,
    downsample: usize,
) -> Vec<Array1<F>> {
    let (d, fh, fw) = h_p.dim();
    let Some(cells) = background_cells(pred, i_background, fh, fw, downsample) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for y in cells.y0..cells.y1 {
        for x in cells.x0..cells.x1 {
            if cells.bg[(y - cells.y0, x - cells.x0)] {
                let mut v = Array1::<F>::zeros(d);
                for c in 0..d {
                    v[c] = h_p[(c, y, x)];
                }
                out.push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
