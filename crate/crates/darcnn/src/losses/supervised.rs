//! Supervised detector losses on annotated images: anchor objectness binary
//! cross-entropy, box regression smooth-L1 on matched anchors and refined
//! regions, region confidence cross-entropy, and per-pixel mask binary
//! cross-entropy on matched regions.

use ndarray::{Array1, Array2, ArrayD, Ix4, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::core::config::PipelineConfig;
use crate::core::guard::AccessContext;
use crate::core::types::{ImageSample, InstanceAnnotation, RegionProposal};
use crate::error::{Error, Result};
use crate::model::net::{MASK_CROP, MASK_GRID};
use crate::model::targets::{build_region_targets, match_anchors, AnchorTargets, RegionTargets};
use crate::model::{decode_proposals, AnchorSet, BoundMask, ModelState, RpnOutputs};
use crate::scalar::Scalar;
use crate::tensor::{CropRect, Tape, VarId};

const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Parameter-independent supervision targets for one batch.
#[derive(Debug, Clone)]
pub struct DetectionTargets {
    pub anchors: AnchorSet,
    pub per_image_anchor: Vec<AnchorTargets>,
    pub per_image_regions: Vec<RegionTargets>,
}

/// Matches anchors and assembles mask-head regions for every image of a
/// batch. Proposal decoding happened upstream; sampling uses the supplied
/// RNG only, so the targets are constant under parameter perturbation.
pub fn build_detection_targets(
    feat_h: usize,
    feat_w: usize,
    proposals_per_image: &[Vec<RegionProposal>],
    annotations_per_image: &[Vec<InstanceAnnotation>],
    downsample: usize,
    anchors_per_image: usize,
    regions_per_image: usize,
    rng: &mut ChaCha8Rng,
) -> DetectionTargets {
    assert_eq!(proposals_per_image.len(), annotations_per_image.len());
    let anchors = AnchorSet::build(feat_h, feat_w);
    let ds = downsample as f64;
    let mut per_image_anchor = Vec::new();
    let mut per_image_regions = Vec::new();
    for (proposals, annotations) in proposals_per_image.iter().zip(annotations_per_image) {
        let gt_feat: Vec<_> = annotations
            .iter()
            .map(|a| a.bbox.to_rect().scaled(1.0 / ds))
            .collect();
        per_image_anchor.push(match_anchors(&anchors, &gt_feat, rng, anchors_per_image));
        per_image_regions.push(build_region_targets(
            proposals,
            annotations,
            downsample,
            regions_per_image,
            rng,
        ));
    }
    DetectionTargets {
        anchors,
        per_image_anchor,
        per_image_regions,
    }
}

/// Supervised loss terms on the tape.
pub struct SupervisedLossParts {
    pub objectness: VarId,
    pub box_reg: VarId,
    pub mask: VarId,
}

impl SupervisedLossParts {
    pub fn total<F: Scalar>(&self, tape: &mut Tape<F>) -> VarId {
        let ob = tape.add(self.objectness, self.box_reg);
        tape.add(ob, self.mask)
    }
}

fn zero_scalar<F: Scalar>(tape: &mut Tape<F>) -> VarId {
    tape.constant(ArrayD::zeros(IxDyn(&[1])))
}

/// Assembles the supervised loss over a batch given RPN outputs, private
/// features, the bound mask head of the branch under supervision, and fixed
/// targets.
pub fn supervised_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    rpn_out: &RpnOutputs,
    h_p: VarId,
    mask_head: &BoundMask,
    targets: &DetectionTargets,
) -> SupervisedLossParts {
    let obj_shape = tape.value(rpn_out.obj_logits).shape().to_vec();
    let (a_ch, fh, fw) = (obj_shape[1], obj_shape[2], obj_shape[3]);
    let per_image = a_ch * fh * fw;

    // anchor objectness
    let mut obj_indices = Vec::new();
    let mut obj_targets = Vec::new();
    for (n, at) in targets.per_image_anchor.iter().enumerate() {
        for &flat in &at.positives {
            obj_indices.push(n * per_image + flat);
            obj_targets.push(F::one());
        }
        for &flat in &at.negatives {
            obj_indices.push(n * per_image + flat);
            obj_targets.push(F::zero());
        }
    }
    let mut bce_sums: Vec<VarId> = Vec::new();
    let mut bce_count = 0usize;
    if !obj_indices.is_empty() {
        bce_count += obj_indices.len();
        let logits = tape.gather1d(rpn_out.obj_logits, obj_indices);
        let t = Array1::from_vec(obj_targets).into_dyn();
        bce_sums.push(tape.bce_with_logits_sum(logits, t));
    }

    // anchor box regression
    let mut delta_indices = Vec::new();
    let mut delta_targets = Vec::new();
    for (n, at) in targets.per_image_anchor.iter().enumerate() {
        for (&flat, d) in at.positives.iter().zip(&at.box_deltas) {
            let a = flat / (fh * fw);
            let rest = flat % (fh * fw);
            for (j, &dv) in d.iter().enumerate() {
                delta_indices.push(n * 4 * per_image + (4 * a + j) * fh * fw + rest);
                delta_targets.push(F::from_float(dv));
            }
        }
    }
    let mut sl1_sums: Vec<VarId> = Vec::new();
    let mut sl1_count = 0usize;
    if !delta_indices.is_empty() {
        sl1_count += delta_indices.len() / 4;
        let picked = tape.gather1d(rpn_out.deltas, delta_indices);
        let t = Array1::from_vec(delta_targets).into_dyn();
        sl1_sums.push(tape.smooth_l1_sum(picked, t, F::from_float(SMOOTH_L1_BETA)));
    }

    // region heads
    let mut region_list: Vec<(usize, crate::core::geometry::RectF)> = Vec::new();
    let mut base_logits = Vec::new();
    let mut labels = Vec::new();
    let mut pos_rows = Vec::new();
    let mut pos_deltas = Vec::new();
    let mut pos_masks: Vec<&Array2<f32>> = Vec::new();
    for (n, rt) in targets.per_image_regions.iter().enumerate() {
        for (j, rect) in rt.regions.iter().enumerate() {
            let row = region_list.len();
            region_list.push((n, *rect));
            base_logits.push(F::from_float(rt.base_logits[j]));
            labels.push(if rt.labels[j] > 0.5 { F::one() } else { F::zero() });
            if rt.labels[j] > 0.5 {
                pos_rows.push(row);
                pos_deltas.push(rt.box_deltas[j].expect("positive region has deltas"));
                pos_masks.push(rt.mask_targets[j].as_ref().expect("positive region has mask"));
            }
        }
    }

    let mut mask_sum: Option<VarId> = None;
    let mut mask_count = 0usize;
    if !region_list.is_empty() {
        let crops: Vec<VarId> = region_list
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
        let stacked = tape.concat_batch(&crops);
        let out = mask_head.forward(tape, stacked);

        // region confidence: score delta refines the proposal objectness logit
        let base = tape.constant(Array1::from_vec(base_logits).into_dyn());
        let score_logits = tape.add(out.score_delta, base);
        let t = Array1::from_vec(labels).into_dyn();
        bce_count += region_list.len();
        bce_sums.push(tape.bce_with_logits_sum(score_logits, t));

        if !pos_rows.is_empty() {
            // refined-box regression
            let mut idx = Vec::new();
            let mut tvals = Vec::new();
            for (&row, d) in pos_rows.iter().zip(&pos_deltas) {
                for (j, &dv) in d.iter().enumerate() {
                    idx.push(row * 4 + j);
                    tvals.push(F::from_float(dv));
                }
            }
            sl1_count += pos_rows.len();
            let picked = tape.gather1d(out.box_deltas, idx);
            let t = Array1::from_vec(tvals).into_dyn();
            sl1_sums.push(tape.smooth_l1_sum(picked, t, F::from_float(SMOOTH_L1_BETA)));

            // per-pixel mask cross-entropy on matched regions
            let plane = MASK_GRID * MASK_GRID;
            let mut midx = Vec::with_capacity(pos_rows.len() * plane);
            let mut mt = Vec::with_capacity(pos_rows.len() * plane);
            for (&row, m) in pos_rows.iter().zip(&pos_masks) {
                for p in 0..plane {
                    midx.push(row * plane + p);
                }
                mt.extend(m.iter().map(|&v| F::from_float(v as f64)));
            }
            mask_count = midx.len();
            let logits = tape.gather1d(out.mask_logits, midx);
            let t = Array1::from_vec(mt).into_dyn();
            mask_sum = Some(tape.bce_with_logits_sum(logits, t));
        }
    }

    let objectness = if bce_sums.is_empty() {
        zero_scalar(tape)
    } else {
        let s = tape.add_n(&bce_sums);
        tape.scale(s, F::from_float(1.0 / bce_count.max(1) as f64))
    };
    let box_reg = if sl1_sums.is_empty() {
        zero_scalar(tape)
    } else {
        let s = tape.add_n(&sl1_sums);
        tape.scale(s, F::from_float(1.0 / sl1_count.max(1) as f64))
    };
    let mask = match mask_sum {
        None => zero_scalar(tape),
        Some(s) => tape.scale(s, F::from_float(1.0 / mask_count.max(1) as f64)),
    };
    SupervisedLossParts {
        objectness,
        box_reg,
        mask,
    }
}

/// Per-term values of the supervised loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceLossBreakdown {
    pub objectness: f64,
    pub box_reg: f64,
    pub mask: f64,
    pub total: f64,
}

/// Spec-surface evaluation of the supervised loss for one annotated sample:
/// runs the branch forward, builds targets with a seeded substream, and
/// returns the term values. Reads annotations from a trainer context, so
/// eval-only annotations raise a guard error.
pub fn source_supervised_loss<F: Scalar>(
    state: &ModelState<F>,
    sample: &ImageSample,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SourceLossBreakdown> {
    let annotations = sample
        .annotations(AccessContext::Trainer)?
        .ok_or_else(|| Error::Guard(format!("sample `{}` has no annotations", sample.id)))?
        .to_vec();
    let mut tape: Tape<F> = Tape::new();
    let bound = state.model.bind(&mut tape, &state.trainable);
    let input = tape.constant(crate::model::batch_input(&[sample])?);
    let (h_c, h_p) = bound.encode_batch(&mut tape, input, sample.domain);
    let rpn_out = bound.rpn.forward(&mut tape, h_c);
    let shape = tape.value(h_c).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    let anchors = AnchorSet::build(fh, fw);
    let obj = tape
        .value(rpn_out.obj_logits)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    let deltas = tape
        .value(rpn_out.deltas)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    let proposals = decode_proposals(
        &obj.view(),
        &deltas.view(),
        &anchors,
        0,
        cfg.pipeline.max_detections,
    );
    let mut rng = crate::core::rng::substream_indexed(seed, "loss/supervised", 0);
    let targets = build_detection_targets(
        fh,
        fw,
        &[proposals],
        &[annotations],
        cfg.model.downsample,
        cfg.train.anchors_per_image,
        cfg.train.regions_per_image,
        &mut rng,
    );
    let head = bound.mask_head(sample.domain);
    let parts = supervised_loss_on_tape(&mut tape, &rpn_out, h_p, head, &targets);
    let breakdown = SourceLossBreakdown {
        objectness: tape.scalar(parts.objectness).to_float(),
        box_reg: tape.scalar(parts.box_reg).to_float(),
        mask: tape.scalar(parts.mask).to_float(),
        total: tape.scalar(parts.objectness).to_float()
            + tape.scalar(parts.box_reg).to_float()
            + tape.scalar(parts.mask).to_float(),
    };
    Ok(breakdown)
}
