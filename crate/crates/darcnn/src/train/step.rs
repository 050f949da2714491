//! Single training steps for both stages: forward, loss assembly, backward,
//! and the optimizer update.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Ix2, Ix4};
use rand::Rng;

use crate::core::config::{MmdLevel, PipelineConfig};
use crate::core::guard::AccessContext;
use crate::core::types::{Domain, ImageSample, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::losses::{
    background_consistency_on_tape, build_detection_targets, difference_loss_on_tape,
    mmd_loss_on_tape, resolve_bg_regions, supervised_loss_on_tape, total_loss, warmup_alpha,
    BgRegion, KernelSpec, LossReport,
};
use crate::model::{
    batch_input, decode_proposals, predict_masks, slice_image, AnchorSet, BoundModel, ModelState,
    RpnOutputs, GROUPS,
};
use crate::core::rng::substream_indexed;
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};
use crate::train::optimizer::{clip_factor, Optimizer};

/// Does this config ever weight the similarity loss?
fn wants_sim(cfg: &PipelineConfig) -> bool {
    cfg.pipeline.alpha_target != 0.0 || cfg.pipeline.alpha_init != 0.0
}

/// Projected shared features as MMD input vectors: one flattened vector per
/// image (batch level) or sampled scalar positions (position level).
fn mmd_vectors<F: Scalar>(
    tape: &mut Tape<F>,
    projected: VarId,
    cfg: &PipelineConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> VarId {
    let shape = tape.value(projected).shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    match cfg.train.mmd_level {
        MmdLevel::Batch => tape.reshape(projected, &[n, h * w]),
        MmdLevel::Position => {
            let total = n * h * w;
            let k = cfg.train.mmd_position_samples.min(total);
            let indices: Vec<usize> = (0..k).map(|_| rng.random_range(0..total)).collect();
            let picked = tape.gather1d(projected, indices);
            tape.reshape(picked, &[k, 1])
        }
    }
}

fn decode_batch_proposals<F: Scalar>(
    tape: &Tape<F>,
    rpn_out: &RpnOutputs,
    anchors: &AnchorSet,
    n_images: usize,
    max_n: usize,
) -> Vec<Vec<crate::core::types::RegionProposal>> {
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
    (0..n_images)
        .map(|i| decode_proposals(&obj.view(), &deltas.view(), anchors, i, max_n))
        .collect()
}

/// Background-consistency regions for a target batch: per image, the
/// above-threshold proposals (capped) are passed through the target mask
/// head and reduced to background cell sets. Mask probabilities act as a
/// constant selector; gradients reach only the private features.
fn target_bg_regions<F: Scalar>(
    state: &ModelState<F>,
    tape: &Tape<F>,
    h_p_t: VarId,
    proposals: &[Vec<crate::core::types::RegionProposal>],
    cfg: &PipelineConfig,
) -> Vec<BgRegion> {
    let shape = tape.value(h_p_t).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    let mut regions = Vec::new();
    for (image, props) in proposals.iter().enumerate() {
        let selected: Vec<_> = props
            .iter()
            .filter(|p| p.objectness > cfg.pipeline.k_region_conf)
            .take(cfg.train.bg_max_regions)
            .cloned()
            .collect();
        if selected.is_empty() {
            continue;
        }
        let h_p_value = slice_image(tape.value(h_p_t), image);
        let preds = predict_masks(&h_p_value, &selected, state, Domain::Target);
        regions.extend(resolve_bg_regions(
            image,
            &preds,
            cfg.pipeline.i_background,
            fh,
            fw,
            cfg.model.downsample,
        ));
    }
    regions
}

/// Applies accumulated gradients to the trainable groups with global-norm
/// clipping.
fn apply_gradients<F: Scalar>(
    state: &mut ModelState<F>,
    bound: &BoundModel,
    grads: &mut crate::tensor::Gradients<F>,
    optimizer: &mut Optimizer<F>,
    grad_clip: f64,
) {
    let mut grad_map: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    for group in GROUPS {
        if !state.trainable.get(group).copied().unwrap_or(false) {
            continue;
        }
        let ids = bound.group_param_ids(group);
        let mut i = 0usize;
        state.model.visit_group(group, &mut |name, _| {
            if let Some(g) = grads.take(ids[i]) {
                grad_map.insert(format!("{group}/{name}"), g);
            }
            i += 1;
        });
    }
    let clip = clip_factor(&grad_map, grad_clip);
    let clip_f = F::from_float(clip);
    optimizer.begin_step();
    for group in GROUPS {
        if !state.trainable.get(group).copied().unwrap_or(false) {
            continue;
        }
        let mut updates: Vec<(String, ArrayD<F>)> = Vec::new();
        {
            let trainable_names: Vec<String> = {
                let mut names = Vec::new();
                state.model.visit_group(group, &mut |name, _| names.push(name));
                names
            };
            for name in trainable_names {
                let path = format!("{group}/{name}");
                if let Some(g) = grad_map.get(&path) {
                    updates.push((path, g.mapv(|v| v * clip_f)));
                }
            }
        }
        let mut by_path: BTreeMap<String, ArrayD<F>> = updates.into_iter().collect();
        state.model.visit_group_mut(group, &mut |name, value| {
            let path = format!("{group}/{name}");
            if let Some(g) = by_path.remove(&path) {
                optimizer.apply(&path, value, &g);
            }
        });
    }
}

fn batch_annotations(
    batch: &[&ImageSample],
) -> Result<Vec<Vec<InstanceAnnotation>>> {
    batch
        .iter()
        .map(|s| {
            Ok(s.annotations(AccessContext::Trainer)?
                .map(|a| a.to_vec())
                .unwrap_or_default())
        })
        .collect()
}

/// One stage-1 step: joint source/target forward, all four losses under the
/// scheduled weights, one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<F: Scalar>(
    state: &mut ModelState<F>,
    optimizer: &mut Optimizer<F>,
    source_batch: &[&ImageSample],
    target_batch: &[&ImageSample],
    steps_per_epoch: usize,
    cfg: &PipelineConfig,
    step: u64,
) -> Result<LossReport> {
    if source_batch.is_empty() || target_batch.is_empty() {
        return Err(Error::EmptyBatch("stage1_step".into()));
    }
    let alpha_now = warmup_alpha(step.saturating_sub(1), steps_per_epoch, cfg)?;
    let beta = cfg.pipeline.beta;
    let gamma = cfg.pipeline.gamma;
    let seed = cfg.pipeline.seed;
    let mut rng = substream_indexed(seed, "train/stage1/step", step);

    // ablation configs with zeroed weights skip the target-side forward
    let need_target = wants_sim(cfg) || beta != 0.0 || gamma != 0.0;

    let mut tape: Tape<F> = Tape::new();
    let bound = state.model.bind(&mut tape, &state.trainable);
    let xs = tape.constant(batch_input(source_batch)?);
    let (h_c_s, h_p_s) = bound.encode_batch(&mut tape, xs, Domain::Source);
    let target_maps = if need_target {
        let xt = tape.constant(batch_input(target_batch)?);
        Some(bound.encode_batch(&mut tape, xt, Domain::Target))
    } else {
        None
    };
    let rpn_s = bound.rpn.forward(&mut tape, h_c_s);

    let shape = tape.value(h_c_s).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    let anchors = AnchorSet::build(fh, fw);

    // supervised source losses
    let source_proposals =
        decode_batch_proposals(&tape, &rpn_s, &anchors, source_batch.len(), cfg.pipeline.max_detections);
    let annotations = batch_annotations(source_batch)?;
    let targets = build_detection_targets(
        fh,
        fw,
        &source_proposals,
        &annotations,
        cfg.model.downsample,
        cfg.train.anchors_per_image,
        cfg.train.regions_per_image,
        &mut rng,
    );
    let sup = supervised_loss_on_tape(&mut tape, &rpn_s, h_p_s, &bound.m_s, &targets);
    let l_source_node = sup.total(&mut tape);

    // similarity loss on projected shared features
    let l_sim_node = if wants_sim(cfg) {
        let (h_c_t, _) = target_maps.expect("target forward ran");
        let proj_s = bound.proj.forward(&mut tape, h_c_s);
        let proj_t = bound.proj.forward(&mut tape, h_c_t);
        let vs = mmd_vectors(&mut tape, proj_s, cfg, &mut rng);
        let vt = mmd_vectors(&mut tape, proj_t, cfg, &mut rng);
        let s_vals = tape
            .value(vs)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let t_vals = tape
            .value(vt)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let kernel = KernelSpec::median_heuristic(&s_vals, &t_vals);
        Some(mmd_loss_on_tape(&mut tape, vs, vt, &kernel)?)
    } else {
        None
    };

    // orthogonality difference loss
    let l_diff_node = if beta != 0.0 {
        let (h_c_t, h_p_t) = target_maps.expect("target forward ran");
        Some(difference_loss_on_tape(
            &mut tape, h_c_s, h_p_s, h_c_t, h_p_t,
        )?)
    } else {
        None
    };

    // background representation consistency on the target
    let l_target_node = if gamma != 0.0 {
        let (h_c_t, h_p_t) = target_maps.expect("target forward ran");
        let rpn_t = bound.rpn.forward(&mut tape, h_c_t);
        let target_proposals = decode_batch_proposals(
            &tape,
            &rpn_t,
            &anchors,
            target_batch.len(),
            cfg.pipeline.max_detections,
        );
        let regions = target_bg_regions(state, &tape, h_p_t, &target_proposals, cfg);
        Some(background_consistency_on_tape(&mut tape, h_p_t, &regions))
    } else {
        None
    };

    // weighted total
    let mut total_node = l_source_node;
    if let Some(sim) = l_sim_node {
        let scaled = tape.scale(sim, F::from_float(alpha_now));
        total_node = tape.add(total_node, scaled);
    }
    if let Some(diff) = l_diff_node {
        let scaled = tape.scale(diff, F::from_float(beta));
        total_node = tape.add(total_node, scaled);
    }
    if let Some(target) = l_target_node {
        let scaled = tape.scale(target, F::from_float(gamma));
        total_node = tape.add(total_node, scaled);
    }

    let report = total_loss(
        step,
        l_sim_node.map(|n| tape.scalar(n).to_float()).unwrap_or(0.0),
        l_diff_node.map(|n| tape.scalar(n).to_float()).unwrap_or(0.0),
        l_target_node.map(|n| tape.scalar(n).to_float()).unwrap_or(0.0),
        tape.scalar(l_source_node).to_float(),
        alpha_now,
        beta,
        gamma,
    )?;

    let mut grads = tape.backward(total_node);
    apply_gradients(state, &bound, &mut grads, optimizer, cfg.train.grad_clip);
    Ok(report)
}

/// One stage-2 step: supervised losses on pseudo-labelled target images
/// through the target branch, optionally keeping the gamma-weighted
/// background consistency term.
pub fn stage2_step<F: Scalar>(
    state: &mut ModelState<F>,
    optimizer: &mut Optimizer<F>,
    batch: &[&ImageSample],
    cfg: &PipelineConfig,
    step: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("stage2_step".into()));
    }
    let seed = cfg.pipeline.seed;
    let mut rng = substream_indexed(seed, "train/stage2/step", step);

    let mut tape: Tape<F> = Tape::new();
    let bound = state.model.bind(&mut tape, &state.trainable);
    let xt = tape.constant(batch_input(batch)?);
    let (h_c_t, h_p_t) = bound.encode_batch(&mut tape, xt, Domain::Target);
    let rpn_t = bound.rpn.forward(&mut tape, h_c_t);
    let shape = tape.value(h_c_t).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    let anchors = AnchorSet::build(fh, fw);

    let proposals =
        decode_batch_proposals(&tape, &rpn_t, &anchors, batch.len(), cfg.pipeline.max_detections);
    let annotations = batch_annotations(batch)?;
    let targets = build_detection_targets(
        fh,
        fw,
        &proposals,
        &annotations,
        cfg.model.downsample,
        cfg.train.anchors_per_image,
        cfg.train.regions_per_image,
        &mut rng,
    );
    let sup = supervised_loss_on_tape(&mut tape, &rpn_t, h_p_t, &bound.m_t, &targets);
    let l_sup_node = sup.total(&mut tape);

    let gamma = cfg.pipeline.gamma;
    let l_target_node = if cfg.stage2.keep_target_loss && gamma != 0.0 {
        let regions = target_bg_regions(state, &tape, h_p_t, &proposals, cfg);
        Some(background_consistency_on_tape(&mut tape, h_p_t, &regions))
    } else {
        None
    };

    let mut total_node = l_sup_node;
    if let Some(t) = l_target_node {
        let scaled = tape.scale(t, F::from_float(gamma));
        total_node = tape.add(total_node, scaled);
    }

    let report = total_loss(
        step,
        0.0,
        0.0,
        l_target_node.map(|n| tape.scalar(n).to_float()).unwrap_or(0.0),
        tape.scalar(l_sup_node).to_float(),
        0.0,
        cfg.pipeline.beta,
        gamma,
    )?;

    let mut grads = tape.backward(total_node);
    apply_gradients(state, &bound, &mut grads, optimizer, cfg.train.grad_clip);
    Ok(report)
}
