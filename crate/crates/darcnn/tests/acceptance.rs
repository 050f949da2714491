//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Expected values tagged as derived in the module docs below are computed
//! by independent oracles (closed-form arithmetic, exhaustive matching over
//! pixel sets, central finite differences) implemented in this file, not by
//! the code paths under test.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD};

use darcnn::core::config::PipelineConfig;
use darcnn::core::geometry::RectF;
use darcnn::core::types::{Domain, ImageSample, InstancePrediction, Split};
use darcnn::data::{generate_synthetic, SyntheticDomainSpec};
use darcnn::losses;
use darcnn::losses::{warmup_alpha, KernelSpec};
use darcnn::model::{ModelState, GROUPS};
use darcnn::scalar::Scalar;
use darcnn::tensor::{Gradients, Tape, VarId};

fn small_cfg(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.pipeline.seed = seed;
    cfg.pipeline.feature_depth = 8;
    cfg.model.stage_widths = vec![8, 8];
    cfg.train.batch_source = 2;
    cfg.train.batch_target = 2;
    cfg.train.anchors_per_image = 16;
    cfg.train.regions_per_image = 4;
    cfg.train.bg_max_regions = 3;
    cfg
}

fn samples(kind: Domain, n: usize, seed: u64) -> Vec<ImageSample> {
    let spec = match kind {
        Domain::Source => SyntheticDomainSpec::source_shapes((64, 64)),
        Domain::Target => SyntheticDomainSpec::target_blobs((64, 64)),
    };
    generate_synthetic(&spec, n, seed, Split::Train).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1: loss oracles
// ---------------------------------------------------------------------------

/// Independent Gaussian-kernel MMD: direct double loops over the sets.
fn oracle_mmd(s: &[Vec<f64>], t: &[Vec<f64>], sigmas: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64], sigma: f64| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mut total = 0.0;
    for &sigma in sigmas {
        let mut ss = 0.0;
        for a in s {
            for b in s {
                ss += k(a, b, sigma);
            }
        }
        let mut st = 0.0;
        for a in s {
            for b in t {
                st += k(a, b, sigma);
            }
        }
        let mut tt = 0.0;
        for a in t {
            for b in t {
                tt += k(a, b, sigma);
            }
        }
        total += ss / (s.len() * s.len()) as f64 - 2.0 * st / (s.len() * t.len()) as f64
            + tt / (t.len() * t.len()) as f64;
    }
    total
}

#[test]
fn criterion_1_loss_oracles() {
    let started = Instant::now();

    // MMD: the closed-form scalar case, within 1e-9
    let s = ndarray::array![[0.0f64]];
    let t = ndarray::array![[1.0f64]];
    let kernel = KernelSpec::gaussian(vec![1.0]).unwrap();
    let got = losses::mmd_loss(&s, &t, &kernel).unwrap();
    let expected = 2.0 - 2.0 * (-0.5f64).exp();
    assert!((got - expected).abs() < 1e-9, "mmd {got} vs {expected}");

    // MMD against the independent oracle on hand sets, multi-bandwidth
    let s_rows = vec![vec![0.0, 1.5], vec![2.0, -1.0], vec![0.5, 0.5]];
    let t_rows = vec![vec![1.0, 0.0], vec![-0.5, 2.0]];
    let s_arr = Array2::from_shape_fn((3, 2), |(i, j)| s_rows[i][j]);
    let t_arr = Array2::from_shape_fn((2, 2), |(i, j)| t_rows[i][j]);
    let sigmas = [0.7, 1.3, 2.9];
    let kernel = KernelSpec::gaussian(sigmas.to_vec()).unwrap();
    let got = losses::mmd_loss(&s_arr, &t_arr, &kernel).unwrap();
    let want = oracle_mmd(&s_rows, &t_rows, &sigmas);
    assert!((got - want).abs() < 1e-9, "mmd {got} vs oracle {want}");

    // identical multisets vanish
    let same = losses::mmd_loss(&s_arr, &s_arr.clone(), &kernel).unwrap();
    assert!(same.abs() < 1e-9);

    // difference loss: worked 2x2 case, 30 before normalization, 7.5 after
    let h_c = ndarray::array![[1.0f64, 2.0], [3.0, 4.0]];
    let h_p = ndarray::array![[0.0f64, 1.0], [1.0, 0.0]];
    let raw: f64 = {
        // independent oracle: explicit matrix product and sum of squares
        let mut m = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..2 {
                    m[i][j] += h_c[(r, i)] * h_p[(r, j)];
                }
            }
        }
        m.iter().flatten().map(|v| v * v).sum()
    };
    assert_eq!(raw, 30.0);
    let got = losses::orthogonality_penalty(&h_c, &h_p).unwrap();
    assert!((got - raw / 4.0).abs() < 1e-12, "{got}");
    assert!((got - 7.5).abs() < 1e-12);

    // difference loss against a direct oracle on random matrices
    let mut seed = 123u64;
    let mut next = || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    };
    let a = Array2::from_shape_fn((12, 3), |_| next());
    let b = Array2::from_shape_fn((12, 3), |_| next());
    let mut oracle = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut m = 0.0;
            for r in 0..12 {
                m += a[(r, i)] * b[(r, j)];
            }
            oracle += m * m;
        }
    }
    oracle /= 144.0;
    let got = losses::orthogonality_penalty(&a, &b).unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");

    // background consistency: scalar region means 0.2 and 0.4 give 0.1
    let mut cfg = small_cfg(0);
    cfg.pipeline.feature_depth = 2;
    let mut h_p_t = Array3::<f64>::zeros((1, 8, 8));
    for y in 0..2 {
        for x in 0..2 {
            h_p_t[(0, y, x)] = 0.2;
        }
    }
    for y in 4..6 {
        for x in 4..6 {
            h_p_t[(0, y, x)] = 0.4;
        }
    }
    let region = |y0: usize, x0: usize| InstancePrediction {
        bbox: RectF::new((x0 * 4) as f64, (y0 * 4) as f64, ((x0 + 2) * 4) as f64, ((y0 + 2) * 4) as f64),
        mask_probs: Array2::from_elem((2, 2), 0.0f32),
        confidence: 0.9,
    };
    let got = losses::background_consistency_loss(&h_p_t, &[region(0, 0), region(4, 4)], &cfg);
    assert!((got - 0.1).abs() < 1e-12, "{got}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "loss oracles took {elapsed:?}");
    println!("acceptance criterion 1 (loss oracles): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 2: gradient checks by central finite differences
// ---------------------------------------------------------------------------

/// Runs `build` against the current parameters and returns the loss value
/// plus analytic gradients keyed by `group/param` path.
fn loss_and_grads(
    state: &ModelState<f64>,
    build: &dyn Fn(&mut Tape<f64>, &darcnn::model::BoundModel) -> VarId,
) -> (f64, BTreeMap<String, ArrayD<f64>>) {
    let mut tape: Tape<f64> = Tape::new();
    let bound = state.model.bind(&mut tape, &state.trainable);
    let root = build(&mut tape, &bound);
    let value = tape.scalar(root);
    let grads: Gradients<f64> = tape.backward(root);
    let mut map = BTreeMap::new();
    for group in GROUPS {
        let ids = bound.group_param_ids(group);
        let mut i = 0usize;
        state.model.visit_group(group, &mut |name, _| {
            if let Some(g) = grads.get(ids[i]) {
                map.insert(format!("{group}/{name}"), g.clone());
            }
            i += 1;
        });
    }
    (value, map)
}

fn set_param(state: &mut ModelState<f64>, path: &str, index: usize, value: f64) {
    let (group, name) = path.split_once('/').unwrap();
    let name = name.to_string();
    state.model.visit_group_mut(group, &mut |n, arr| {
        if n == name {
            *arr.iter_mut().nth(index).unwrap() = value;
        }
    });
}

fn get_param(state: &ModelState<f64>, path: &str, index: usize) -> f64 {
    let (group, name) = path.split_once('/').unwrap();
    let mut out = f64::NAN;
    state.model.visit_group(group, &mut |n, arr| {
        if n == name {
            out = *arr.iter().nth(index).unwrap();
        }
    });
    out
}

/// Checks 5 random 10-dimensional parameter slices of the gradient against
/// central finite differences at h = 1e-4, relative error 1e-3.
fn gradient_check(
    label: &str,
    state: &ModelState<f64>,
    build: &dyn Fn(&mut Tape<f64>, &darcnn::model::BoundModel) -> VarId,
    rng_seed: u64,
) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let (_, grads) = loss_and_grads(state, build);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (path, g) in &grads {
        for i in 0..g.len() {
            coords.push((path.clone(), i));
        }
    }
    assert!(!coords.is_empty(), "{label}: no gradients flowed");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    coords.shuffle(&mut rng);

    let h = 1e-4;
    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;
    for slice in 0..5 {
        for k in 0..10 {
            let Some((path, idx)) = coords.get(slice * 10 + k).cloned() else {
                continue;
            };
            let base = get_param(state, &path, idx);
            let mut probe = state.clone();
            set_param(&mut probe, &path, idx, base + h);
            let (up, _) = loss_and_grads(&probe, build);
            set_param(&mut probe, &path, idx, base - h);
            let (down, _) = loss_and_grads(&probe, build);
            let numeric = (up - down) / (2.0 * h);
            let analytic = *grads[&path].iter().nth(idx).unwrap();
            let denom = numeric.abs().max(analytic.abs()).max(1e-3);
            let rel = (numeric - analytic).abs() / denom;
            max_rel = max_rel.max(rel);
            assert!(
                rel < 1e-3,
                "{label}: {path}[{idx}] analytic {analytic:.8e} vs numeric {numeric:.8e} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 30, "{label}: only {checked} coordinates checked");
    println!("  {label}: {checked} coords, max rel err {max_rel:.2e}");
}

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    // smooth nonlinearity: at h = 1e-4 a rectifier kink inside the probe
    // interval pollutes the numeric estimate; every loss path is identical
    // otherwise, and the rectifier backward has its own op-level check
    let mut cfg = small_cfg(3);
    cfg.model.nonlinearity = darcnn::core::config::Nonlinearity::Softplus;
    let state = ModelState::<f64>::new(&cfg).unwrap();
    let src = samples(Domain::Source, 2, 41);
    let tgt = samples(Domain::Target, 2, 42);
    let src_refs: Vec<&ImageSample> = src.iter().collect();
    let tgt_refs: Vec<&ImageSample> = tgt.iter().collect();
    let xs = darcnn::model::batch_input::<f64>(&src_refs).unwrap();
    let xt = darcnn::model::batch_input::<f64>(&tgt_refs).unwrap();

    // fixed kernel so the loss stays smooth under perturbation
    let kernel = KernelSpec::gaussian(vec![0.7, 1.9]).unwrap();
    let xs_mmd = xs.clone();
    let xt_mmd = xt.clone();
    let kernel_c = kernel.clone();
    let mmd_build = move |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
        let s_in = tape.constant(xs_mmd.clone());
        let t_in = tape.constant(xt_mmd.clone());
        let h_c_s = bound.e_c.forward(tape, s_in);
        let h_c_t = bound.e_c.forward(tape, t_in);
        let p_s = bound.proj.forward(tape, h_c_s);
        let p_t = bound.proj.forward(tape, h_c_t);
        let shape = tape.value(p_s).shape().to_vec();
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let vs = tape.reshape(p_s, &[n, hw]);
        let vt = tape.reshape(p_t, &[n, hw]);
        losses::mmd_loss_on_tape(tape, vs, vt, &kernel_c).unwrap()
    };
    gradient_check("mmd_loss", &state, &mmd_build, 101);

    let xs_d = xs.clone();
    let xt_d = xt.clone();
    let diff_build = move |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
        let s_in = tape.constant(xs_d.clone());
        let t_in = tape.constant(xt_d.clone());
        let (h_c_s, h_p_s) = bound.encode_batch(tape, s_in, Domain::Source);
        let (h_c_t, h_p_t) = bound.encode_batch(tape, t_in, Domain::Target);
        losses::difference_loss_on_tape(tape, h_c_s, h_p_s, h_c_t, h_p_t).unwrap()
    };
    gradient_check("difference_loss", &state, &diff_build, 102);

    // background consistency: regions fixed from the base state's own
    // predictions, so only the feature path is differentiated
    let bundle = darcnn::model::encode(&tgt[0], &state).unwrap();
    let proposals = darcnn::model::propose_regions(&bundle.h_c, &state, 6);
    let preds = darcnn::model::predict_masks(&bundle.h_p, &proposals, &state, Domain::Target);
    let regions = losses::resolve_bg_regions(0, &preds, 0.5, 16, 16, 4);
    assert!(regions.len() >= 2, "need at least two background regions");
    let xt_bg = darcnn::model::batch_input::<f64>(&[&tgt[0]]).unwrap();
    let regions_c = regions.clone();
    let bg_build = move |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
        let t_in = tape.constant(xt_bg.clone());
        let (_, h_p_t) = bound.encode_batch(tape, t_in, Domain::Target);
        losses::background_consistency_on_tape(tape, h_p_t, &regions_c)
    };
    gradient_check("background_consistency_loss", &state, &bg_build, 103);

    // supervised loss: matching and sampling fixed up front
    let bundle_s = darcnn::model::encode(&src[0], &state).unwrap();
    let src_proposals = darcnn::model::propose_regions(&bundle_s.h_c, &state, 20);
    let annotations = src[0]
        .annotations(darcnn::core::guard::AccessContext::Trainer)
        .unwrap()
        .unwrap()
        .to_vec();
    let mut rng = darcnn::core::rng::substream(9, "acceptance/sup");
    let targets = losses::build_detection_targets(
        16,
        16,
        &[src_proposals],
        &[annotations],
        4,
        16,
        4,
        &mut rng,
    );
    let xs_sup = darcnn::model::batch_input::<f64>(&[&src[0]]).unwrap();
    let targets_c = targets.clone();
    let sup_build = move |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
        let s_in = tape.constant(xs_sup.clone());
        let (h_c_s, h_p_s) = bound.encode_batch(tape, s_in, Domain::Source);
        let rpn = bound.rpn.forward(tape, h_c_s);
        let parts = losses::supervised_loss_on_tape(tape, &rpn, h_p_s, &bound.m_s, &targets_c);
        parts.total(tape)
    };
    gradient_check("source_supervised_loss", &state, &sup_build, 104);

    // weighted total of all four terms
    let xs_t = xs.clone();
    let xt_t = xt.clone();
    let kernel_t = kernel.clone();
    let regions_t = regions.clone();
    let targets_t = targets.clone();
    let total_build = move |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
        let s_in = tape.constant(xs_t.clone());
        let t_in = tape.constant(xt_t.clone());
        let (h_c_s, h_p_s) = bound.encode_batch(tape, s_in, Domain::Source);
        let (h_c_t, h_p_t) = bound.encode_batch(tape, t_in, Domain::Target);
        let p_s = bound.proj.forward(tape, h_c_s);
        let p_t = bound.proj.forward(tape, h_c_t);
        let shape = tape.value(p_s).shape().to_vec();
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let vs = tape.reshape(p_s, &[n, hw]);
        let vt = tape.reshape(p_t, &[n, hw]);
        let sim = losses::mmd_loss_on_tape(tape, vs, vt, &kernel_t).unwrap();
        let diff = losses::difference_loss_on_tape(tape, h_c_s, h_p_s, h_c_t, h_p_t).unwrap();
        let bg = losses::background_consistency_on_tape(tape, h_p_t, &regions_t);
        let rpn = bound.rpn.forward(tape, h_c_s);
        let parts = losses::supervised_loss_on_tape(tape, &rpn, h_p_s, &bound.m_s, &targets_t);
        let sup = parts.total(tape);
        let sim_w = tape.scale(sim, 0.8);
        let diff_w = tape.scale(diff, 1.0);
        let bg_w = tape.scale(bg, 0.1);
        let a = tape.add(sim_w, diff_w);
        let b = tape.add(a, bg_w);
        tape.add(b, sup)
    };
    gradient_check("total_loss", &state, &total_build, 105);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "gradient suite took {elapsed:?}");
    println!("acceptance criterion 2 (gradient suite): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 3: metric brute-force equivalence on the 3x3 grid
// ---------------------------------------------------------------------------

type PixelSet = std::collections::BTreeSet<(usize, usize)>;

fn rect_masks_3x3() -> Vec<(Array2<bool>, PixelSet)> {
    let mut out = Vec::new();
    for y0 in 0..3 {
        for y1 in y0..3 {
            for x0 in 0..3 {
                for x1 in x0..3 {
                    let mut m = Array2::from_elem((3, 3), false);
                    let mut set = PixelSet::new();
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            m[(y, x)] = true;
                            set.insert((y, x));
                        }
                    }
                    out.push((m, set));
                }
            }
        }
    }
    out
}

/// Exhaustive best-first matching over pixel sets with exact rational IoU
/// comparisons: repeatedly scans every remaining (gt, pred) pair.
fn oracle_matching(gt: &[PixelSet], pred: &[PixelSet]) -> Vec<(usize, usize, usize, usize)> {
    let inter = |a: &PixelSet, b: &PixelSet| a.intersection(b).count();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matches = Vec::new();
    loop {
        // best = (inter, union, gi, pi) maximizing inter/union, ties toward
        // lower pred index then lower gt index
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            for (pi, p) in pred.iter().enumerate() {
                if pred_used[pi] {
                    continue;
                }
                let i = inter(g, p);
                if i == 0 {
                    continue;
                }
                let u = g.len() + p.len() - i;
                let better = match best {
                    None => true,
                    Some((bi, bu, bgi, bpi)) => {
                        // compare i/u vs bi/bu exactly
                        let lhs = i * bu;
                        let rhs = bi * u;
                        lhs > rhs || (lhs == rhs && (pi, gi) < (bpi, bgi))
                    }
                };
                if better {
                    best = Some((i, u, gi, pi));
                }
            }
        }
        match best {
            None => break,
            Some((i, u, gi, pi)) => {
                gt_used[gi] = true;
                pred_used[pi] = true;
                matches.push((gi, pi, i, u));
            }
        }
    }
    matches
}

fn oracle_aji(gt: &[PixelSet], pred: &[PixelSet]) -> f64 {
    let matches = oracle_matching(gt, pred);
    let mut c = 0usize;
    let mut u = 0usize;
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for &(gi, pi, i, uu) in &matches {
        c += i;
        u += uu;
        gt_used[gi] = true;
        pred_used[pi] = true;
    }
    for (gi, g) in gt.iter().enumerate() {
        if !gt_used[gi] {
            u += g.len();
        }
    }
    for (pi, p) in pred.iter().enumerate() {
        if !pred_used[pi] {
            u += p.len();
        }
    }
    if u == 0 {
        1.0
    } else {
        c as f64 / u as f64
    }
}

fn oracle_object_f1(gt: &[PixelSet], pred: &[PixelSet]) -> f64 {
    // TP = matched pairs with IoU >= 1/2, i.e. 2*inter >= union
    let tp = oracle_matching(gt, pred)
        .iter()
        .filter(|&&(_, _, i, u)| 2 * i >= u)
        .count();
    if gt.is_empty() && pred.is_empty() {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / pred.len() as f64;
    let r = tp as f64 / gt.len() as f64;
    2.0 * p * r / (p + r)
}

fn oracle_pixel_f1(gt: &[PixelSet], pred: &[PixelSet]) -> f64 {
    let gu: PixelSet = gt.iter().flatten().copied().collect();
    let pu: PixelSet = pred.iter().flatten().copied().collect();
    let tp = gu.intersection(&pu).count();
    let fp = pu.difference(&gu).count();
    let fne = gu.difference(&pu).count();
    if tp + fp + fne == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fne) as f64;
    2.0 * p * r / (p + r)
}

fn partitions_equal(gt: &[PixelSet], pred: &[PixelSet]) -> bool {
    let mut a: Vec<&PixelSet> = gt.iter().collect();
    let mut b: Vec<&PixelSet> = pred.iter().collect();
    a.sort();
    b.sort();
    a == b
}

#[test]
fn criterion_3_metric_brute_force() {
    let started = Instant::now();
    let rects = rect_masks_3x3();

    // the worked toy case: one 2x2 ground truth, a 2-pixel prediction inside
    let mut gt = Array2::from_elem((3, 3), false);
    for y in 0..2 {
        for x in 0..2 {
            gt[(y, x)] = true;
        }
    }
    let mut pr = Array2::from_elem((3, 3), false);
    pr[(0, 0)] = true;
    pr[(0, 1)] = true;
    assert_eq!(darcnn::eval::aji(&[gt], &[pr]).unwrap(), 0.5);

    // side configurations: empty, every single rect, and ordered pairs
    // (ground-truth pairs must be disjoint: one id per pixel)
    let mut gt_configs: Vec<Vec<usize>> = vec![vec![]];
    let mut pred_configs: Vec<Vec<usize>> = vec![vec![]];
    for i in 0..rects.len() {
        gt_configs.push(vec![i]);
        pred_configs.push(vec![i]);
    }
    for i in 0..rects.len() {
        for j in 0..rects.len() {
            if i == j {
                continue;
            }
            pred_configs.push(vec![i, j]);
            if rects[i].1.is_disjoint(&rects[j].1) {
                gt_configs.push(vec![i, j]);
            }
        }
    }

    let mut cases = 0usize;
    for gt_cfg in &gt_configs {
        let gt_masks: Vec<Array2<bool>> = gt_cfg.iter().map(|&i| rects[i].0.clone()).collect();
        let gt_sets: Vec<PixelSet> = gt_cfg.iter().map(|&i| rects[i].1.clone()).collect();
        for pred_cfg in &pred_configs {
            let pred_masks: Vec<Array2<bool>> =
                pred_cfg.iter().map(|&i| rects[i].0.clone()).collect();
            let pred_sets: Vec<PixelSet> = pred_cfg.iter().map(|&i| rects[i].1.clone()).collect();

            let got_aji = darcnn::eval::aji(&gt_masks, &pred_masks).unwrap();
            let want_aji = oracle_aji(&gt_sets, &pred_sets);
            assert!(
                (got_aji - want_aji).abs() < 1e-12,
                "aji {got_aji} vs {want_aji} for gt {gt_cfg:?} pred {pred_cfg:?}"
            );
            assert!(got_aji <= 1.0 + 1e-12);
            // AJI = 1 iff the two sides are equal as pixel partitions
            assert_eq!(
                (got_aji - 1.0).abs() < 1e-12,
                partitions_equal(&gt_sets, &pred_sets),
                "aji-1 iff equal partitions failed for gt {gt_cfg:?} pred {pred_cfg:?}"
            );

            let got_f1 = darcnn::eval::object_f1(&gt_masks, &pred_masks, 0.5).unwrap();
            let want_f1 = oracle_object_f1(&gt_sets, &pred_sets);
            assert!(
                (got_f1 - want_f1).abs() < 1e-12,
                "objf1 {got_f1} vs {want_f1} for gt {gt_cfg:?} pred {pred_cfg:?}"
            );

            let union =
                |masks: &[Array2<bool>]| {
                    let mut u = Array2::from_elem((3, 3), false);
                    for m in masks {
                        u.zip_mut_with(m, |a, &b| *a |= b);
                    }
                    u
                };
            let got_px = darcnn::eval::pixel_f1(&union(&gt_masks), &union(&pred_masks)).unwrap();
            let want_px = oracle_pixel_f1(&gt_sets, &pred_sets);
            assert!(
                (got_px - want_px).abs() < 1e-12,
                "pixf1 {got_px} vs {want_px}"
            );
            cases += 1;
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "brute force took {elapsed:?}");
    println!(
        "acceptance criterion 3 (metric brute force): PASS, {cases} configurations in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 4: architecture invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_architecture_invariants() {
    let started = Instant::now();
    let cfg = small_cfg(5);
    let mut state = ModelState::<f64>::new(&cfg).unwrap();
    // decorrelate the private encoders so the check is not vacuous
    state.model.e_p_t.visit_mut(&mut |_, v| v.mapv_inplace(|x| x * 1.1 + 0.01));
    let tgt = samples(Domain::Target, 1, 51);
    let src = samples(Domain::Source, 1, 52);

    // parameter disjointness: a target-branch scalar gets no gradient from
    // source-private parameters, and vice versa; shared parameters get both
    let grads_of = |state: &ModelState<f64>, sample: &ImageSample, branch: Domain| {
        let build = |tape: &mut Tape<f64>, bound: &darcnn::model::BoundModel| {
            let refs = [sample];
            let x = tape.constant(darcnn::model::batch_input::<f64>(&refs).unwrap());
            let (h_c, h_p) = bound.encode_batch(tape, x, branch);
            let a = tape.sum(h_p);
            let b = tape.sum(h_c);
            tape.add(a, b)
        };
        loss_and_grads(state, &build).1
    };
    let g_target = grads_of(&state, &tgt[0], Domain::Target);
    assert!(!g_target.keys().any(|k| k.starts_with("e_p_s/")),
        "target-branch loss leaked gradients into source-private parameters");
    assert!(g_target.keys().any(|k| k.starts_with("e_p_t/")));
    assert!(g_target.keys().any(|k| k.starts_with("e_c/")));
    let g_source = grads_of(&state, &src[0], Domain::Source);
    assert!(!g_source.keys().any(|k| k.starts_with("e_p_t/")));
    assert!(g_source.keys().any(|k| k.starts_with("e_p_s/")));
    assert!(g_source.keys().any(|k| k.starts_with("e_c/")));

    // stage-2 freeze: frozen group hashes are bit-identical through training
    let mut cfg2 = small_cfg(6);
    cfg2.train.max_epochs = 1.0;
    cfg2.pipeline.z_pseudo_conf = 0.0;
    cfg2.pipeline.plateau_window_epochs = 50.0;
    let mut state2 = ModelState::<f32>::new(&cfg2).unwrap();
    state2.model.m_t.mask_out.b.fill(0.3);
    let tgt_f32 = samples(Domain::Target, 4, 53);
    let labels =
        darcnn::pseudolabel::generate_pseudo_labels(&state2, &tgt_f32, &cfg2, 0, "ck").unwrap();
    let stage2 = darcnn::pseudolabel::build_stage2_dataset(
        &labels,
        &tgt_f32,
        &darcnn::data::AugmentationParams::identity(),
        darcnn::core::config::AugPlacement::TrainAugmented,
        0,
    )
    .unwrap();
    let before: BTreeMap<String, String> = ["e_p_s", "m_s", "proj"]
        .iter()
        .map(|g| (g.to_string(), state2.group_hash(g)))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let schedule =
        darcnn::train::TrainSchedule::from_config(&cfg2, darcnn::train::Stage::Stage2);
    let out =
        darcnn::train::train_stage2(state2, &stage2, &schedule, &cfg2, dir.path(), None).unwrap();
    for (g, h) in &before {
        assert_eq!(&out.state.group_hash(g), h, "frozen group {g} changed");
    }

    // warmup boundaries, exact
    let cfg_w = PipelineConfig::default();
    assert_eq!(warmup_alpha(0, 1000, &cfg_w).unwrap(), cfg_w.pipeline.alpha_init);
    assert_eq!(warmup_alpha(100, 1000, &cfg_w).unwrap(), 1.0);
    assert_eq!(warmup_alpha(100_000, 1000, &cfg_w).unwrap(), 1.0);

    let elapsed = started.elapsed();
    println!("acceptance criterion 4 (architecture invariants): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 6: pseudo-label contracts
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_pseudo_label_contracts() {
    let started = Instant::now();
    let mut cfg = small_cfg(7);
    cfg.pipeline.z_pseudo_conf = 0.5;
    let mut state = ModelState::<f32>::new(&cfg).unwrap();
    // an untrained mask head can emit all-background masks; bias it so the
    // contracts are exercised on nonempty label sets
    state.model.m_t.mask_out.b.fill(0.3);
    let images = samples(Domain::Target, 3, 61);

    // monotonicity in z and the z = 0.5 retention contract
    let mut previous = usize::MAX;
    for z in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let mut c = cfg.clone();
        c.pipeline.z_pseudo_conf = z;
        let n = match darcnn::pseudolabel::generate_pseudo_labels(&state, &images, &c, 0, "ck") {
            Ok(set) => {
                for img in &set.per_image {
                    for inst in &img.instances {
                        assert!(inst.confidence >= z, "label below z={z}");
                    }
                }
                set.total_instances()
            }
            Err(darcnn::Error::EmptyPseudoLabel(_)) => 0,
            Err(e) => panic!("{e}"),
        };
        assert!(n <= previous, "raising z increased retention");
        previous = n;
    }

    // serialization round trip, bit-exact
    let mut c = cfg.clone();
    c.pipeline.z_pseudo_conf = 0.0;
    let set = darcnn::pseudolabel::generate_pseudo_labels(&state, &images, &c, 5, "ckhash").unwrap();
    let dir = tempfile::tempdir().unwrap();
    darcnn::pseudolabel::save_pseudo_labels(dir.path(), &set, &images).unwrap();
    let (back, stored) = darcnn::pseudolabel::load_pseudo_labels(dir.path()).unwrap();
    assert_eq!(back, set, "pseudo-label round trip is not exact");
    for (a, b) in stored.iter().zip(images.iter()) {
        assert_eq!(a.pixels, b.pixels);
    }

    let elapsed = started.elapsed();
    println!("acceptance criterion 6 (pseudo-label contracts): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 7: determinism and checkpoint round trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_determinism_and_checkpoint_round_trip() {
    let started = Instant::now();
    let mut cfg = small_cfg(9);
    cfg.train.max_epochs = 2.0; // 4 steps at 4 images / batch 2
    cfg.pipeline.checkpoint_interval_epochs = 1.0;
    cfg.pipeline.plateau_window_epochs = 50.0;
    let src = samples(Domain::Source, 4, 71);
    let tgt = samples(Domain::Target, 4, 72);
    let schedule = darcnn::train::TrainSchedule::from_config(&cfg, darcnn::train::Stage::Stage1);

    // identical seeds, identical loss logs (bitwise at f32)
    let run = |dir: &std::path::Path| {
        darcnn::train::train_stage1(
            ModelState::<f32>::new(&cfg).unwrap(),
            &src,
            &tgt,
            &schedule,
            &cfg,
            dir,
            None,
        )
        .unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(d1.path());
    let b = run(d2.path());
    for (x, y) in a.reports.iter().zip(b.reports.iter()) {
        assert_eq!(x.total.to_bits(), y.total.to_bits(), "loss logs diverge");
    }

    // train 4 = train 2 + checkpoint + restore + train 2, within 1e-6
    let mut cfg_half = cfg.clone();
    cfg_half.train.max_epochs = 1.0;
    let sched_half =
        darcnn::train::TrainSchedule::from_config(&cfg_half, darcnn::train::Stage::Stage1);
    let d_half = tempfile::tempdir().unwrap();
    let half = darcnn::train::train_stage1(
        ModelState::<f32>::new(&cfg_half).unwrap(),
        &src,
        &tgt,
        &sched_half,
        &cfg_half,
        d_half.path(),
        None,
    )
    .unwrap();
    let loaded = darcnn::model::checkpoint::load_checkpoint::<f32>(
        &half.chosen.path,
        Some(&cfg.hash()),
        true, // configs differ only in max_epochs
    )
    .unwrap();
    let d_resume = tempfile::tempdir().unwrap();
    let resumed = darcnn::train::train_stage1(
        loaded.state,
        &src,
        &tgt,
        &schedule,
        &cfg,
        d_resume.path(),
        loaded.optimizer,
    )
    .unwrap();
    let mut max_delta = 0.0f64;
    for g in GROUPS {
        let mut full_params: Vec<f64> = Vec::new();
        let mut resumed_params: Vec<f64> = Vec::new();
        a.state
            .model
            .visit_group(g, &mut |_, v| full_params.extend(v.iter().map(|x| x.to_float())));
        resumed.state.model.visit_group(g, &mut |_, v| {
            resumed_params.extend(v.iter().map(|x| x.to_float()))
        });
        for (x, y) in full_params.iter().zip(resumed_params.iter()) {
            max_delta = max_delta.max((x - y).abs());
        }
    }
    assert!(
        max_delta <= 1e-6,
        "restored training diverged by {max_delta:.3e}"
    );

    let elapsed = started.elapsed();
    println!(
        "acceptance criterion 7 (determinism + checkpoint round trip): PASS, max param delta {max_delta:.1e}, in {elapsed:?}"
    );
}
