use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of `f` w.r.t. every element of every leaf,
/// compared against tape gradients.
fn check_grads(
    leaves: &[ArrayD<f64>],
    f: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    tol: f64,
) {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|l| tape.leaf(l.clone(), true)).collect();
    let root = f(&mut tape, &ids);
    let grads = tape.backward(root);

    let h = 1e-5;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(ids[li])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()));
        for idx in 0..leaf.len() {
            let eval = |delta: f64| -> f64 {
                let mut perturbed: Vec<ArrayD<f64>> = leaves.to_vec();
                *perturbed[li].iter_mut().nth(idx).unwrap() += delta;
                let mut t = Tape::new();
                let pids: Vec<VarId> =
                    perturbed.iter().map(|l| t.leaf(l.clone(), true)).collect();
                let r = f(&mut t, &pids);
                t.scalar(r)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let denom = numeric.abs().max(a.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < tol,
                "leaf {li} elem {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn grad_elementwise_ops() {
    let mut rng = StdRng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    check_grads(&[a.clone(), b.clone()], |t, ids| {
        let s = t.add(ids[0], ids[1]);
        let d = t.sub(s, ids[1]);
        let m = t.mul(d, ids[1]);
        let sc = t.scale(m, 1.7);
        t.sum(sc)
    }, 1e-6);
    check_grads(&[a.clone()], |t, ids| {
        let e = t.exp(ids[0]);
        let g = t.sigmoid(e);
        t.mean(g)
    }, 1e-6);
    // keep activations away from their kinks
    let shifted = a.mapv(|v| v + if v.abs() < 0.05 { 0.2 } else { 0.0 });
    check_grads(&[shifted], |t, ids| {
        let r = t.relu(ids[0]);
        let l = t.leaky_relu(r, 0.1);
        let ab = t.abs(l);
        t.sum(ab)
    }, 1e-5);
}

#[test]
fn grad_mul_const_broadcast() {
    let mut rng = StdRng::seed_from_u64(2);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let mask = randn(&mut rng, &[1, 1, 4, 4]);
    check_grads(&[x], |t, ids| {
        let m = t.mul_const(ids[0], mask.clone());
        t.sum(m)
    }, 1e-6);
}

#[test]
fn grad_matmul_all_transpose_combos() {
    let mut rng = StdRng::seed_from_u64(3);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let ashape = if ta { [4, 3] } else { [3, 4] };
        let bshape = if tb { [5, 4] } else { [4, 5] };
        let a = randn(&mut rng, &ashape);
        let b = randn(&mut rng, &bshape);
        check_grads(&[a, b], |t, ids| {
            let m = t.matmul(ids[0], ids[1], ta, tb);
            let sq = t.mul(m, m);
            t.sum(sq)
        }, 1e-6);
    }
}

#[test]
fn grad_conv2d_and_bias() {
    let mut rng = StdRng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 3, 6, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        check_grads(&[x.clone(), w.clone(), b.clone()], |t, ids| {
            let c = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
            let sq = t.mul(c, c);
            t.sum(sq)
        }, 1e-5);
    }
}

#[test]
fn grad_instance_norm() {
    let mut rng = StdRng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    check_grads(&[x], |t, ids| {
        let n = t.instance_norm(ids[0], 1e-5);
        let sq = t.mul(n, n);
        let e = t.exp(ids[0]);
        let mixed = t.mul(sq, e);
        t.sum(mixed)
    }, 1e-5);
}

#[test]
fn grad_shape_ops() {
    let mut rng = StdRng::seed_from_u64(6);
    let x = randn(&mut rng, &[2, 6, 4, 3]);
    check_grads(&[x.clone()], |t, ids| {
        let s = t.slice_channels(ids[0], 1, 4);
        let r = t.channels_to_rows(s);
        let m = t.matmul(r, r, true, false);
        let sq = t.mul(m, m);
        t.sum(sq)
    }, 1e-6);
    check_grads(&[x.clone()], |t, ids| {
        let s = t.slice_spatial(ids[0], 1, 1, 3, 0, 2);
        let sum = t.sum_spatial(s);
        let sq = t.mul(sum, sum);
        t.sum(sq)
    }, 1e-6);
    check_grads(&[x], |t, ids| {
        let r = t.reshape(ids[0], &[4, 36]);
        let g = t.gather1d(r, vec![0, 5, 5, 143]);
        let sq = t.mul(g, g);
        t.mean(sq)
    }, 1e-6);
}

#[test]
fn grad_crop_upsample_concat() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 3, 8, 8]);
    let rect = CropRect {
        x0: 1.3,
        y0: 0.7,
        x1: 6.2,
        y1: 7.1,
    };
    check_grads(&[x], |t, ids| {
        let c0 = t.crop_resize_bilinear(ids[0], 0, rect, 4, 4);
        let c1 = t.crop_resize_bilinear(ids[0], 1, rect, 4, 4);
        let cat = t.concat_batch(&[c0, c1]);
        let up = t.upsample2x(cat);
        let sq = t.mul(up, up);
        t.sum(sq)
    }, 1e-5);
}

#[test]
fn grad_loss_kernels() {
    let mut rng = StdRng::seed_from_u64(8);
    let logits = randn(&mut rng, &[7]);
    let targets = ArrayD::from_shape_fn(IxDyn(&[7]), |_| {
        if rng.random_range(0.0..1.0) > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    check_grads(&[logits], |t, ids| {
        t.bce_with_logits_sum(ids[0], targets.clone())
    }, 1e-6);

    let pred = randn(&mut rng, &[6]);
    // keep |d| away from the huber switch point
    let tgt = pred.mapv(|v| v + if rng.random_range(0.0..1.0) > 0.5 { 0.4 } else { 1.9 });
    check_grads(&[pred], |t, ids| {
        t.smooth_l1_sum(ids[0], tgt.clone(), 1.0)
    }, 1e-5);

    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[4, 5]);
    check_grads(&[a, b], |t, ids| {
        let d = t.pairwise_sq_dist(ids[0], ids[1]);
        let e = t.exp(d);
        t.sum(e)
    }, 1e-5);
}

#[test]
fn grad_add_bias_row() {
    let mut rng = StdRng::seed_from_u64(9);
    let x = randn(&mut rng, &[4, 3]);
    let b = randn(&mut rng, &[3]);
    check_grads(&[x, b], |t, ids| {
        let y = t.add_bias_row(ids[0], ids[1]);
        let sq = t.mul(y, y);
        t.sum(sq)
    }, 1e-6);
}

#[test]
fn gradient_accumulates_on_reuse() {
    // d/dx (x * x) = 2x: the same node used twice must accumulate.
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0), true);
    let y = tape.mul(x, x);
    let root = tape.sum(y);
    let grads = tape.backward(root);
    assert_eq!(grads.get(x).unwrap()[0], 6.0);
}

#[test]
fn forward_values_are_sane() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 0.0));
    let s = tape.sigmoid(x);
    assert!(tape.value(s).iter().all(|&v| (v - 0.5).abs() < 1e-12));

    let l = tape.constant(ArrayD::zeros(IxDyn(&[3])));
    let bce = tape.bce_with_logits_sum(l, ArrayD::from_elem(IxDyn(&[3]), 1.0));
    let expected = 3.0 * (2.0f64).ln();
    assert!((tape.scalar(bce) - expected).abs() < 1e-12);
}
