//! Soft subspace orthogonality between shared and private features,
//! restricted to the first half of the channel depth.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::FeatureBundle;
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};

/// `||H_c^T H_p||_F^2 / rows^2` for row-matched matrices whose rows are
/// per-position feature vectors.
pub fn orthogonality_penalty<F: Scalar>(h_c: &Array2<F>, h_p: &Array2<F>) -> Result<F> {
    if h_c.nrows() != h_p.nrows() {
        return Err(Error::Shape(format!(
            "row mismatch: {} vs {}",
            h_c.nrows(),
            h_p.nrows()
        )));
    }
    let m = h_c.t().dot(h_p);
    let fro2 = m.iter().fold(F::zero(), |acc, &v| acc + v * v);
    let rows = F::from_count(h_c.nrows());
    Ok(fro2 / (rows * rows))
}

fn half_depth_rows<F: Scalar>(
    tape: &mut Tape<F>,
    features: VarId,
    half: usize,
) -> VarId {
    let sliced = tape.slice_channels(features, 0, half);
    tape.channels_to_rows(sliced)
}

/// Tape version over batched `[N,D,h,w]` maps: the source and target terms
/// are each normalized by their own squared row count and summed.
pub fn difference_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    h_c_s: VarId,
    h_p_s: VarId,
    h_c_t: VarId,
    h_p_t: VarId,
) -> Result<VarId> {
    let depth = tape.value(h_c_s).shape()[1];
    if depth % 2 != 0 {
        return Err(Error::Config(vec!["feature_depth must be even".into()]));
    }
    let half = depth / 2;
    let term = |tape: &mut Tape<F>, h_c: VarId, h_p: VarId| {
        let hc = half_depth_rows(tape, h_c, half);
        let hp = half_depth_rows(tape, h_p, half);
        let rows = tape.value(hc).shape()[0];
        let m = tape.matmul(hc, hp, true, false);
        let sq = tape.mul(m, m);
        let fro2 = tape.sum(sq);
        tape.scale(fro2, F::from_float(1.0 / (rows * rows) as f64))
    };
    let s = term(tape, h_c_s, h_p_s);
    let t = term(tape, h_c_t, h_p_t);
    Ok(tape.add(s, t))
}

/// Plain-value difference loss for a source and a target feature bundle.
pub fn difference_loss<F: Scalar>(
    bundle_s: &FeatureBundle<F>,
    bundle_t: &FeatureBundle<F>,
) -> Result<F> {
    let to_batch = |a: &ndarray::Array3<F>| {
        let (d, h, w) = a.dim();
        a.clone()
            .into_shape_with_order((1, d, h, w))
            .unwrap()
            .into_dyn()
    };
    let mut tape = Tape::new();
    let h_c_s = tape.constant(to_batch(&bundle_s.h_c));
    let h_p_s = tape.constant(to_batch(&bundle_s.h_p));
    let h_c_t = tape.constant(to_batch(&bundle_t.h_c));
    let h_p_t = tape.constant(to_batch(&bundle_t.h_p));
    let out = difference_loss_on_tape(&mut tape, h_c_s, h_p_s, h_c_t, h_p_t)?;
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::types::Domain;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn orthogonal_columns_give_zero() {
        // rows are positions; columns of H_c and H_p are orthogonal
        let h_c = array![[1.0f64], [1.0]];
        let h_p = array![[1.0f64], [-1.0]];
        assert!(orthogonality_penalty(&h_c, &h_p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn worked_two_by_two_case() {
        let h_c = array![[1.0f64, 2.0], [3.0, 4.0]];
        let h_p = array![[0.0f64, 1.0], [1.0, 0.0]];
        // H_c^T H_p = [[3,1],[4,2]]; squared Frobenius = 30; rows^2 = 4
        let m = h_c.t().dot(&h_p);
        let fro2: f64 = m.iter().map(|v| v * v).sum();
        assert_eq!(fro2, 30.0);
        let v = orthogonality_penalty(&h_c, &h_p).unwrap();
        assert!((v - 7.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_private_features_give_zero() {
        let h_c = array![[1.0f64, 2.0], [3.0, 4.0]];
        let h_p = Array2::<f64>::zeros((2, 2));
        assert_eq!(orthogonality_penalty(&h_c, &h_p).unwrap(), 0.0);
    }

    #[test]
    fn odd_depth_is_a_config_error() {
        let bundle = |d: usize| FeatureBundle {
            h_c: Array3::<f64>::zeros((d, 2, 2)),
            h_p: Array3::<f64>::zeros((d, 2, 2)),
            domain: Domain::Source,
        };
        assert!(matches!(
            difference_loss(&bundle(3), &bundle(3)),
            Err(Error::Config(_))
        ));
        assert!(difference_loss(&bundle(4), &bundle(4)).is_ok());
    }

    #[test]
    fn only_first_half_of_depth_participates() {
        let mut h_c = Array3::<f64>::zeros((4, 2, 2));
        let mut h_p = Array3::<f64>::zeros((4, 2, 2));
        // put mass only in the second half: loss stays zero
        for y in 0..2 {
            for x in 0..2 {
                h_c[(2, y, x)] = 1.0;
                h_p[(3, y, x)] = 1.0;
            }
        }
        let b = FeatureBundle {
            h_c,
            h_p,
            domain: Domain::Source,
        };
        let v = difference_loss(&b, &b.clone()).unwrap();
        assert_eq!(v, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        // invariant to a simultaneous row permutation of H_c and H_p
        #[test]
        fn row_permutation_invariance(vals in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let h_c = Array2::from_shape_vec((6, 2), vals[..12].to_vec()).unwrap();
            let h_p = Array2::from_shape_vec((6, 2), vals[12..].to_vec()).unwrap();
            let base = orthogonality_penalty(&h_c, &h_p).unwrap();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let pc = Array2::from_shape_fn((6, 2), |(r, c)| h_c[(perm[r], c)]);
            let pp = Array2::from_shape_fn((6, 2), |(r, c)| h_p[(perm[r], c)]);
            let permuted = orthogonality_penalty(&pc, &pp).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }
    }
}
