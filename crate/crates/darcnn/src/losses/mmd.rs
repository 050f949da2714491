//! Maximum mean discrepancy with a multi-scale Gaussian kernel.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};

/// Gaussian kernel family over one or more bandwidths; the MMD sums over
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<F: Scalar> {
    pub bandwidths: Vec<F>,
}

impl<F: Scalar> KernelSpec<F> {
    pub fn gaussian(bandwidths: Vec<F>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Config(vec!["bandwidths must be nonempty".into()]));
        }
        if bandwidths.iter().any(|b| *b <= F::zero()) {
            return Err(Error::Config(vec!["bandwidths must be positive".into()]));
        }
        Ok(KernelSpec { bandwidths })
    }

    /// Median pairwise distance over the pooled sample set, scaled by
    /// {0.5, 1, 2}, with a floor of 1e-6. Recomputed per batch; treated as a
    /// constant with respect to the inputs.
    pub fn median_heuristic(s: &Array2<F>, t: &Array2<F>) -> Self {
        let mut rows: Vec<ndarray::ArrayView1<'_, F>> = s.outer_iter().collect();
        rows.extend(t.outer_iter());
        let mut dists = Vec::new();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let mut acc = F::zero();
                for (a, b) in rows[i].iter().zip(rows[j].iter()) {
                    let d = *a - *b;
                    acc = acc + d * d;
                }
                dists.push(acc.sqrt().to_float());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            dists[dists.len() / 2]
        };
        let base = median.max(1e-6);
        KernelSpec {
            bandwidths: [0.5, 1.0, 2.0]
                .iter()
                .map(|&m| F::from_float(base * m))
                .collect(),
        }
    }
}

/// MMD between two vector sets on the tape:
/// `(1/Ns^2) sum k(s_i,s_j) - (2/(Ns Nt)) sum k(s_i,t_j) + (1/Nt^2) sum k(t_i,t_j)`,
/// summed over kernel bandwidths. `s` is `[Ns,d]`, `t` is `[Nt,d]`.
pub fn mmd_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    s: VarId,
    t: VarId,
    kernel: &KernelSpec<F>,
) -> Result<VarId> {
    let ns = tape.value(s).shape()[0];
    let nt = tape.value(t).shape()[0];
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyBatch("mmd_loss requires nonempty sets".into()));
    }
    let d_ss = tape.pairwise_sq_dist(s, s);
    let d_st = tape.pairwise_sq_dist(s, t);
    let d_tt = tape.pairwise_sq_dist(t, t);
    let mut terms = Vec::new();
    for &sigma in &kernel.bandwidths {
        let inv = -F::one() / (F::from_float(2.0) * sigma * sigma);
        let term = |tape: &mut Tape<F>, d2: VarId, coeff: f64| {
            let scaled = tape.scale(d2, inv);
            let k = tape.exp(scaled);
            let ksum = tape.sum(k);
            tape.scale(ksum, F::from_float(coeff))
        };
        let ss = term(tape, d_ss, 1.0 / (ns * ns) as f64);
        let st = term(tape, d_st, -2.0 / (ns * nt) as f64);
        let tt = term(tape, d_tt, 1.0 / (nt * nt) as f64);
        let sum_st = tape.add(ss, st);
        terms.push(tape.add(sum_st, tt));
    }
    Ok(tape.add_n(&terms))
}

/// Plain-value MMD over row-vector sets.
pub fn mmd_loss<F: Scalar>(s: &Array2<F>, t: &Array2<F>, kernel: &KernelSpec<F>) -> Result<F> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone().into_dyn());
    let tv = tape.constant(t.clone().into_dyn());
    let out = mmd_loss_on_tape(&mut tape, sv, tv, kernel)?;
    Ok(tape.scalar(out))
}
