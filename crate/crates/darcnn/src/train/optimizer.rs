//! First-order parameter updates with exactly restorable state.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::core::config::OptimizerKind;
use crate::model::checkpoint::OptimizerSnapshot;
use crate::scalar::Scalar;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam (default) or plain SGD. Moments are keyed by parameter path and
/// survive checkpointing, so resumed training reproduces an uninterrupted
/// run exactly.
pub struct Optimizer<F: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Call once per training step before applying parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter in place from its gradient.
    pub fn apply(&mut self, path: &str, value: &mut ArrayD<F>, grad: &ArrayD<F>) {
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = F::from_float(self.lr);
                value.zip_mut_with(grad, |p, &g| *p = *p - lr * g);
            }
            OptimizerKind::Adam => {
                let b1 = F::from_float(ADAM_BETA1);
                let b2 = F::from_float(ADAM_BETA2);
                let eps = F::from_float(ADAM_EPS);
                let m = self
                    .m
                    .entry(path.to_string())
                    .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
                let v = self
                    .v
                    .entry(path.to_string())
                    .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
                m.zip_mut_with(grad, |mi, &g| *mi = b1 * *mi + (F::one() - b1) * g);
                v.zip_mut_with(grad, |vi, &g| *vi = b2 * *vi + (F::one() - b2) * g * g);
                let corr1 = F::from_float(1.0 - ADAM_BETA1.powi(self.t as i32));
                let corr2 = F::from_float(1.0 - ADAM_BETA2.powi(self.t as i32));
                let lr = F::from_float(self.lr);
                for ((p, mi), vi) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = *mi / corr1;
                    let vhat = *vi / corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            t: self.t,
            entries: self
                .m
                .iter()
                .map(|(k, m)| {
                    let v = &self.v[k];
                    (
                        k.clone(),
                        (
                            m.iter().map(|x| x.to_float()).collect(),
                            v.iter().map(|x| x.to_float()).collect(),
                        ),
                    )
                })
                .collect(),
        }
    }

    /// Restores moments from a snapshot. Shapes come from the live
    /// parameters on first use, so entries are stored flat and reshaped
    /// lazily against the gradient in [`Optimizer::apply`]; to keep that
    /// simple, restoration records flat values and `apply` validates length.
    pub fn restore(&mut self, snap: &OptimizerSnapshot, shapes: &BTreeMap<String, Vec<usize>>) {
        self.t = snap.t;
        self.m.clear();
        self.v.clear();
        for (k, (m, v)) in &snap.entries {
            let Some(shape) = shapes.get(k) else { continue };
            let m_arr = ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                m.iter().map(|&x| F::from_float(x)).collect(),
            )
            .expect("snapshot moment matches parameter shape");
            let v_arr = ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                v.iter().map(|&x| F::from_float(x)).collect(),
            )
            .expect("snapshot moment matches parameter shape");
            self.m.insert(k.clone(), m_arr);
            self.v.insert(k.clone(), v_arr);
        }
    }
}

/// Scale factor that caps the global gradient norm at `max_norm`; 1.0 when
/// already within the cap or clipping is disabled.
pub fn clip_factor<F: Scalar>(grads: &BTreeMap<String, ArrayD<F>>, max_norm: f64) -> f64 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let mut sq = 0.0f64;
    for g in grads.values() {
        for x in g.iter() {
            let v = x.to_float();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
