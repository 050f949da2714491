//! Reverse-mode automatic differentiation over dynamic-dimension arrays.
//!
//! A [`Tape`] is an append-only arena of nodes; creation order is already a
//! topological order, so backpropagation is a single reverse sweep. Values
//! are computed eagerly when an op is recorded. Image tensors are NCHW.
//!
//! The op set is exactly what the domain separation model and its losses
//! need; shape mismatches are programmer errors and panic.

mod conv;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use crate::scalar::Scalar;
use conv::{col2im, im2col};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Axis-aligned rectangle in continuous feature-grid coordinates, used by the
/// bilinear region pooling op.
#[derive(Debug, Clone, Copy)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

enum Op<F: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, F),
    MulConst(VarId, ArrayD<F>),
    Exp(VarId),
    Abs(VarId),
    Relu(VarId),
    LeakyRelu(VarId, F),
    Sigmoid(VarId),
    Softplus(VarId),
    MatMul {
        a: VarId,
        b: VarId,
        ta: bool,
        tb: bool,
    },
    AddBiasRow {
        x: VarId,
        bias: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: VarId,
        eps: F,
    },
    Sum(VarId),
    Mean(VarId),
    SumSpatial(VarId),
    Reshape(VarId),
    SliceChannels {
        x: VarId,
        lo: usize,
        hi: usize,
    },
    ChannelsToRows(VarId),
    SliceSpatial {
        x: VarId,
        image: usize,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    },
    CropResizeBilinear {
        x: VarId,
        image: usize,
        rect: CropRect,
        out_h: usize,
        out_w: usize,
    },
    Upsample2x(VarId),
    ConcatBatch(Vec<VarId>),
    Gather1d {
        x: VarId,
        indices: Vec<usize>,
    },
    BceWithLogitsSum {
        x: VarId,
        targets: ArrayD<F>,
    },
    SmoothL1Sum {
        x: VarId,
        targets: ArrayD<F>,
        beta: F,
    },
    PairwiseSqDist {
        a: VarId,
        b: VarId,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients keyed by [`VarId`], produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<ArrayD<F>> {
        self.grads[id.0].take()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: VarId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node as a scalar.
    pub fn scalar(&self, id: VarId) -> F {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on node of len {}", v.len());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a differentiable leaf (a parameter) or a plain input.
    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> VarId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Insert a constant input.
    pub fn constant(&mut self, value: ArrayD<F>) -> VarId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Sum of a nonempty list of same-shape nodes.
    pub fn add_n(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "add_n on empty list");
        let mut acc = ids[0];
        for id in &ids[1..] {
            acc = self.add(acc, *id);
        }
        acc
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    /// Elementwise product with a non-differentiable constant; the constant
    /// may broadcast against `x`.
    pub fn mul_const(&mut self, x: VarId, cst: ArrayD<F>) -> VarId {
        let xv = &self.nodes[x.0].value;
        let b = cst
            .broadcast(xv.raw_dim())
            .expect("mul_const: constant must broadcast to operand shape");
        let v = xv * &b;
        let ng = self.needs(x);
        self.push(v, Op::MulConst(x, cst), ng)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(F::exp);
        let ng = self.needs(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(F::abs);
        let ng = self.needs(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(|e| e.max(F::zero()));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: F) -> VarId {
        let v = self.nodes[x.0]
            .value
            .mapv(|e| if e > F::zero() { e } else { e * slope });
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(sigmoid_stable);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Smooth rectifier `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x.0].value.mapv(softplus_stable);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    /// 2-D matrix product with optional transposes.
    pub fn matmul(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let am = if ta { av.t().to_owned() } else { av.to_owned() };
        let bm = if tb { bv.t().to_owned() } else { bv.to_owned() };
        let v = am.dot(&bm).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `[N,K] + [K]` broadcast bias add.
    pub fn add_bias_row(&mut self, x: VarId, bias: VarId) -> VarId {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let bv = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-D");
        let v = (&xv + &bv).into_dyn();
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, Op::AddBiasRow { x, bias }, ng)
    }

    /// NCHW convolution: `x [N,Ci,H,W]`, `w [Co,Ci,kh,kw]`, optional `[Co]` bias.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let (n, ci, h, wd) = xv.dim();
        let (co, ci_w, kh, kw) = wv.dim();
        assert_eq!(ci, ci_w, "conv2d channel mismatch");
        let oh = conv_out(h, kh, stride, pad);
        let ow = conv_out(wd, kw, stride, pad);
        let wmat = wv
            .to_owned()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let mut out = Array4::<F>::zeros((n, co, oh, ow));
        for i in 0..n {
            let col = im2col(&xv.index_axis(Axis(0), i), kh, kw, stride, pad);
            let o = wmat.dot(&col);
            let o = o.into_shape_with_order((co, oh, ow)).unwrap();
            out.index_axis_mut(Axis(0), i).assign(&o);
        }
        if let Some(b) = bias {
            let bv = self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias must be 1-D");
            for c in 0..co {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|e| e + bv[c]);
            }
        }
        let ng = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Per-(image, channel) normalization over the spatial extent.
    pub fn instance_norm(&mut self, x: VarId, eps: F) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let m = F::from_count(h * w);
        let mut out = Array4::<F>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.slice(ndarray::s![i, ch, .., ..]);
                let mu = plane.sum() / m;
                let var = plane.mapv(|e| (e - mu) * (e - mu)).sum() / m;
                let inv = F::one() / (var + eps).sqrt();
                out.slice_mut(ndarray::s![i, ch, .., ..])
                    .assign(&plane.mapv(|e| (e - mu) * inv));
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::InstanceNorm { x, eps }, ng)
    }

    /// Sum of all elements, as a length-1 array.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.nodes[x.0].value.sum();
        let ng = self.needs(x);
        self.push(scalar_arr(s), Op::Sum(x), ng)
    }

    /// Mean of all elements, as a length-1 array.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / F::from_count(v.len());
        let ng = self.needs(x);
        self.push(scalar_arr(s), Op::Mean(x), ng)
    }

    /// `[N,C,H,W] -> [N,C]` summing the spatial axes.
    pub fn sum_spatial(&mut self, x: VarId) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let v = xv.sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::SumSpatial(x), ng)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count must match");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Channel slice `lo..hi` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: VarId, lo: usize, hi: usize) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let v = xv.slice(ndarray::s![.., lo..hi, .., ..]).to_owned();
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::SliceChannels { x, lo, hi }, ng)
    }

    /// `[N,C,H,W] -> [N*H*W, C]`: one row per spatial position.
    pub fn channels_to_rows(&mut self, x: VarId) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let v = xv
            .to_owned()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * h * w, c))
            .unwrap();
        let ng = self.needs(x);
        self.push(v.into_dyn(), Op::ChannelsToRows(x), ng)
    }

    /// Integer spatial window of one image: `[N,C,H,W] -> [1,C,y1-y0,x1-x0]`.
    pub fn slice_spatial(
        &mut self,
        x: VarId,
        image: usize,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let v = xv
            .slice(ndarray::s![image..image + 1, .., y0..y1, x0..x1])
            .to_owned();
        let ng = self.needs(x);
        self.push(
            v.into_dyn(),
            Op::SliceSpatial {
                x,
                image,
                y0,
                y1,
                x0,
                x1,
            },
            ng,
        )
    }

    /// Bilinear region pooling of one image: `[N,C,H,W] -> [1,C,out_h,out_w]`.
    /// One sample per output cell, taken at the cell center.
    pub fn crop_resize_bilinear(
        &mut self,
        x: VarId,
        image: usize,
        rect: CropRect,
        out_h: usize,
        out_w: usize,
    ) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let (_, c, h, w) = xv.dim();
        assert!(rect.x1 > rect.x0 && rect.y1 > rect.y0, "degenerate crop rect");
        let mut out = Array4::<F>::zeros((1, c, out_h, out_w));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (pts, wts) = bilinear_taps(rect, oy, ox, out_h, out_w, h, w);
                for ch in 0..c {
                    let mut acc = F::zero();
                    for k in 0..4 {
                        let (iy, ix) = pts[k];
                        acc = acc + xv[(image, ch, iy, ix)] * F::from_float(wts[k]);
                    }
                    out[(0, ch, oy, ox)] = acc;
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            out.into_dyn(),
            Op::CropResizeBilinear {
                x,
                image,
                rect,
                out_h,
                out_w,
            },
            ng,
        )
    }

    /// Nearest-neighbor upsampling by 2 in both spatial axes.
    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xcol in 0..2 * w {
                        out[(i, ch, y, xcol)] = xv[(i, ch, y / 2, xcol / 2)];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2x(x), ng)
    }

    /// Concatenate 4-D tensors along the batch axis.
    pub fn concat_batch(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_batch on empty list");
        let views: Vec<_> = parts
            .iter()
            .map(|p| as4(&self.nodes[p.0].value))
            .collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_batch shape mismatch");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v.into_dyn(), Op::ConcatBatch(parts.to_vec()), ng)
    }

    /// Select elements by flattened index (row-major); indices may repeat.
    pub fn gather1d(&mut self, x: VarId, indices: Vec<usize>) -> VarId {
        let xv = &self.nodes[x.0].value;
        let flat = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(xv.len())
            .unwrap();
        let v = Array1::from_iter(indices.iter().map(|&i| flat[i])).into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::Gather1d { x, indices }, ng)
    }

    /// Numerically stable binary cross-entropy with logits, sum reduction.
    pub fn bce_with_logits_sum(&mut self, x: VarId, targets: ArrayD<F>) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape(), targets.shape(), "bce target shape mismatch");
        let mut s = F::zero();
        for (&l, &t) in xv.iter().zip(targets.iter()) {
            s = s + l.max(F::zero()) - l * t + (-l.abs()).exp().ln_1p();
        }
        let ng = self.needs(x);
        self.push(scalar_arr(s), Op::BceWithLogitsSum { x, targets }, ng)
    }

    /// Smooth-L1 (Huber) loss against constant targets, sum reduction.
    pub fn smooth_l1_sum(&mut self, x: VarId, targets: ArrayD<F>, beta: F) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape(), targets.shape(), "smooth_l1 target shape mismatch");
        assert!(beta > F::zero(), "smooth_l1 beta must be positive");
        let half = F::from_float(0.5);
        let mut s = F::zero();
        for (&p, &t) in xv.iter().zip(targets.iter()) {
            let d = p - t;
            s = s + if d.abs() < beta {
                half * d * d / beta
            } else {
                d.abs() - half * beta
            };
        }
        let ng = self.needs(x);
        self.push(scalar_arr(s), Op::SmoothL1Sum { x, targets, beta }, ng)
    }

    /// Pairwise squared Euclidean distances: `[n,d] x [m,d] -> [n,m]`.
    pub fn pairwise_sq_dist(&mut self, a: VarId, b: VarId) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let (n, d) = av.dim();
        let (m, d2) = bv.dim();
        assert_eq!(d, d2, "pairwise_sq_dist feature dim mismatch");
        let mut out = Array2::<F>::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut s = F::zero();
                for k in 0..d {
                    let diff = av[(i, k)] - bv[(j, k)];
                    s = s + diff * diff;
                }
                out[(i, j)] = s;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::PairwiseSqDist { a, b }, ng)
    }

    /// Backpropagate from a single-element root node.
    pub fn backward(&self, root: VarId) -> Gradients<F> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            F::one(),
        ));
        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.step_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn step_backward(&self, idx: usize, g: &ArrayD<F>, grads: &mut Vec<Option<ArrayD<F>>>) {
        let val = |id: VarId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, g.mapv(|e| e * *c));
            }
            Op::MulConst(x, cst) => {
                let b = cst.broadcast(g.raw_dim()).unwrap();
                self.acc(grads, *x, g * &b);
            }
            Op::Exp(x) => {
                self.acc(grads, *x, g * &self.nodes[idx].value);
            }
            Op::Abs(x) => {
                let sign = val(*x).mapv(|e| {
                    if e > F::zero() {
                        F::one()
                    } else if e < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, g * &sign);
            }
            Op::Relu(x) => {
                let m = val(*x).mapv(|e| if e > F::zero() { F::one() } else { F::zero() });
                self.acc(grads, *x, g * &m);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let m = val(*x).mapv(|e| if e > F::zero() { F::one() } else { s });
                self.acc(grads, *x, g * &m);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let d = y.mapv(|e| e * (F::one() - e));
                self.acc(grads, *x, g * &d);
            }
            Op::Softplus(x) => {
                let d = val(*x).mapv(sigmoid_stable);
                self.acc(grads, *x, g * &d);
            }
            Op::MatMul { a, b, ta, tb } => {
                let g2 = as2(g).to_owned();
                let av = as2(val(*a)).to_owned();
                let bv = as2(val(*b)).to_owned();
                let ap = if *ta { av.t().to_owned() } else { av.clone() };
                let bp = if *tb { bv.t().to_owned() } else { bv.clone() };
                if self.needs(*a) {
                    let gap = g2.dot(&bp.t());
                    let ga = if *ta { gap.t().to_owned() } else { gap };
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.needs(*b) {
                    let gbp = ap.t().dot(&g2);
                    let gb = if *tb { gbp.t().to_owned() } else { gbp };
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
            Op::AddBiasRow { x, bias } => {
                if self.needs(*x) {
                    self.acc(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let g2 = as2(g);
                    self.acc(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let g4 = as4(g);
                let xv = as4(val(*x));
                let wv = as4(val(*w));
                let (n, _ci, _h, _w) = xv.dim();
                let (co, ci, kh, kw) = wv.dim();
                let (_, _, oh, ow) = g4.dim();
                let wmat = wv
                    .to_owned()
                    .into_shape_with_order((co, ci * kh * kw))
                    .unwrap();
                let mut gw = Array2::<F>::zeros((co, ci * kh * kw));
                let mut gx = xv.to_owned();
                gx.fill(F::zero());
                for i in 0..n {
                    let gmat = g4
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape_with_order((co, oh * ow))
                        .unwrap();
                    let col = im2col(&xv.index_axis(Axis(0), i), kh, kw, *stride, *pad);
                    if self.needs(*w) {
                        gw = gw + gmat.dot(&col.t());
                    }
                    if self.needs(*x) {
                        let gcol = wmat.t().dot(&gmat);
                        let gxi = col2im(
                            &gcol,
                            xv.dim().1,
                            xv.dim().2,
                            xv.dim().3,
                            kh,
                            kw,
                            *stride,
                            *pad,
                        );
                        gx.index_axis_mut(Axis(0), i).assign(&gxi);
                    }
                }
                if self.needs(*w) {
                    self.acc(
                        grads,
                        *w,
                        gw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
                    );
                }
                if self.needs(*x) {
                    self.acc(grads, *x, gx.into_dyn());
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                        self.acc(grads, *b, gb.into_dyn());
                    }
                }
            }
            Op::InstanceNorm { x, eps } => {
                let xv = as4(val(*x));
                let yv = as4(&self.nodes[idx].value);
                let g4 = as4(g);
                let (n, c, h, w) = xv.dim();
                let m = F::from_count(h * w);
                let mut gx = xv.to_owned();
                gx.fill(F::zero());
                for i in 0..n {
                    for ch in 0..c {
                        let plane = xv.slice(ndarray::s![i, ch, .., ..]);
                        let y = yv.slice(ndarray::s![i, ch, .., ..]);
                        let gy = g4.slice(ndarray::s![i, ch, .., ..]);
                        let mu = plane.sum() / m;
                        let var = plane.mapv(|e| (e - mu) * (e - mu)).sum() / m;
                        let inv = F::one() / (var + *eps).sqrt();
                        let mean_gy = gy.sum() / m;
                        let mean_gyy = (&gy * &y).sum() / m;
                        let gplane = ndarray::Zip::from(&gy)
                            .and(&y)
                            .map_collect(|&gyi, &yi| inv * (gyi - mean_gy - yi * mean_gyy));
                        gx.slice_mut(ndarray::s![i, ch, .., ..]).assign(&gplane);
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::Sum(x) => {
                let gs = g[0];
                let gx = ArrayD::from_elem(val(*x).raw_dim(), gs);
                self.acc(grads, *x, gx);
            }
            Op::Mean(x) => {
                let n = F::from_count(val(*x).len());
                let gs = g[0] / n;
                let gx = ArrayD::from_elem(val(*x).raw_dim(), gs);
                self.acc(grads, *x, gx);
            }
            Op::SumSpatial(x) => {
                let xv = as4(val(*x));
                let (n, c, h, w) = xv.dim();
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("sum_spatial grad must be 2-D");
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        gx.slice_mut(ndarray::s![i, ch, .., ..]).fill(g2[(i, ch)]);
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::Reshape(x) => {
                let gx = g
                    .clone()
                    .into_shape_with_order(val(*x).raw_dim())
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::SliceChannels { x, lo, hi } => {
                let xv = as4(val(*x));
                let mut gx = Array4::<F>::zeros(xv.dim());
                gx.slice_mut(ndarray::s![.., *lo..*hi, .., ..])
                    .assign(&as4(g));
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::ChannelsToRows(x) => {
                let xv = as4(val(*x));
                let (n, c, h, w) = xv.dim();
                let gx = as2(g)
                    .to_owned()
                    .into_shape_with_order((n, h, w, c))
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned();
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::SliceSpatial {
                x,
                image,
                y0,
                y1,
                x0,
                x1,
            } => {
                let xv = as4(val(*x));
                let mut gx = Array4::<F>::zeros(xv.dim());
                gx.slice_mut(ndarray::s![*image..*image + 1, .., *y0..*y1, *x0..*x1])
                    .assign(&as4(g));
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::CropResizeBilinear {
                x,
                image,
                rect,
                out_h,
                out_w,
            } => {
                let xv = as4(val(*x));
                let (_, c, h, w) = xv.dim();
                let g4 = as4(g);
                let mut gx = Array4::<F>::zeros(xv.dim());
                for oy in 0..*out_h {
                    for ox in 0..*out_w {
                        let (pts, wts) = bilinear_taps(*rect, oy, ox, *out_h, *out_w, h, w);
                        for ch in 0..c {
                            let go = g4[(0, ch, oy, ox)];
                            for k in 0..4 {
                                let (iy, ix) = pts[k];
                                gx[(*image, ch, iy, ix)] =
                                    gx[(*image, ch, iy, ix)] + go * F::from_float(wts[k]);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::Upsample2x(x) => {
                let xv = as4(val(*x));
                let (n, c, h, w) = xv.dim();
                let g4 = as4(g);
                let mut gx = Array4::<F>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xc in 0..2 * w {
                                gx[(i, ch, y / 2, xc / 2)] =
                                    gx[(i, ch, y / 2, xc / 2)] + g4[(i, ch, y, xc)];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
            }
            Op::ConcatBatch(parts) => {
                let g4 = as4(g);
                let mut offset = 0;
                for p in parts {
                    let np = as4(val(*p)).dim().0;
                    if self.needs(*p) {
                        let gp = g4.slice(ndarray::s![offset..offset + np, .., .., ..]);
                        self.acc(grads, *p, gp.to_owned().into_dyn());
                    }
                    offset += np;
                }
            }
            Op::Gather1d { x, indices } => {
                let xv = val(*x);
                let mut gflat = Array1::<F>::zeros(xv.len());
                let g1 = g
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("gather grad must be 1-D");
                for (k, &i) in indices.iter().enumerate() {
                    gflat[i] = gflat[i] + g1[k];
                }
                let gx = gflat.into_shape_with_order(xv.raw_dim()).unwrap();
                self.acc(grads, *x, gx);
            }
            Op::BceWithLogitsSum { x, targets } => {
                let gs = g[0];
                let gx = ndarray::Zip::from(val(*x))
                    .and(targets)
                    .map_collect(|&l, &t| gs * (sigmoid_stable(l) - t));
                self.acc(grads, *x, gx);
            }
            Op::SmoothL1Sum { x, targets, beta } => {
                let gs = g[0];
                let b = *beta;
                let gx = ndarray::Zip::from(val(*x))
                    .and(targets)
                    .map_collect(|&p, &t| {
                        let d = p - t;
                        gs * if d.abs() < b {
                            d / b
                        } else if d > F::zero() {
                            F::one()
                        } else {
                            -F::one()
                        }
                    });
                self.acc(grads, *x, gx);
            }
            Op::PairwiseSqDist { a, b } => {
                let av = as2(val(*a)).to_owned();
                let bv = as2(val(*b)).to_owned();
                let g2 = as2(g).to_owned();
                let two = F::from_float(2.0);
                if self.needs(*a) {
                    // ga[i] = 2 * (rowsum_g[i] * a[i] - (g . B)[i])
                    let rowsum = g2.sum_axis(Axis(1));
                    let gb_mat = g2.dot(&bv);
                    let mut ga = Array2::<F>::zeros(av.dim());
                    for i in 0..av.dim().0 {
                        for k in 0..av.dim().1 {
                            ga[(i, k)] = two * (rowsum[i] * av[(i, k)] - gb_mat[(i, k)]);
                        }
                    }
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.needs(*b) {
                    let colsum = g2.sum_axis(Axis(0));
                    let ga_mat = g2.t().dot(&av);
                    let mut gb = Array2::<F>::zeros(bv.dim());
                    for j in 0..bv.dim().0 {
                        for k in 0..bv.dim().1 {
                            gb[(j, k)] = two * (colsum[j] * bv[(j, k)] - ga_mat[(j, k)]);
                        }
                    }
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], id: VarId, delta: ArrayD<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        // transpose-producing ops can hand back F-contiguous arrays, which
        // reshape-based backward rules reject; normalize here once
        let delta = if delta.is_standard_layout() {
            delta
        } else {
            delta.as_standard_layout().to_owned()
        };
        match &mut grads[id.0] {
            Some(existing) => *existing = &*existing + &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn scalar_arr<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[1]), v)
}

fn softplus_stable<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "conv input smaller than kernel");
    (n + 2 * pad - k) / stride + 1
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-D tensor")
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected 4-D tensor")
}

/// The four integer taps and weights of one bilinear sample. Sample point is
/// the output cell center mapped into the rect; cell centers of the input
/// grid sit at integer + 0.5.
fn bilinear_taps(
    rect: CropRect,
    oy: usize,
    ox: usize,
    out_h: usize,
    out_w: usize,
    h: usize,
    w: usize,
) -> ([(usize, usize); 4], [f64; 4]) {
    let bin_h = (rect.y1 - rect.y0) / out_h as f64;
    let bin_w = (rect.x1 - rect.x0) / out_w as f64;
    let sy = rect.y0 + (oy as f64 + 0.5) * bin_h - 0.5;
    let sx = rect.x0 + (ox as f64 + 0.5) * bin_w - 0.5;
    let y_lo = sy.floor();
    let x_lo = sx.floor();
    let wy = sy - y_lo;
    let wx = sx - x_lo;
    let clampi = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };
    let y0 = clampi(y_lo, h);
    let y1 = clampi(y_lo + 1.0, h);
    let x0 = clampi(x_lo, w);
    let x1 = clampi(x_lo + 1.0, w);
    (
        [(y0, x0), (y0, x1), (y1, x0), (y1, x1)],
        [
            (1.0 - wy) * (1.0 - wx),
            (1.0 - wy) * wx,
            wy * (1.0 - wx),
            wy * wx,
        ],
    )
}

#[cfg(test)]
mod tests;
