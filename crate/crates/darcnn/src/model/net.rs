//! Network building blocks: convolution layers, the desk-scale encoder, the
//! region proposal head, and the class-agnostic mask head.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::core::config::{Nonlinearity, Normalization};
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};

pub const MASK_CROP: usize = 14;
pub const MASK_GRID: usize = 2 * MASK_CROP;
/// Anchor scales in feature-grid units x aspect ratios.
pub const ANCHOR_SCALES: [f64; 3] = [2.0, 4.0, 8.0];
pub const ANCHOR_ASPECTS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = ANCHOR_SCALES.len() * ANCHOR_ASPECTS.len();
const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ConvLayer<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: ArrayD<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> ConvLayer<F> {
    /// He-normal weights, zero bias.
    pub fn he_init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self::gaussian_init(out_ch, in_ch, k, stride, pad, std, rng)
    }

    /// Small-std head initialization for logit layers.
    pub fn gaussian_init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| {
            F::from_float(normal.sample(rng))
        });
        ConvLayer {
            w: w.into_dyn(),
            b: Array1::<F>::zeros(out_ch).into_dyn(),
            stride,
            pad,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &ArrayD<F>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut ArrayD<F>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundConv {
        BoundConv {
            w: tape.leaf(self.w.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: VarId) -> VarId {
        tape.conv2d(x, self.w, Some(self.b), self.stride, self.pad)
    }

    /// Leaf ids in the same order as [`ConvLayer::visit`].
    pub fn param_ids(&self) -> [VarId; 2] {
        [self.w, self.b]
    }
}

fn activate<F: Scalar>(tape: &mut Tape<F>, x: VarId, nl: Nonlinearity) -> VarId {
    match nl {
        Nonlinearity::Relu => tape.relu(x),
        Nonlinearity::LeakyRelu => tape.leaky_relu(x, F::from_float(0.1)),
        Nonlinearity::Softplus => tape.softplus(x),
    }
}

/// Strided convolution encoder: one stride-2 stage per configured width plus
/// a stride-1 refinement layer at the final depth.
#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    pub stages: Vec<ConvLayer<F>>,
    pub refine: ConvLayer<F>,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl<F: Scalar> Encoder<F> {
    pub fn init(
        in_channels: usize,
        stage_widths: &[usize],
        nonlinearity: Nonlinearity,
        normalization: Normalization,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stages = Vec::new();
        let mut ci = in_channels;
        for &co in stage_widths {
            stages.push(ConvLayer::he_init(co, ci, 3, 2, 1, rng));
            ci = co;
        }
        let refine = ConvLayer::he_init(ci, ci, 3, 1, 1, rng);
        Encoder {
            stages,
            refine,
            nonlinearity,
            normalization,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &ArrayD<F>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stage{i}"), f);
        }
        self.refine.visit("refine", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut ArrayD<F>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stage{i}"), f);
        }
        self.refine.visit_mut("refine", f);
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            stages: self.stages.iter().map(|s| s.bind(tape, trainable)).collect(),
            refine: self.refine.bind(tape, trainable),
            nonlinearity: self.nonlinearity,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub stages: Vec<BoundConv>,
    pub refine: BoundConv,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl BoundEncoder {
    /// Leaf ids in the same order as [`Encoder::visit`].
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.extend(s.param_ids());
        }
        ids.extend(self.refine.param_ids());
        ids
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: VarId) -> VarId {
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(tape, cur);
            if self.normalization == Normalization::Instance {
                cur = tape.instance_norm(cur, F::from_float(INSTANCE_NORM_EPS));
            }
            cur = activate(tape, cur, self.nonlinearity);
        }
        cur = self.refine.forward(tape, cur);
        activate(tape, cur, self.nonlinearity)
    }
}

/// Shared region proposal head: a 3x3 trunk plus 1x1 objectness and box
/// delta layers over the anchor set.
#[derive(Debug, Clone)]
pub struct RpnHead<F: Scalar> {
    pub trunk: ConvLayer<F>,
    pub objectness: ConvLayer<F>,
    pub deltas: ConvLayer<F>,
    pub nonlinearity: Nonlinearity,
}

impl<F: Scalar> RpnHead<F> {
    pub fn init(depth: usize, nonlinearity: Nonlinearity, rng: &mut ChaCha8Rng) -> Self {
        RpnHead {
            trunk: ConvLayer::he_init(depth, depth, 3, 1, 1, rng),
            objectness: ConvLayer::gaussian_init(ANCHORS_PER_CELL, depth, 1, 1, 0, 0.01, rng),
            deltas: ConvLayer::gaussian_init(4 * ANCHORS_PER_CELL, depth, 1, 1, 0, 0.01, rng),
            nonlinearity,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &ArrayD<F>)) {
        self.trunk.visit("trunk", f);
        self.objectness.visit("objectness", f);
        self.deltas.visit("deltas", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut ArrayD<F>)) {
        self.trunk.visit_mut("trunk", f);
        self.objectness.visit_mut("objectness", f);
        self.deltas.visit_mut("deltas", f);
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundRpn {
        BoundRpn {
            trunk: self.trunk.bind(tape, trainable),
            objectness: self.objectness.bind(tape, trainable),
            deltas: self.deltas.bind(tape, trainable),
            nonlinearity: self.nonlinearity,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundRpn {
    pub trunk: BoundConv,
    pub objectness: BoundConv,
    pub deltas: BoundConv,
    pub nonlinearity: Nonlinearity,
}

/// RPN outputs on the tape: objectness logits `[N,A,h,w]` and box deltas
/// `[N,4A,h,w]`.
pub struct RpnOutputs {
    pub obj_logits: VarId,
    pub deltas: VarId,
}

impl BoundRpn {
    /// Leaf ids in the same order as [`RpnHead::visit`].
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        ids.extend(self.trunk.param_ids());
        ids.extend(self.objectness.param_ids());
        ids.extend(self.deltas.param_ids());
        ids
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, h_c: VarId) -> RpnOutputs {
        let t = self.trunk.forward(tape, h_c);
        let t = activate(tape, t, self.nonlinearity);
        RpnOutputs {
            obj_logits: self.objectness.forward(tape, t),
            deltas: self.deltas.forward(tape, t),
        }
    }
}

/// Domain-specific mask head operating on 14x14 region-aligned crops of the
/// private features: two conv layers, a 2x upsample to the 28x28 mask grid,
/// and a pooled branch emitting box deltas and a confidence refinement.
#[derive(Debug, Clone)]
pub struct MaskHead<F: Scalar> {
    pub conv1: ConvLayer<F>,
    pub conv2: ConvLayer<F>,
    pub mask_out: ConvLayer<F>,
    pub box_conv: ConvLayer<F>,
    pub fc_w: ArrayD<F>,
    pub fc_b: ArrayD<F>,
    pub nonlinearity: Nonlinearity,
}

impl<F: Scalar> MaskHead<F> {
    pub fn init(depth: usize, nonlinearity: Nonlinearity, rng: &mut ChaCha8Rng) -> Self {
        MaskHead {
            conv1: ConvLayer::he_init(depth, depth, 3, 1, 1, rng),
            conv2: ConvLayer::he_init(depth, depth, 3, 1, 1, rng),
            mask_out: ConvLayer::gaussian_init(1, depth, 1, 1, 0, 0.01, rng),
            box_conv: ConvLayer::he_init(depth, depth, 3, 2, 1, rng),
            // zero-init: an untrained head refines neither box nor confidence
            fc_w: ArrayD::zeros(IxDyn(&[5, depth])),
            fc_b: ArrayD::zeros(IxDyn(&[5])),
            nonlinearity,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &ArrayD<F>)) {
        self.conv1.visit("conv1", f);
        self.conv2.visit("conv2", f);
        self.mask_out.visit("mask_out", f);
        self.box_conv.visit("box_conv", f);
        f("fc.w".into(), &self.fc_w);
        f("fc.b".into(), &self.fc_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut ArrayD<F>)) {
        self.conv1.visit_mut("conv1", f);
        self.conv2.visit_mut("conv2", f);
        self.mask_out.visit_mut("mask_out", f);
        self.box_conv.visit_mut("box_conv", f);
        f("fc.w".into(), &mut self.fc_w);
        f("fc.b".into(), &mut self.fc_b);
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundMask {
        BoundMask {
            conv1: self.conv1.bind(tape, trainable),
            conv2: self.conv2.bind(tape, trainable),
            mask_out: self.mask_out.bind(tape, trainable),
            box_conv: self.box_conv.bind(tape, trainable),
            fc_w: tape.leaf(self.fc_w.clone(), trainable),
            fc_b: tape.leaf(self.fc_b.clone(), trainable),
            nonlinearity: self.nonlinearity,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMask {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub mask_out: BoundConv,
    pub box_conv: BoundConv,
    pub fc_w: VarId,
    pub fc_b: VarId,
    pub nonlinearity: Nonlinearity,
}

/// Mask head outputs on the tape for a batch of `R` region crops.
pub struct MaskOutputs {
    /// `[R,1,28,28]` mask logits.
    pub mask_logits: VarId,
    /// `[R,4]` box refinement deltas.
    pub box_deltas: VarId,
    /// `[R]` confidence refinement added to the proposal objectness logit.
    pub score_delta: VarId,
}

impl BoundMask {
    /// Leaf ids in the same order as [`MaskHead::visit`].
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        ids.extend(self.conv1.param_ids());
        ids.extend(self.conv2.param_ids());
        ids.extend(self.mask_out.param_ids());
        ids.extend(self.box_conv.param_ids());
        ids.push(self.fc_w);
        ids.push(self.fc_b);
        ids
    }

    /// Forward over stacked region crops `[R,D,14,14]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, crops: VarId) -> MaskOutputs {
        let r = tape.value(crops).shape()[0];
        let depth = tape.value(crops).shape()[1];
        let t = self.conv1.forward(tape, crops);
        let t = activate(tape, t, self.nonlinearity);
        let t = self.conv2.forward(tape, t);
        let t = activate(tape, t, self.nonlinearity);

        let up = tape.upsample2x(t);
        let mask_logits = self.mask_out.forward(tape, up);

        let b = self.box_conv.forward(tape, t);
        let b = activate(tape, b, self.nonlinearity);
        let spatial = {
            let shape = tape.value(b).shape();
            (shape[2] * shape[3]) as f64
        };
        let pooled_sum = tape.sum_spatial(b);
        let pooled = tape.scale(pooled_sum, F::from_float(1.0 / spatial));
        let fc = tape.matmul(pooled, self.fc_w, false, true);
        let fc = tape.add_bias_row(fc, self.fc_b);
        let _ = depth;
        let box_idx: Vec<usize> = (0..r).flat_map(|i| (0..4).map(move |j| i * 5 + j)).collect();
        let score_idx: Vec<usize> = (0..r).map(|i| i * 5 + 4).collect();
        let box_flat = tape.gather1d(fc, box_idx);
        let box_deltas = tape.reshape(box_flat, &[r, 4]);
        let score_delta = tape.gather1d(fc, score_idx);
        MaskOutputs {
            mask_logits,
            box_deltas,
            score_delta,
        }
    }
}
