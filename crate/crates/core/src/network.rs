//! The mixed-precision model: an ordered conv stack where each hidden layer
//! carries a precision flag, plus the FLOPs accountant that prices an
//! assignment.
//!
//! Architecture family: stem conv -> n hidden convs -> global average pool
//! -> linear head. The stem and head always run full precision; only hidden
//! layers can be binarized, and a binarized layer converts its weights and
//! its input activations together.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binarize::{
    activation_forward, binary_conv2d, channel_scale, sign_binarize, ActivationKind,
    BinarizeError,
};
use crate::seed::derive;
use crate::tensor::{
    conv2d_dense, conv_out_dim, unpack, DenseTensor, TensorError,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// FLOPs discount for a binarized layer relative to full precision.
pub const BINARY_FLOPS_DIVISOR: f64 = 64.0;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Binarize(#[from] BinarizeError),
    #[error("layer {index}: {detail}")]
    BadLayer { index: usize, detail: String },
    #[error("network needs at least one hidden layer")]
    NoHiddenLayers,
    #[error("assignment index {index} outside hidden range 1..={max}")]
    AssignmentOutOfRange { index: usize, max: usize },
    #[error("input shape {actual:?} does not match network input {expected:?}")]
    InputShapeMismatch {
        expected: [usize; 3],
        actual: Vec<usize>,
    },
    #[error("weights do not fit the network: {0}")]
    WeightMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
}

/// One layer of the stack. `index` 0 is the stem, `1..=n` the hidden layers,
/// `n + 1` the linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_batchnorm: bool,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn conv(
        index: usize,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        has_batchnorm: bool,
        activation: ActivationKind,
    ) -> Self {
        Self {
            index,
            kind: LayerKind::Conv,
            c_in,
            c_out,
            k_h: kernel.0,
            k_w: kernel.1,
            stride,
            padding,
            has_batchnorm,
            activation,
        }
    }

    fn linear_head(index: usize, c_in: usize, num_classes: usize) -> Self {
        Self {
            index,
            kind: LayerKind::Linear,
            c_in,
            c_out: num_classes,
            k_h: 1,
            k_w: 1,
            stride: 1,
            padding: 0,
            has_batchnorm: false,
            activation: ActivationKind::Identity,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.c_in * self.k_h * self.k_w,
            LayerKind::Linear => self.c_in,
        }
    }
}

/// Whole-network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub stem: LayerSpec,
    pub hidden: Vec<LayerSpec>,
    pub head: LayerSpec,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Assembles and validates a plain CNN: stem conv, hidden convs, global
    /// average pool, linear head. Layer indices are assigned by position.
    pub fn build(
        input_shape: [usize; 3],
        num_classes: usize,
        stem: LayerSpec,
        hidden: Vec<LayerSpec>,
    ) -> Result<Self, NetworkError> {
        if hidden.is_empty() {
            return Err(NetworkError::NoHiddenLayers);
        }
        let head_in = hidden.last().expect("nonempty").c_out;
        let head = LayerSpec::linear_head(hidden.len() + 1, head_in, num_classes);
        let net = Self {
            input_shape,
            stem,
            hidden,
            head,
            num_classes,
        };
        net.stage_shapes()?;
        Ok(net)
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden.len()
    }

    /// Indices of the binarizable layers.
    pub fn hidden_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.hidden.iter().map(|l| l.index)
    }

    /// Same network re-targeted at a different class count (head resized).
    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        let mut net = self.clone();
        net.num_classes = num_classes;
        net.head.c_out = num_classes;
        net
    }

    /// Validates layer composition and returns the `[c, h, w]` shape after
    /// the stem and after each hidden layer.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>, NetworkError> {
        if self.hidden.is_empty() {
            return Err(NetworkError::NoHiddenLayers);
        }
        let bad = |index: usize, detail: String| NetworkError::BadLayer { index, detail };
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut current = self.input_shape;
        for (pos, layer) in std::iter::once(&self.stem).chain(&self.hidden).enumerate() {
            if layer.index != pos {
                return Err(bad(
                    layer.index,
                    format!("expected index {pos} at position {pos}"),
                ));
            }
            if layer.kind != LayerKind::Conv {
                return Err(bad(layer.index, "stem/hidden layers must be conv".into()));
            }
            if layer.c_in != current[0] {
                return Err(bad(
                    layer.index,
                    format!("c_in {} but incoming channels {}", layer.c_in, current[0]),
                ));
            }
            if layer.c_out == 0 || layer.k_h == 0 || layer.k_w == 0 || layer.stride == 0 {
                return Err(bad(layer.index, "sizes must be positive".into()));
            }
            let (Some(h), Some(w)) = (
                conv_out_dim(current[1], layer.k_h, layer.stride, layer.padding),
                conv_out_dim(current[2], layer.k_w, layer.stride, layer.padding),
            ) else {
                return Err(bad(
                    layer.index,
                    format!(
                        "kernel {}x{} does not fit {}x{} input",
                        layer.k_h, layer.k_w, current[1], current[2]
                    ),
                ));
            };
            current = [layer.c_out, h, w];
            shapes.push(current);
        }
        if self.head.kind != LayerKind::Linear {
            return Err(bad(self.head.index, "head must be linear".into()));
        }
        if self.head.index != self.hidden.len() + 1 {
            return Err(bad(self.head.index, "head index must be n + 1".into()));
        }
        if self.head.c_in != current[0] {
            return Err(bad(
                self.head.index,
                format!(
                    "head c_in {} but pooled features {}",
                    self.head.c_in, current[0]
                ),
            ));
        }
        if self.head.c_out != self.num_classes || self.num_classes == 0 {
            return Err(bad(
                self.head.index,
                "head width must equal num_classes".into(),
            ));
        }
        Ok(shapes)
    }
}

/// The subset of hidden layers currently binarized. A member layer converts
/// its weights and its input activations together; the stem and head are
/// never members.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionAssignment {
    binarized: BTreeSet<usize>,
}

impl PrecisionAssignment {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all_hidden(net: &NetworkSpec) -> Self {
        Self {
            binarized: net.hidden_indices().collect(),
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(
        indices: I,
        net: &NetworkSpec,
    ) -> Result<Self, NetworkError> {
        let max = net.hidden_count();
        let mut binarized = BTreeSet::new();
        for index in indices {
            if index == 0 || index > max {
                return Err(NetworkError::AssignmentOutOfRange { index, max });
            }
            binarized.insert(index);
        }
        Ok(Self { binarized })
    }

    pub fn contains(&self, index: usize) -> bool {
        self.binarized.contains(&index)
    }

    pub fn insert(&mut self, index: usize) {
        self.binarized.insert(index);
    }

    pub fn remove(&mut self, index: usize) {
        self.binarized.remove(&index);
    }

    /// Ascending member indices.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.binarized.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.binarized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binarized.is_empty()
    }
}

/// Per-layer and total FLOPs under an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total_fp: f64,
    pub total_effective: f64,
    /// `total_effective / total_fp`, in `(0, 1]`.
    pub remaining_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub index: usize,
    pub fp_flops: f64,
    pub effective_flops: f64,
}

/// FLOPs of the network under `assignment`, batch size 1. A conv layer
/// counts `2 * c_out * h_out * w_out * c_in * k_h * k_w` (multiply-accumulate
/// as 2), a linear layer `2 * c_in * c_out`; binarized layers contribute
/// 1/64 of their full-precision cost. Bias and batchnorm are not counted.
pub fn flops(net: &NetworkSpec, assignment: &PrecisionAssignment) -> FlopsReport {
    let shapes = net.stage_shapes().expect("validated network");
    let mut per_layer = Vec::with_capacity(net.hidden.len() + 2);
    let mut total_fp = 0.0;
    let mut total_effective = 0.0;
    for (pos, layer) in std::iter::once(&net.stem)
        .chain(&net.hidden)
        .chain(std::iter::once(&net.head))
        .enumerate()
    {
        let fp = match layer.kind {
            LayerKind::Conv => {
                let [_, h_out, w_out] = shapes[pos];
                2.0 * (layer.c_out * h_out * w_out * layer.c_in * layer.k_h * layer.k_w) as f64
            }
            LayerKind::Linear => 2.0 * (layer.c_in * layer.c_out) as f64,
        };
        let effective = if assignment.contains(layer.index) {
            fp / BINARY_FLOPS_DIVISOR
        } else {
            fp
        };
        total_fp += fp;
        total_effective += effective;
        per_layer.push(LayerFlops {
            index: layer.index,
            fp_flops: fp,
            effective_flops: effective,
        });
    }
    FlopsReport {
        per_layer,
        total_fp,
        total_effective,
        remaining_fraction: total_effective / total_fp,
    }
}

/// True iff the report's remaining fraction is within `budget_fraction`.
/// Callers must pass a budget in `(0, 1]`.
pub fn budget_satisfied(report: &FlopsReport, budget_fraction: f64) -> bool {
    debug_assert!(budget_fraction > 0.0 && budget_fraction <= 1.0);
    report.remaining_fraction <= budget_fraction
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: DenseTensor,
    pub beta: DenseTensor,
    pub running_mean: DenseTensor,
    pub running_var: DenseTensor,
}

impl BatchNormParams {
    fn identity(channels: usize) -> Self {
        Self {
            gamma: DenseTensor::full(vec![channels], 1.0),
            beta: DenseTensor::zeros(vec![channels]),
            running_mean: DenseTensor::zeros(vec![channels]),
            running_var: DenseTensor::full(vec![channels], 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Conv `[c_out, c_in, k_h, k_w]` or linear `[c_out, c_in]`.
    pub weight: DenseTensor,
    /// Linear head only.
    pub bias: Option<DenseTensor>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub stem: LayerWeights,
    pub hidden: Vec<LayerWeights>,
    pub head: LayerWeights,
}

/// Parameter role, used to scope weight decay to conv/linear weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    ConvLinearWeight,
    Bias,
    Norm,
}

fn layer_params(lw: &LayerWeights, out: &mut Vec<(String, ParamClass)>, prefix: &str) {
    out.push((format!("{prefix}.weight"), ParamClass::ConvLinearWeight));
    if lw.bias.is_some() {
        out.push((format!("{prefix}.bias"), ParamClass::Bias));
    }
    if lw.bn.is_some() {
        out.push((format!("{prefix}.bn.gamma"), ParamClass::Norm));
        out.push((format!("{prefix}.bn.beta"), ParamClass::Norm));
    }
}

impl Weights {
    /// Canonical (name, class) listing of the trainable parameters, in the
    /// order `params_mut` yields them. Running batchnorm statistics are not
    /// trainable and are excluded.
    pub fn param_names(&self) -> Vec<(String, ParamClass)> {
        let mut names = Vec::new();
        layer_params(&self.stem, &mut names, "stem");
        for (i, lw) in self.hidden.iter().enumerate() {
            layer_params(lw, &mut names, &format!("hidden{}", i + 1));
        }
        layer_params(&self.head, &mut names, "head");
        names
    }

    /// Trainable parameter tensors in canonical order.
    pub fn params_mut(&mut self) -> Vec<(&mut DenseTensor, ParamClass)> {
        let mut out: Vec<(&mut DenseTensor, ParamClass)> = Vec::new();
        let layers = std::iter::once(&mut self.stem)
            .chain(self.hidden.iter_mut())
            .chain(std::iter::once(&mut self.head));
        for lw in layers {
            out.push((&mut lw.weight, ParamClass::ConvLinearWeight));
            if let Some(b) = lw.bias.as_mut() {
                out.push((b, ParamClass::Bias));
            }
            if let Some(bn) = lw.bn.as_mut() {
                out.push((&mut bn.gamma, ParamClass::Norm));
                out.push((&mut bn.beta, ParamClass::Norm));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<(&DenseTensor, ParamClass)> {
        let mut out: Vec<(&DenseTensor, ParamClass)> = Vec::new();
        let layers = std::iter::once(&self.stem)
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.head));
        for lw in layers {
            out.push((&lw.weight, ParamClass::ConvLinearWeight));
            if let Some(b) = lw.bias.as_ref() {
                out.push((b, ParamClass::Bias));
            }
            if let Some(bn) = lw.bn.as_ref() {
                out.push((&bn.gamma, ParamClass::Norm));
                out.push((&bn.beta, ParamClass::Norm));
            }
        }
        out
    }

    /// Checks tensor shapes against the network description.
    pub fn validate(&self, net: &NetworkSpec) -> Result<(), NetworkError> {
        let mismatch = |msg: String| NetworkError::WeightMismatch(msg);
        if self.hidden.len() != net.hidden.len() {
            return Err(mismatch(format!(
                "{} hidden weight sets for {} hidden layers",
                self.hidden.len(),
                net.hidden.len()
            )));
        }
        let pairs = std::iter::once((&self.stem, &net.stem))
            .chain(self.hidden.iter().zip(&net.hidden))
            .chain(std::iter::once((&self.head, &net.head)));
        for (lw, spec) in pairs {
            let expect: Vec<usize> = match spec.kind {
                LayerKind::Conv => vec![spec.c_out, spec.c_in, spec.k_h, spec.k_w],
                LayerKind::Linear => vec![spec.c_out, spec.c_in],
            };
            if lw.weight.shape() != expect.as_slice() {
                return Err(mismatch(format!(
                    "layer {}: weight shape {:?}, expected {:?}",
                    spec.index,
                    lw.weight.shape(),
                    expect
                )));
            }
            if lw.bn.is_some() != spec.has_batchnorm {
                return Err(mismatch(format!(
                    "layer {}: batchnorm presence mismatch",
                    spec.index
                )));
            }
            if let Some(bn) = &lw.bn {
                if bn.gamma.shape() != [spec.c_out] {
                    return Err(mismatch(format!(
                        "layer {}: batchnorm width {:?}",
                        spec.index,
                        bn.gamma.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic fan-in-scaled uniform initialization: every weight of a
/// layer with fan-in `f` is drawn from `U(-1/sqrt(f), 1/sqrt(f))` on a
/// per-layer stream derived from `seed`. Batchnorm starts at scale 1, shift
/// 0; the head bias starts at zero.
pub fn init_weights(net: &NetworkSpec, seed: u64) -> Weights {
    let init_layer = |spec: &LayerSpec, with_bias: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &format!("init.layer{}", spec.index)));
        let bound = 1.0 / (spec.fan_in() as f32).sqrt();
        let shape = match spec.kind {
            LayerKind::Conv => vec![spec.c_out, spec.c_in, spec.k_h, spec.k_w],
            LayerKind::Linear => vec![spec.c_out, spec.c_in],
        };
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        LayerWeights {
            weight: DenseTensor::new(shape, data).expect("init shape"),
            bias: with_bias.then(|| DenseTensor::zeros(vec![spec.c_out])),
            bn: spec
                .has_batchnorm
                .then(|| BatchNormParams::identity(spec.c_out)),
        }
    };
    Weights {
        stem: init_layer(&net.stem, false),
        hidden: net.hidden.iter().map(|l| init_layer(l, false)).collect(),
        head: init_layer(&net.head, true),
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Gradients in the same layout as [`Weights`]. Running statistics have no
/// gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub stem: LayerGradients,
    pub hidden: Vec<LayerGradients>,
    pub head: LayerGradients,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weight: DenseTensor,
    pub bias: Option<DenseTensor>,
    pub bn_gamma: Option<DenseTensor>,
    pub bn_beta: Option<DenseTensor>,
}

impl Gradients {
    pub fn zeros_like(w: &Weights) -> Self {
        let zero_layer = |lw: &LayerWeights| LayerGradients {
            weight: DenseTensor::zeros(lw.weight.shape().to_vec()),
            bias: lw.bias.as_ref().map(|b| DenseTensor::zeros(b.shape().to_vec())),
            bn_gamma: lw.bn.as_ref().map(|bn| DenseTensor::zeros(bn.gamma.shape().to_vec())),
            bn_beta: lw.bn.as_ref().map(|bn| DenseTensor::zeros(bn.beta.shape().to_vec())),
        };
        Self {
            stem: zero_layer(&w.stem),
            hidden: w.hidden.iter().map(zero_layer).collect(),
            head: zero_layer(&w.head),
        }
    }

    /// Trainable gradient tensors in the same canonical order as
    /// [`Weights::params_mut`].
    pub fn params(&self) -> Vec<&DenseTensor> {
        let mut out = Vec::new();
        let layers = std::iter::once(&self.stem)
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.head));
        for lg in layers {
            out.push(&lg.weight);
            if let Some(b) = lg.bias.as_ref() {
                out.push(b);
            }
            if let Some(g) = lg.bn_gamma.as_ref() {
                out.push(g);
            }
            if let Some(b) = lg.bn_beta.as_ref() {
                out.push(b);
            }
        }
        out
    }
}

struct BnBatchCache {
    /// Per-sample normalized activations.
    x_hat: Vec<DenseTensor>,
    inv_std: Vec<f32>,
}

struct LayerCache {
    /// Per-sample input activations (latent, pre-sign for binarized layers).
    input: Vec<DenseTensor>,
    /// Dense ±1 input signs, binarized layers only.
    sign_input: Option<Vec<DenseTensor>>,
    /// Dense ±1 weight signs, binarized layers only.
    sign_weight: Option<DenseTensor>,
    /// Channel scales, binarized layers only.
    alpha: Option<Vec<f32>>,
    bn: Option<BnBatchCache>,
    /// Per-sample activation-function inputs (post-batchnorm).
    pre_act: Vec<DenseTensor>,
}

/// Everything the backward pass needs from one training-mode forward pass.
pub struct ForwardCache {
    stem: LayerCache,
    hidden: Vec<LayerCache>,
    /// Pooled features per sample.
    pooled: Vec<Vec<f32>>,
    pooled_hw: usize,
    pub logits: DenseTensor,
}

fn check_batch(net: &NetworkSpec, batch: &[DenseTensor]) -> Result<(), NetworkError> {
    for sample in batch {
        if sample.shape() != net.input_shape {
            return Err(NetworkError::InputShapeMismatch {
                expected: net.input_shape,
                actual: sample.shape().to_vec(),
            });
        }
    }
    Ok(())
}

enum BnMode<'a> {
    /// Batch statistics; updates running stats through the mutable handle.
    Train(&'a mut BatchNormParams),
    /// Running statistics, no mutation.
    Eval(&'a BatchNormParams),
}

/// Applies batchnorm to a batch of `[c, h, w]` tensors, returning the
/// normalized batch and, in training mode, the cache for backward.
fn batchnorm_forward(inputs: &[DenseTensor], mode: BnMode) -> (Vec<DenseTensor>, Option<BnBatchCache>) {
    let (c, h, w) = inputs[0].rank3().expect("conv output");
    let hw = h * w;
    match mode {
        BnMode::Eval(bn) => {
            let outs = inputs
                .iter()
                .map(|x| {
                    let mut out = x.clone();
                    for ch in 0..c {
                        let mean = bn.running_mean.data()[ch];
                        let inv = 1.0 / (bn.running_var.data()[ch] + BN_EPS).sqrt();
                        let gamma = bn.gamma.data()[ch];
                        let beta = bn.beta.data()[ch];
                        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                            *v = gamma * (*v - mean) * inv + beta;
                        }
                    }
                    out
                })
                .collect();
            (outs, None)
        }
        BnMode::Train(bn) => {
            let n = (inputs.len() * hw) as f32;
            let mut outs: Vec<DenseTensor> = inputs.to_vec();
            let mut x_hat: Vec<DenseTensor> =
                inputs.iter().map(|x| DenseTensor::zeros(x.shape().to_vec())).collect();
            let mut inv_stds = Vec::with_capacity(c);
            for ch in 0..c {
                let mut sum = 0.0f64;
                let mut sum_sq = 0.0f64;
                for x in inputs {
                    for &v in &x.data()[ch * hw..(ch + 1) * hw] {
                        sum += v as f64;
                        sum_sq += (v as f64) * (v as f64);
                    }
                }
                let mean = (sum / n as f64) as f32;
                let var = ((sum_sq / n as f64) - (sum / n as f64).powi(2)).max(0.0) as f32;
                let inv_std = 1.0 / (var + BN_EPS).sqrt();
                inv_stds.push(inv_std);

                // unbiased variance feeds the running estimate
                let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                bn.running_mean.data_mut()[ch] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean.data()[ch] + BN_MOMENTUM * mean;
                bn.running_var.data_mut()[ch] =
                    (1.0 - BN_MOMENTUM) * bn.running_var.data()[ch] + BN_MOMENTUM * unbiased;

                let gamma = bn.gamma.data()[ch];
                let beta = bn.beta.data()[ch];
                for (b, x) in inputs.iter().enumerate() {
                    let xh = &mut x_hat[b].data_mut()[ch * hw..(ch + 1) * hw];
                    let out = &mut outs[b];
                    for (k, &v) in x.data()[ch * hw..(ch + 1) * hw].iter().enumerate() {
                        let norm = (v - mean) * inv_std;
                        xh[k] = norm;
                        out.data_mut()[ch * hw + k] = gamma * norm + beta;
                    }
                }
            }
            (
                outs,
                Some(BnBatchCache {
                    x_hat,
                    inv_std: inv_stds,
                }),
            )
        }
    }
}

/// Backward through training-mode batchnorm. Returns per-sample input
/// gradients plus (d_gamma, d_beta).
fn batchnorm_backward(
    grad_out: &[DenseTensor],
    cache: &BnBatchCache,
    gamma: &DenseTensor,
) -> (Vec<DenseTensor>, DenseTensor, DenseTensor) {
    let (c, h, w) = grad_out[0].rank3().expect("conv output");
    let hw = h * w;
    let n = (grad_out.len() * hw) as f32;
    let mut d_gamma = DenseTensor::zeros(vec![c]);
    let mut d_beta = DenseTensor::zeros(vec![c]);
    let mut grad_in: Vec<DenseTensor> = grad_out
        .iter()
        .map(|g| DenseTensor::zeros(g.shape().to_vec()))
        .collect();
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (b, g) in grad_out.iter().enumerate() {
            let xh = &cache.x_hat[b].data()[ch * hw..(ch + 1) * hw];
            for (k, &dy) in g.data()[ch * hw..(ch + 1) * hw].iter().enumerate() {
                sum_dy += dy as f64;
                sum_dy_xhat += dy as f64 * xh[k] as f64;
            }
        }
        d_beta.data_mut()[ch] = sum_dy as f32;
        d_gamma.data_mut()[ch] = sum_dy_xhat as f32;
        let mean_dy = (sum_dy / n as f64) as f32;
        let mean_dy_xhat = (sum_dy_xhat / n as f64) as f32;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for (b, g) in grad_out.iter().enumerate() {
            let xh = &cache.x_hat[b].data()[ch * hw..(ch + 1) * hw];
            let gi = &mut grad_in[b].data_mut()[ch * hw..(ch + 1) * hw];
            for (k, &dy) in g.data()[ch * hw..(ch + 1) * hw].iter().enumerate() {
                gi[k] = scale * (dy - mean_dy - xh[k] * mean_dy_xhat);
            }
        }
    }
    (grad_in, d_gamma, d_beta)
}

/// Convolution stage of one layer in training mode: dense when the layer is
/// full precision, packed XNOR when binarized.
fn conv_stage_train(
    spec: &LayerSpec,
    lw: &LayerWeights,
    inputs: &[DenseTensor],
    binarized: bool,
) -> Result<(Vec<DenseTensor>, Option<Vec<DenseTensor>>, Option<DenseTensor>, Option<Vec<f32>>), NetworkError> {
    if binarized {
        let packed_w = sign_binarize(&lw.weight)?;
        let sign_w = unpack(&packed_w);
        let alpha = channel_scale(&lw.weight)?;
        let mut outs = Vec::with_capacity(inputs.len());
        let mut signs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let packed_a = sign_binarize(x)?;
            outs.push(binary_conv2d(
                &packed_a,
                &packed_w,
                &alpha,
                spec.stride,
                spec.padding,
            )?);
            signs.push(unpack(&packed_a));
        }
        Ok((outs, Some(signs), Some(sign_w), Some(alpha.values().to_vec())))
    } else {
        let outs = inputs
            .iter()
            .map(|x| conv2d_dense(x, &lw.weight, spec.stride, spec.padding))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((outs, None, None, None))
    }
}

fn layer_forward_train(
    spec: &LayerSpec,
    lw: &mut LayerWeights,
    inputs: Vec<DenseTensor>,
    binarized: bool,
) -> Result<(Vec<DenseTensor>, LayerCache), NetworkError> {
    let (conv_outs, sign_input, sign_weight, alpha) =
        conv_stage_train(spec, lw, &inputs, binarized)?;
    let (pre_act, bn_cache) = match lw.bn.as_mut() {
        Some(bn) => batchnorm_forward(&conv_outs, BnMode::Train(bn)),
        None => (conv_outs, None),
    };
    let outputs = pre_act
        .iter()
        .map(|t| activation_forward(spec.activation, t))
        .collect();
    Ok((
        outputs,
        LayerCache {
            input: inputs,
            sign_input,
            sign_weight,
            alpha,
            bn: bn_cache,
            pre_act,
        },
    ))
}

fn layer_forward_eval(
    spec: &LayerSpec,
    lw: &LayerWeights,
    inputs: &[DenseTensor],
    binarized: bool,
) -> Result<Vec<DenseTensor>, NetworkError> {
    let conv_outs: Vec<DenseTensor> = if binarized {
        let packed_w = sign_binarize(&lw.weight)?;
        let alpha = channel_scale(&lw.weight)?;
        inputs
            .iter()
            .map(|x| {
                let packed_a = sign_binarize(x)?;
                binary_conv2d(&packed_a, &packed_w, &alpha, spec.stride, spec.padding)
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        inputs
            .iter()
            .map(|x| conv2d_dense(x, &lw.weight, spec.stride, spec.padding))
            .collect::<Result<Vec<_>, _>>()?
    };
    let pre_act = match lw.bn.as_ref() {
        Some(bn) => batchnorm_forward(&conv_outs, BnMode::Eval(bn)).0,
        None => conv_outs,
    };
    Ok(pre_act
        .iter()
        .map(|t| activation_forward(spec.activation, t))
        .collect())
}

fn head_forward(
    head: &LayerWeights,
    pooled: &[Vec<f32>],
    num_classes: usize,
) -> DenseTensor {
    let c = pooled[0].len();
    let mut logits = DenseTensor::zeros(vec![pooled.len(), num_classes]);
    for (b, feats) in pooled.iter().enumerate() {
        for k in 0..num_classes {
            let row = &head.weight.data()[k * c..(k + 1) * c];
            let mut acc = head.bias.as_ref().map_or(0.0, |bias| bias.data()[k]);
            for (f, w) in feats.iter().zip(row) {
                acc += f * w;
            }
            logits.data_mut()[b * num_classes + k] = acc;
        }
    }
    logits
}

fn global_average_pool(acts: &[DenseTensor]) -> (Vec<Vec<f32>>, usize) {
    let (c, h, w) = acts[0].rank3().expect("conv output");
    let hw = h * w;
    let pooled = acts
        .iter()
        .map(|t| {
            (0..c)
                .map(|ch| {
                    let sum: f32 = t.data()[ch * hw..(ch + 1) * hw].iter().sum();
                    sum / hw as f32
                })
                .collect()
        })
        .collect();
    (pooled, hw)
}

/// Inference-mode forward pass: batchnorm uses running statistics, layers in
/// the assignment run the packed XNOR path. Returns `[batch, num_classes]`
/// logits.
pub fn forward(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
    batch: &[DenseTensor],
) -> Result<DenseTensor, NetworkError> {
    check_batch(net, batch)?;
    weights.validate(net)?;
    let mut acts = layer_forward_eval(&net.stem, &weights.stem, batch, false)?;
    for (spec, lw) in net.hidden.iter().zip(&weights.hidden) {
        acts = layer_forward_eval(spec, lw, &acts, assignment.contains(spec.index))?;
    }
    let (pooled, _) = global_average_pool(&acts);
    Ok(head_forward(&weights.head, &pooled, net.num_classes))
}

/// Training-mode forward pass: batch statistics (updating the running
/// estimates in `weights`) and a cache for [`backward`].
pub fn forward_train(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &mut Weights,
    batch: &[DenseTensor],
) -> Result<ForwardCache, NetworkError> {
    check_batch(net, batch)?;
    let (mut acts, stem_cache) =
        layer_forward_train(&net.stem, &mut weights.stem, batch.to_vec(), false)?;
    let mut hidden_caches = Vec::with_capacity(net.hidden.len());
    for (spec, lw) in net.hidden.iter().zip(weights.hidden.iter_mut()) {
        let (next, cache) =
            layer_forward_train(spec, lw, acts, assignment.contains(spec.index))?;
        acts = next;
        hidden_caches.push(cache);
    }
    let (pooled, pooled_hw) = global_average_pool(&acts);
    let logits = head_forward(&weights.head, &pooled, net.num_classes);
    Ok(ForwardCache {
        stem: stem_cache,
        hidden: hidden_caches,
        pooled,
        pooled_hw,
        logits,
    })
}

fn layer_backward(
    spec: &LayerSpec,
    lw: &LayerWeights,
    cache: &LayerCache,
    grad_out: Vec<DenseTensor>,
    grads: &mut LayerGradients,
    binarized: bool,
) -> Result<Vec<DenseTensor>, NetworkError> {
    // activation
    let mut grad_pre: Vec<DenseTensor> = cache
        .pre_act
        .iter()
        .zip(&grad_out)
        .map(|(x, g)| {
            crate::binarize::activation_backward(spec.activation, x, g).map_err(NetworkError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;

    // batchnorm
    if let Some(bn_cache) = &cache.bn {
        let bn = lw.bn.as_ref().expect("cache/bn consistency");
        let (gi, d_gamma, d_beta) = batchnorm_backward(&grad_pre, bn_cache, &bn.gamma);
        accumulate(grads.bn_gamma.as_mut().expect("bn grads"), &d_gamma);
        accumulate(grads.bn_beta.as_mut().expect("bn grads"), &d_beta);
        grad_pre = gi;
    }

    // convolution
    if binarized {
        let sign_inputs = cache.sign_input.as_ref().expect("binarized cache");
        let sign_weight = cache.sign_weight.as_ref().expect("binarized cache");
        let alpha = cache.alpha.as_ref().expect("binarized cache");
        let (c_out, h_out, w_out) = grad_pre[0].rank3()?;
        let hw = h_out * w_out;
        let mut grad_inputs = Vec::with_capacity(grad_pre.len());
        for (b, gout) in grad_pre.iter().enumerate() {
            // out = alpha_o * int_out: fold alpha into the upstream gradient
            let mut scaled = gout.clone();
            for o in 0..c_out {
                for v in &mut scaled.data_mut()[o * hw..(o + 1) * hw] {
                    *v *= alpha[o];
                }
            }
            let g_sign_in = crate::tensor::conv2d_input_grad(
                &scaled,
                sign_weight,
                cache.input[b].shape(),
                spec.stride,
                spec.padding,
            )?;
            // straight-through to the latent input
            grad_inputs.push(crate::binarize::ste_sign_backward(&g_sign_in, &cache.input[b])?);
            let gw = crate::tensor::conv2d_weight_grad(
                &sign_inputs[b],
                &scaled,
                (spec.k_h, spec.k_w),
                spec.stride,
                spec.padding,
            )?;
            let gw_latent = crate::binarize::ste_sign_backward(&gw, &lw.weight)?;
            accumulate(&mut grads.weight, &gw_latent);
        }
        Ok(grad_inputs)
    } else {
        let mut grad_inputs = Vec::with_capacity(grad_pre.len());
        for (b, gout) in grad_pre.iter().enumerate() {
            grad_inputs.push(crate::tensor::conv2d_input_grad(
                gout,
                &lw.weight,
                cache.input[b].shape(),
                spec.stride,
                spec.padding,
            )?);
            let gw = crate::tensor::conv2d_weight_grad(
                &cache.input[b],
                gout,
                (spec.k_h, spec.k_w),
                spec.stride,
                spec.padding,
            )?;
            accumulate(&mut grads.weight, &gw);
        }
        Ok(grad_inputs)
    }
}

fn accumulate(into: &mut DenseTensor, from: &DenseTensor) {
    debug_assert_eq!(into.shape(), from.shape());
    for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += b;
    }
}

/// Backward pass from logit gradients to parameter gradients.
pub fn backward(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
    cache: &ForwardCache,
    grad_logits: &DenseTensor,
) -> Result<Gradients, NetworkError> {
    let mut grads = Gradients::zeros_like(weights);
    let batch = cache.pooled.len();
    let c = cache.pooled[0].len();
    let k = net.num_classes;

    // head
    let mut grad_pooled = vec![vec![0.0f32; c]; batch];
    for b in 0..batch {
        for j in 0..k {
            let g = grad_logits.data()[b * k + j];
            if let Some(bias) = grads.head.bias.as_mut() {
                bias.data_mut()[j] += g;
            }
            for i in 0..c {
                grads.head.weight.data_mut()[j * c + i] += g * cache.pooled[b][i];
                grad_pooled[b][i] += g * weights.head.weight.data()[j * c + i];
            }
        }
    }

    // global average pool: spread evenly over the spatial positions
    let last_shape = cache
        .hidden
        .last()
        .expect("hidden layers")
        .pre_act[0]
        .shape()
        .to_vec();
    let hw = cache.pooled_hw;
    let mut grad_acts: Vec<DenseTensor> = (0..batch)
        .map(|b| {
            let mut t = DenseTensor::zeros(last_shape.clone());
            for ch in 0..c {
                let g = grad_pooled[b][ch] / hw as f32;
                for v in &mut t.data_mut()[ch * hw..(ch + 1) * hw] {
                    *v = g;
                }
            }
            t
        })
        .collect();

    // hidden layers, last to first
    for (pos, spec) in net.hidden.iter().enumerate().rev() {
        grad_acts = layer_backward(
            spec,
            &weights.hidden[pos],
            &cache.hidden[pos],
            grad_acts,
            &mut grads.hidden[pos],
            assignment.contains(spec.index),
        )?;
    }

    // stem
    layer_backward(
        &net.stem,
        &weights.stem,
        &cache.stem,
        grad_acts,
        &mut grads.stem,
        false,
    )?;
    Ok(grads)
}
