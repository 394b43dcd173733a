//! Sign quantization, channelwise scaling, the packed XNOR convolution, the
//! straight-through estimator, and the activation family including BinReLU.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv_out_dim, pack, DenseTensor, PackedBitTensor, TensorError, WORD_BITS};

#[derive(Debug, Error)]
pub enum BinarizeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("channel {channel} has all-zero weights; scale would not be positive")]
    ZeroChannel { channel: usize },
    #[error("scale vector has {actual} entries, layer has {expected} output channels")]
    ScaleLengthMismatch { expected: usize, actual: usize },
    #[error("scale entry {index} is {value}; scales must be strictly positive")]
    NonPositiveScale { index: usize, value: f32 },
}

/// Per-output-channel positive scaling factors for a binarized convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    values: Vec<f32>,
}

impl ScaleVector {
    /// Wraps raw scale values, rejecting non-positive entries.
    pub fn new(values: Vec<f32>) -> Result<Self, BinarizeError> {
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(BinarizeError::NonPositiveScale { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Activation functions usable in both the full-precision and binary parts
/// of a mixed-precision network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    ReLU,
    HardTanh,
    Identity,
    /// `f(x) = -1 for x <= -1, x otherwise`: identity on `[-1, inf)` like
    /// ReLU for positive inputs, but keeps the `(-1, 0)` band that the sign
    /// step of a following binary layer depends on.
    BinReLU,
}

impl ActivationKind {
    pub fn forward_scalar(self, x: f32) -> f32 {
        match self {
            Self::ReLU => x.max(0.0),
            Self::HardTanh => x.clamp(-1.0, 1.0),
            Self::Identity => x,
            Self::BinReLU => x.max(-1.0),
        }
    }

    /// Surrogate derivative; subgradient 0 at every kink.
    pub fn derivative_scalar(self, x: f32) -> f32 {
        match self {
            Self::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::HardTanh => {
                if x > -1.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
            Self::BinReLU => {
                if x > -1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::ReLU => "relu",
            Self::HardTanh => "hard_tanh",
            Self::Identity => "identity",
            Self::BinReLU => "bin_relu",
        };
        f.write_str(name)
    }
}

/// Sign quantization: -1 where the value is negative, +1 otherwise (zero
/// maps to +1). Rejects NaN input.
pub fn sign_binarize(t: &DenseTensor) -> Result<PackedBitTensor, BinarizeError> {
    if let Some(index) = t.data().iter().position(|v| v.is_nan()) {
        return Err(BinarizeError::Tensor(TensorError::NonFinite {
            value: t.data()[index],
            index,
        }));
    }
    let signs = t.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
    Ok(pack(&signs)?)
}

/// Channelwise scaling factors: mean absolute value of each output channel's
/// weights. `w` is `[c_out, c_in, k_h, k_w]`; any channel with all-zero
/// weights is rejected since its scale would not be positive.
pub fn channel_scale(w: &DenseTensor) -> Result<ScaleVector, BinarizeError> {
    let (c_out, c_in, k_h, k_w) = w.rank4()?;
    let n = c_in * k_h * k_w;
    let mut values = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let slice = &w.data()[o * n..(o + 1) * n];
        let sum: f32 = slice.iter().map(|v| v.abs()).sum();
        if sum == 0.0 {
            return Err(BinarizeError::ZeroChannel { channel: o });
        }
        values.push(sum / n as f32);
    }
    ScaleVector::new(values)
}

/// Activations packed channels-last: one run of `words_per_pixel` words per
/// spatial position, channel bits innermost, pad bits zero. Out-of-range
/// spatial taps read as all-zero words, which the XOR dot treats as -1 --
/// exactly the pad value a ±1 convolution can express.
struct ChannelPacked {
    words: Vec<u64>,
    words_per_pixel: usize,
    h: usize,
    w: usize,
}

fn repack_channels_last(p: &PackedBitTensor, c: usize, h: usize, w: usize) -> ChannelPacked {
    let words_per_pixel = c.div_ceil(WORD_BITS);
    let mut words = vec![0u64; h * w * words_per_pixel];
    let src = p.words();
    for ch in 0..c {
        let dst_word = ch / WORD_BITS;
        let dst_bit = ch % WORD_BITS;
        for y in 0..h {
            let src_row = ch * h * w + y * w;
            for x in 0..w {
                let i = src_row + x;
                let bit = (src[i / WORD_BITS] >> (i % WORD_BITS)) & 1;
                words[(y * w + x) * words_per_pixel + dst_word] |= bit << dst_bit;
            }
        }
    }
    ChannelPacked {
        words,
        words_per_pixel,
        h,
        w,
    }
}

/// Weights repacked as `[c_out][k_h][k_w][words_per_pixel]` with channel
/// bits innermost, matching the activation layout tap for tap.
fn repack_weights(p: &PackedBitTensor, c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> ChannelPacked {
    let words_per_pixel = c_in.div_ceil(WORD_BITS);
    let mut words = vec![0u64; c_out * k_h * k_w * words_per_pixel];
    let src = p.words();
    for o in 0..c_out {
        for ch in 0..c_in {
            let dst_word = ch / WORD_BITS;
            let dst_bit = ch % WORD_BITS;
            for i in 0..k_h {
                for j in 0..k_w {
                    let s = ((o * c_in + ch) * k_h + i) * k_w + j;
                    let bit = (src[s / WORD_BITS] >> (s % WORD_BITS)) & 1;
                    words[((o * k_h + i) * k_w + j) * words_per_pixel + dst_word] |= bit << dst_bit;
                }
            }
        }
    }
    ChannelPacked {
        words,
        words_per_pixel,
        h: k_h,
        w: k_w,
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn binary_conv_body(
    acts: &ChannelPacked,
    weights: &ChannelPacked,
    alpha: &[f32],
    c_in: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [f32],
) {
    let wpp = acts.words_per_pixel;
    let (h, w) = (acts.h, acts.w);
    let (k_h, k_w) = (weights.h, weights.w);
    let zero_tap = vec![0u64; wpp];
    for (o, &scale) in alpha.iter().enumerate() {
        let w_layer = &weights.words[o * k_h * k_w * wpp..(o + 1) * k_h * k_w * wpp];
        for y in 0..h_out {
            for x in 0..w_out {
                // Each tap contributes c_in - 2 * popcount(a XOR w); summed
                // over taps that is taps*c_in - 2 * total disagreements.
                let mut disagreements = 0u64;
                for i in 0..k_h {
                    let iy = (y * stride + i) as isize - padding as isize;
                    for j in 0..k_w {
                        let ix = (x * stride + j) as isize - padding as isize;
                        let a_tap = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                        {
                            let base = (iy as usize * w + ix as usize) * wpp;
                            &acts.words[base..base + wpp]
                        } else {
                            &zero_tap[..]
                        };
                        let w_tap = &w_layer[(i * k_w + j) * wpp..(i * k_w + j + 1) * wpp];
                        for (&a, &b) in a_tap.iter().zip(w_tap) {
                            disagreements += u64::from((a ^ b).count_ones());
                        }
                    }
                }
                let dot = (k_h * k_w * c_in) as i64 - 2 * disagreements as i64;
                out[(o * h_out + y) * w_out + x] = scale * dot as f32;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
#[target_feature(enable = "popcnt")]
unsafe fn binary_conv_popcnt(
    acts: &ChannelPacked,
    weights: &ChannelPacked,
    alpha: &[f32],
    c_in: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [f32],
) {
    binary_conv_body(acts, weights, alpha, c_in, stride, padding, h_out, w_out, out);
}

/// Binarized convolution: XNOR + popcount over packed ±1 tensors, scaled per
/// output channel. `input` is a packed `[c_in, h, w]` tensor, `weight` a
/// packed `[c_out, c_in, k_h, k_w]` tensor. The integer core equals
/// `conv2d_dense` on the unpacked tensors exactly; spatial padding
/// contributes -1 (a zero pad has no ±1 encoding).
pub fn binary_conv2d(
    input: &PackedBitTensor,
    weight: &PackedBitTensor,
    alpha: &ScaleVector,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, BinarizeError> {
    let (&[c_in, h, w], &[c_out, wc_in, k_h, k_w]) = (input.shape(), weight.shape()) else {
        return Err(TensorError::ConvShapeMismatch {
            input: input.shape().to_vec(),
            weight: weight.shape().to_vec(),
        }
        .into());
    };
    if wc_in != c_in {
        return Err(TensorError::ConvShapeMismatch {
            input: input.shape().to_vec(),
            weight: weight.shape().to_vec(),
        }
        .into());
    }
    if stride == 0 {
        return Err(TensorError::ZeroStride.into());
    }
    if alpha.len() != c_out {
        return Err(BinarizeError::ScaleLengthMismatch {
            expected: c_out,
            actual: alpha.len(),
        });
    }
    let (Some(h_out), Some(w_out)) = (
        conv_out_dim(h, k_h, stride, padding),
        conv_out_dim(w, k_w, stride, padding),
    ) else {
        return Err(TensorError::KernelTooLarge {
            kernel: vec![k_h, k_w],
            input: input.shape().to_vec(),
            padding,
        }
        .into());
    };

    let acts = repack_channels_last(input, c_in, h, w);
    let weights = repack_weights(weight, c_out, c_in, k_h, k_w);
    let mut out = vec![0.0f32; c_out * h_out * w_out];

    #[cfg(target_arch = "x86_64")]
    let used_hw = if std::arch::is_x86_feature_detected!("popcnt") {
        unsafe {
            binary_conv_popcnt(
                &acts,
                &weights,
                alpha.values(),
                c_in,
                stride,
                padding,
                h_out,
                w_out,
                &mut out,
            );
        }
        true
    } else {
        false
    };
    #[cfg(not(target_arch = "x86_64"))]
    let used_hw = false;

    if !used_hw {
        binary_conv_body(
            &acts,
            &weights,
            alpha.values(),
            c_in,
            stride,
            padding,
            h_out,
            w_out,
            &mut out,
        );
    }

    Ok(DenseTensor::new(vec![c_out, h_out, w_out], out).expect("conv output shape"))
}

/// Elementwise activation.
pub fn activation_forward(kind: ActivationKind, x: &DenseTensor) -> DenseTensor {
    x.map(|v| kind.forward_scalar(v))
}

/// Elementwise `upstream * f'(x)` with the subgradient 0 at kinks.
pub fn activation_backward(
    kind: ActivationKind,
    x: &DenseTensor,
    upstream: &DenseTensor,
) -> Result<DenseTensor, BinarizeError> {
    if x.shape() != upstream.shape() {
        return Err(TensorError::LengthMismatch {
            left: x.len(),
            right: upstream.len(),
        }
        .into());
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| u * kind.derivative_scalar(v))
        .collect();
    Ok(DenseTensor::new(x.shape().to_vec(), data)?)
}

/// Clipped straight-through estimator for the sign quantizer: the upstream
/// gradient passes to the latent real value where `|latent| <= 1` and is
/// zeroed outside.
pub fn ste_sign_backward(
    upstream: &DenseTensor,
    latent: &DenseTensor,
) -> Result<DenseTensor, BinarizeError> {
    if upstream.shape() != latent.shape() {
        return Err(TensorError::LengthMismatch {
            left: upstream.len(),
            right: latent.len(),
        }
        .into());
    }
    let data = upstream
        .data()
        .iter()
        .zip(latent.data())
        .map(|(&u, &l)| if l.abs() <= 1.0 { u } else { 0.0 })
        .collect();
    Ok(DenseTensor::new(latent.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d_dense, unpack};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> DenseTensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        DenseTensor::new(shape, data).unwrap()
    }

    fn random_sign_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> DenseTensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        DenseTensor::new(shape, data).unwrap()
    }

    #[test]
    fn sign_zero_goes_positive() {
        let t = DenseTensor::new(vec![3], vec![-0.3, 0.0, 2.5]).unwrap();
        let s = unpack(&sign_binarize(&t).unwrap());
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn sign_all_positive() {
        let t = DenseTensor::new(vec![2, 2], vec![0.1, 3.0, 7.0, 0.0]).unwrap();
        let s = unpack(&sign_binarize(&t).unwrap());
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sign_rejects_nan() {
        let mut t = DenseTensor::zeros(vec![2]);
        t.data_mut()[1] = f32::NAN;
        assert!(sign_binarize(&t).is_err());
    }

    #[test]
    fn channel_scale_examples() {
        let w = DenseTensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(channel_scale(&w).unwrap().values(), &[1.0]);

        let w = DenseTensor::new(vec![1, 1, 2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(channel_scale(&w).unwrap().values(), &[0.5]);
    }

    #[test]
    fn channel_scale_rejects_zero_channel() {
        let w = DenseTensor::new(vec![2, 1, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            channel_scale(&w),
            Err(BinarizeError::ZeroChannel { channel: 1 })
        ));
    }

    #[test]
    fn channel_scale_requires_rank_4() {
        let w = DenseTensor::full(vec![4, 4], 1.0);
        assert!(channel_scale(&w).is_err());
    }

    #[test]
    fn channel_scale_matches_flat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(vec![5, 3, 3, 3], &mut rng);
        let got = channel_scale(&w).unwrap();
        let n = 3 * 3 * 3;
        for o in 0..5 {
            let mut sum = 0.0f32;
            for idx in 0..n {
                sum += w.data()[o * n + idx].abs();
            }
            let expect = sum / n as f32;
            assert!((got.values()[o] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_conv_all_ones() {
        let a = sign_binarize(&DenseTensor::full(vec![1, 3, 3], 1.0)).unwrap();
        let w = sign_binarize(&DenseTensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        let alpha = ScaleVector::new(vec![1.0]).unwrap();
        let out = binary_conv2d(&a, &w, &alpha, 1, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));

        let alpha2 = ScaleVector::new(vec![2.0]).unwrap();
        let out2 = binary_conv2d(&a, &w, &alpha2, 1, 0).unwrap();
        for (x, y) in out.data().iter().zip(out2.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn binary_conv_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let c_in = rng.gen_range(1..=8);
            let c_out = rng.gen_range(1..=8);
            let hw = rng.gen_range(3..=8);
            let k = rng.gen_range(1..=3.min(hw));
            let stride = rng.gen_range(1..=2);
            let a = random_sign_tensor(vec![c_in, hw, hw], &mut rng);
            let w = random_sign_tensor(vec![c_out, c_in, k, k], &mut rng);
            let alpha_vals: Vec<f32> = (0..c_out).map(|_| rng.gen_range(0.1..2.0)).collect();
            let alpha = ScaleVector::new(alpha_vals.clone()).unwrap();

            let ones = ScaleVector::new(vec![1.0; c_out]).unwrap();
            let integer =
                binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), &ones, stride, 0).unwrap();
            let packed =
                binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), &alpha, stride, 0).unwrap();
            let dense = conv2d_dense(&a, &w, stride, 0).unwrap();
            let (ho, wo) = (dense.shape()[1], dense.shape()[2]);
            for o in 0..c_out {
                for i in 0..ho * wo {
                    let d = dense.data()[o * ho * wo + i];
                    // integer core must agree exactly
                    assert_eq!(integer.data()[o * ho * wo + i], d, "integer part mismatch");
                    let p = packed.data()[o * ho * wo + i];
                    assert!((p - alpha_vals[o] * d).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn binary_conv_padding_acts_as_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_sign_tensor(vec![3, 5, 5], &mut rng);
        let w = random_sign_tensor(vec![2, 3, 3, 3], &mut rng);
        let alpha = ScaleVector::new(vec![1.0, 1.0]).unwrap();
        let got = binary_conv2d(&pack(&a).unwrap(), &pack(&w).unwrap(), &alpha, 1, 1).unwrap();

        // oracle: embed into a -1 border and convolve densely without padding
        let mut padded = DenseTensor::full(vec![3, 7, 7], -1.0);
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    padded.data_mut()[(c * 7 + y + 1) * 7 + x + 1] = a.data()[(c * 5 + y) * 5 + x];
                }
            }
        }
        let want = conv2d_dense(&padded, &w, 1, 0).unwrap();
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert_eq!(g, e);
        }
    }

    #[test]
    fn binary_conv_shape_errors() {
        let a = sign_binarize(&DenseTensor::full(vec![2, 4, 4], 1.0)).unwrap();
        let w = sign_binarize(&DenseTensor::full(vec![2, 3, 1, 1], 1.0)).unwrap();
        let alpha = ScaleVector::new(vec![1.0, 1.0]).unwrap();
        assert!(binary_conv2d(&a, &w, &alpha, 1, 0).is_err());

        let w_ok = sign_binarize(&DenseTensor::full(vec![2, 2, 1, 1], 1.0)).unwrap();
        let alpha_short = ScaleVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            binary_conv2d(&a, &w_ok, &alpha_short, 1, 0),
            Err(BinarizeError::ScaleLengthMismatch { .. })
        ));
    }

    #[test]
    fn scale_vector_rejects_nonpositive() {
        assert!(ScaleVector::new(vec![1.0, 0.0]).is_err());
        assert!(ScaleVector::new(vec![-0.5]).is_err());
    }

    #[test]
    fn bin_relu_piecewise_values() {
        let x = DenseTensor::new(vec![5], vec![-2.0, -1.0, -0.5, 0.0, 3.0]).unwrap();
        let y = activation_forward(ActivationKind::BinReLU, &x);
        assert_eq!(y.data(), &[-1.0, -1.0, -0.5, 0.0, 3.0]);
    }

    #[test]
    fn relu_and_hardtanh_values() {
        let x = DenseTensor::new(vec![2], vec![-2.0, 3.0]).unwrap();
        assert_eq!(
            activation_forward(ActivationKind::ReLU, &x).data(),
            &[0.0, 3.0]
        );
        let x = DenseTensor::new(vec![3], vec![-2.0, 0.5, 2.0]).unwrap();
        assert_eq!(
            activation_forward(ActivationKind::HardTanh, &x).data(),
            &[-1.0, 0.5, 1.0]
        );
    }

    #[test]
    fn activation_backward_examples() {
        let x = DenseTensor::new(vec![2], vec![-2.0, 0.5]).unwrap();
        let up = DenseTensor::full(vec![2], 1.0);
        let g = activation_backward(ActivationKind::BinReLU, &x, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);

        let up = DenseTensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let g = activation_backward(ActivationKind::Identity, &x, &up).unwrap();
        assert_eq!(g.data(), up.data());

        let short = DenseTensor::zeros(vec![3]);
        assert!(activation_backward(ActivationKind::ReLU, &x, &short).is_err());
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let kinds = [
            ActivationKind::ReLU,
            ActivationKind::HardTanh,
            ActivationKind::Identity,
            ActivationKind::BinReLU,
        ];
        let h = 1e-3f64;
        for kind in kinds {
            let mut checked = 0;
            while checked < 200 {
                let x: f32 = rng.gen_range(-3.0..3.0);
                // keep the finite-difference window clear of the kinks
                let near_kink = [-1.0f32, 0.0, 1.0]
                    .iter()
                    .any(|k| (x - k).abs() < 1e-2);
                if near_kink {
                    continue;
                }
                let f = |v: f64| kind.forward_scalar(v as f32) as f64;
                let fd = (f(x as f64 + h) - f(x as f64 - h)) / (2.0 * h);
                let analytic = kind.derivative_scalar(x) as f64;
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-3,
                    "{kind:?} at {x}: analytic {analytic} fd {fd}"
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn ste_clips_outside_unit_interval() {
        let latent = DenseTensor::new(vec![2], vec![0.5, 2.0]).unwrap();
        let up = DenseTensor::full(vec![2], 3.0);
        let g = ste_sign_backward(&up, &latent).unwrap();
        assert_eq!(g.data(), &[3.0, 0.0]);
    }

    #[test]
    fn ste_passes_through_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let latent = DenseTensor::new(
            vec![16],
            (0..16).map(|_| rng.gen_range(-0.99..0.99)).collect(),
        )
        .unwrap();
        let up = random_tensor(vec![16], &mut rng);
        let g = ste_sign_backward(&up, &latent).unwrap();
        assert_eq!(g.data(), up.data());
    }

    proptest! {
        #[test]
        fn sign_matches_elementwise_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(vec![4, 5], &mut rng);
            let s = unpack(&sign_binarize(&t).unwrap());
            for (&v, &b) in t.data().iter().zip(s.data()) {
                prop_assert!(b == 1.0 || b == -1.0);
                prop_assert_eq!(b, if v < 0.0 { -1.0 } else { 1.0 });
            }
        }

        #[test]
        fn bin_relu_properties(x in -5.0f32..5.0, y in -5.0f32..5.0) {
            let f = |v: f32| ActivationKind::BinReLU.forward_scalar(v);
            // identity on [-1, inf), floor below
            if x >= -1.0 {
                prop_assert_eq!(f(x), x);
            } else {
                prop_assert_eq!(f(x), -1.0);
            }
            // monotone nondecreasing
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(f(lo) <= f(hi));
            // matches ReLU for x >= 0 and HardTanh for x <= 1
            if x >= 0.0 {
                prop_assert_eq!(f(x), ActivationKind::ReLU.forward_scalar(x));
            }
            if x <= 1.0 {
                prop_assert_eq!(f(x), ActivationKind::HardTanh.forward_scalar(x));
            }
        }

        #[test]
        fn eq2_exact_on_sign_inputs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(vec![2, 5, 5], &mut rng);
            let w = random_tensor(vec![3, 2, 3, 3], &mut rng);
            let sa = sign_binarize(&a).unwrap();
            let sw = sign_binarize(&w).unwrap();
            let alpha = channel_scale(&w).unwrap();
            let packed = binary_conv2d(&sa, &sw, &alpha, 1, 0).unwrap();
            let dense = conv2d_dense(&unpack(&sa), &unpack(&sw), 1, 0).unwrap();
            let (ho, wo) = (dense.shape()[1], dense.shape()[2]);
            for o in 0..3 {
                for i in 0..ho * wo {
                    let expect = alpha.values()[o] * dense.data()[o * ho * wo + i];
                    prop_assert_eq!(packed.data()[o * ho * wo + i], expect);
                }
            }
        }
    }
}
