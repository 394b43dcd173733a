//! Dense float tensors and bit-packed sign tensors.
//!
//! A [`PackedBitTensor`] stores a {-1, +1} valued tensor one bit per element
//! (bit 1 means +1) in 64-bit words, row-major, with the pad bits of the
//! final word forced to zero. Keeping the pad bits zero in *both* operands
//! lets the signed dot product come out of a plain XOR + popcount without
//! any per-word masking: disagreements d over n elements give a dot of
//! `n - 2d`, and the pad region contributes no disagreements.

use thiserror::Error;

/// Bits per storage word of a [`PackedBitTensor`].
pub const WORD_BITS: usize = 64;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a {expected}-dimensional tensor, got shape {shape:?}")]
    WrongRank { expected: usize, shape: Vec<usize> },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f32, index: usize },
    #[error("value {value} at flat index {index} is not exactly -1 or +1")]
    NotBinary { value: f32, index: usize },
    #[error("logical lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("convolution shapes incompatible: input {input:?}, weight {weight:?}")]
    ConvShapeMismatch { input: Vec<usize>, weight: Vec<usize> },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("kernel {kernel:?} does not fit input {input:?} with padding {padding}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
        padding: usize,
    },
}

/// N-dimensional array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and holds
    /// only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                value: data[index],
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same shape, data produced elementwise from `self`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn rank3(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(TensorError::WrongRank {
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn rank4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::WrongRank {
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// {-1, +1} tensor stored one bit per element (bit 1 means +1), row-major in
/// 64-bit words. Pad bits in the last word are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

impl PackedBitTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Logical element count.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Logical element `i` as +1/-1.
    pub fn get(&self, i: usize) -> f32 {
        if (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, words: Vec<u64>) -> Self {
        debug_assert_eq!(
            words.len(),
            shape.iter().product::<usize>().div_ceil(WORD_BITS)
        );
        Self { shape, words }
    }
}

/// Packs a ±1-valued dense tensor into bit form. Rejects any element that is
/// not exactly -1.0 or +1.0.
pub fn pack(t: &DenseTensor) -> Result<PackedBitTensor, TensorError> {
    let n = t.len();
    let mut words = vec![0u64; n.div_ceil(WORD_BITS)];
    for (i, &v) in t.data().iter().enumerate() {
        if v == 1.0 {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        } else if v != -1.0 {
            return Err(TensorError::NotBinary { value: v, index: i });
        }
    }
    Ok(PackedBitTensor {
        shape: t.shape().to_vec(),
        words,
    })
}

/// Inverse of [`pack`]: expands bits back to a ±1-valued dense tensor.
pub fn unpack(p: &PackedBitTensor) -> DenseTensor {
    let n = p.len();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(p.get(i));
    }
    DenseTensor {
        shape: p.shape.clone(),
        data,
    }
}

/// Number of positions where the two bit strings disagree.
#[inline(always)]
pub(crate) fn xor_popcount(a: &[u64], b: &[u64]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| u64::from((x ^ y).count_ones()))
        .sum()
}

/// Signed ±1 dot product of two packed tensors of equal logical length `n`:
/// `sum_i a_i * b_i = n - 2 * popcount(a XOR b)`. Exact integer result in
/// `[-n, n]` with the parity of `n`.
pub fn xnor_popcount_dot(a: &PackedBitTensor, b: &PackedBitTensor) -> Result<i64, TensorError> {
    let n = a.len();
    if n != b.len() {
        return Err(TensorError::LengthMismatch {
            left: n,
            right: b.len(),
        });
    }
    let disagreements = xor_popcount(&a.words, &b.words);
    Ok(n as i64 - 2 * disagreements as i64)
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::type_complexity)]
fn conv_shapes(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize), TensorError> {
    let (&[c_in, h, w], &[c_out, wc_in, k_h, k_w]) = (input, weight) else {
        return Err(TensorError::ConvShapeMismatch {
            input: input.to_vec(),
            weight: weight.to_vec(),
        });
    };
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    if wc_in != c_in {
        return Err(TensorError::ConvShapeMismatch {
            input: input.to_vec(),
            weight: weight.to_vec(),
        });
    }
    let (Some(h_out), Some(w_out)) = (
        conv_out_dim(h, k_h, stride, padding),
        conv_out_dim(w, k_w, stride, padding),
    ) else {
        return Err(TensorError::KernelTooLarge {
            kernel: vec![k_h, k_w],
            input: input.to_vec(),
            padding,
        });
    };
    Ok((c_in, h, w, c_out, k_h, k_w, h_out, w_out))
}

/// Dense 2-D cross-correlation (deep-learning "convolution", no kernel flip)
/// with zero padding. `input` is `[c_in, h, w]`, `weight` is
/// `[c_out, c_in, k_h, k_w]`; output is `[c_out, h_out, w_out]` with
/// `h_out = (h + 2*padding - k_h) / stride + 1`.
pub fn conv2d_dense(
    input: &DenseTensor,
    weight: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let (c_in, h, w, c_out, k_h, k_w, h_out, w_out) =
        conv_shapes(input.shape(), weight.shape(), stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; c_out * h_out * w_out];
    for o in 0..c_out {
        let w_base = o * c_in * k_h * k_w;
        for y in 0..h_out {
            for xo in 0..w_out {
                let mut acc = 0.0f32;
                for c in 0..c_in {
                    for i in 0..k_h {
                        let iy = (y * stride + i) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * w;
                        let w_row = w_base + (c * k_h + i) * k_w;
                        for j in 0..k_w {
                            let ix = (xo * stride + j) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] * wt[w_row + j];
                        }
                    }
                }
                out[(o * h_out + y) * w_out + xo] = acc;
            }
        }
    }
    Ok(DenseTensor {
        shape: vec![c_out, h_out, w_out],
        data: out,
    })
}

/// Gradient of [`conv2d_dense`] w.r.t. its input.
pub(crate) fn conv2d_input_grad(
    grad_out: &DenseTensor,
    weight: &DenseTensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let (c_in, h, w, c_out, k_h, k_w, h_out, w_out) =
        conv_shapes(input_shape, weight.shape(), stride, padding)?;
    debug_assert_eq!(grad_out.shape(), &[c_out, h_out, w_out]);
    let go = grad_out.data();
    let wt = weight.data();
    let mut gx = vec![0.0f32; c_in * h * w];
    for o in 0..c_out {
        let w_base = o * c_in * k_h * k_w;
        for y in 0..h_out {
            for xo in 0..w_out {
                let g = go[(o * h_out + y) * w_out + xo];
                if g == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for i in 0..k_h {
                        let iy = (y * stride + i) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * w;
                        let w_row = w_base + (c * k_h + i) * k_w;
                        for j in 0..k_w {
                            let ix = (xo * stride + j) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[row + ix as usize] += g * wt[w_row + j];
                        }
                    }
                }
            }
        }
    }
    Ok(DenseTensor {
        shape: input_shape.to_vec(),
        data: gx,
    })
}

/// Gradient of [`conv2d_dense`] w.r.t. its weight.
pub(crate) fn conv2d_weight_grad(
    input: &DenseTensor,
    grad_out: &DenseTensor,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let (c_in, h, w) = input.rank3()?;
    let (c_out, h_out, w_out) = grad_out.rank3()?;
    let (k_h, k_w) = kernel;
    let x = input.data();
    let go = grad_out.data();
    let mut gw = vec![0.0f32; c_out * c_in * k_h * k_w];
    for o in 0..c_out {
        let w_base = o * c_in * k_h * k_w;
        for y in 0..h_out {
            for xo in 0..w_out {
                let g = go[(o * h_out + y) * w_out + xo];
                if g == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for i in 0..k_h {
                        let iy = (y * stride + i) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * w;
                        let w_row = w_base + (c * k_h + i) * k_w;
                        for j in 0..k_w {
                            let ix = (xo * stride + j) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gw[w_row + j] += g * x[row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(DenseTensor {
        shape: vec![c_out, c_in, k_h, k_w],
        data: gw,
    })
}
