//! Dense `f64` tensors and the numerical kernels the inference engine runs on.
//!
//! Spatial tensors use `[C, H, W]` layout, row-major with the last axis
//! fastest. Convolution follows the cross-correlation convention: the kernel
//! is *not* flipped, so tap `(0, 0)` of a `k×k` kernel reads the input pixel
//! at offset `(-pad, -pad)` relative to the output position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {found} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape {0:?} has a zero-sized or missing dimension")]
    EmptyDimension(Vec<usize>),
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, found {found})")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: window {window} does not fit extent {extent} along `{dim}`")]
    WindowTooLarge {
        op: &'static str,
        dim: &'static str,
        window: usize,
        extent: usize,
    },
    #[error("{op}: stride must be positive")]
    ZeroStride { op: &'static str },
    #[error("batchnorm: running variance of channel {channel} is negative ({value})")]
    NegativeVariance { channel: usize, value: f64 },
}

/// Dense row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::EmptyDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_fn(
        shape: Vec<usize>,
        mut f: impl FnMut(usize) -> f64,
    ) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Number of spatial positions per channel: `H·W` for rank ≥ 3, else 1.
    pub fn spatial_len(&self) -> usize {
        if self.rank() >= 3 {
            self.shape[self.rank() - 2] * self.shape[self.rank() - 1]
        } else {
            1
        }
    }

    /// Contiguous slice of channel `c` in a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.spatial_len();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Round every value through `f32`, the precision used on disk.
    pub fn quantized(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub mode: PaddingMode,
    pub amount: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PaddingMode::Zero,
        amount: 0,
    };

    pub fn zero(amount: usize) -> Self {
        Self {
            mode: PaddingMode::Zero,
            amount,
        }
    }

    pub fn circular(amount: usize) -> Self {
        Self {
            mode: PaddingMode::Circular,
            amount,
        }
    }
}

/// Output extent of a sliding window with floor arithmetic.
pub fn window_out(extent: usize, pad: usize, k: usize, stride: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Output shape of [`conv2d`] without running it.
pub fn conv2d_shape(
    input: &[usize],
    weights: &[usize],
    bias_len: usize,
    stride: usize,
    padding: Padding,
) -> Result<[usize; 3], TensorError> {
    const OP: &str = "conv2d";
    let &[c_in, h, w] = input else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 3,
            shape: input.to_vec(),
        });
    };
    let &[c_out, wc_in, kh, kw] = weights else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            shape: weights.to_vec(),
        });
    };
    if wc_in != c_in {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "in_channels",
            expected: c_in,
            found: wc_in,
        });
    }
    if kh != kw {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "kernel_width",
            expected: kh,
            found: kw,
        });
    }
    if bias_len != c_out {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "bias",
            expected: c_out,
            found: bias_len,
        });
    }
    if stride == 0 {
        return Err(TensorError::ZeroStride { op: OP });
    }
    let pad = padding.amount;
    for (dim, extent) in [("height", h), ("width", w)] {
        if kh > extent + 2 * pad {
            return Err(TensorError::WindowTooLarge {
                op: OP,
                dim,
                window: kh,
                extent: extent + 2 * pad,
            });
        }
    }
    // Circular padding wraps at most once around the input.
    if padding.mode == PaddingMode::Circular && (pad > h || pad > w) {
        return Err(TensorError::WindowTooLarge {
            op: OP,
            dim: "circular_padding",
            window: pad,
            extent: h.min(w),
        });
    }
    Ok([
        c_out,
        window_out(h, pad, kh, stride),
        window_out(w, pad, kw, stride),
    ])
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]`
/// weights plus per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Result<Tensor, TensorError> {
    let [c_out, h_out, w_out] =
        conv2d_shape(input.shape(), weights.shape(), bias.len(), stride, padding)?;
    let (c_in, h, w) = input.chw("conv2d")?;
    let k = weights.shape()[2];
    let pad = padding.amount as isize;
    let (hi, wi) = (h as isize, w as isize);

    // Row/column source index per (output position, kernel tap); None = zero fill.
    let resolve = |pos: usize, tap: usize, extent: isize| -> Option<usize> {
        let src = (pos * stride) as isize + tap as isize - pad;
        if (0..extent).contains(&src) {
            Some(src as usize)
        } else if padding.mode == PaddingMode::Circular {
            Some(src.rem_euclid(extent) as usize)
        } else {
            None
        }
    };
    let rows: Vec<Option<usize>> = (0..h_out)
        .flat_map(|oy| (0..k).map(move |ky| (oy, ky)))
        .map(|(oy, ky)| resolve(oy, ky, hi))
        .collect();
    let cols: Vec<Option<usize>> = (0..w_out)
        .flat_map(|ox| (0..k).map(move |kx| (ox, kx)))
        .map(|(ox, kx)| resolve(ox, kx, wi))
        .collect();

    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; c_out * h_out * w_out];
    for (co, plane) in out.chunks_exact_mut(h_out * w_out).enumerate() {
        plane.fill(bias[co]);
        for ci in 0..c_in {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            let kern = &wt[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
            for oy in 0..h_out {
                let out_row = &mut plane[oy * w_out..(oy + 1) * w_out];
                for ky in 0..k {
                    let Some(sy) = rows[oy * k + ky] else {
                        continue;
                    };
                    let src_row = &src[sy * w..(sy + 1) * w];
                    let krow = &kern[ky * k..(ky + 1) * k];
                    for (ox, acc) in out_row.iter_mut().enumerate() {
                        let col = &cols[ox * k..(ox + 1) * k];
                        for (kv, sx) in krow.iter().zip(col) {
                            if let Some(sx) = *sx {
                                *acc += kv * src_row[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Inference-mode batch normalization with stored statistics.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor, TensorError> {
    let (c, _, _) = input.chw("batchnorm")?;
    for (dim, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(TensorError::DimMismatch {
                op: "batchnorm",
                dim,
                expected: c,
                found: len,
            });
        }
    }
    if let Some((channel, &value)) = running_var.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(TensorError::NegativeVariance { channel, value });
    }
    let plane = input.spatial_len();
    let mut data = input.data().to_vec();
    for (ch, chunk) in data.chunks_exact_mut(plane).enumerate() {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        for v in chunk {
            *v = scale * (*v - running_mean[ch]) + beta[ch];
        }
    }
    Tensor::new(input.shape().to_vec(), data)
}

pub fn maxpool_shape(input: &[usize], k: usize, stride: usize) -> Result<[usize; 3], TensorError> {
    const OP: &str = "maxpool";
    let &[c, h, w] = input else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 3,
            shape: input.to_vec(),
        });
    };
    if stride == 0 {
        return Err(TensorError::ZeroStride { op: OP });
    }
    for (dim, extent) in [("height", h), ("width", w)] {
        if k == 0 || k > extent {
            return Err(TensorError::WindowTooLarge {
                op: OP,
                dim,
                window: k,
                extent,
            });
        }
    }
    Ok([c, window_out(h, 0, k, stride), window_out(w, 0, k, stride)])
}

pub fn maxpool(input: &Tensor, k: usize, stride: usize) -> Result<Tensor, TensorError> {
    let [c, h_out, w_out] = maxpool_shape(input.shape(), k, stride)?;
    let (_, h, w) = input.chw("maxpool")?;
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let src = &input.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    let row = &src[(oy * stride + ky) * w..];
                    for &v in &row[ox * stride..ox * stride + k] {
                        best = best.max(v);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}

/// Per-channel spatial mean, producing `[C, 1, 1]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = input.chw("global_avg_pool")?;
    let n = (h * w) as f64;
    let means = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect();
    Tensor::new(vec![c, 1, 1], means)
}

/// Affine map `W·x + b` with `W` of shape `[D, C]`. Accepts `[C]` or `[C, 1, 1]`
/// input and returns a `[D]` vector.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor, TensorError> {
    let [d, c] = dense_shape(input.shape(), weights.shape(), bias.len())?;
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(c)
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), d);
    Tensor::vector(out)
}

pub fn dense_shape(
    input: &[usize],
    weights: &[usize],
    bias_len: usize,
) -> Result<[usize; 2], TensorError> {
    const OP: &str = "dense";
    let width = match *input {
        [c] | [c, 1, 1] => c,
        _ => {
            return Err(TensorError::Rank {
                op: OP,
                expected: 1,
                shape: input.to_vec(),
            })
        }
    };
    let &[d, c] = weights else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 2,
            shape: weights.to_vec(),
        });
    };
    if c != width {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "in_features",
            expected: width,
            found: c,
        });
    }
    if bias_len != d {
        return Err(TensorError::DimMismatch {
            op: OP,
            dim: "bias",
            expected: d,
            found: bias_len,
        });
    }
    Ok([d, c])
}
