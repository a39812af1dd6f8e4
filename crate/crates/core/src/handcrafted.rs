//! Hand-built networks with exactly known symmetry, used as ground truth for
//! the measurement pipeline.
//!
//! * [`build_invariant_toy`]: three circular-padded convolutions whose
//!   filters are all the same isotropic Gaussian. Rotating the input rotates
//!   every feature map without moving it to another channel.
//! * [`build_equivariant_toy`]: the same Gaussian with one corner cut off,
//!   placed in each group of four output channels at the four quarter-turn
//!   orientations. Rotating the input by `q` quarters rotates the maps and
//!   cycles the channels inside every group by `q`: channel `r` of the
//!   rotated input matches channel `r - q (mod 4)` of the clean input.
//!
//! Both use circular padding, so the symmetry holds exactly on the whole
//! grid rather than only away from the borders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkBuilder, NetworkError, NetworkSpec};
use crate::tensor::{Padding, Tensor};
use crate::transforms::{apply, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("equivariant toy needs a channel count divisible by 4, got {0}")]
    ChannelsNotMultipleOf4(usize),
    #[error("toy needs at least one channel and a non-empty input")]
    Empty,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub channels: usize,
    pub input_channels: usize,
    /// Side length of the square input.
    pub input_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            sigma: 1.0,
            channels: 4,
            input_channels: 1,
            input_size: 28,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<(), ToyError> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(ToyError::EvenKernel(self.kernel_size));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ToyError::BadSigma(self.sigma));
        }
        if self.channels == 0 || self.input_channels == 0 || self.input_size == 0 {
            return Err(ToyError::Empty);
        }
        Ok(())
    }

    fn padding(&self) -> Padding {
        Padding::circular(self.kernel_size / 2)
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.input_channels, self.input_size, self.input_size]
    }
}

pub const TOY_DEPTH: usize = 3;

/// `k×k` isotropic Gaussian, normalized to unit sum.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Tensor, ToyError> {
    if k.is_multiple_of(2) {
        return Err(ToyError::EvenKernel(k));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(ToyError::BadSigma(sigma));
    }
    let m = (k / 2) as f64;
    let raw: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (i, j) = ((idx / k) as f64, (idx % k) as f64);
            (-((i - m).powi(2) + (j - m).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(Tensor::new(vec![k, k], raw.into_iter().map(|v| v / total).collect()).expect("k×k"))
}

/// Gaussian with its upper-left `m×m` corner block (`i < k/2` and `j < k/2`) set to zero.
pub fn corner_cut_kernel(k: usize, sigma: f64) -> Result<Tensor, ToyError> {
    let g = gaussian_kernel(k, sigma)?;
    let m = k / 2;
    let data = g
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| if idx / k < m && idx % k < m { 0.0 } else { v })
        .collect();
    Ok(Tensor::new(vec![k, k], data).expect("k×k"))
}

/// Counter-clockwise rotation of a square kernel by `quarters`·90°.
pub fn rotate_kernel(kernel: &Tensor, quarters: i64) -> Tensor {
    apply(&Transform::rotation(quarters), kernel).expect("square kernel")
}

/// Stack per-(out, in) kernels into a `[C_out, C_in, k, k]` weight tensor.
fn stack(c_out: usize, c_in: usize, k: usize, kernel: impl Fn(usize, usize) -> Tensor) -> Tensor {
    let mut data = Vec::with_capacity(c_out * c_in * k * k);
    for o in 0..c_out {
        for i in 0..c_in {
            data.extend_from_slice(kernel(o, i).data());
        }
    }
    Tensor::new(vec![c_out, c_in, k, k], data).expect("stacked kernels")
}

fn three_layers(cfg: &ToyConfig, weights: [Tensor; TOY_DEPTH]) -> Result<NetworkSpec, ToyError> {
    let [w1, w2, w3] = weights;
    let bias = vec![0.0; cfg.channels];
    Ok(NetworkBuilder::new(cfg.input_shape())
        .conv(w1, bias.clone(), 1, cfg.padding(), true)
        .conv(w2, bias.clone(), 1, cfg.padding(), true)
        .conv(w3, bias, 1, cfg.padding(), false)
        .build()?)
}

/// Three convolutions whose filters are all the same isotropic Gaussian.
pub fn build_invariant_toy(cfg: &ToyConfig) -> Result<NetworkSpec, ToyError> {
    cfg.validate()?;
    let g = gaussian_kernel(cfg.kernel_size, cfg.sigma)?;
    let k = cfg.kernel_size;
    let w = |c_in| stack(cfg.channels, c_in, k, |_, _| g.clone());
    three_layers(
        cfg,
        [w(cfg.input_channels), w(cfg.channels), w(cfg.channels)],
    )
}

/// Relative weight of the input slice at rotation offset `t = s - r (mod 4)`.
const ARRANGEMENT: [f64; 4] = [1.0, 0.25, 0.0, 0.0];

/// Three convolutions built from rotated copies of a corner-cut Gaussian.
///
/// Output channel `4g + r` holds orientation `r` of group `g`'s base filter
/// (group `g` uses width `sigma·(1 + g/2)`). In deeper layers the slice
/// reading input channel `4g' + s` is the same rotated filter scaled by
/// `ARRANGEMENT[(s - r) mod 4] / (1 + |g - g'|)`, a weighting that depends
/// only on relative orientation and therefore commutes with the channel cycle.
pub fn build_equivariant_toy(cfg: &ToyConfig) -> Result<NetworkSpec, ToyError> {
    cfg.validate()?;
    if !cfg.channels.is_multiple_of(4) {
        return Err(ToyError::ChannelsNotMultipleOf4(cfg.channels));
    }
    let k = cfg.kernel_size;
    let groups = cfg.channels / 4;
    let rotated: Vec<[Tensor; 4]> = (0..groups)
        .map(|g| {
            let base = corner_cut_kernel(k, cfg.sigma * (1.0 + 0.5 * g as f64))?;
            Ok([0, 1, 2, 3].map(|q| rotate_kernel(&base, q)))
        })
        .collect::<Result<_, ToyError>>()?;

    let first = stack(cfg.channels, cfg.input_channels, k, |o, _| {
        rotated[o / 4][o % 4].clone()
    });
    let deep = || {
        stack(cfg.channels, cfg.channels, k, |o, i| {
            let (g, r) = (o / 4, o % 4);
            let (gi, s) = (i / 4, i % 4);
            let scale = ARRANGEMENT[(s + 4 - r) % 4] / (1.0 + g.abs_diff(gi) as f64);
            rotated[g][r].map(|v| v * scale)
        })
    };
    three_layers(cfg, [first, deep(), deep()])
}

/// Channel of the clean activation expected to match channel `c` after the
/// input is rotated by `quarters`.
pub fn equivariant_partner(c: usize, quarters: u32) -> usize {
    let (g, r) = (c / 4, c % 4);
    4 * g + (r + 4 - quarters as usize % 4) % 4
}

/// Copy of `net` with the top-left tap of its first filter bumped, breaking
/// any rotational symmetry of that filter.
pub fn corrupt_first_filter(net: &NetworkSpec) -> Result<NetworkSpec, NetworkError> {
    let mut params = net.params().clone();
    let name = net
        .layers()
        .iter()
        .find_map(|l| l.tensor_refs().first().map(|(_, n)| n.to_string()));
    if let Some(name) = name {
        let t = &params[&name];
        let mut data = t.data().to_vec();
        data[0] += 1.0;
        let bumped = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        params.insert(name, bumped);
    }
    NetworkSpec::new(net.input_shape().to_vec(), net.layers().to_vec(), params)
}
