use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    /// Independent uniform values in `[0, 1)`.
    UniformNoise,
    /// One to three isotropic Gaussian bumps per channel, clipped to `[0, 1]`.
    GaussianBlobs,
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_noise" | "uniform-noise" | "noise" | "uniform" => {
                Ok(SyntheticKind::UniformNoise)
            }
            "gaussian_blobs" | "gaussian-blobs" | "blobs" => Ok(SyntheticKind::GaussianBlobs),
            other => Err(format!(
                "unknown synthetic kind `{other}` (expected uniform_noise or gaussian_blobs)"
            )),
        }
    }
}

/// `n` deterministic images of `shape` (`[C, H, W]` or `[H, W]`-style; the
/// last two dimensions are treated as spatial).
pub fn synthetic_batch(n: usize, shape: &[usize], seed: u64, kind: SyntheticKind) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| one(&mut rng, shape, kind)).collect()
}

fn one(rng: &mut ChaCha8Rng, shape: &[usize], kind: SyntheticKind) -> Tensor {
    let len: usize = shape.iter().product();
    let data = match kind {
        SyntheticKind::UniformNoise => (0..len).map(|_| rng.gen::<f64>()).collect(),
        SyntheticKind::GaussianBlobs => blobs(rng, shape, len),
    };
    Tensor::new(shape.to_vec(), data).expect("length matches shape by construction")
}

fn blobs(rng: &mut ChaCha8Rng, shape: &[usize], len: usize) -> Vec<f64> {
    let (h, w) = match shape {
        [.., h, w] => (*h, *w),
        [w] => (1, *w),
        [] => (1, 1),
    };
    let plane = (h * w).max(1);
    let mut data = vec![0.0; len];
    for chan in data.chunks_mut(plane) {
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(1.0..(h.max(w) as f64 / 4.0).max(1.5));
            let amp = rng.gen_range(0.5..1.0);
            for (idx, v) in chan.iter_mut().enumerate() {
                let (y, x) = ((idx / w) as f64, (idx % w) as f64);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        for v in chan.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        for kind in [SyntheticKind::UniformNoise, SyntheticKind::GaussianBlobs] {
            let a = synthetic_batch(4, &[2, 8, 8], 5, kind);
            assert_eq!(a, synthetic_batch(4, &[2, 8, 8], 5, kind));
            assert_ne!(a, synthetic_batch(4, &[2, 8, 8], 6, kind));
            assert!(a
                .iter()
                .flat_map(|t| t.data())
                .all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(synthetic_batch(0, &[1, 4, 4], 1, SyntheticKind::UniformNoise).is_empty());
    }

    #[test]
    fn blobs_have_a_peak() {
        for t in synthetic_batch(10, &[1, 16, 16], 9, SyntheticKind::GaussianBlobs) {
            let max = t.data().iter().cloned().fold(f64::MIN, f64::max);
            let mean = t.data().iter().sum::<f64>() / t.len() as f64;
            assert!(max > mean);
        }
    }
}
