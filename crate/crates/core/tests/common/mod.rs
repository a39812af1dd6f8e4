//! Shared helpers for the integration tests: naive reference kernels written
//! as plain nested loops, a counting-based Spearman, and random networks.
#![allow(dead_code)]

use eqprobe::network::NetworkBuilder;
use eqprobe::tensor::{Padding, PaddingMode};
use eqprobe::{NetworkSpec, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &d) in idx.iter().zip(t.shape()) {
        flat = flat * d + i;
    }
    t.data()[flat]
}

/// Value of `x[c][i][j]` after padding, with `i`, `j` in padded coordinates.
fn padded(x: &Tensor, c: usize, i: isize, j: isize, pad: Padding) -> f64 {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    let (mut y, mut z) = (i - pad.amount as isize, j - pad.amount as isize);
    match pad.mode {
        PaddingMode::Zero => {
            if y < 0 || y >= h || z < 0 || z >= w {
                return 0.0;
            }
        }
        PaddingMode::Circular => {
            y = y.rem_euclid(h);
            z = z.rem_euclid(w);
        }
    }
    at(x, &[c, y as usize, z as usize])
}

#[allow(clippy::needless_range_loop)]
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: Padding) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let h_out = (h + 2 * pad.amount - k) / stride + 1;
    let w_out = (wd + 2 * pad.amount - k) / stride + 1;
    let mut out = Vec::with_capacity(c_out * h_out * w_out);
    for o in 0..c_out {
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = b[o];
                for c in 0..c_in {
                    for u in 0..k {
                        for v in 0..k {
                            let xi = (i * stride + u) as isize;
                            let xj = (j * stride + v) as isize;
                            acc += at(w, &[o, c, u, v]) * padded(x, c, xi, xj, pad);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out).unwrap()
}

pub fn naive_maxpool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h_out, w_out) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::new();
    for c in 0..c_n {
        for i in 0..h_out {
            for j in 0..w_out {
                let mut m = f64::NEG_INFINITY;
                for u in 0..k {
                    for v in 0..k {
                        m = m.max(at(x, &[c, i * stride + u, j * stride + v]));
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c_n, h_out, w_out], out).unwrap()
}

pub fn naive_dense(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (d, c) = (w.shape()[0], w.shape()[1]);
    (0..d)
        .map(|o| b[o] + (0..c).map(|i| at(w, &[o, i]) * x[i]).sum::<f64>())
        .collect()
}

/// Ranks by counting: 1 + (number strictly smaller) + (ties − 1) / 2.
pub fn counting_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson correlation of the counting ranks.
pub fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (counting_ranks(xs), counting_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Random conv stack on a square input, mixing padding modes, strides and
/// optional ReLU, ending in global pooling and a dense head.
pub fn random_net(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let size = [8, 9, 12][rng.gen_range(0..3)];
    let c0 = rng.gen_range(1..=3);
    let mut b = NetworkBuilder::new(vec![c0, size, size]);
    let mut c = c0;
    for _ in 0..rng.gen_range(1..=3) {
        let c_out = rng.gen_range(1..=5);
        let k = [1, 3][rng.gen_range(0..2)];
        let pad = if rng.gen_bool(0.5) {
            Padding::circular(k / 2)
        } else {
            Padding::zero(k / 2)
        };
        let w = random_tensor(rng, vec![c_out, c, k, k]);
        let bias = random_vec(rng, c_out);
        let stride = rng.gen_range(1..=2);
        b = b.conv(w, bias, stride, pad, rng.gen_bool(0.5));
        c = c_out;
    }
    let d = rng.gen_range(1..=4);
    let w = random_tensor(rng, vec![d, c]);
    let bias = random_vec(rng, d);
    b.global_avg_pool().dense(w, bias, false).build().unwrap()
}

/// A random 3×3 convolution followed by `depth` 1×1 layers that rescale each
/// channel by a positive factor and add a bias of `step·l` at layer `l`.
/// Only the constant offset grows from tap to tap.
pub fn bias_ramp_net(seed: u64, depth: usize, step: f64) -> NetworkSpec {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let c = 4;
    let w = random_tensor(&mut rng, vec![c, 1, 3, 3]);
    let mut b =
        NetworkBuilder::new(vec![1, 12, 12]).conv(w, vec![0.0; c], 1, Padding::circular(1), false);
    for l in 1..=depth {
        let w = Tensor::from_fn(vec![c, c, 1, 1], |i| {
            if i / c == i % c {
                rng.gen_range(0.5..2.0)
            } else {
                0.0
            }
        })
        .unwrap();
        b = b.conv(w, vec![step * l as f64; c], 1, Padding::NONE, false);
    }
    b.build().unwrap()
}
