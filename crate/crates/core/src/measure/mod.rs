//! Per-channel invariance and equivariance scores and their aggregation over
//! layers, samples, transform magnitudes and depth partitions.
//!
//! For an input `x`, a transform `g` and a tap with activation `f(x)`:
//!
//! * the layer-side transform `g'` is `g` rescaled to the tap's resolution
//!   (see [`scale_to_layer`]) and applied to the clean activation, giving the
//!   reference `g'·f(x)`;
//! * invariance of channel `c` is `S(f(g·x)[c], (g'·f(x))[c])`, the channel
//!   compared against its own spatially aligned counterpart;
//! * equivariance of channel `c` is the maximum of
//!   `S(f(g·x)[c], (g'·f(x))[c'])` over channels `c'`, which includes `c' = c`
//!   and is therefore never below the invariance score.
//!
//! Taps without spatial extent (1×1 maps, vectors) have no spatial action:
//! the whole feature vector is compared once and equivariance equals
//! invariance.

mod diagnostic;
mod partition;
mod report;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkError, NetworkSpec, Tap};
use crate::parallel::{map_ordered, Execution};
use crate::similarity::{similarity, Score, SimilarityError, SimilarityKind};
use crate::tensor::Tensor;
use crate::transforms::{
    apply_with, scale_to_layer, Family, ShiftMode, Transform, TransformError, TransformSweep,
};

pub use diagnostic::{
    magnitude_correlation, magnitude_diagnostic, DiagnosticOutcome, MagnitudeDiagnostic,
    SimilaritySeries,
};
pub use partition::{partition_layers, Partition, PartitionScheme};
pub use report::{
    ChannelDetail, CsvRow, EquivarianceReport, LayerReport, MagnitudeScore, PartitionSummary,
    CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("no input samples given")]
    EmptySamples,
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: NetworkError,
    },
    #[error("rotation sweeps need square feature maps; layer {layer} produces {shape:?}")]
    NonSquareTap { layer: usize, shape: Vec<usize> },
    #[error("partition scheme covers {found} taps but the network has {expected}")]
    PartitionSize { expected: usize, found: usize },
    #[error("max-match-channels must be at least 1")]
    ZeroMatchCap,
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub similarity: SimilarityKind,
    pub shift_mode: ShiftMode,
    /// Cap on candidate channels `c'` in the equivariance max. Wider layers
    /// are matched against `c` itself plus a seeded random subset.
    pub max_match_channels: Option<usize>,
    pub seed: u64,
    /// Keep per-channel means and argmax channels in the report.
    pub channel_detail: bool,
    pub execution: Execution,
    pub workers: Option<usize>,
    /// Override the default depth partition.
    pub partition: Option<PartitionScheme>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityKind::Pearson,
            shift_mode: ShiftMode::Circular,
            max_match_channels: None,
            seed: 0,
            channel_detail: false,
            execution: Execution::Parallel,
            workers: None,
            partition: None,
        }
    }
}

impl MeasureConfig {
    pub fn with_similarity(similarity: SimilarityKind) -> Self {
        Self {
            similarity,
            ..Self::default()
        }
    }
}

/// Similarity that tolerates single-element vectors by treating them as
/// constant maps.
fn score(kind: SimilarityKind, a: &[f64], b: &[f64]) -> Result<Score, SimilarityError> {
    if kind == SimilarityKind::Pearson && a.len() == 1 && b.len() == 1 {
        let same = (a[0] - b[0]).abs() <= 1e-9 * a[0].abs().max(b[0].abs()).max(1.0);
        return Ok(Score {
            value: if same { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    similarity(kind, a, b)
}

fn check_channel(t: &Tensor, c: usize) -> Result<(), SimilarityError> {
    let channels = t.shape().first().copied().unwrap_or(0);
    if c >= channels {
        return Err(SimilarityError::LengthMismatch(c, channels));
    }
    Ok(())
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<(), SimilarityError> {
    if a.shape() != b.shape() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Similarity of channel `c` between `reference` and `transformed`.
///
/// Pass the clean activation for a plain comparison, or the layer-side
/// transformed clean activation for the spatially aligned invariance used by
/// [`measure_network`].
pub fn invariance_of_channel(
    kind: SimilarityKind,
    reference: &Tensor,
    transformed: &Tensor,
    c: usize,
) -> Result<Score, SimilarityError> {
    check_same_shape(reference, transformed)?;
    check_channel(reference, c)?;
    score(kind, transformed.channel(c), reference.channel(c))
}

/// Best match for channel `c` of `transformed` among all channels of the
/// layer-side transformed clean activation. Ties keep the lowest index.
pub fn equivariance_of_channel(
    kind: SimilarityKind,
    transformed: &Tensor,
    transformed_reference: &Tensor,
    c: usize,
) -> Result<(Score, usize), SimilarityError> {
    check_same_shape(transformed, transformed_reference)?;
    check_channel(transformed, c)?;
    let channels = transformed.shape()[0];
    best_match(kind, transformed, transformed_reference, c, 0..channels)
}

fn best_match(
    kind: SimilarityKind,
    transformed: &Tensor,
    reference: &Tensor,
    c: usize,
    candidates: impl IntoIterator<Item = usize>,
) -> Result<(Score, usize), SimilarityError> {
    let target = transformed.channel(c);
    let mut best: Option<(Score, usize)> = None;
    for cand in candidates {
        let s = score(kind, target, reference.channel(cand))?;
        let better = match best {
            None => true,
            Some((b, idx)) => s.value > b.value || (s.value == b.value && cand < idx),
        };
        if better {
            best = Some((s, cand));
        }
    }
    Ok(best.expect("at least one candidate channel"))
}

/// How a tap is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapMode {
    /// Per-channel scores on `[C, H, W]` maps with `H·W > 1`.
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// One comparison of the whole feature vector.
    Vector,
}

fn tap_mode(shape: &[usize]) -> TapMode {
    match *shape {
        [c, h, w] if h * w > 1 => TapMode::Spatial {
            channels: c,
            height: h,
            width: w,
        },
        _ => TapMode::Vector,
    }
}

/// Channel scores for one tap and one transform.
#[derive(Debug, Clone)]
struct TapScores {
    invariance: Vec<f64>,
    equivariance: Vec<f64>,
    argmax: Vec<usize>,
    degenerate: usize,
}

impl TapScores {
    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Candidate channel lists per tap; `None` means every channel.
type Candidates = Vec<Option<Vec<Vec<usize>>>>;

fn candidate_sets(modes: &[TapMode], cap: Option<usize>, seed: u64) -> Candidates {
    modes
        .iter()
        .enumerate()
        .map(|(layer, mode)| match (mode, cap) {
            (TapMode::Spatial { channels, .. }, Some(cap)) if *channels > cap => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                Some(
                    (0..*channels)
                        .map(|c| {
                            let mut picks: Vec<usize> =
                                index::sample(&mut rng, channels - 1, cap - 1)
                                    .into_iter()
                                    .map(|i| if i >= c { i + 1 } else { i })
                                    .collect();
                            picks.push(c);
                            picks.sort_unstable();
                            picks
                        })
                        .collect(),
                )
            }
            _ => None,
        })
        .collect()
}

fn score_tap(
    kind: SimilarityKind,
    mode: TapMode,
    clean: &Tap,
    transformed: &Tap,
    layer_transform: &Transform,
    shift_mode: ShiftMode,
    candidates: Option<&Vec<Vec<usize>>>,
) -> Result<TapScores, MeasureError> {
    match mode {
        TapMode::Vector => {
            let s = score(kind, transformed.activation.data(), clean.activation.data())?;
            Ok(TapScores {
                invariance: vec![s.value],
                equivariance: vec![s.value],
                argmax: vec![0],
                degenerate: usize::from(s.degenerate),
            })
        }
        TapMode::Spatial { channels, .. } => {
            let reference = apply_with(layer_transform, &clean.activation, shift_mode)?;
            let act = &transformed.activation;
            let mut out = TapScores {
                invariance: Vec::with_capacity(channels),
                equivariance: Vec::with_capacity(channels),
                argmax: Vec::with_capacity(channels),
                degenerate: 0,
            };
            for c in 0..channels {
                let inv = score(kind, act.channel(c), reference.channel(c))?;
                let (eq, arg) = match candidates {
                    Some(sets) => best_match(kind, act, &reference, c, sets[c].iter().copied())?,
                    None => best_match(kind, act, &reference, c, 0..channels)?,
                };
                out.invariance.push(inv.value);
                out.equivariance.push(eq.value);
                out.argmax.push(arg);
                out.degenerate += usize::from(inv.degenerate);
            }
            Ok(out)
        }
    }
}

/// Order-independent mean: sums the values in sorted order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Score every tap of `net` over `samples` and every transform in `sweep`.
///
/// Each sample is processed independently (in parallel when enabled) and
/// results are reduced in a fixed order with sorted summation, so the report
/// does not depend on scheduling or on the order of `samples`.
pub fn measure_network(
    net: &NetworkSpec,
    samples: &[Tensor],
    sweep: &TransformSweep,
    config: &MeasureConfig,
) -> Result<EquivarianceReport, MeasureError> {
    if samples.is_empty() {
        return Err(MeasureError::EmptySamples);
    }
    if config.max_match_channels == Some(0) {
        return Err(MeasureError::ZeroMatchCap);
    }
    for (index, x) in samples.iter().enumerate() {
        if x.shape() != net.input_shape() {
            return Err(MeasureError::Sample {
                index,
                source: NetworkError::InputShape {
                    expected: net.input_shape().to_vec(),
                    found: x.shape().to_vec(),
                },
            });
        }
    }
    let shapes = net.output_shapes();
    if sweep.family() == Family::C4 {
        let input = net.input_shape();
        if input[1] != input[2] {
            return Err(TransformError::UnsupportedShape {
                height: input[1],
                width: input[2],
            }
            .into());
        }
        for (layer, shape) in shapes.iter().enumerate() {
            if let TapMode::Spatial { height, width, .. } = tap_mode(shape) {
                if height != width {
                    return Err(MeasureError::NonSquareTap {
                        layer,
                        shape: shape.clone(),
                    });
                }
            }
        }
    }
    let scheme = match &config.partition {
        Some(p) => p.clone(),
        None => {
            PartitionScheme::from_kinds(&net.layers().iter().map(|l| l.kind()).collect::<Vec<_>>())
        }
    };
    if scheme.len() != shapes.len() {
        return Err(MeasureError::PartitionSize {
            expected: shapes.len(),
            found: scheme.len(),
        });
    }

    let modes: Vec<TapMode> = shapes.iter().map(|s| tap_mode(s)).collect();
    let candidates = candidate_sets(&modes, config.max_match_channels, config.seed);
    let transforms: Vec<(u32, Transform)> = sweep.transforms().collect();

    // per sample → per magnitude → per tap
    let per_sample = map_ordered(samples, config.execution, config.workers, |x| {
        let clean = net.forward_with_taps(x)?;
        transforms
            .iter()
            .map(|(_, t)| {
                let tx = apply_with(t, x, config.shift_mode)?;
                let moved = net.forward_with_taps(&tx)?;
                clean
                    .taps
                    .iter()
                    .zip(&moved.taps)
                    .enumerate()
                    .map(|(layer, (ct, mt))| {
                        let lt = scale_to_layer(t, ct.cumulative_downsample);
                        score_tap(
                            config.similarity,
                            modes[layer],
                            ct,
                            mt,
                            &lt,
                            config.shift_mode,
                            candidates[layer].as_ref(),
                        )
                    })
                    .collect::<Result<Vec<_>, MeasureError>>()
            })
            .collect::<Result<Vec<_>, MeasureError>>()
    });
    let per_sample: Vec<Vec<Vec<TapScores>>> = per_sample.into_iter().collect::<Result<_, _>>()?;

    let n_samples = samples.len();
    let mut layers = Vec::with_capacity(shapes.len());
    for (layer, shape) in shapes.iter().enumerate() {
        let spec_layer = &net.layers()[layer];
        let downsample: usize = net.layers()[..=layer].iter().map(|l| l.stride()).product();
        let units = per_sample[0][0][layer].invariance.len();
        let mut all_inv = Vec::with_capacity(n_samples * transforms.len());
        let mut all_eq = Vec::with_capacity(n_samples * transforms.len());
        let mut per_magnitude = Vec::with_capacity(transforms.len());
        let mut channel_detail = config.channel_detail.then(Vec::new);
        let mut degenerate_total = 0;

        for (m, (magnitude, t)) in transforms.iter().enumerate() {
            let cell: Vec<&TapScores> = per_sample.iter().map(|s| &s[m][layer]).collect();
            let mut inv: Vec<f64> = cell
                .iter()
                .map(|s| TapScores::mean(&s.invariance))
                .collect();
            let mut eq: Vec<f64> = cell
                .iter()
                .map(|s| TapScores::mean(&s.equivariance))
                .collect();
            all_inv.extend_from_slice(&inv);
            all_eq.extend_from_slice(&eq);
            let degenerate: usize = cell.iter().map(|s| s.degenerate).sum();
            degenerate_total += degenerate;
            let layer_transform = scale_to_layer(t, downsample);
            let identity_pair = match modes[layer] {
                TapMode::Spatial { height, width, .. } => {
                    layer_transform.is_identity_on(height, width)
                }
                TapMode::Vector => true,
            };
            per_magnitude.push(MagnitudeScore {
                magnitude: *magnitude,
                layer_transform,
                identity_pair,
                mean_invariance: stable_mean(&mut inv),
                mean_equivariance: stable_mean(&mut eq),
                degenerate_count: degenerate,
            });

            if let Some(detail) = channel_detail.as_mut() {
                for c in 0..units {
                    let mut ci: Vec<f64> = cell.iter().map(|s| s.invariance[c]).collect();
                    let mut ce: Vec<f64> = cell.iter().map(|s| s.equivariance[c]).collect();
                    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
                    for s in &cell {
                        *counts.entry(s.argmax[c]).or_default() += 1;
                    }
                    // Most frequent argmax; BTreeMap order breaks ties toward the lowest index.
                    let argmax_channel = counts
                        .iter()
                        .fold(
                            (0, 0),
                            |best, (&idx, &n)| if n > best.1 { (idx, n) } else { best },
                        )
                        .0;
                    detail.push(ChannelDetail {
                        magnitude: *magnitude,
                        channel: c,
                        mean_invariance: stable_mean(&mut ci),
                        mean_equivariance: stable_mean(&mut ce),
                        argmax_channel,
                    });
                }
            }
        }

        let evaluations = n_samples * transforms.len() * units;
        layers.push(LayerReport {
            layer_index: layer,
            layer_kind: spec_layer.kind(),
            partition: scheme.of(layer),
            shape: shape.clone(),
            cumulative_downsample: downsample,
            spatial: matches!(modes[layer], TapMode::Spatial { .. }),
            units,
            approximate: candidates[layer].is_some(),
            mostly_degenerate: 2 * degenerate_total > evaluations,
            mean_invariance: stable_mean(&mut all_inv),
            mean_equivariance: stable_mean(&mut all_eq),
            degenerate_count: degenerate_total,
            per_magnitude,
            channel_detail,
        });
    }

    let partitions = Partition::ALL
        .into_iter()
        .map(|p| PartitionSummary::from_layers(p, &layers))
        .collect();

    Ok(EquivarianceReport {
        similarity: config.similarity,
        family: sweep.family(),
        magnitudes: sweep.magnitudes().to_vec(),
        shift_mode: config.shift_mode,
        n_samples,
        max_match_channels: config.max_match_channels,
        layers,
        partitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkBuilder;
    use crate::tensor::Padding;
    use crate::transforms::apply;
    use rand::Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_comparison_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random(vec![3, 6, 6], &mut rng);
        for c in 0..3 {
            assert!(
                (invariance_of_channel(SimilarityKind::Pearson, &x, &x, c)
                    .unwrap()
                    .value
                    - 1.0)
                    .abs()
                    < 1e-12
            );
            let (eq, arg) = equivariance_of_channel(SimilarityKind::Pearson, &x, &x, c).unwrap();
            assert!((eq.value - 1.0).abs() < 1e-12);
            assert_eq!(arg, c);
        }
    }

    #[test]
    fn single_channel_equivariance_equals_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random(vec![1, 5, 5], &mut rng);
        let b = random(vec![1, 5, 5], &mut rng);
        let inv = invariance_of_channel(SimilarityKind::Pearson, &a, &b, 0).unwrap();
        let (eq, arg) = equivariance_of_channel(SimilarityKind::Pearson, &b, &a, 0).unwrap();
        assert_eq!(inv.value, eq.value);
        assert_eq!(arg, 0);
    }

    #[test]
    fn equivariance_is_the_brute_force_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random(vec![4, 6, 6], &mut rng);
        let b = random(vec![4, 6, 6], &mut rng);
        for c in 0..4 {
            let (eq, arg) = equivariance_of_channel(SimilarityKind::Pearson, &a, &b, c).unwrap();
            let mut best = (f64::NEG_INFINITY, 0);
            for cp in 0..4 {
                let v = crate::similarity::pearson(a.channel(c), b.channel(cp))
                    .unwrap()
                    .value;
                if v > best.0 {
                    best = (v, cp);
                }
            }
            assert_eq!((eq.value, arg), best);
        }
    }

    #[test]
    fn channel_index_is_checked() {
        let x = Tensor::zeros(vec![2, 3, 3]).unwrap();
        assert!(invariance_of_channel(SimilarityKind::Pearson, &x, &x, 2).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = NetworkBuilder::new(vec![1, 4, 6]).relu().build().unwrap();
        let sweep = TransformSweep::quarter_turns();
        let cfg = MeasureConfig::default();
        assert!(matches!(
            measure_network(&net, &[], &sweep, &cfg),
            Err(MeasureError::EmptySamples)
        ));
        let x = Tensor::zeros(vec![1, 4, 6]).unwrap();
        assert!(matches!(
            measure_network(&net, std::slice::from_ref(&x), &sweep, &cfg),
            Err(MeasureError::Transform(
                TransformError::UnsupportedShape { .. }
            ))
        ));
        let wrong = Tensor::zeros(vec![1, 4, 4]).unwrap();
        assert!(matches!(
            measure_network(
                &net,
                &[wrong],
                &TransformSweep::diagonal_shifts(2).unwrap(),
                &cfg
            ),
            Err(MeasureError::Sample { index: 0, .. })
        ));
    }

    #[test]
    fn subsampled_matching_keeps_own_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let net = NetworkBuilder::new(vec![1, 8, 8])
            .conv(
                random(vec![6, 1, 3, 3], &mut rng),
                vec![0.0; 6],
                1,
                Padding::zero(1),
                true,
            )
            .build()
            .unwrap();
        let samples: Vec<Tensor> = (0..3).map(|_| random(vec![1, 8, 8], &mut rng)).collect();
        let cfg = MeasureConfig {
            max_match_channels: Some(2),
            channel_detail: true,
            ..MeasureConfig::default()
        };
        let report =
            measure_network(&net, &samples, &TransformSweep::quarter_turns(), &cfg).unwrap();
        let layer = &report.layers[0];
        assert!(layer.approximate);
        assert!(layer.mean_equivariance >= layer.mean_invariance - 1e-9);
        for d in layer.channel_detail.as_ref().unwrap() {
            assert!(d.mean_equivariance >= d.mean_invariance - 1e-9);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let net = NetworkBuilder::new(vec![1, 8, 8])
            .conv(
                random(vec![3, 1, 3, 3], &mut rng),
                vec![0.1; 3],
                1,
                Padding::zero(1),
                true,
            )
            .maxpool(2, 2)
            .global_avg_pool()
            .build()
            .unwrap();
        let samples: Vec<Tensor> = (0..5).map(|_| random(vec![1, 8, 8], &mut rng)).collect();
        let mut reversed = samples.clone();
        reversed.reverse();
        let sweep = TransformSweep::diagonal_shifts(3).unwrap();
        let seq = MeasureConfig {
            execution: Execution::Sequential,
            ..MeasureConfig::default()
        };
        let a = measure_network(&net, &samples, &sweep, &seq).unwrap();
        let b = measure_network(&net, &reversed, &sweep, &MeasureConfig::default()).unwrap();
        assert_eq!(a, b);
        // 1/2 rounds away from zero
        assert_eq!(
            a.layers[1].per_magnitude[0].layer_transform,
            Transform::diagonal(1)
        );
        assert!(a.layers[2].per_magnitude[0].identity_pair);
    }

    #[test]
    fn aligned_invariance_of_plain_shift() {
        // A circular shift of the input is matched exactly by the aligned reference.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let net = NetworkBuilder::new(vec![1, 6, 6])
            .conv(
                random(vec![2, 1, 3, 3], &mut rng),
                vec![0.0; 2],
                1,
                Padding::circular(1),
                false,
            )
            .build()
            .unwrap();
        let x = random(vec![1, 6, 6], &mut rng);
        let t = Transform::diagonal(2);
        let clean = net.forward(&x).unwrap();
        let moved = net.forward(&apply(&t, &x).unwrap()).unwrap();
        let aligned = apply(&t, &clean).unwrap();
        let plain = invariance_of_channel(SimilarityKind::Pearson, &clean, &moved, 0).unwrap();
        let with_alignment =
            invariance_of_channel(SimilarityKind::Pearson, &aligned, &moved, 0).unwrap();
        assert!((with_alignment.value - 1.0).abs() < 1e-12);
        assert!(plain.value < 0.99);
    }
}
