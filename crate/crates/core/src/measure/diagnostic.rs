//! How strongly do per-layer scores track the magnitude of the activations?
//!
//! A similarity measure that is sensitive to the mean of its inputs produces
//! scores that rise and fall with the activation level of each layer. This
//! diagnostic measures the per-layer mean absolute activation and correlates
//! it, across layers, with the layer scores obtained under each similarity.

use serde::{Deserialize, Serialize};

use super::{measure_network, MeasureConfig, MeasureError};
use crate::network::NetworkSpec;
use crate::similarity::{pearson, Score, SimilarityKind};
use crate::tensor::Tensor;
use crate::transforms::TransformSweep;

/// Minimum number of taps for the correlation to mean anything.
pub const MIN_TAPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub similarity: SimilarityKind,
    pub invariance: Vec<f64>,
    pub equivariance: Vec<f64>,
    /// Correlation of magnitudes with the invariance series.
    pub invariance_correlation: Score,
    pub equivariance_correlation: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeDiagnostic {
    /// Mean absolute activation per tap, averaged over samples.
    pub magnitudes: Vec<f64>,
    pub pearson: SimilaritySeries,
    pub cosine: SimilaritySeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DiagnosticOutcome {
    Computed(MagnitudeDiagnostic),
    /// Too few taps; the count is attached.
    Skipped {
        taps: usize,
    },
}

/// Pearson correlation between magnitudes and scores across layers. A
/// constant series yields a degenerate score.
pub fn magnitude_correlation(magnitudes: &[f64], scores: &[f64]) -> Score {
    pearson(magnitudes, scores).unwrap_or(Score {
        value: 0.0,
        degenerate: true,
    })
}

fn series(
    magnitudes: &[f64],
    similarity: SimilarityKind,
    invariance: Vec<f64>,
    equivariance: Vec<f64>,
) -> SimilaritySeries {
    SimilaritySeries {
        similarity,
        invariance_correlation: magnitude_correlation(magnitudes, &invariance),
        equivariance_correlation: magnitude_correlation(magnitudes, &equivariance),
        invariance,
        equivariance,
    }
}

pub fn magnitude_diagnostic(
    net: &NetworkSpec,
    samples: &[Tensor],
    sweep: &TransformSweep,
    config: &MeasureConfig,
) -> Result<DiagnosticOutcome, MeasureError> {
    let taps = net.layers().len();
    if taps < MIN_TAPS {
        return Ok(DiagnosticOutcome::Skipped { taps });
    }
    if samples.is_empty() {
        return Err(MeasureError::EmptySamples);
    }
    let mut magnitudes = vec![0.0; taps];
    for x in samples {
        let trace = net.forward_with_taps(x)?;
        for (m, tap) in magnitudes.iter_mut().zip(&trace.taps) {
            let a = tap.activation.data();
            *m += a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
        }
    }
    for m in &mut magnitudes {
        *m /= samples.len() as f64;
    }

    let mut by_kind = [SimilarityKind::Pearson, SimilarityKind::Cosine].map(|kind| {
        let cfg = MeasureConfig {
            similarity: kind,
            ..config.clone()
        };
        measure_network(net, samples, sweep, &cfg).map(|r| {
            let inv = r.layers.iter().map(|l| l.mean_invariance).collect();
            let eq = r.layers.iter().map(|l| l.mean_equivariance).collect();
            series(&magnitudes, kind, inv, eq)
        })
    });
    let cosine = std::mem::replace(&mut by_kind[1], Err(MeasureError::EmptySamples))?;
    let pearson = std::mem::replace(&mut by_kind[0], Err(MeasureError::EmptySamples))?;
    Ok(DiagnosticOutcome::Computed(MagnitudeDiagnostic {
        magnitudes,
        pearson,
        cosine,
    }))
}
