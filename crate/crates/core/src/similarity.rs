//! Similarity between two feature maps (or feature vectors).
//!
//! Pearson correlation is the centered cosine similarity: it ignores a
//! constant offset on either input, which plain cosine similarity does not.
//! Both are reported on their natural `[-1, 1]` range without rescaling.
//!
//! Zero-variance inputs (for example a dead ReLU channel) have no defined
//! correlation. They are scored by a fixed rule instead: two constant maps
//! with the same value count as a perfect match (1.0), every other case
//! involving a constant map scores 0.0. Such evaluations are flagged as
//! degenerate so callers can count them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("similarity inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{kind} similarity needs at least {min} values, got {found}")]
    TooShort {
        kind: SimilarityKind,
        min: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Pearson,
    Cosine,
}

impl SimilarityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimilarityKind::Pearson => "pearson",
            SimilarityKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" | "correlation" => Ok(SimilarityKind::Pearson),
            "cosine" => Ok(SimilarityKind::Cosine),
            other => Err(format!(
                "unknown similarity `{other}` (expected pearson or cosine)"
            )),
        }
    }
}

/// A similarity value together with whether the degenerate-input rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn exact(value: f64) -> Self {
        Self {
            value: value.clamp(-1.0, 1.0),
            degenerate: false,
        }
    }

    fn degenerate(matched: bool) -> Self {
        Self {
            value: if matched { 1.0 } else { 0.0 },
            degenerate: true,
        }
    }
}

/// Relative spread below which a map counts as constant.
const CONSTANT_TOL: f64 = 1e-12;
/// Relative tolerance for deciding that two constant maps are equal.
const EQUAL_TOL: f64 = 1e-9;

/// `Some(value)` if every entry equals `value` up to [`CONSTANT_TOL`].
fn constant_value(xs: &[f64]) -> Option<f64> {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = lo.abs().max(hi.abs()).max(1.0);
    (hi - lo <= CONSTANT_TOL * scale).then_some(0.5 * (lo + hi))
}

fn same_constant(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUAL_TOL * a.abs().max(b.abs()).max(1.0)
}

pub fn similarity(kind: SimilarityKind, a: &[f64], b: &[f64]) -> Result<Score, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    match kind {
        SimilarityKind::Pearson => pearson(a, b),
        SimilarityKind::Cosine => cosine(a, b),
    }
}

/// Two-pass Pearson correlation: means first, then centered products.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Score, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(SimilarityError::TooShort {
            kind: SimilarityKind::Pearson,
            min: 2,
            found: a.len(),
        });
    }
    match (constant_value(a), constant_value(b)) {
        (Some(ca), Some(cb)) => return Ok(Score::degenerate(same_constant(ca, cb))),
        (Some(_), None) | (None, Some(_)) => return Ok(Score::degenerate(false)),
        (None, None) => {}
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Score::degenerate(false));
    }
    Ok(Score::exact(sab / (saa.sqrt() * sbb.sqrt())))
}

/// Uncentered cosine similarity. Only all-zero inputs are degenerate.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<Score, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(SimilarityError::TooShort {
            kind: SimilarityKind::Cosine,
            min: 1,
            found: 0,
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => Ok(Score::degenerate(true)),
        (true, false) | (false, true) => Ok(Score::degenerate(false)),
        (false, false) => Ok(Score::exact(ab / (aa.sqrt() * bb.sqrt()))),
    }
}
