//! Discrete transformation families acting on spatial tensors: integer
//! translations (Z²) and quarter-turn rotations (C4).
//!
//! Both act on the last two axes of a tensor and treat every leading index
//! (channel, batch) independently. Translations wrap around by default, which
//! makes them a genuine group action on a fixed-size grid; [`ShiftMode::ZeroFill`]
//! is available for studying border effects but is not invertible.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("rotation needs square spatial maps, got {height}×{width}")]
    UnsupportedShape { height: usize, width: usize },
    #[error("transforms need at least 2 spatial axes, got shape {0:?}")]
    NotSpatial(Vec<usize>),
    #[error("sweep magnitudes must be non-empty, positive and strictly increasing: {0:?}")]
    InvalidSweep(Vec<u32>),
    #[error("rotation sweep magnitudes must lie in 1..=3 quarter turns: {0:?}")]
    QuarterOutOfRange(Vec<u32>),
}

/// One group element `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    /// Moves content by `dx` columns (right) and `dy` rows (down).
    Translation { dx: i64, dy: i64 },
    /// Counter-clockwise rotation by `quarters`·90°, stored in `0..4`.
    Rotation { quarters: u8 },
}

impl Transform {
    pub fn translation(dx: i64, dy: i64) -> Self {
        Transform::Translation { dx, dy }
    }

    pub fn diagonal(s: i64) -> Self {
        Transform::Translation { dx: s, dy: s }
    }

    /// Quarter turns reduced modulo 4.
    pub fn rotation(quarters: i64) -> Self {
        Transform::Rotation {
            quarters: quarters.rem_euclid(4) as u8,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(
            self,
            Transform::Translation { dx: 0, dy: 0 } | Transform::Rotation { quarters: 0 }
        )
    }

    /// Identity up to the periodicity of an `h×w` grid.
    pub fn is_identity_on(&self, h: usize, w: usize) -> bool {
        match *self {
            Transform::Translation { dx, dy } => {
                dx.rem_euclid(w as i64) == 0 && dy.rem_euclid(h as i64) == 0
            }
            Transform::Rotation { quarters } => quarters == 0,
        }
    }

    pub fn inverse(&self) -> Self {
        match *self {
            Transform::Translation { dx, dy } => Transform::Translation { dx: -dx, dy: -dy },
            Transform::Rotation { quarters } => Transform::rotation(-(quarters as i64)),
        }
    }

    /// `self` followed by `next`, when both belong to the same family.
    pub fn then(&self, next: &Transform) -> Option<Transform> {
        match (*self, *next) {
            (Transform::Translation { dx, dy }, Transform::Translation { dx: ex, dy: ey }) => {
                Some(Transform::Translation {
                    dx: dx + ex,
                    dy: dy + ey,
                })
            }
            (Transform::Rotation { quarters: a }, Transform::Rotation { quarters: b }) => {
                Some(Transform::rotation(a as i64 + b as i64))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Translation { dx, dy } => write!(f, "shift({dx},{dy})"),
            Transform::Rotation { quarters } => write!(f, "rot{}", *quarters as u32 * 90),
        }
    }
}

/// Border handling for translations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    Circular,
    ZeroFill,
}

impl std::str::FromStr for ShiftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circular" | "wrap" => Ok(ShiftMode::Circular),
            "zero" | "zero-fill" | "zero_fill" => Ok(ShiftMode::ZeroFill),
            other => Err(format!(
                "unknown shift mode `{other}` (expected circular or zero)"
            )),
        }
    }
}

/// Apply `t` with circular translation semantics.
pub fn apply(t: &Transform, x: &Tensor) -> Result<Tensor, TransformError> {
    apply_with(t, x, ShiftMode::Circular)
}

pub fn apply_with(t: &Transform, x: &Tensor, mode: ShiftMode) -> Result<Tensor, TransformError> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TransformError::NotSpatial(shape.to_vec()));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    match *t {
        Transform::Translation { dx, dy } => {
            for (src, dst) in x
                .data()
                .chunks_exact(plane)
                .zip(out.chunks_exact_mut(plane))
            {
                for i in 0..h {
                    let si = i as i64 - dy;
                    if mode == ShiftMode::ZeroFill && !(0..h as i64).contains(&si) {
                        continue;
                    }
                    let si = si.rem_euclid(h as i64) as usize;
                    for j in 0..w {
                        let sj = j as i64 - dx;
                        if mode == ShiftMode::ZeroFill && !(0..w as i64).contains(&sj) {
                            continue;
                        }
                        dst[i * w + j] = src[si * w + sj.rem_euclid(w as i64) as usize];
                    }
                }
            }
        }
        Transform::Rotation { quarters } => {
            if h != w {
                return Err(TransformError::UnsupportedShape {
                    height: h,
                    width: w,
                });
            }
            let n = h;
            for (src, dst) in x
                .data()
                .chunks_exact(plane)
                .zip(out.chunks_exact_mut(plane))
            {
                for i in 0..n {
                    for j in 0..n {
                        let (si, sj) = match quarters {
                            0 => (i, j),
                            1 => (j, n - 1 - i),
                            2 => (n - 1 - i, n - 1 - j),
                            _ => (n - 1 - j, i),
                        };
                        dst[i * n + j] = src[si * n + sj];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), out).expect("shape preserved"))
}

/// Map an input-resolution transform onto a feature map downsampled by
/// `cumulative_downsample`. Offsets are divided and rounded half away from
/// zero; rotations are resolution independent and pass through.
pub fn scale_to_layer(t: &Transform, cumulative_downsample: usize) -> Transform {
    match *t {
        Transform::Translation { dx, dy } => {
            let d = cumulative_downsample.max(1) as f64;
            Transform::Translation {
                dx: (dx as f64 / d).round() as i64,
                dy: (dy as f64 / d).round() as i64,
            }
        }
        rot @ Transform::Rotation { .. } => rot,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Diagonal translations `dx = dy = s`.
    Z2Diagonal,
    /// Counter-clockwise quarter turns.
    C4,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Z2Diagonal => "z2_diagonal",
            Family::C4 => "c4",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "z2_diagonal" | "z2" | "translation" => Ok(Family::Z2Diagonal),
            "c4" | "rotation" => Ok(Family::C4),
            other => Err(format!("unknown transform family `{other}`")),
        }
    }
}

/// A family plus the magnitudes (shift sizes or quarter counts) to average over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSweep {
    family: Family,
    magnitudes: Vec<u32>,
}

impl TransformSweep {
    pub fn new(family: Family, magnitudes: Vec<u32>) -> Result<Self, TransformError> {
        let increasing = magnitudes.windows(2).all(|p| p[0] < p[1]);
        if magnitudes.is_empty() || magnitudes[0] == 0 || !increasing {
            return Err(TransformError::InvalidSweep(magnitudes));
        }
        if family == Family::C4 && magnitudes.iter().any(|&q| q > 3) {
            return Err(TransformError::QuarterOutOfRange(magnitudes));
        }
        Ok(Self { family, magnitudes })
    }

    /// Diagonal shifts `1..=max`.
    pub fn diagonal_shifts(max: u32) -> Result<Self, TransformError> {
        Self::new(Family::Z2Diagonal, (1..=max).collect())
    }

    /// Rotations by 90°, 180° and 270°.
    pub fn quarter_turns() -> Self {
        Self {
            family: Family::C4,
            magnitudes: vec![1, 2, 3],
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn magnitudes(&self) -> &[u32] {
        &self.magnitudes
    }

    pub fn transform(&self, magnitude: u32) -> Transform {
        match self.family {
            Family::Z2Diagonal => Transform::diagonal(magnitude as i64),
            Family::C4 => Transform::rotation(magnitude as i64),
        }
    }

    pub fn transforms(&self) -> impl Iterator<Item = (u32, Transform)> + '_ {
        self.magnitudes.iter().map(|&m| (m, self.transform(m)))
    }
}
