//! Measure how invariant or equivariant the intermediate features of a
//! feed-forward image network are with respect to integer translations and
//! quarter-turn rotations.
//!
//! The pipeline: load or build a [`network::NetworkSpec`], run
//! [`measure::measure_network`] over a set of input images and a
//! [`transforms::TransformSweep`], and serialize the resulting
//! [`measure::EquivarianceReport`] to CSV or JSON. [`stats`] rank-correlates
//! reports from several models against their accuracies.

pub mod data;
pub mod handcrafted;
pub mod measure;
pub mod network;
pub mod parallel;
pub mod similarity;
pub mod stats;
pub mod tensor;
pub mod transforms;
pub mod verify;

pub use measure::{measure_network, EquivarianceReport, MeasureConfig, Partition};
pub use network::{load_bundle, save_bundle, Layer, LayerKind, NetworkSpec, TapTrace};
pub use similarity::SimilarityKind;
pub use tensor::Tensor;
pub use transforms::{Family, Transform, TransformSweep};
