//! Report types and their CSV / JSON serializations.
//!
//! The CSV has one row per (layer, magnitude) with the columns in
//! [`CSV_HEADER`]. The JSON form is the serde serialization of
//! [`EquivarianceReport`] and additionally carries per-layer flags, partition
//! aggregates and optional per-channel detail.

use serde::{Deserialize, Serialize};

use super::Partition;
use crate::network::LayerKind;
use crate::similarity::SimilarityKind;
use crate::transforms::{Family, ShiftMode, Transform};

pub const CSV_HEADER: [&str; 9] = [
    "layer_index",
    "layer_kind",
    "partition",
    "family",
    "magnitude",
    "mean_invariance",
    "mean_equivariance",
    "degenerate_count",
    "n_samples",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeScore {
    pub magnitude: u32,
    /// Transform applied to the clean activation at this layer's resolution.
    pub layer_transform: Transform,
    /// The layer-side transform is the identity (or the tap has no spatial
    /// extent), so equivariance reduces to a plain invariance comparison.
    pub identity_pair: bool,
    pub mean_invariance: f64,
    pub mean_equivariance: f64,
    pub degenerate_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDetail {
    pub magnitude: u32,
    pub channel: usize,
    pub mean_invariance: f64,
    pub mean_equivariance: f64,
    /// Most frequent best-matching channel across samples.
    pub argmax_channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    pub layer_kind: LayerKind,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub cumulative_downsample: usize,
    /// Scored per channel on spatial maps (vs. once on the whole vector).
    pub spatial: bool,
    /// Number of scored units per evaluation: channels, or 1 for vectors.
    pub units: usize,
    /// Channel matching was subsampled.
    pub approximate: bool,
    /// More than half of the channel evaluations hit the zero-variance rule.
    pub mostly_degenerate: bool,
    pub mean_invariance: f64,
    pub mean_equivariance: f64,
    pub degenerate_count: usize,
    pub per_magnitude: Vec<MagnitudeScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_detail: Option<Vec<ChannelDetail>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub partition: Partition,
    pub layers: Vec<usize>,
    /// Mean of the member layers' means; `None` for an empty partition.
    pub mean_invariance: Option<f64>,
    pub mean_equivariance: Option<f64>,
}

impl PartitionSummary {
    pub fn from_layers(partition: Partition, layers: &[LayerReport]) -> Self {
        let members: Vec<&LayerReport> =
            layers.iter().filter(|l| l.partition == partition).collect();
        let mean = |f: fn(&LayerReport) -> f64| {
            (!members.is_empty())
                .then(|| members.iter().map(|l| f(l)).sum::<f64>() / members.len() as f64)
        };
        Self {
            partition,
            layers: members.iter().map(|l| l.layer_index).collect(),
            mean_invariance: mean(|l| l.mean_invariance),
            mean_equivariance: mean(|l| l.mean_equivariance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub similarity: SimilarityKind,
    pub family: Family,
    pub magnitudes: Vec<u32>,
    pub shift_mode: ShiftMode,
    pub n_samples: usize,
    pub max_match_channels: Option<usize>,
    pub layers: Vec<LayerReport>,
    pub partitions: Vec<PartitionSummary>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub layer_index: usize,
    pub layer_kind: LayerKind,
    pub partition: Partition,
    pub family: Family,
    pub magnitude: u32,
    pub mean_invariance: f64,
    pub mean_equivariance: f64,
    pub degenerate_count: usize,
    pub n_samples: usize,
}

impl EquivarianceReport {
    pub fn partition(&self, p: Partition) -> &PartitionSummary {
        self.partitions
            .iter()
            .find(|s| s.partition == p)
            .expect("every partition is summarized")
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.layers
            .iter()
            .flat_map(|layer| {
                layer.per_magnitude.iter().map(move |m| CsvRow {
                    layer_index: layer.layer_index,
                    layer_kind: layer.layer_kind,
                    partition: layer.partition,
                    family: self.family,
                    magnitude: m.magnitude,
                    mean_invariance: m.mean_invariance,
                    mean_equivariance: m.mean_equivariance,
                    degenerate_count: m.degenerate_count,
                    n_samples: self.n_samples,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.serialize(row).expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl CsvRow {
    pub fn read_all(reader: impl std::io::Read) -> Result<Vec<CsvRow>, csv::Error> {
        csv::Reader::from_reader(reader).deserialize().collect()
    }
}
