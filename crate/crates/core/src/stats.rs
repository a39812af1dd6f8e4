//! Spearman rank correlation between per-model equivariance scores and
//! model accuracies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{CsvRow, Partition};
use crate::similarity::pearson;
use crate::transforms::Family;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("rank correlation needs at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("rank correlation is undefined: one input has no rank variance")]
    Undefined,
    #[error("no accuracy given for model `{0}`")]
    MissingAccuracy(String),
    #[error("accuracy file lists model `{0}` with no report")]
    MissingReport(String),
    #[error("model `{0}` appears twice in the accuracy file")]
    DuplicateAccuracy(String),
    #[error("accuracy {value} of model `{model}` is outside [0, 1]")]
    AccuracyOutOfRange { model: String, value: f64 },
    #[error("duplicate score for model `{model}`, {partition}/{family}/{metric}")]
    DuplicateCell {
        model: String,
        partition: Partition,
        family: Family,
        metric: Metric,
    },
    #[error("accuracy file line {line}: {detail}")]
    AccuracyFormat { line: usize, detail: String },
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooShort(xs.len()));
    }
    let score =
        pearson(&average_ranks(xs), &average_ranks(ys)).map_err(|_| StatsError::Undefined)?;
    if score.degenerate {
        return Err(StatsError::Undefined);
    }
    Ok(score.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Invariance,
    Equivariance,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Invariance => "invariance",
            Metric::Equivariance => "equivariance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScoreRow {
    pub model_id: String,
    pub partition: Partition,
    pub family: Family,
    pub metric: Metric,
    pub score: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelScoreTable {
    pub rows: Vec<ModelScoreRow>,
}

/// Invariance and equivariance values collected side by side.
type ScorePair = (Vec<f64>, Vec<f64>);

impl ModelScoreTable {
    /// Build partition scores from report CSV rows. A layer's score is its
    /// mean over magnitudes; a partition's score is the mean over its layers.
    pub fn from_reports(
        reports: &[(String, Vec<CsvRow>)],
        accuracies: &BTreeMap<String, f64>,
    ) -> Result<Self, StatsError> {
        for (model, _) in reports {
            if !accuracies.contains_key(model) {
                return Err(StatsError::MissingAccuracy(model.clone()));
            }
        }
        for model in accuracies.keys() {
            if !reports.iter().any(|(m, _)| m == model) {
                return Err(StatsError::MissingReport(model.clone()));
            }
        }

        let mut cells: BTreeMap<(String, Partition, Family, Metric), f64> = BTreeMap::new();
        for (model, rows) in reports {
            // (family, partition, layer) → magnitude values
            let mut layers: BTreeMap<(Family, Partition, usize), ScorePair> = BTreeMap::new();
            for row in rows {
                let e = layers
                    .entry((row.family, row.partition, row.layer_index))
                    .or_default();
                e.0.push(row.mean_invariance);
                e.1.push(row.mean_equivariance);
            }
            let mut parts: BTreeMap<(Family, Partition), ScorePair> = BTreeMap::new();
            for ((family, partition, _), (inv, eq)) in layers {
                let p = parts.entry((family, partition)).or_default();
                p.0.push(mean(&inv));
                p.1.push(mean(&eq));
            }
            for ((family, partition), (inv, eq)) in parts {
                for (metric, values) in [(Metric::Invariance, inv), (Metric::Equivariance, eq)] {
                    let key = (model.clone(), partition, family, metric);
                    if cells.insert(key, mean(&values)).is_some() {
                        return Err(StatsError::DuplicateCell {
                            model: model.clone(),
                            partition,
                            family,
                            metric,
                        });
                    }
                }
            }
        }
        let rows = cells
            .into_iter()
            .map(
                |((model_id, partition, family, metric), score)| ModelScoreRow {
                    accuracy: accuracies[&model_id],
                    model_id,
                    partition,
                    family,
                    metric,
                    score,
                },
            )
            .collect();
        Ok(Self { rows })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Fewer than two models in the cell.
    InsufficientData,
    /// Scores or accuracies are all tied.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub partition: Partition,
    pub family: Family,
    pub metric: Metric,
    pub n: usize,
    pub rho: Option<f64>,
    pub status: CellStatus,
}

/// Spearman's rho per (family, metric, partition) cell. Rows inside a cell
/// are ordered by model id first, so input row order never matters.
pub fn correlate_reports(table: &ModelScoreTable) -> Vec<CorrelationCell> {
    let mut cells: BTreeMap<(Family, Metric, Partition), Vec<&ModelScoreRow>> = BTreeMap::new();
    for row in &table.rows {
        cells
            .entry((row.family, row.metric, row.partition))
            .or_default()
            .push(row);
    }
    cells
        .into_iter()
        .map(|((family, metric, partition), mut rows)| {
            rows.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
            let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let (rho, status) = match spearman(&scores, &accs) {
                Ok(rho) => (Some(rho), CellStatus::Ok),
                Err(StatsError::TooShort(_)) => (None, CellStatus::InsufficientData),
                Err(_) => (None, CellStatus::Undefined),
            };
            CorrelationCell {
                partition,
                family,
                metric,
                n: rows.len(),
                rho,
                status,
            }
        })
        .collect()
}

pub fn correlation_csv(cells: &[CorrelationCell]) -> String {
    let mut out = String::from("partition,family,metric,n,rho,status\n");
    for c in cells {
        let rho = c.rho.map(|r| r.to_string()).unwrap_or_default();
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::InsufficientData => "insufficient_data",
            CellStatus::Undefined => "undefined",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.partition, c.family, c.metric, c.n, rho, status
        ));
    }
    out
}

/// Parse `model_id,accuracy` lines. A header line is allowed.
pub fn read_accuracies(text: &str) -> Result<BTreeMap<String, f64>, StatsError> {
    let mut out = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| StatsError::AccuracyFormat {
            line,
            detail: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(StatsError::AccuracyFormat {
                line,
                detail: format!("expected 2 columns, found {}", record.len()),
            });
        }
        let (model, value) = (&record[0], &record[1]);
        let Ok(acc) = value.parse::<f64>() else {
            if line == 1 {
                continue;
            }
            return Err(StatsError::AccuracyFormat {
                line,
                detail: format!("`{value}` is not a number"),
            });
        };
        if !(0.0..=1.0).contains(&acc) {
            return Err(StatsError::AccuracyOutOfRange {
                model: model.to_string(),
                value: acc,
            });
        }
        if out.insert(model.to_string(), acc).is_some() {
            return Err(StatsError::DuplicateAccuracy(model.to_string()));
        }
    }
    Ok(out)
}
