//! Depth-wise grouping of taps for cross-architecture reporting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::network::{LayerKind, TapTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Early,
    Middle,
    Late,
    Pool,
    Final,
}

impl Partition {
    pub const ALL: [Partition; 5] = [
        Partition::Early,
        Partition::Middle,
        Partition::Late,
        Partition::Pool,
        Partition::Final,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Early => "early",
            Partition::Middle => "middle",
            Partition::Late => "late",
            Partition::Pool => "pool",
            Partition::Final => "final",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown partition `{s}`"))
    }
}

/// Partition of every tap, indexed by tap position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionScheme {
    assignment: Vec<Partition>,
}

impl PartitionScheme {
    /// Taps before the global-average-pool layer are split into three
    /// contiguous runs as equal as possible, extra taps going to the earlier
    /// runs. The pooling tap and anything between it and the last tap form
    /// `Pool`; the last tap is `Final`. Without a pooling layer every tap
    /// but the last is split three ways and `Pool` is empty.
    pub fn from_kinds(kinds: &[LayerKind]) -> Self {
        let n = kinds.len();
        if n == 0 {
            return Self {
                assignment: Vec::new(),
            };
        }
        let last = n - 1;
        let pre = kinds
            .iter()
            .position(|k| *k == LayerKind::GlobalAvgPool)
            .unwrap_or(last)
            .min(last);
        let (base, rem) = (pre / 3, pre % 3);
        let sizes = [
            base + usize::from(rem > 0),
            base + usize::from(rem > 1),
            base,
        ];
        let mut assignment = Vec::with_capacity(n);
        for (part, size) in [Partition::Early, Partition::Middle, Partition::Late]
            .into_iter()
            .zip(sizes)
        {
            assignment.extend(std::iter::repeat_n(part, size));
        }
        assignment.extend(std::iter::repeat_n(Partition::Pool, last - pre));
        assignment.push(Partition::Final);
        Self { assignment }
    }

    pub fn of(&self, tap: usize) -> Partition {
        self.assignment[tap]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn members(&self, part: Partition) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == part)
            .collect()
    }

    pub fn sizes(&self) -> [usize; 5] {
        Partition::ALL.map(|p| self.assignment.iter().filter(|&&a| a == p).count())
    }
}

pub fn partition_layers(trace: &TapTrace) -> PartitionScheme {
    PartitionScheme::from_kinds(&trace.kinds())
}
