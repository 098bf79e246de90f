//! Group fairness metrics and their federated decomposition.
//!
//! Conventions: the sensitive attribute A is binary with A = 1 the privileged
//! group, labels and predictions are binary with 1 the favorable outcome.
//! EOD = TPR(A=0) - TPR(A=1) and SPD = P(yhat=1|A=0) - P(yhat=1|A=1), so a
//! positive value means the unprivileged group is ahead. Either metric is
//! undefined (None) when a conditioning group is empty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TabularDataset;
use crate::model::{self, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("census is empty")]
    EmptyCensus,
    #[error("degenerate dataset statistics: {0}")]
    DegenerateStats(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which fairness metric a run optimizes and reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Eod,
    Spd,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Eod => write!(f, "eod"),
            MetricKind::Spd => write!(f, "spd"),
        }
    }
}

/// Joint counts over (group, label) cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AyCensus {
    counts: [[u64; 2]; 2],
}

impl AyCensus {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_dataset(ds: &TabularDataset) -> Self {
        let mut census = Self::empty();
        for i in 0..ds.n_rows() {
            census.record(ds.group(i), ds.label(i));
        }
        census
    }

    pub fn record(&mut self, a: u8, y: u8) {
        self.counts[a as usize & 1][y as usize & 1] += 1;
    }

    pub fn count(&self, a: u8, y: u8) -> u64 {
        self.counts[a as usize & 1][y as usize & 1]
    }

    pub fn group_total(&self, a: u8) -> u64 {
        self.counts[a as usize & 1].iter().sum()
    }

    pub fn label_total(&self, y: u8) -> u64 {
        self.counts[0][y as usize & 1] + self.counts[1][y as usize & 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&self, other: &AyCensus) -> AyCensus {
        let mut out = *self;
        for a in 0..2 {
            for y in 0..2 {
                out.counts[a][y] += other.counts[a][y];
            }
        }
        out
    }

    /// Cells flattened in (a, y) order: (0,0), (0,1), (1,0), (1,1).
    pub fn to_flat(&self) -> [u64; 4] {
        [
            self.counts[0][0],
            self.counts[0][1],
            self.counts[1][0],
            self.counts[1][1],
        ]
    }

    pub fn from_flat(flat: [u64; 4]) -> Self {
        Self {
            counts: [[flat[0], flat[1]], [flat[2], flat[3]]],
        }
    }
}

/// Joint counts over (group, label, prediction) cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCensus {
    counts: [[[u64; 2]; 2]; 2],
}

impl GroupCensus {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn record(&mut self, a: u8, y: u8, yhat: u8) {
        self.counts[a as usize & 1][y as usize & 1][yhat as usize & 1] += 1;
    }

    pub fn count(&self, a: u8, y: u8, yhat: u8) -> u64 {
        self.counts[a as usize & 1][y as usize & 1][yhat as usize & 1]
    }

    /// Rows in the (a, y) cell regardless of prediction.
    pub fn cell(&self, a: u8, y: u8) -> u64 {
        self.counts[a as usize & 1][y as usize & 1].iter().sum()
    }

    pub fn group_total(&self, a: u8) -> u64 {
        self.counts[a as usize & 1].iter().flatten().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    pub fn merge(&self, other: &GroupCensus) -> GroupCensus {
        let mut out = *self;
        for a in 0..2 {
            for y in 0..2 {
                for p in 0..2 {
                    out.counts[a][y][p] += other.counts[a][y][p];
                }
            }
        }
        out
    }

    pub fn ay_census(&self) -> AyCensus {
        let mut ay = AyCensus::empty();
        for a in 0..2u8 {
            for y in 0..2u8 {
                ay.counts[a as usize][y as usize] = self.cell(a, y);
            }
        }
        ay
    }

    /// Predicted positives in group a.
    pub fn positive_predictions(&self, a: u8) -> u64 {
        self.count(a, 0, 1) + self.count(a, 1, 1)
    }
}

/// Tabulates model predictions against labels and groups.
pub fn census(params: &ModelParams, data: &TabularDataset) -> Result<GroupCensus, ModelError> {
    let mut out = GroupCensus::empty();
    for i in 0..data.n_rows() {
        let yhat = model::predict(params, data.row(i))?;
        out.record(data.group(i), data.label(i), yhat);
    }
    Ok(out)
}

/// Fraction of correct predictions.
pub fn accuracy(c: &GroupCensus) -> Result<f64, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyCensus);
    }
    let mut correct = 0u64;
    for a in 0..2u8 {
        for y in 0..2u8 {
            correct += c.count(a, y, y);
        }
    }
    Ok(correct as f64 / total as f64)
}

/// True positive rate within group a; None if the group has no positives.
pub fn tpr(c: &GroupCensus, a: u8) -> Option<f64> {
    let positives = c.cell(a, 1);
    if positives == 0 {
        None
    } else {
        Some(c.count(a, 1, 1) as f64 / positives as f64)
    }
}

/// P(yhat = 1 | A = a); None if the group is empty.
pub fn positive_rate(c: &GroupCensus, a: u8) -> Option<f64> {
    let total = c.group_total(a);
    if total == 0 {
        None
    } else {
        Some(c.positive_predictions(a) as f64 / total as f64)
    }
}

/// Equal opportunity difference: TPR(A=0) - TPR(A=1).
pub fn eod(c: &GroupCensus) -> Option<f64> {
    Some(tpr(c, 0)? - tpr(c, 1)?)
}

/// Statistical parity difference: P(yhat=1|A=0) - P(yhat=1|A=1).
pub fn spd(c: &GroupCensus) -> Option<f64> {
    Some(positive_rate(c, 0)? - positive_rate(c, 1)?)
}

pub fn metric(c: &GroupCensus, kind: MetricKind) -> Option<f64> {
    match kind {
        MetricKind::Eod => eod(c),
        MetricKind::Spd => spd(c),
    }
}

/// Federation-level probabilities that anchor the metric decomposition.
/// For EOD these are Pr(A=a, Y=1); for SPD they are Pr(A=a). Both must be
/// strictly positive, which the constructors enforce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    kind: MetricKind,
    denom: [f64; 2],
}

impl DatasetStats {
    /// Builds stats from federation-level counts: for EOD `cell_counts[a]`
    /// is the number of (A=a, Y=1) rows; for SPD it is the size of group a.
    pub fn from_counts(
        kind: MetricKind,
        cell_counts: [f64; 2],
        total_rows: f64,
    ) -> Result<Self, MetricsError> {
        if !(total_rows > 0.0) {
            return Err(MetricsError::DegenerateStats(format!(
                "total row count {total_rows} must be positive"
            )));
        }
        let denom = [cell_counts[0] / total_rows, cell_counts[1] / total_rows];
        for (a, d) in denom.iter().enumerate() {
            if !(*d > 0.0) || *d > 1.0 {
                return Err(MetricsError::DegenerateStats(format!(
                    "anchor probability for group {a} is {d}; the metric is undefined for the federation"
                )));
            }
        }
        Ok(Self { kind, denom })
    }

    pub fn from_census(kind: MetricKind, census: &AyCensus) -> Result<Self, MetricsError> {
        let counts = match kind {
            MetricKind::Eod => [census.count(0, 1) as f64, census.count(1, 1) as f64],
            MetricKind::Spd => [census.group_total(0) as f64, census.group_total(1) as f64],
        };
        Self::from_counts(kind, counts, census.total() as f64)
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn denom(&self, a: u8) -> f64 {
        self.denom[a as usize & 1]
    }
}

/// Client k's additive share of the federation-level metric.
///
/// For EOD the group-a term is
///   P(yhat=1 | A=a, Y=1, C=k) * P(A=a, Y=1 | C=k) / Pr(A=a, Y=1)
/// scaled by n_k / n, and the component is term(0) - term(1). SPD conditions
/// on A=a alone. A zero local cell contributes zero because its probability
/// mass factor vanishes; summed over clients the components reconstruct the
/// centralized metric exactly.
pub fn m_global_component(
    local: &GroupCensus,
    stats: &DatasetStats,
    federation_rows: u64,
) -> f64 {
    let n_k = local.total();
    if n_k == 0 || federation_rows == 0 {
        return 0.0;
    }
    let nk = n_k as f64;
    let n = federation_rows as f64;
    let term = |a: u8| -> f64 {
        match stats.kind {
            MetricKind::Eod => {
                let cell = local.cell(a, 1);
                if cell == 0 {
                    0.0
                } else {
                    let cond = local.count(a, 1, 1) as f64 / cell as f64;
                    let mass = cell as f64 / nk;
                    cond * mass / stats.denom(a)
                }
            }
            MetricKind::Spd => {
                let group = local.group_total(a);
                if group == 0 {
                    0.0
                } else {
                    let cond = local.positive_predictions(a) as f64 / group as f64;
                    let mass = group as f64 / nk;
                    cond * mass / stats.denom(a)
                }
            }
        }
    };
    (nk / n) * (term(0) - term(1))
}

/// Population standard deviation of per-client accuracies (unweighted, so
/// small clients count as much as large ones).
pub fn std_acc(accs: &[f64]) -> f64 {
    if accs.len() <= 1 {
        return 0.0;
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}
