//! Bias mitigation through per-row training weights.
//!
//! Reweighing assigns each (group, label) cell the weight
//! P(A=a) P(Y=y) / P(A=a, Y=y), which decorrelates group and label in the
//! weighted empirical distribution. The local variant uses a client's own
//! census; the global variant uses federation counts (secure-summed by the
//! engine). The FairBatch-style debiaser keeps a sampling mass per cell and
//! nudges mass between the positive-label cells against the observed
//! disparity each round, emulating batch re-sampling with loss weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TabularDataset;
use crate::metrics::AyCensus;

/// Floor for any occupied cell's sampling mass.
pub const MIN_CELL_MASS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("fairbatch step {0} must be positive and finite")]
    InvalidStep(f64),
    #[error("fairbatch needs a non-empty census")]
    EmptyCensus,
}

/// Strategy a client applies to its training weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasStrategy {
    #[default]
    None,
    LocalReweigh,
    GlobalReweigh,
    Fairbatch,
}

impl std::fmt::Display for DebiasStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DebiasStrategy::None => "none",
            DebiasStrategy::LocalReweigh => "local-reweigh",
            DebiasStrategy::GlobalReweigh => "global-reweigh",
            DebiasStrategy::Fairbatch => "fairbatch",
        };
        write!(f, "{s}")
    }
}

/// Per-cell reweighing factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweighTable {
    weights: [[f64; 2]; 2],
}

impl ReweighTable {
    /// Builds the table from (group, label) counts. Empty cells get weight 1,
    /// which is inert since no row lives there.
    pub fn from_census(census: &AyCensus) -> Self {
        let n = census.total() as f64;
        let mut weights = [[1.0f64; 2]; 2];
        for a in 0..2u8 {
            for y in 0..2u8 {
                let cell = census.count(a, y);
                if cell > 0 {
                    let pa = census.group_total(a) as f64 / n;
                    let py = census.label_total(y) as f64 / n;
                    let pay = cell as f64 / n;
                    weights[a as usize][y as usize] = pa * py / pay;
                }
            }
        }
        Self { weights }
    }

    pub fn weight(&self, a: u8, y: u8) -> f64 {
        self.weights[a as usize & 1][y as usize & 1]
    }

    pub fn row_weights(&self, ds: &TabularDataset) -> Vec<f64> {
        (0..ds.n_rows())
            .map(|i| self.weight(ds.group(i), ds.label(i)))
            .collect()
    }
}

/// FairBatch-style adaptive cell masses.
#[derive(Debug, Clone, PartialEq)]
pub struct FairBatchState {
    /// Sampling mass per (a, y) cell; zero on empty cells, sums to one.
    mass: [[f64; 2]; 2],
    /// Empirical cell frequency at setup, the denominator of row weights.
    freq: [[f64; 2]; 2],
    step: f64,
}

impl FairBatchState {
    /// Masses start at the empirical cell frequencies, so initial row
    /// weights are exactly one everywhere.
    pub fn new(census: &AyCensus, step: f64) -> Result<Self, DebiasError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(DebiasError::InvalidStep(step));
        }
        let n = census.total();
        if n == 0 {
            return Err(DebiasError::EmptyCensus);
        }
        let mut freq = [[0.0f64; 2]; 2];
        for a in 0..2u8 {
            for y in 0..2u8 {
                freq[a as usize][y as usize] = census.count(a, y) as f64 / n as f64;
            }
        }
        Ok(Self {
            mass: freq,
            freq,
            step,
        })
    }

    pub fn mass(&self, a: u8, y: u8) -> f64 {
        self.mass[a as usize & 1][y as usize & 1]
    }

    /// Shifts `step` of mass between the positive-label cells against the
    /// sign of the disparity: a negative value (privileged group ahead)
    /// upweights the unprivileged positives. Undefined disparity, zero
    /// disparity, or an empty positive cell leaves the state unchanged.
    /// Occupied cells are floored at [`MIN_CELL_MASS`] and the masses
    /// renormalized to sum one.
    pub fn update(&mut self, disparity: Option<f64>) {
        let Some(d) = disparity else {
            return;
        };
        if d == 0.0 || !d.is_finite() {
            return;
        }
        if self.freq[0][1] == 0.0 || self.freq[1][1] == 0.0 {
            log::debug!("fairbatch update skipped: a positive-label cell is empty locally");
            return;
        }
        let shift = self.step * d.signum();
        self.mass[0][1] -= shift;
        self.mass[1][1] += shift;
        // Cells at or below the floor are pinned there; the remaining mass
        // is scaled across the free cells. Rescaling can push another cell
        // under the floor, so iterate to the fixpoint (at most four cells).
        let occupied: Vec<(usize, usize)> = (0..2)
            .flat_map(|a| (0..2).map(move |y| (a, y)))
            .filter(|&(a, y)| self.freq[a][y] > 0.0)
            .collect();
        let mut pinned = [[false; 2]; 2];
        loop {
            let mut newly_pinned = false;
            for &(a, y) in &occupied {
                if !pinned[a][y] && self.mass[a][y] <= MIN_CELL_MASS {
                    self.mass[a][y] = MIN_CELL_MASS;
                    pinned[a][y] = true;
                    newly_pinned = true;
                }
            }
            let pinned_total: f64 = occupied
                .iter()
                .filter(|&&(a, y)| pinned[a][y])
                .map(|_| MIN_CELL_MASS)
                .sum();
            let free_total: f64 = occupied
                .iter()
                .filter(|&&(a, y)| !pinned[a][y])
                .map(|&(a, y)| self.mass[a][y])
                .sum();
            if free_total > 0.0 {
                let scale = (1.0 - pinned_total) / free_total;
                for &(a, y) in &occupied {
                    if !pinned[a][y] {
                        self.mass[a][y] *= scale;
                    }
                }
            }
            if !newly_pinned {
                break;
            }
        }
    }

    /// Per-row weight: cell sampling mass over cell empirical frequency.
    pub fn row_weights(&self, ds: &TabularDataset) -> Vec<f64> {
        (0..ds.n_rows())
            .map(|i| {
                let a = ds.group(i) as usize;
                let y = ds.label(i) as usize;
                // freq > 0 whenever a row exists in the cell.
                self.mass[a][y] / self.freq[a][y]
            })
            .collect()
    }
}

/// A client's debias machinery, fixed at setup.
#[derive(Debug, Clone)]
pub enum DebiasState {
    None,
    Reweigh(ReweighTable),
    FairBatch(FairBatchState),
}

impl DebiasState {
    pub fn row_weights(&self, ds: &TabularDataset) -> Vec<f64> {
        match self {
            DebiasState::None => vec![1.0; ds.n_rows()],
            DebiasState::Reweigh(table) => table.row_weights(ds),
            DebiasState::FairBatch(state) => state.row_weights(ds),
        }
    }

    /// Feeds the round's fairness signal to strategies that adapt.
    pub fn observe_disparity(&mut self, disparity: Option<f64>) {
        if let DebiasState::FairBatch(state) = self {
            state.update(disparity);
        }
    }
}
