//! Client partitioning: Dirichlet-based heterogeneity and single-group splits.
//!
//! The Dirichlet scheme allocates each group's rows across K clients with
//! proportions drawn from Dir(alpha): small alpha concentrates a group on few
//! clients, large alpha approaches an even split. The single-group scheme
//! gives every client rows from exactly one sensitive group, the extreme
//! heterogeneity case where local fairness metrics are undefined.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TabularDataset;
use crate::metrics::AyCensus;
use crate::rng::derive_rng;

/// Smallest client size the guard accepts before redrawing.
pub const DEFAULT_MIN_ROWS: usize = 2;
const MAX_DRAW_ATTEMPTS: u64 = 100;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("client count {0} must be at least 1")]
    InvalidClientCount(usize),
    #[error("alpha {0} must be positive and finite")]
    InvalidAlpha(f64),
    #[error("{rows} rows cannot give {clients} clients at least {min_rows} rows each")]
    TooFewRows {
        rows: usize,
        clients: usize,
        min_rows: usize,
    },
    #[error("no draw satisfied the {min_rows}-row minimum after {attempts} attempts")]
    MinRowsInfeasible { min_rows: usize, attempts: u64 },
    #[error("assignment refers to client {client} but K = {k}")]
    BadAssignment { client: usize, k: usize },
    #[error("assignment covers {assigned} rows, dataset has {rows}")]
    LengthMismatch { assigned: usize, rows: usize },
    #[error("serialization: {0}")]
    Serde(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which row attribute the Dirichlet draw stratifies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    Sensitive,
    Label,
    SensitiveXLabel,
    /// Marker for partitions built by [`single_group_partition`].
    SingleGroup,
}

/// A complete, disjoint assignment of dataset rows to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub group_by: GroupBy,
    pub assignment: Vec<usize>,
}

impl ClientPartition {
    /// Row indices owned by client k, ascending.
    pub fn client_rows(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == client)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn validate_against(&self, ds: &TabularDataset) -> Result<(), PartitionError> {
        if self.assignment.len() != ds.n_rows() {
            return Err(PartitionError::LengthMismatch {
                assigned: self.assignment.len(),
                rows: ds.n_rows(),
            });
        }
        for &c in &self.assignment {
            if c >= self.k {
                return Err(PartitionError::BadAssignment { client: c, k: self.k });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        let part: ClientPartition =
            serde_json::from_str(text).map_err(|e| PartitionError::Serde(e.to_string()))?;
        for &c in &part.assignment {
            if c >= part.k {
                return Err(PartitionError::BadAssignment { client: c, k: part.k });
            }
        }
        Ok(part)
    }
}

/// Splits `total` into `shares.len()` integer counts proportional to shares,
/// using largest-remainder rounding. Ties go to the lower index.
pub(crate) fn apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let targets: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = targets[i] - targets[i].floor();
        let rj = targets[j] - targets[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for idx in 0..(total - assigned) {
        counts[order[idx % shares.len()]] += 1;
    }
    counts
}

fn group_value(ds: &TabularDataset, i: usize, group_by: GroupBy) -> usize {
    match group_by {
        GroupBy::Sensitive => ds.group(i) as usize,
        GroupBy::Label => ds.label(i) as usize,
        GroupBy::SensitiveXLabel => 2 * ds.group(i) as usize + ds.label(i) as usize,
        GroupBy::SingleGroup => ds.group(i) as usize,
    }
}

/// Dirichlet partition with the default minimum-rows guard.
pub fn dirichlet_partition(
    ds: &TabularDataset,
    k: usize,
    alpha: f64,
    group_by: GroupBy,
    seed: u64,
) -> Result<ClientPartition, PartitionError> {
    dirichlet_partition_with(ds, k, alpha, group_by, seed, DEFAULT_MIN_ROWS)
}

/// Dirichlet partition with an explicit minimum client size. Draws that
/// leave any client below the minimum are redrawn on a derived sub-seed,
/// a bounded number of times.
pub fn dirichlet_partition_with(
    ds: &TabularDataset,
    k: usize,
    alpha: f64,
    group_by: GroupBy,
    seed: u64,
    min_rows: usize,
) -> Result<ClientPartition, PartitionError> {
    if k == 0 {
        return Err(PartitionError::InvalidClientCount(k));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PartitionError::InvalidAlpha(alpha));
    }
    let n = ds.n_rows();
    if n < k * min_rows {
        return Err(PartitionError::TooFewRows {
            rows: n,
            clients: k,
            min_rows,
        });
    }
    if group_by == GroupBy::SingleGroup {
        return Err(PartitionError::Serde(
            "single-group partitions are built by single_group_partition".to_string(),
        ));
    }

    let n_values = match group_by {
        GroupBy::Sensitive | GroupBy::Label => 2,
        GroupBy::SensitiveXLabel => 4,
        GroupBy::SingleGroup => unreachable!(),
    };
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_values];
    for i in 0..n {
        groups[group_value(ds, i, group_by)].push(i);
    }

    for attempt in 0..MAX_DRAW_ATTEMPTS {
        let mut rng = derive_rng(seed, "dirichlet-partition", &[attempt]);
        let gamma = Gamma::new(alpha, 1.0).map_err(|_| PartitionError::InvalidAlpha(alpha))?;
        let mut assignment = vec![0usize; n];
        for rows in &groups {
            if rows.is_empty() {
                continue;
            }
            let mut shares: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            // Extreme alpha can underflow every draw to zero; fall back to
            // a uniform split rather than dividing by zero.
            let sum: f64 = shares.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                shares = vec![1.0; k];
            }
            let counts = apportion(&shares, rows.len());
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng);
            let mut cursor = 0usize;
            for (client, &count) in counts.iter().enumerate() {
                for &row in &shuffled[cursor..cursor + count] {
                    assignment[row] = client;
                }
                cursor += count;
            }
        }
        let part = ClientPartition {
            k,
            alpha: Some(alpha),
            seed,
            group_by,
            assignment,
        };
        if part.client_sizes().iter().all(|&s| s >= min_rows) {
            return Ok(part);
        }
    }
    Err(PartitionError::MinRowsInfeasible {
        min_rows,
        attempts: MAX_DRAW_ATTEMPTS,
    })
}

/// Single-group partition: the unprivileged group's rows are spread evenly
/// over the first `unprivileged_clients` clients, the privileged group's rows
/// over the remaining `privileged_clients`. Every client sees one group only.
pub fn single_group_partition(
    ds: &TabularDataset,
    unprivileged_clients: usize,
    privileged_clients: usize,
    seed: u64,
) -> Result<ClientPartition, PartitionError> {
    if unprivileged_clients == 0 {
        return Err(PartitionError::InvalidClientCount(unprivileged_clients));
    }
    if privileged_clients == 0 {
        return Err(PartitionError::InvalidClientCount(privileged_clients));
    }
    let n = ds.n_rows();
    let mut group_rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..n {
        group_rows[ds.group(i) as usize].push(i);
    }
    let clients_of = [unprivileged_clients, privileged_clients];
    for (a, rows) in group_rows.iter().enumerate() {
        if rows.len() < clients_of[a] * DEFAULT_MIN_ROWS {
            return Err(PartitionError::TooFewRows {
                rows: rows.len(),
                clients: clients_of[a],
                min_rows: DEFAULT_MIN_ROWS,
            });
        }
    }

    let k = unprivileged_clients + privileged_clients;
    let mut rng = derive_rng(seed, "single-group-partition", &[]);
    let mut assignment = vec![0usize; n];
    for (a, rows) in group_rows.iter().enumerate() {
        let base = if a == 0 { 0 } else { unprivileged_clients };
        let counts = apportion(&vec![1.0; clients_of[a]], rows.len());
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let mut cursor = 0usize;
        for (offset, &count) in counts.iter().enumerate() {
            for &row in &shuffled[cursor..cursor + count] {
                assignment[row] = base + offset;
            }
            cursor += count;
        }
    }
    Ok(ClientPartition {
        k,
        alpha: None,
        seed,
        group_by: GroupBy::SingleGroup,
        assignment,
    })
}

/// Per-client (group, label) cell counts.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionStats {
    pub per_client: Vec<ClientCells>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientCells {
    pub client: usize,
    pub n: u64,
    pub cells: AyCensus,
}

pub fn partition_stats(ds: &TabularDataset, part: &ClientPartition) -> PartitionStats {
    let mut censuses = vec![AyCensus::empty(); part.k];
    for (i, &c) in part.assignment.iter().enumerate() {
        censuses[c].record(ds.group(i), ds.label(i));
    }
    PartitionStats {
        per_client: censuses
            .into_iter()
            .enumerate()
            .map(|(client, cells)| ClientCells {
                client,
                n: cells.total(),
                cells,
            })
            .collect(),
    }
}

impl PartitionStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client,n,a0y0,a0y1,a1y0,a1y1\n");
        for row in &self.per_client {
            let [c00, c01, c10, c11] = row.cells.to_flat();
            out.push_str(&format!(
                "{},{},{c00},{c01},{c10},{c11}\n",
                row.client, row.n
            ));
        }
        out
    }
}
