//! Tabular dataset loading, encoding, and splitting.
//!
//! The pipeline is: raw CSV -> [`load_csv`] -> [`encode`] -> [`train_test_split`]
//! -> [`standardize`]. Standardization statistics are fitted on the train split
//! only, after splitting, so no test information leaks into the features.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::derive_rng;

pub mod synth;

/// Variance threshold under which a continuous feature is considered constant.
const ZERO_VARIANCE_EPS: f64 = 1e-12;
/// Reshuffle attempts before a split is declared infeasible.
const MAX_SPLIT_RETRIES: u64 = 100;
/// Cache layout version; bump when the on-disk format changes.
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("column {column:?}, data row {row}: cannot parse {value:?} as a number")]
    MalformedNumber {
        column: String,
        row: usize,
        value: String,
    },
    #[error("test fraction {0} out of range; need 0 < f < 1")]
    InvalidFraction(f64),
    #[error("split infeasible: a populated (group, label) cell cannot be represented in both splits")]
    SplitInfeasible,
    #[error("cache error: {0}")]
    Cache(String),
    #[error("unknown dataset {0:?}; expected adult-synth, compas-synth, or a csv path")]
    UnknownDataset(String),
}

/// Role a raw column plays during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    FeatureContinuous,
    FeatureCategorical,
    Label,
    Sensitive,
    Ignore,
}

fn default_missing_markers() -> Vec<String> {
    vec!["?".to_string()]
}

fn default_true() -> bool {
    true
}

/// Column roles plus the rules that binarize the label and sensitive columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnRole>,
    /// Raw value mapped to label 1; everything else is 0.
    pub label_positive: String,
    /// Raw value mapped to the privileged group (A = 1).
    pub sensitive_positive: String,
    #[serde(default = "default_missing_markers")]
    pub missing_markers: Vec<String>,
    /// When true the sensitive column is also exposed as a binary feature.
    #[serde(default = "default_true")]
    pub sensitive_as_feature: bool,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let schema: Schema = serde_json::from_str(text)
            .map_err(|e| IngestError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let labels = self.count_role(ColumnRole::Label);
        let sensitive = self.count_role(ColumnRole::Sensitive);
        if labels != 1 {
            return Err(IngestError::InvalidSchema(format!(
                "need exactly one label column, found {labels}"
            )));
        }
        if sensitive != 1 {
            return Err(IngestError::InvalidSchema(format!(
                "need exactly one sensitive column, found {sensitive}"
            )));
        }
        let features = self.count_role(ColumnRole::FeatureContinuous)
            + self.count_role(ColumnRole::FeatureCategorical);
        if features == 0 && !self.sensitive_as_feature {
            return Err(IngestError::InvalidSchema(
                "schema declares no feature columns".to_string(),
            ));
        }
        Ok(())
    }

    fn count_role(&self, role: ColumnRole) -> usize {
        self.columns.values().filter(|r| **r == role).count()
    }

    fn role_of(&self, column: &str) -> Option<ColumnRole> {
        self.columns.get(column).copied()
    }

    /// Stable digest over the serialized schema, used in cache keys.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_prefix(&hasher.finalize(), 16)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

/// Raw CSV contents: header names plus trimmed string cells.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// A [`RawTable`] plus how many rows were dropped for missing values.
#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub table: RawTable,
    pub dropped_rows: usize,
}

/// Reads a CSV, checks its header against the schema, and drops rows with
/// missing-value markers in any non-ignored column.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<LoadedTable, IngestError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    load_records(headers, reader.into_records(), schema)
}

/// Same as [`load_csv`] but over in-memory CSV text.
pub fn load_csv_text(text: &str, schema: &Schema) -> Result<LoadedTable, IngestError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    load_records(headers, reader.into_records(), schema)
}

fn load_records(
    headers: Vec<String>,
    records: impl Iterator<Item = Result<csv::StringRecord, csv::Error>>,
    schema: &Schema,
) -> Result<LoadedTable, IngestError> {
    if headers.is_empty() {
        return Err(IngestError::EmptyDataset("no header row".to_string()));
    }
    let header_set: BTreeSet<&str> = headers.iter().map(|s| s.as_str()).collect();
    for col in schema.columns.keys() {
        if !header_set.contains(col.as_str()) {
            return Err(IngestError::SchemaMismatch(format!(
                "schema column {col:?} missing from csv header"
            )));
        }
    }
    for col in &headers {
        if schema.role_of(col).is_none() {
            return Err(IngestError::SchemaMismatch(format!(
                "csv column {col:?} not covered by the schema"
            )));
        }
    }
    let ignored: Vec<bool> = headers
        .iter()
        .map(|c| schema.role_of(c) == Some(ColumnRole::Ignore))
        .collect();

    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for record in records {
        let record = record?;
        let cells: Vec<String> = record.iter().map(|c| c.trim().to_string()).collect();
        if cells.len() != headers.len() {
            return Err(IngestError::SchemaMismatch(format!(
                "row {} has {} cells, header has {}",
                rows.len() + dropped + 1,
                cells.len(),
                headers.len()
            )));
        }
        let missing = cells
            .iter()
            .zip(ignored.iter())
            .any(|(cell, skip)| !skip && schema.missing_markers.iter().any(|m| m == cell));
        if missing {
            dropped += 1;
        } else {
            rows.push(cells);
        }
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyDataset(
            "no usable data rows after dropping missing values".to_string(),
        ));
    }
    Ok(LoadedTable {
        table: RawTable {
            columns: headers,
            rows,
        },
        dropped_rows: dropped,
    })
}

/// Dense encoded dataset: row-major features plus binary label and group.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    feature_names: Vec<String>,
    features: Vec<f64>,
    labels: Vec<u8>,
    sensitive: Vec<u8>,
}

impl TabularDataset {
    pub fn from_parts(
        feature_names: Vec<String>,
        features: Vec<f64>,
        labels: Vec<u8>,
        sensitive: Vec<u8>,
    ) -> Result<Self, IngestError> {
        let d = feature_names.len();
        let n = labels.len();
        if sensitive.len() != n || features.len() != n * d {
            return Err(IngestError::SchemaMismatch(format!(
                "inconsistent dataset shape: {} features, {} labels, {} groups, d = {d}",
                features.len(),
                n,
                sensitive.len()
            )));
        }
        if labels.iter().any(|y| *y > 1) || sensitive.iter().any(|a| *a > 1) {
            return Err(IngestError::SchemaMismatch(
                "labels and groups must be binary".to_string(),
            ));
        }
        Ok(Self {
            feature_names,
            features,
            labels,
            sensitive,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn group(&self, i: usize) -> u8 {
        self.sensitive[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[u8] {
        &self.sensitive
    }

    /// Materializes the subset given by row indices, in index order.
    pub fn select(&self, indices: &[usize]) -> TabularDataset {
        let d = self.n_features();
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut sensitive = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            sensitive.push(self.sensitive[i]);
        }
        TabularDataset {
            feature_names: self.feature_names.clone(),
            features,
            labels,
            sensitive,
        }
    }

    fn cell_occupancy(&self) -> [[bool; 2]; 2] {
        let mut seen = [[false; 2]; 2];
        for i in 0..self.n_rows() {
            seen[self.sensitive[i] as usize][self.labels[i] as usize] = true;
        }
        seen
    }
}

/// Encoded dataset plus which feature columns are continuous (standardizable).
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub data: TabularDataset,
    pub continuous_idx: Vec<usize>,
}

/// Encodes a raw table: continuous columns parse as numbers, categorical
/// columns one-hot expand (categories sorted lexicographically), the label and
/// sensitive columns binarize against the schema rules. Feature order follows
/// the CSV header.
pub fn encode(table: &RawTable, schema: &Schema) -> Result<EncodedDataset, IngestError> {
    schema.validate()?;
    if table.rows.is_empty() {
        return Err(IngestError::EmptyDataset("encode needs at least one row".to_string()));
    }
    let col_index: BTreeMap<&str, usize> = table
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    // Expanded feature layout, in header order.
    enum Plan {
        Continuous { col: usize, name: String },
        OneHot { col: usize, categories: Vec<String> },
        SensitiveFlag { col: usize, name: String },
    }
    let mut plans = Vec::new();
    let mut label_col = 0usize;
    let mut sensitive_col = 0usize;
    for (ci, name) in table.columns.iter().enumerate() {
        match schema.role_of(name).ok_or_else(|| {
            IngestError::SchemaMismatch(format!("csv column {name:?} not covered by the schema"))
        })? {
            ColumnRole::FeatureContinuous => plans.push(Plan::Continuous {
                col: ci,
                name: name.clone(),
            }),
            ColumnRole::FeatureCategorical => {
                let mut categories: BTreeSet<String> = BTreeSet::new();
                for row in &table.rows {
                    categories.insert(row[ci].clone());
                }
                plans.push(Plan::OneHot {
                    col: ci,
                    categories: categories.into_iter().collect(),
                });
            }
            ColumnRole::Label => label_col = ci,
            ColumnRole::Sensitive => {
                sensitive_col = ci;
                if schema.sensitive_as_feature {
                    plans.push(Plan::SensitiveFlag {
                        col: ci,
                        name: format!("{name}={}", schema.sensitive_positive),
                    });
                }
            }
            ColumnRole::Ignore => {}
        }
    }
    let _ = col_index;

    let mut feature_names = Vec::new();
    let mut continuous_idx = Vec::new();
    for plan in &plans {
        match plan {
            Plan::Continuous { name, .. } => {
                continuous_idx.push(feature_names.len());
                feature_names.push(name.clone());
            }
            Plan::OneHot { col, categories } => {
                let base = &table.columns[*col];
                for cat in categories {
                    feature_names.push(format!("{base}={cat}"));
                }
            }
            Plan::SensitiveFlag { name, .. } => feature_names.push(name.clone()),
        }
    }

    let d = feature_names.len();
    let n = table.rows.len();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for (ri, row) in table.rows.iter().enumerate() {
        for plan in &plans {
            match plan {
                Plan::Continuous { col, name } => {
                    let cell = &row[*col];
                    let value: f64 = cell.parse().map_err(|_| IngestError::MalformedNumber {
                        column: name.clone(),
                        row: ri + 1,
                        value: cell.clone(),
                    })?;
                    features.push(value);
                }
                Plan::OneHot { col, categories } => {
                    for cat in categories {
                        features.push(if &row[*col] == cat { 1.0 } else { 0.0 });
                    }
                }
                Plan::SensitiveFlag { col, .. } => {
                    features.push(if row[*col] == schema.sensitive_positive {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
        }
        labels.push(u8::from(row[label_col] == schema.label_positive));
        sensitive.push(u8::from(row[sensitive_col] == schema.sensitive_positive));
    }

    Ok(EncodedDataset {
        data: TabularDataset::from_parts(feature_names, features, labels, sensitive)?,
        continuous_idx,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Seeded shuffle split. Both halves must contain every (group, label) cell
/// that is populated in the input; infeasible draws are reshuffled on a
/// derived sub-seed a bounded number of times.
pub fn train_test_split(
    ds: &TabularDataset,
    spec: &SplitSpec,
) -> Result<(TabularDataset, TabularDataset), IngestError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(IngestError::InvalidFraction(spec.test_fraction));
    }
    let n = ds.n_rows();
    if n < 2 {
        return Err(IngestError::EmptyDataset(
            "need at least two rows to split".to_string(),
        ));
    }
    let n_test = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let required = ds.cell_occupancy();

    for attempt in 0..MAX_SPLIT_RETRIES {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(spec.seed, "train-test-split", &[attempt]));
        let (test_idx, train_idx) = order.split_at(n_test);
        let test = ds.select(test_idx);
        let train = ds.select(train_idx);
        if covers(&train.cell_occupancy(), &required) && covers(&test.cell_occupancy(), &required)
        {
            return Ok((train, test));
        }
    }
    Err(IngestError::SplitInfeasible)
}

fn covers(have: &[[bool; 2]; 2], need: &[[bool; 2]; 2]) -> bool {
    for a in 0..2 {
        for y in 0..2 {
            if need[a][y] && !have[a][y] {
                return false;
            }
        }
    }
    true
}

/// Result of standardization: transformed splits plus dropped constant columns.
#[derive(Debug, Clone)]
pub struct StandardizeOutcome {
    pub train: TabularDataset,
    pub test: TabularDataset,
    pub dropped_features: Vec<String>,
}

/// Standardizes the continuous columns to zero mean and unit variance using
/// statistics fitted on the train split only. Constant columns are dropped
/// from both splits with a warning rather than producing NaN.
pub fn standardize(
    train: &TabularDataset,
    test: &TabularDataset,
    continuous_idx: &[usize],
) -> StandardizeOutcome {
    let d = train.n_features();
    let n = train.n_rows() as f64;
    let mut keep = vec![true; d];
    let mut mean = vec![0.0f64; d];
    let mut scale = vec![1.0f64; d];
    let mut dropped = Vec::new();

    for &j in continuous_idx {
        let mut sum = 0.0;
        for i in 0..train.n_rows() {
            sum += train.row(i)[j];
        }
        let mu = sum / n;
        let mut var = 0.0;
        for i in 0..train.n_rows() {
            let diff = train.row(i)[j] - mu;
            var += diff * diff;
        }
        var /= n;
        if var < ZERO_VARIANCE_EPS {
            keep[j] = false;
            dropped.push(train.feature_names[j].clone());
            log::warn!(
                "dropping constant feature {:?} (train variance {:e})",
                train.feature_names[j],
                var
            );
        } else {
            mean[j] = mu;
            scale[j] = var.sqrt();
        }
    }

    let transform = |ds: &TabularDataset| {
        let names: Vec<String> = ds
            .feature_names
            .iter()
            .enumerate()
            .filter(|(j, _)| keep[*j])
            .map(|(_, name)| name.clone())
            .collect();
        let mut features = Vec::with_capacity(ds.n_rows() * names.len());
        for i in 0..ds.n_rows() {
            let row = ds.row(i);
            for j in 0..d {
                if keep[j] {
                    features.push((row[j] - mean[j]) / scale[j]);
                }
            }
        }
        TabularDataset {
            feature_names: names,
            features,
            labels: ds.labels.clone(),
            sensitive: ds.sensitive.clone(),
        }
    };

    StandardizeOutcome {
        train: transform(train),
        test: transform(test),
        dropped_features: dropped,
    }
}

/// Provenance and bookkeeping for a prepared dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareMeta {
    pub version: u32,
    pub source: String,
    pub schema_digest: String,
    pub n_raw_rows: usize,
    pub dropped_rows: usize,
    pub dropped_features: Vec<String>,
    pub split: SplitSpec,
    pub feature_names: Vec<String>,
}

/// Fully prepared dataset: standardized train and test splits plus metadata.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub train: TabularDataset,
    pub test: TabularDataset,
    pub meta: PrepareMeta,
}

/// Runs the full pipeline over already-loaded raw data.
pub fn prepare_table(
    loaded: &LoadedTable,
    schema: &Schema,
    split: &SplitSpec,
    source: &str,
) -> Result<PreparedDataset, IngestError> {
    let encoded = encode(&loaded.table, schema)?;
    let (train, test) = train_test_split(&encoded.data, split)?;
    let std = standardize(&train, &test, &encoded.continuous_idx);
    let meta = PrepareMeta {
        version: CACHE_VERSION,
        source: source.to_string(),
        schema_digest: schema.digest(),
        n_raw_rows: loaded.table.rows.len() + loaded.dropped_rows,
        dropped_rows: loaded.dropped_rows,
        dropped_features: std.dropped_features.clone(),
        split: *split,
        feature_names: std.train.feature_names().to_vec(),
    };
    Ok(PreparedDataset {
        train: std.train,
        test: std.test,
        meta,
    })
}

/// Runs the full pipeline from a CSV file on disk.
pub fn prepare_csv(
    path: &Path,
    schema: &Schema,
    split: &SplitSpec,
) -> Result<PreparedDataset, IngestError> {
    let loaded = load_csv(path, schema)?;
    prepare_table(&loaded, schema, split, &path.display().to_string())
}

fn write_split_csv(path: &Path, ds: &TabularDataset) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ds.feature_names().to_vec();
    header.push("__label".to_string());
    header.push("__group".to_string());
    writer.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut record: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        record.push(ds.label(i).to_string());
        record.push(ds.group(i).to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn read_split_csv(path: &Path, expected_features: &[String]) -> Result<TabularDataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let d = headers.len().saturating_sub(2);
    if headers.len() < 2
        || headers[d] != "__label"
        || headers[d + 1] != "__group"
        || headers[..d] != *expected_features
    {
        return Err(IngestError::Cache(format!(
            "split file {} does not match its metadata",
            path.display()
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut sensitive = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(IngestError::Cache(format!(
                "ragged row in split file {}",
                path.display()
            )));
        }
        for j in 0..d {
            let cell = &record[j];
            features.push(cell.parse().map_err(|_| IngestError::Cache(format!(
                "bad float {cell:?} in {}",
                path.display()
            )))?);
        }
        labels.push(parse_binary(&record[d], path)?);
        sensitive.push(parse_binary(&record[d + 1], path)?);
    }
    TabularDataset::from_parts(expected_features.to_vec(), features, labels, sensitive)
}

fn parse_binary(cell: &str, path: &Path) -> Result<u8, IngestError> {
    match cell {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(IngestError::Cache(format!(
            "bad binary value {other:?} in {}",
            path.display()
        ))),
    }
}

/// Writes a prepared dataset to a cache directory (train.csv, test.csv, meta.json).
pub fn write_cache(dir: &Path, prepared: &PreparedDataset) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir)?;
    write_split_csv(&dir.join("train.csv"), &prepared.train)?;
    write_split_csv(&dir.join("test.csv"), &prepared.test)?;
    let meta = serde_json::to_string_pretty(&prepared.meta)
        .map_err(|e| IngestError::Cache(e.to_string()))?;
    let mut file = std::fs::File::create(dir.join("meta.json"))?;
    file.write_all(meta.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Reads a prepared dataset back from a cache directory.
pub fn read_cache(dir: &Path) -> Result<PreparedDataset, IngestError> {
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: PrepareMeta =
        serde_json::from_str(&meta_text).map_err(|e| IngestError::Cache(e.to_string()))?;
    if meta.version != CACHE_VERSION {
        return Err(IngestError::Cache(format!(
            "cache version {} unsupported (expected {CACHE_VERSION})",
            meta.version
        )));
    }
    let train = read_split_csv(&dir.join("train.csv"), &meta.feature_names)?;
    let test = read_split_csv(&dir.join("test.csv"), &meta.feature_names)?;
    Ok(PreparedDataset { train, test, meta })
}
