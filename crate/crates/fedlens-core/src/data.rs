//! Dataset ingestion and construction: CSV loading, seeded partitioning into
//! client sub-datasets with a held-out evaluation slice, and a synthetic
//! generator with controllable skew and label noise for experiments that
//! cannot ship the licensed source data.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClientDataset, FeatureKind, ModelError, Schema};
use crate::rng::{mix, SplitMix64};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column {0:?} missing from CSV header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse {value:?} in column {column:?}")]
    UnparsableRow { row: usize, column: String, value: String },
    #[error("file has no header row")]
    EmptyFile,
    #[error("partition needs {need} rows, only {have} available")]
    InsufficientRows { need: usize, have: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Pooled rows before partitioning. Numeric columns follow the schema's
/// numeric order; categorical cells are kept per row so partitions inherit
/// their value sets.
#[derive(Debug, Clone)]
pub struct PooledData {
    pub schema: Schema,
    pub rows: Vec<Vec<f64>>,
    pub categorical_rows: Vec<Vec<String>>,
}

impl PooledData {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Loads a headered CSV against a schema; columns are matched by name, order
/// independent, and unknown columns are skipped with a warning.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<PooledData, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = match reader.headers() {
        Ok(h) if !h.is_empty() => h.iter().map(|s| s.to_string()).collect(),
        _ => return Err(DataError::EmptyFile),
    };
    if headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::EmptyFile);
    }
    for header in &headers {
        if !header.is_empty() && schema.kind(header).is_none() {
            log::warn!("ignoring unknown CSV column {header:?}");
        }
    }
    let mut column_of = Vec::new();
    for (name, _) in schema.features() {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
        column_of.push(idx);
    }

    let mut rows = Vec::new();
    let mut categorical_rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut numeric = Vec::with_capacity(schema.width());
        let mut categorical = Vec::new();
        for ((name, kind), &col) in schema.features().iter().zip(&column_of) {
            let raw = record.get(col).unwrap_or("");
            match kind {
                FeatureKind::Numeric => {
                    let value: f64 = raw.parse().map_err(|_| DataError::UnparsableRow {
                        row: row_idx,
                        column: name.clone(),
                        value: raw.to_string(),
                    })?;
                    numeric.push(value);
                }
                FeatureKind::Categorical => categorical.push(raw.to_string()),
            }
        }
        rows.push(numeric);
        categorical_rows.push(categorical);
    }
    Ok(PooledData { schema: schema.clone(), rows, categorical_rows })
}

/// View of a client dataset as pooled rows, for CSV emission. Per-row
/// categorical cells are not retained by `ClientDataset`, so categorical
/// columns come back empty.
pub fn dataset_as_pooled(ds: &ClientDataset) -> PooledData {
    let n_cat = ds
        .schema
        .features()
        .iter()
        .filter(|(_, k)| *k == FeatureKind::Categorical)
        .count();
    PooledData {
        schema: ds.schema.clone(),
        rows: ds.rows.clone(),
        categorical_rows: vec![vec![String::new(); n_cat]; ds.rows.len()],
    }
}

/// Debug re-emission of pooled data; numeric cells use shortest round-trip
/// decimal formatting.
pub fn write_csv(path: impl AsRef<Path>, data: &PooledData) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let names: Vec<&str> = data.schema.features().iter().map(|(n, _)| n.as_str()).collect();
    writer.write_record(&names)?;
    for (row, cats) in data.rows.iter().zip(&data.categorical_rows) {
        let mut record = Vec::with_capacity(names.len());
        let mut num_it = row.iter();
        let mut cat_it = cats.iter();
        for (_, kind) in data.schema.features() {
            match kind {
                FeatureKind::Numeric => record.push(num_it.next().unwrap().to_string()),
                FeatureKind::Categorical => record.push(cat_it.next().unwrap().clone()),
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum PartitionStrategy {
    RandomSizes { sizes: Vec<usize> },
    Uniform { clients: usize },
    Dirichlet { clients: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub strategy: PartitionStrategy,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl PartitionSpec {
    fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return Err(DataError::InvalidSpec(format!(
                "holdout fraction {} outside [0, 0.5]",
                self.holdout_fraction
            )));
        }
        match &self.strategy {
            PartitionStrategy::RandomSizes { sizes } if sizes.is_empty() => {
                Err(DataError::InvalidSpec("empty size list".into()))
            }
            PartitionStrategy::Uniform { clients } | PartitionStrategy::Dirichlet { clients, .. }
                if *clients == 0 =>
            {
                Err(DataError::InvalidSpec("zero clients".into()))
            }
            PartitionStrategy::Dirichlet { alpha, .. } if *alpha <= 0.0 => {
                Err(DataError::InvalidSpec("alpha must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Largest-remainder rounding of proportions to integer sizes summing to
/// `total`.
fn proportions_to_sizes(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = proportions.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut fractional: Vec<(usize, f64)> = proportions
        .iter()
        .zip(&sizes)
        .enumerate()
        .map(|(i, (p, &s))| (i, p * total as f64 - s as f64))
        .collect();
    fractional.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let count = sizes.len();
    for k in 0..(total - assigned) {
        sizes[fractional[k % count].0] += 1;
    }
    sizes
}

fn dataset_from_indices(
    client_id: u64,
    pooled: &PooledData,
    indices: &[usize],
) -> ClientDataset {
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| pooled.rows[i].clone()).collect();
    let mut ds = ClientDataset::new(client_id, pooled.schema.clone(), rows);
    let cat_features: Vec<&str> = pooled
        .schema
        .features()
        .iter()
        .filter(|(_, k)| *k == FeatureKind::Categorical)
        .map(|(n, _)| n.as_str())
        .collect();
    for (slot, name) in cat_features.iter().enumerate() {
        let values: BTreeSet<String> = indices
            .iter()
            .map(|&i| pooled.categorical_rows[i][slot].clone())
            .collect();
        ds.categorical_values.insert(name.to_string(), values);
    }
    ds
}

/// Seeded shuffle, holdout first, then contiguous slices per strategy.
/// Client ids run 1..=k; the holdout comes back as a server-held dataset
/// with the reserved id 0.
pub fn partition(
    pooled: &PooledData,
    spec: &PartitionSpec,
) -> Result<(Vec<ClientDataset>, ClientDataset), DataError> {
    spec.validate()?;
    let n = pooled.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(spec.seed).shuffle(&mut order);
    let holdout_count = (spec.holdout_fraction * n as f64).floor() as usize;
    let (holdout_idx, rest) = order.split_at(holdout_count);
    let available = rest.len();

    let sizes: Vec<usize> = match &spec.strategy {
        PartitionStrategy::RandomSizes { sizes } => {
            let need: usize = sizes.iter().sum();
            if need > available {
                return Err(DataError::InsufficientRows { need, have: available });
            }
            sizes.clone()
        }
        PartitionStrategy::Uniform { clients } => {
            if available < *clients {
                return Err(DataError::InsufficientRows { need: *clients, have: available });
            }
            let base = available / clients;
            let extra = available % clients;
            (0..*clients).map(|i| base + usize::from(i < extra)).collect()
        }
        PartitionStrategy::Dirichlet { clients, alpha } => {
            if available < *clients {
                return Err(DataError::InsufficientRows { need: *clients, have: available });
            }
            let mut rng = SplitMix64::new(mix(spec.seed, &[1]));
            let proportions = rng.dirichlet(*alpha, *clients);
            proportions_to_sizes(&proportions, available)
        }
    };

    let mut clients = Vec::with_capacity(sizes.len());
    let mut cursor = 0usize;
    for (i, &size) in sizes.iter().enumerate() {
        let slice = &rest[cursor..cursor + size];
        cursor += size;
        clients.push(dataset_from_indices(i as u64 + 1, pooled, slice));
    }
    let holdout = dataset_from_indices(0, pooled, holdout_idx);
    Ok((clients, holdout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureGen {
    Normal { mean: f64, std: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Mixture { components: Vec<MixComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl FeatureGen {
    fn sample(&self, rng: &mut SplitMix64) -> f64 {
        match self {
            FeatureGen::Normal { mean, std } => mean + std * rng.normal(),
            FeatureGen::Lognormal { mu, sigma } => (mu + sigma * rng.normal()).exp(),
            FeatureGen::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut pick = rng.next_f64() * total;
                for c in components {
                    pick -= c.weight;
                    if pick <= 0.0 {
                        return c.mean + c.std * rng.normal();
                    }
                }
                let last = components.last().expect("nonempty mixture");
                last.mean + last.std * rng.normal()
            }
        }
    }
}

/// Corruption applied to a poisoned client: additive lognormal tails inflate
/// feature skewness, and Gaussian label noise breaks the feature-target
/// relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub client_id: u64,
    pub label_noise: f64,
    pub skew_inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub schema: Schema,
    /// One generator per numeric predictor, in schema order.
    pub generators: Vec<FeatureGen>,
    pub target_weights: Vec<f64>,
    pub target_bias: f64,
    pub target_noise: f64,
    pub rows_per_client: Vec<usize>,
    pub holdout_rows: usize,
    /// Std of per-client per-feature mean offsets (covariate non-IID).
    pub client_shift_std: f64,
    pub poisoned: Vec<PoisonSpec>,
}

impl SyntheticSpec {
    /// Ten-client firewall-schema default: seven healthy clients above the
    /// 300-sample floor, three poisoned ones (heavy skew, label noise,
    /// undersized) matching the ids rejected in the published experiment.
    pub fn default_firewall() -> Self {
        SyntheticSpec {
            schema: Schema::firewall(),
            generators: vec![FeatureGen::Normal { mean: 0.0, std: 1.0 }; 8],
            target_weights: vec![0.8, -0.5, 0.3, 0.6, -0.4, 0.2, 0.5, -0.3],
            target_bias: 0.5,
            target_noise: 0.1,
            rows_per_client: vec![500, 400, 250, 250, 400, 330, 450, 400, 350, 250],
            holdout_rows: 600,
            client_shift_std: 0.3,
            poisoned: vec![
                PoisonSpec { client_id: 3, label_noise: 3.0, skew_inflation: 3.0 },
                PoisonSpec { client_id: 4, label_noise: 3.0, skew_inflation: 3.0 },
                PoisonSpec { client_id: 10, label_noise: 3.0, skew_inflation: 3.0 },
            ],
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let predictors = self.schema.numeric_predictors().len();
        if self.generators.len() != predictors {
            return Err(DataError::InvalidSpec(format!(
                "{} generators for {predictors} predictors",
                self.generators.len()
            )));
        }
        if self.target_weights.len() != predictors {
            return Err(DataError::InvalidSpec(format!(
                "{} target weights for {predictors} predictors",
                self.target_weights.len()
            )));
        }
        if self.rows_per_client.contains(&0) {
            return Err(DataError::InvalidSpec("every client needs at least one row".into()));
        }
        if self.schema.target_column().is_none() {
            return Err(DataError::InvalidSpec("target must be numeric".into()));
        }
        Ok(())
    }

    fn poison_for(&self, client_id: u64) -> Option<&PoisonSpec> {
        self.poisoned.iter().find(|p| p.client_id == client_id)
    }
}

const EXP_HALF: f64 = 1.648_721_270_700_128_2; // E[exp(z)], z ~ N(0,1)

fn synth_rows(
    spec: &SyntheticSpec,
    seed: u64,
    stream: u64,
    count: usize,
    shifted: bool,
    poison: Option<&PoisonSpec>,
) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(mix(seed, &[stream]));
    let predictors = spec.schema.numeric_predictors();
    let target_col = spec.schema.target_column().expect("validated");
    let width = spec.schema.width();
    let shifts: Vec<f64> = predictors
        .iter()
        .map(|_| if shifted { spec.client_shift_std * rng.normal() } else { 0.0 })
        .collect();
    (0..count)
        .map(|_| {
            let clean: Vec<f64> = spec
                .generators
                .iter()
                .zip(&shifts)
                .map(|(g, s)| g.sample(&mut rng) + s)
                .collect();
            let mut target = spec.target_bias
                + clean
                    .iter()
                    .zip(&spec.target_weights)
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
                + spec.target_noise * rng.normal();
            let mut features = clean;
            if let Some(p) = poison {
                for x in &mut features {
                    *x += p.skew_inflation * (rng.normal().exp() - EXP_HALF);
                }
                target += p.label_noise * rng.normal();
            }
            let mut row = vec![0.0; width];
            for ((col, _), value) in predictors.iter().zip(features) {
                row[*col] = value;
            }
            row[target_col] = target;
            row
        })
        .collect()
}

/// Deterministic synthetic federation: client datasets plus a clean holdout
/// (id 0) drawn from the unshifted distribution.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(Vec<ClientDataset>, ClientDataset), DataError> {
    spec.validate()?;
    let clients: Vec<ClientDataset> = spec
        .rows_per_client
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let client_id = i as u64 + 1;
            let rows = synth_rows(spec, seed, client_id, count, true, spec.poison_for(client_id));
            ClientDataset::new(client_id, spec.schema.clone(), rows)
        })
        .collect();
    let holdout_rows = synth_rows(spec, seed, 0, spec.holdout_rows, false, None);
    let holdout = ClientDataset::new(0, spec.schema.clone(), holdout_rows);
    Ok((clients, holdout))
}
