//! Shared domain types: feature schemas, client-held datasets, and client
//! identity.
//!
//! [`ClientDataset`] deliberately does not implement `Serialize`: raw rows
//! must never be embeddable in a protocol message. Everything that leaves a
//! client goes through the abstracted response payloads in [`crate::query`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("row {row} has width {got}, schema expects {want}")]
    SchemaMismatch { row: usize, got: usize, want: usize },
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("target {0:?} is not a schema feature")]
    MissingTarget(String),
    #[error("schema has no numeric predictor")]
    NoNumericPredictor,
    #[error("categorical values listed for unknown or non-categorical feature {0:?}")]
    UnknownCategorical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// Ordered feature list plus the regression target.
///
/// The numeric features define the column layout of dataset rows, in schema
/// order; categorical features carry no row column and are only reachable
/// through set queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    features: Vec<(String, FeatureKind)>,
    target: String,
}

impl Schema {
    pub fn new(
        features: Vec<(String, FeatureKind)>,
        target: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let target = target.into();
        let mut seen = BTreeSet::new();
        for (name, _) in &features {
            if !seen.insert(name.clone()) {
                return Err(ModelError::DuplicateFeature(name.clone()));
            }
        }
        if !features.iter().any(|(name, _)| *name == target) {
            return Err(ModelError::MissingTarget(target));
        }
        let schema = Schema { features, target };
        if schema.numeric_predictors().is_empty() {
            return Err(ModelError::NoNumericPredictor);
        }
        Ok(schema)
    }

    /// The nine-column VNF firewall profiling schema: eight predictors and
    /// the link-capacity target.
    pub fn firewall() -> Self {
        let names = [
            "CPUUTP", "MEMUTP", "RTT", "MIR", "CPU", "MEM", "In_RX", "Out_TX", "LINK",
        ];
        Schema::new(
            names
                .iter()
                .map(|n| (n.to_string(), FeatureKind::Numeric))
                .collect(),
            "LINK",
        )
        .expect("firewall schema is valid")
    }

    pub fn features(&self) -> &[(String, FeatureKind)] {
        &self.features
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    /// Numeric feature names in schema order; these are the row columns.
    pub fn numeric_features(&self) -> Vec<&str> {
        self.features
            .iter()
            .filter(|(_, k)| *k == FeatureKind::Numeric)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Row width: the number of numeric features.
    pub fn width(&self) -> usize {
        self.numeric_features().len()
    }

    /// Column index of a numeric feature within a row.
    pub fn column(&self, feature: &str) -> Option<usize> {
        self.numeric_features().iter().position(|n| *n == feature)
    }

    pub fn kind(&self, feature: &str) -> Option<FeatureKind> {
        self.features
            .iter()
            .find(|(n, _)| n == feature)
            .map(|(_, k)| *k)
    }

    /// Numeric features other than the target, as (column, name) pairs.
    pub fn numeric_predictors(&self) -> Vec<(usize, &str)> {
        self.numeric_features()
            .into_iter()
            .enumerate()
            .filter(|(_, n)| *n != self.target)
            .collect()
    }

    /// Column of the target within a row, when the target is numeric.
    pub fn target_column(&self) -> Option<usize> {
        self.column(&self.target)
    }
}

/// One client's private tabular partition.
///
/// Rows hold the numeric columns in schema order; categorical attribute
/// values are kept apart as string sets for set queries. Not serializable:
/// rows stay on the client.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: u64,
    pub schema: Schema,
    pub rows: Vec<Vec<f64>>,
    pub categorical_values: BTreeMap<String, BTreeSet<String>>,
}

impl ClientDataset {
    pub fn new(client_id: u64, schema: Schema, rows: Vec<Vec<f64>>) -> Self {
        ClientDataset {
            client_id,
            schema,
            rows,
            categorical_values: BTreeMap::new(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    /// Values of one numeric column.
    pub fn column_values(&self, col: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[col]).collect()
    }
}

/// Checks a dataset against its schema invariants.
pub fn validate_dataset(ds: ClientDataset) -> Result<ClientDataset, ModelError> {
    let want = ds.schema.width();
    for (i, row) in ds.rows.iter().enumerate() {
        if row.len() != want {
            return Err(ModelError::SchemaMismatch {
                row: i,
                got: row.len(),
                want,
            });
        }
    }
    for name in ds.categorical_values.keys() {
        if ds.schema.kind(name) != Some(FeatureKind::Categorical) {
            return Err(ModelError::UnknownCategorical(name.clone()));
        }
    }
    Ok(ds)
}

/// Registration-time identity of a federation member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDescriptor {
    pub client_id: u64,
    /// Intra/cross/multi-domain label; metadata only.
    pub domain_tag: String,
    pub address: String,
}
