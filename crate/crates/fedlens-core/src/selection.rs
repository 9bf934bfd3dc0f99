//! Skewness-based client selection: turns the cumulative statistics query
//! into a per-client analytics matrix and applies eligibility criteria to
//! pick the training cohort.

// `!(a < b)` is the NaN-rejecting form of the bound checks below.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query::{QueryResult, ResponsePayload};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("query result carries no per-client stats profiles")]
    MissingKernelOutputs,
    #[error("selection matrix is empty")]
    EmptyMatrix,
    #[error("criteria bounds invalid: low {low} must be below high {high}")]
    InvalidBounds { low: f64, high: f64 },
}

/// One analytics row per queried client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub client_id: u64,
    pub n_samples: u64,
    pub n_features: u64,
    /// (feature, skewness) in schema order; length equals `n_features`.
    pub skew: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    pub rows: Vec<SelectionRow>,
}

/// Which features the skew bounds apply to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFilter {
    #[default]
    All,
    Named(Vec<String>),
}

/// Eligibility thresholds: inclusive sample floor, strict skew interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCriteria {
    pub min_samples: u64,
    pub skew_low: f64,
    pub skew_high: f64,
    #[serde(default)]
    pub features_considered: FeatureFilter,
}

impl SelectionCriteria {
    pub fn new(min_samples: u64, skew_low: f64, skew_high: f64) -> Result<Self, SelectionError> {
        if !(skew_low < skew_high) {
            return Err(SelectionError::InvalidBounds { low: skew_low, high: skew_high });
        }
        Ok(SelectionCriteria {
            min_samples,
            skew_low,
            skew_high,
            features_considered: FeatureFilter::All,
        })
    }
}

/// Why a client failed a criterion; every reason is checkable against the
/// matrix row it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TooFewSamples { n_samples: u64, min_samples: u64 },
    SkewOutOfRange { feature: String, skewness: f64, low: f64, high: f64 },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::TooFewSamples { n_samples, min_samples } => {
                write!(f, "n_samples {n_samples} < {min_samples}")
            }
            Rejection::SkewOutOfRange { feature, skewness, low, high } => {
                write!(f, "{feature} skewness {skewness} outside ({low}, {high})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionVerdict {
    pub client_id: u64,
    pub selected: bool,
    pub reasons: Vec<Rejection>,
}

/// Builds the analytics matrix from a cumulative stats-profile query result,
/// one row per responding client in client-id order.
pub fn build_selection_matrix(result: &QueryResult) -> Result<SelectionMatrix, SelectionError> {
    let per_client = result
        .per_client
        .as_ref()
        .ok_or(SelectionError::MissingKernelOutputs)?;
    let mut rows = Vec::with_capacity(per_client.len());
    for (&client_id, payload) in per_client {
        match payload {
            ResponsePayload::Profile(p) => rows.push(SelectionRow {
                client_id,
                n_samples: p.n_samples,
                n_features: p.n_features,
                skew: p.skewness.clone(),
            }),
            _ => return Err(SelectionError::MissingKernelOutputs),
        }
    }
    if rows.is_empty() {
        return Err(SelectionError::MissingKernelOutputs);
    }
    Ok(SelectionMatrix { rows })
}

/// Applies the criteria to every matrix row.
///
/// A client is selected iff its sample count clears the floor and every
/// considered feature's skewness lies strictly inside the open interval.
/// Verdicts come back in client-id order with one reason per violated
/// criterion; an empty selection is a legal outcome.
pub fn select(
    matrix: &SelectionMatrix,
    criteria: &SelectionCriteria,
) -> Result<Vec<SelectionVerdict>, SelectionError> {
    if matrix.rows.is_empty() {
        return Err(SelectionError::EmptyMatrix);
    }
    if !(criteria.skew_low < criteria.skew_high) {
        return Err(SelectionError::InvalidBounds {
            low: criteria.skew_low,
            high: criteria.skew_high,
        });
    }
    let mut verdicts: Vec<SelectionVerdict> = matrix
        .rows
        .iter()
        .map(|row| {
            let mut reasons = Vec::new();
            if row.n_samples < criteria.min_samples {
                reasons.push(Rejection::TooFewSamples {
                    n_samples: row.n_samples,
                    min_samples: criteria.min_samples,
                });
            }
            for (feature, skewness) in &row.skew {
                let considered = match &criteria.features_considered {
                    FeatureFilter::All => true,
                    FeatureFilter::Named(names) => names.contains(feature),
                };
                if considered && !(*skewness > criteria.skew_low && *skewness < criteria.skew_high) {
                    reasons.push(Rejection::SkewOutOfRange {
                        feature: feature.clone(),
                        skewness: *skewness,
                        low: criteria.skew_low,
                        high: criteria.skew_high,
                    });
                }
            }
            SelectionVerdict {
                client_id: row.client_id,
                selected: reasons.is_empty(),
                reasons,
            }
        })
        .collect();
    verdicts.sort_by_key(|v| v.client_id);
    Ok(verdicts)
}

pub fn selected_ids(verdicts: &[SelectionVerdict]) -> Vec<u64> {
    verdicts
        .iter()
        .filter(|v| v.selected)
        .map(|v| v.client_id)
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The published ten-client firewall analytics matrix: sample counts and
    /// per-feature skewness, with the nine feature columns in schema order.
    pub const FEATURES: [&str; 9] = [
        "CPUUTP", "MEMUTP", "RTT", "MIR", "CPU", "MEM", "In_RX", "Out_TX", "LINK",
    ];

    pub const N_SAMPLES: [u64; 10] = [895, 400, 100, 120, 400, 330, 580, 780, 500, 290];

    pub const SKEWNESS: [[f64; 9]; 10] = [
        [-0.7097, 0.1806, -0.5809, 0.8565, 0.3008, -0.0123, -0.0969, -0.1929, -0.0415],
        [-0.7926, 0.1822, -0.4863, 0.9215, 0.3448, 0.0325, -0.0829, -0.1818, -0.0623],
        [-1.0135, 0.0411, -0.3778, 1.0952, 0.4609, 0.1288, 0.039, 0.1132, 0.1107],
        [-0.6359, 0.0419, -0.6004, 1.0823, 0.2961, -0.1357, -0.1723, -0.0749, -0.216],
        [-0.6633, 0.1731, -0.5606, 0.9464, 0.3187, 0.0603, -0.0401, -0.2112, -0.1681],
        [-0.7884, 0.1024, -0.5401, 0.786, 0.3227, 0.0534, -0.1275, -0.1296, -0.0588],
        [-0.7906, 0.1078, -0.5066, 0.8427, 0.3451, 0.0284, -0.0409, -0.1009, -0.0317],
        [-0.715, 0.1878, -0.6041, 0.8647, 0.2915, -0.0274, -0.1168, -0.1914, -0.0407],
        [-0.666, 0.2334, -0.6553, 0.8505, 0.2909, -0.0154, -0.0884, -0.0907, -0.074],
        [-0.8571, 0.2951, -0.4723, 1.002, 0.4308, -0.1155, -0.0466, -0.2576, -0.0057],
    ];

    pub fn firewall_matrix() -> SelectionMatrix {
        let rows = (0..10)
            .map(|i| SelectionRow {
                client_id: i as u64 + 1,
                n_samples: N_SAMPLES[i],
                n_features: 9,
                skew: FEATURES
                    .iter()
                    .zip(SKEWNESS[i].iter())
                    .map(|(f, &s)| (f.to_string(), s))
                    .collect(),
            })
            .collect();
        SelectionMatrix { rows }
    }

    pub fn published_criteria() -> SelectionCriteria {
        SelectionCriteria::new(300, -1.0, 1.0).unwrap()
    }
}
