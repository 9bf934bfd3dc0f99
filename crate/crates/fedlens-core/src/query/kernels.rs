//! Client-side kernel execution: everything here runs against local rows and
//! emits only abstracted payloads.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::model::{ClientDataset, FeatureKind};
use crate::stats::{histogram, FeatureStats, MomentSketch};

use super::secure::mask_payload;
use super::{
    Aggregation, ClientResponse, ClientStatsProfile, GramContribution, Kernel, QueryError,
    QuerySpec, ResponsePayload,
};

/// Salted digest of one categorical value; the federation epoch is the salt,
/// so digests are only comparable within an epoch.
pub fn hash_value(epoch: u64, value: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(epoch.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(value.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn column(ds: &ClientDataset, feature: &str) -> Result<Vec<f64>, QueryError> {
    let col = ds
        .schema
        .column(feature)
        .ok_or_else(|| QueryError::UnknownFeature(feature.to_string()))?;
    Ok(ds.column_values(col))
}

fn selected_features<'a>(
    ds: &'a ClientDataset,
    selection: &'a super::FeatureSelection,
) -> Result<Vec<&'a str>, QueryError> {
    match selection {
        super::FeatureSelection::All => Ok(ds.schema.numeric_features()),
        super::FeatureSelection::Named(names) => names
            .iter()
            .map(|n| {
                ds.schema
                    .column(n)
                    .map(|_| n.as_str())
                    .ok_or_else(|| QueryError::UnknownFeature(n.clone()))
            })
            .collect(),
    }
}

/// Executes one query kernel over a client's local dataset.
pub fn execute_kernel(
    ds: &ClientDataset,
    spec: &QuerySpec,
    epoch: u64,
) -> Result<ClientResponse, QueryError> {
    let payload = match &spec.kernel {
        Kernel::Count => ResponsePayload::Scalar(ds.n_samples() as f64),
        Kernel::FeatureCount => ResponsePayload::Scalar(ds.schema.width() as f64),
        Kernel::Mean { feature } => {
            let sketch = MomentSketch::from_values(&column(ds, feature)?)?;
            ResponsePayload::Scalar(sketch.mean)
        }
        Kernel::Variance { feature } => {
            let sketch = MomentSketch::from_values(&column(ds, feature)?)?;
            ResponsePayload::Scalar(sketch.variance_sample())
        }
        Kernel::Min { feature } => {
            let stats = FeatureStats::from_values(feature.clone(), &column(ds, feature)?)?;
            ResponsePayload::Scalar(stats.min)
        }
        Kernel::Max { feature } => {
            let stats = FeatureStats::from_values(feature.clone(), &column(ds, feature)?)?;
            ResponsePayload::Scalar(stats.max)
        }
        Kernel::Histogram { feature, bins, lo, hi } => {
            ResponsePayload::Histogram(histogram(&column(ds, feature)?, *bins, *lo, *hi)?)
        }
        Kernel::Moments { features } => {
            let names = selected_features(ds, features)?;
            let mut bundle = Vec::with_capacity(names.len());
            for name in names {
                bundle.push(FeatureStats::from_values(name, &column(ds, name)?)?);
            }
            ResponsePayload::Bundle(bundle)
        }
        Kernel::StatsProfile { convention } => {
            let mut skewness = Vec::with_capacity(ds.schema.width());
            for name in ds.schema.numeric_features() {
                let sketch = MomentSketch::from_values(&column(ds, name)?)?;
                skewness.push((name.to_string(), sketch.skewness(*convention)?));
            }
            ResponsePayload::Profile(ClientStatsProfile {
                n_samples: ds.n_samples() as u64,
                n_features: ds.schema.width() as u64,
                skewness,
            })
        }
        Kernel::SetCardinality { attribute, .. } => {
            if ds.schema.kind(attribute) != Some(FeatureKind::Categorical) {
                return Err(QueryError::NonCategoricalAttribute(attribute.clone()));
            }
            let digests: BTreeSet<String> = ds
                .categorical_values
                .get(attribute)
                .map(|values| values.iter().map(|v| hash_value(epoch, v)).collect())
                .unwrap_or_default();
            ResponsePayload::HashedSet(digests)
        }
        Kernel::GramForPca { .. } => {
            let predictors = ds.schema.numeric_predictors();
            let cols: Vec<usize> = predictors.iter().map(|(c, _)| *c).collect();
            let projected: Vec<Vec<f64>> = ds
                .rows
                .iter()
                .map(|row| cols.iter().map(|&c| row[c]).collect())
                .collect();
            ResponsePayload::Gram(GramContribution::from_rows(
                cols.len(),
                projected.iter().map(|r| r.as_slice()),
            ))
        }
    };

    let payload = if spec.secure {
        mask_response(ds, spec, epoch, payload)?
    } else {
        payload
    };

    Ok(ClientResponse {
        query_id: spec.query_id.clone(),
        client_id: ds.client_id,
        n_samples: ds.n_samples() as u64,
        payload,
    })
}

fn mask_response(
    ds: &ClientDataset,
    spec: &QuerySpec,
    epoch: u64,
    payload: ResponsePayload,
) -> Result<ResponsePayload, QueryError> {
    let mut values = match payload {
        ResponsePayload::Scalar(x) => vec![x],
        ResponsePayload::Vector(v) => v,
        ResponsePayload::Histogram(h) => {
            let mut v = vec![h.below as f64];
            v.extend(h.bins.iter().map(|&b| b as f64));
            v.push(h.above as f64);
            v
        }
        _ => return Err(QueryError::SecureKernelUnsupported),
    };
    // Weighted averages are linear: clients pre-scale by their own sample
    // count so the server can divide the masked sum by the total weight.
    if matches!(spec.aggregation, Aggregation::Average { weighted: true }) {
        let w = ds.n_samples() as f64;
        for v in &mut values {
            *v *= w;
        }
    }
    let masked = mask_payload(&values, ds.client_id, &spec.cohort, epoch, &spec.query_id)
        .ok_or(QueryError::SecureKernelUnsupported)?;
    Ok(ResponsePayload::Masked(masked))
}
