//! The federated analytics query engine.
//!
//! A [`QuerySpec`] names a kernel, an aggregation method, and a cohort; every
//! cohort client runs the kernel over its local rows and uploads an
//! abstracted [`ResponsePayload`]. The server combines payloads with the
//! spec's aggregation method (cumulative collection, addition, or averaging)
//! and answers with a [`QueryResult`]. Raw rows never enter any payload.

pub mod kernels;
pub mod pca;
pub mod secure;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClientDataset;
use crate::parallel::par_map;
use crate::stats::{FeatureStats, HistogramCounts, SkewnessConvention, StatsError};

pub use pca::{pca_from_gram, symmetric_eigen, GramContribution, PcaResult};

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("client {0} is not registered")]
    UnknownClient(u64),
    #[error("query timed out: {responded} of {cohort} cohort members responded")]
    QueryTimeout { responded: usize, cohort: usize },
    #[error("aggregation {aggregation} is incompatible with kernel {kernel}")]
    IncompatibleAggregation { kernel: String, aggregation: String },
    #[error("kernel {kernel} does not belong to category {category}")]
    CategoryMismatch { kernel: String, category: String },
    #[error("response payload shapes are not homogeneous")]
    ShapeMismatch,
    #[error("weighted average over all-zero weights")]
    ZeroTotalWeight,
    #[error("attribute {0:?} is not categorical")]
    NonCategoricalAttribute(String),
    #[error("unknown numeric feature {0:?}")]
    UnknownFeature(String),
    #[error("component count {k} outside 1..={dim}")]
    InvalidComponents { k: usize, dim: usize },
    #[error("need at least {need} pooled samples, have {have}")]
    InsufficientSamples { have: u64, need: u64 },
    #[error("secure aggregation needs a cohort of at least 2, got {0}")]
    CohortTooSmall(usize),
    #[error("masked client(s) {missing:?} did not respond; no dropout recovery")]
    DropoutUnsupported { missing: Vec<u64> },
    #[error("kernel payload cannot be masked for secure aggregation")]
    SecureKernelUnsupported,
    #[error("gram contribution is not symmetric")]
    AsymmetricGram,
    #[error("gram contribution is not positive semidefinite")]
    IndefiniteGram,
    #[error("client {client_id} failed: {message}")]
    ClientFailure { client_id: u64, message: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryCategory {
    StatisticalTesting,
    Set,
    MatrixTransformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    UnionCardinality,
    IntersectionCardinality,
    ExactSet,
}

/// Which features a kernel touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSelection {
    All,
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Count,
    FeatureCount,
    Mean { feature: String },
    Variance { feature: String },
    Min { feature: String },
    Max { feature: String },
    Histogram { feature: String, bins: usize, lo: f64, hi: f64 },
    /// Mergeable per-feature moment/extrema bundles.
    Moments { features: FeatureSelection },
    /// Sample count, feature count, and per-feature skewness in one row.
    StatsProfile { convention: SkewnessConvention },
    SetCardinality { attribute: String, mode: SetMode },
    GramForPca { components: usize },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Count => "count",
            Kernel::FeatureCount => "feature_count",
            Kernel::Mean { .. } => "mean",
            Kernel::Variance { .. } => "variance",
            Kernel::Min { .. } => "min",
            Kernel::Max { .. } => "max",
            Kernel::Histogram { .. } => "histogram",
            Kernel::Moments { .. } => "moments",
            Kernel::StatsProfile { .. } => "stats_profile",
            Kernel::SetCardinality { .. } => "set_cardinality",
            Kernel::GramForPca { .. } => "gram_for_pca",
        }
    }

    pub fn category(&self) -> QueryCategory {
        match self {
            Kernel::SetCardinality { .. } => QueryCategory::Set,
            Kernel::GramForPca { .. } => QueryCategory::MatrixTransformation,
            _ => QueryCategory::StatisticalTesting,
        }
    }

    fn allows(&self, aggregation: &Aggregation) -> bool {
        use Aggregation::*;
        match self {
            Kernel::Count | Kernel::FeatureCount | Kernel::Histogram { .. } => {
                matches!(aggregation, Cumulative | Addition | Average { .. })
            }
            Kernel::Mean { .. } | Kernel::Variance { .. } => {
                matches!(aggregation, Cumulative | Average { .. })
            }
            Kernel::Min { .. } | Kernel::Max { .. } => matches!(aggregation, Cumulative),
            Kernel::Moments { .. } => matches!(aggregation, Cumulative | Addition),
            Kernel::StatsProfile { .. } => matches!(aggregation, Cumulative),
            Kernel::SetCardinality { .. } => matches!(aggregation, Cumulative),
            Kernel::GramForPca { .. } => matches!(aggregation, Addition),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Collect every client's payload, in cohort order.
    Cumulative,
    /// Elementwise sum (moment bundles merge, hashed sets union).
    Addition,
    /// Elementwise mean, optionally weighted by client sample counts.
    Average { weighted: bool },
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Cumulative => "cumulative",
            Aggregation::Addition => "addition",
            Aggregation::Average { weighted: true } => "average_weighted",
            Aggregation::Average { weighted: false } => "average_unweighted",
        }
    }
}

/// A server-issued query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub category: QueryCategory,
    pub kernel: Kernel,
    pub aggregation: Aggregation,
    pub cohort: Vec<u64>,
    pub secure: bool,
}

impl QuerySpec {
    /// Checks kernel/category and kernel/aggregation compatibility, plus the
    /// linearity requirement of secure queries.
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.kernel.category() != self.category {
            return Err(QueryError::CategoryMismatch {
                kernel: self.kernel.name().into(),
                category: format!("{:?}", self.category),
            });
        }
        if !self.kernel.allows(&self.aggregation) {
            return Err(QueryError::IncompatibleAggregation {
                kernel: self.kernel.name().into(),
                aggregation: self.aggregation.name().into(),
            });
        }
        if self.secure {
            if matches!(self.aggregation, Aggregation::Cumulative) {
                return Err(QueryError::IncompatibleAggregation {
                    kernel: self.kernel.name().into(),
                    aggregation: "secure cumulative".into(),
                });
            }
            if !matches!(
                self.kernel,
                Kernel::Count | Kernel::Mean { .. } | Kernel::Variance { .. } | Kernel::Histogram { .. }
            ) {
                return Err(QueryError::SecureKernelUnsupported);
            }
        }
        Ok(())
    }
}

/// Per-client row of a statistical profile query: what Table-style selection
/// matrices are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStatsProfile {
    pub n_samples: u64,
    pub n_features: u64,
    /// (feature, skewness) in schema order.
    pub skewness: Vec<(String, f64)>,
}

/// Abstracted result uploaded by one client. Never contains raw rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponsePayload {
    Scalar(f64),
    Vector(Vec<f64>),
    /// Fixed-point vector carrying pairwise masks (secure queries).
    Masked(Vec<i64>),
    Histogram(HistogramCounts),
    Bundle(Vec<FeatureStats>),
    Profile(ClientStatsProfile),
    HashedSet(BTreeSet<String>),
    Gram(GramContribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub query_id: String,
    pub client_id: u64,
    pub n_samples: u64,
    pub payload: ResponsePayload,
}

/// The aggregated answer of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryValue {
    /// Per-client payloads in cohort order (cumulative aggregation).
    Collection(Vec<ResponsePayload>),
    Scalar(f64),
    Vector(Vec<f64>),
    Histogram(HistogramCounts),
    Bundle(Vec<FeatureStats>),
    SetCount(u64),
    HashedSet(BTreeSet<String>),
    Gram(GramContribution),
    Pca(PcaResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    /// Present only for cumulative aggregation.
    pub per_client: Option<BTreeMap<u64, ResponsePayload>>,
    pub aggregated: QueryValue,
    pub respondent_count: usize,
    /// Set when some cohort members were unreachable before the deadline.
    pub partial: bool,
}

/// Access to a query cohort: either in-process datasets or remote clients
/// behind the transport.
pub trait QueryCohort {
    fn epoch(&self) -> u64;
    fn registered(&self) -> Vec<u64>;
    /// Runs the kernel on every reachable cohort member. Clients missing
    /// from the output were unreachable; kernel failures abort.
    fn dispatch(&mut self, spec: &QuerySpec) -> Result<Vec<ClientResponse>, QueryError>;
}

/// In-process cohort over borrowed datasets; kernel execution fans out in
/// parallel across clients.
pub struct LocalCohort<'a> {
    datasets: Vec<&'a ClientDataset>,
    epoch: u64,
}

impl<'a> LocalCohort<'a> {
    pub fn new(datasets: impl IntoIterator<Item = &'a ClientDataset>, epoch: u64) -> Self {
        LocalCohort {
            datasets: datasets.into_iter().collect(),
            epoch,
        }
    }
}

impl QueryCohort for LocalCohort<'_> {
    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn registered(&self) -> Vec<u64> {
        self.datasets.iter().map(|d| d.client_id).collect()
    }

    fn dispatch(&mut self, spec: &QuerySpec) -> Result<Vec<ClientResponse>, QueryError> {
        let mut targets = Vec::with_capacity(spec.cohort.len());
        for &id in &spec.cohort {
            let ds = self
                .datasets
                .iter()
                .find(|d| d.client_id == id)
                .ok_or(QueryError::UnknownClient(id))?;
            targets.push(*ds);
        }
        let epoch = self.epoch;
        par_map(&targets, |ds| kernels::execute_kernel(ds, spec, epoch))
            .into_iter()
            .collect()
    }
}

/// Runs a query end to end: validate, dispatch, handle dropouts, aggregate.
pub fn execute_query(
    spec: &QuerySpec,
    cohort: &mut impl QueryCohort,
) -> Result<QueryResult, QueryError> {
    spec.validate()?;
    if spec.cohort.is_empty() {
        return Err(QueryError::EmptyCohort);
    }
    let registered = cohort.registered();
    for &id in &spec.cohort {
        if !registered.contains(&id) {
            return Err(QueryError::UnknownClient(id));
        }
    }
    if spec.secure && spec.cohort.len() < 2 {
        return Err(QueryError::CohortTooSmall(spec.cohort.len()));
    }

    let mut responses = cohort.dispatch(spec)?;
    let missing: Vec<u64> = spec
        .cohort
        .iter()
        .copied()
        .filter(|id| !responses.iter().any(|r| r.client_id == *id))
        .collect();
    if !missing.is_empty() {
        if spec.secure {
            return Err(QueryError::DropoutUnsupported { missing });
        }
        if matches!(spec.kernel, Kernel::GramForPca { .. }) || responses.is_empty() {
            return Err(QueryError::QueryTimeout {
                responded: responses.len(),
                cohort: spec.cohort.len(),
            });
        }
    }
    // Cohort order, independent of arrival order.
    responses.sort_by_key(|r| {
        spec.cohort
            .iter()
            .position(|&id| id == r.client_id)
            .unwrap_or(usize::MAX)
    });

    let aggregated = if spec.secure {
        secure_aggregate(spec, &responses)?
    } else {
        match &spec.kernel {
            Kernel::SetCardinality { mode, .. } => set_algebra(*mode, &responses)?,
            Kernel::GramForPca { components } => {
                let total = sum_grams(&responses)?;
                QueryValue::Pca(pca_from_gram(&total, *components)?)
            }
            _ => aggregate(spec.aggregation, &responses)?,
        }
    };

    let per_client = if matches!(spec.aggregation, Aggregation::Cumulative) {
        Some(
            responses
                .iter()
                .map(|r| (r.client_id, r.payload.clone()))
                .collect(),
        )
    } else {
        None
    };

    Ok(QueryResult {
        query_id: spec.query_id.clone(),
        per_client,
        aggregated,
        respondent_count: responses.len(),
        partial: !missing.is_empty(),
    })
}

/// Combines client payloads with one of the three aggregation methods.
pub fn aggregate(
    method: Aggregation,
    responses: &[ClientResponse],
) -> Result<QueryValue, QueryError> {
    if responses.is_empty() {
        return Err(QueryError::ShapeMismatch);
    }
    match method {
        Aggregation::Cumulative => Ok(QueryValue::Collection(
            responses.iter().map(|r| r.payload.clone()).collect(),
        )),
        Aggregation::Addition => add_payloads(responses),
        Aggregation::Average { weighted } => average_payloads(responses, weighted),
    }
}

fn add_payloads(responses: &[ClientResponse]) -> Result<QueryValue, QueryError> {
    use ResponsePayload as P;
    let mut iter = responses.iter();
    let first = iter.next().expect("nonempty").payload.clone();
    match first {
        P::Scalar(mut total) => {
            for r in iter {
                match &r.payload {
                    P::Scalar(x) => total += x,
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::Scalar(total))
        }
        P::Vector(mut total) => {
            for r in iter {
                match &r.payload {
                    P::Vector(v) if v.len() == total.len() => {
                        for (t, x) in total.iter_mut().zip(v) {
                            *t += x;
                        }
                    }
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::Vector(total))
        }
        P::Histogram(mut total) => {
            for r in iter {
                match &r.payload {
                    P::Histogram(h)
                        if h.bins.len() == total.bins.len() && h.lo == total.lo && h.hi == total.hi =>
                    {
                        total.below += h.below;
                        total.above += h.above;
                        for (t, x) in total.bins.iter_mut().zip(&h.bins) {
                            *t += x;
                        }
                    }
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::Histogram(total))
        }
        P::Bundle(mut total) => {
            for r in iter {
                match &r.payload {
                    P::Bundle(b)
                        if b.len() == total.len()
                            && b.iter().zip(&total).all(|(x, t)| x.feature == t.feature) =>
                    {
                        for (t, x) in total.iter_mut().zip(b) {
                            *t = FeatureStats::merge(t, x);
                        }
                    }
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::Bundle(total))
        }
        P::HashedSet(mut total) => {
            for r in iter {
                match &r.payload {
                    P::HashedSet(s) => total.extend(s.iter().cloned()),
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::HashedSet(total))
        }
        P::Gram(_) => {
            let total = sum_grams(responses)?;
            Ok(QueryValue::Gram(total))
        }
        P::Profile(_) | P::Masked(_) => Err(QueryError::IncompatibleAggregation {
            kernel: "non-additive payload".into(),
            aggregation: "addition".into(),
        }),
    }
}

fn average_payloads(responses: &[ClientResponse], weighted: bool) -> Result<QueryValue, QueryError> {
    use ResponsePayload as P;
    let weights: Vec<f64> = responses
        .iter()
        .map(|r| if weighted { r.n_samples as f64 } else { 1.0 })
        .collect();
    let total_weight: f64 = weights.iter().sum();
    if total_weight == 0.0 {
        return Err(QueryError::ZeroTotalWeight);
    }
    match &responses[0].payload {
        P::Scalar(_) => {
            let mut acc = 0.0;
            for (r, w) in responses.iter().zip(&weights) {
                match &r.payload {
                    P::Scalar(x) => acc += w * x,
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            Ok(QueryValue::Scalar(acc / total_weight))
        }
        P::Vector(first) => {
            let mut acc = vec![0.0; first.len()];
            for (r, w) in responses.iter().zip(&weights) {
                match &r.payload {
                    P::Vector(v) if v.len() == acc.len() => {
                        for (a, x) in acc.iter_mut().zip(v) {
                            *a += w * x;
                        }
                    }
                    _ => return Err(QueryError::ShapeMismatch),
                }
            }
            for a in &mut acc {
                *a /= total_weight;
            }
            Ok(QueryValue::Vector(acc))
        }
        P::Histogram(_) => {
            // Average of counts is rarely meaningful; divide elementwise all
            // the same so the method stays total on numeric payloads.
            let summed = add_payloads(responses)?;
            match summed {
                QueryValue::Histogram(h) => {
                    let k = responses.len() as f64;
                    let bins: Vec<f64> = h.bins.iter().map(|&b| b as f64 / k).collect();
                    let mut v = vec![h.below as f64 / k];
                    v.extend(bins);
                    v.push(h.above as f64 / k);
                    Ok(QueryValue::Vector(v))
                }
                _ => Err(QueryError::ShapeMismatch),
            }
        }
        _ => Err(QueryError::IncompatibleAggregation {
            kernel: "non-numeric payload".into(),
            aggregation: if weighted { "average_weighted" } else { "average_unweighted" }.into(),
        }),
    }
}

fn sum_grams(responses: &[ClientResponse]) -> Result<GramContribution, QueryError> {
    let mut total: Option<GramContribution> = None;
    for r in responses {
        let g = match &r.payload {
            ResponsePayload::Gram(g) => g,
            _ => return Err(QueryError::ShapeMismatch),
        };
        g.validate()?;
        total = Some(match total {
            None => g.clone(),
            Some(t) => t.add(g)?,
        });
    }
    total.ok_or(QueryError::ShapeMismatch)
}

fn set_algebra(mode: SetMode, responses: &[ClientResponse]) -> Result<QueryValue, QueryError> {
    let mut sets = Vec::with_capacity(responses.len());
    for r in responses {
        match &r.payload {
            ResponsePayload::HashedSet(s) => sets.push(s),
            _ => return Err(QueryError::ShapeMismatch),
        }
    }
    let union: BTreeSet<String> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    match mode {
        SetMode::UnionCardinality => Ok(QueryValue::SetCount(union.len() as u64)),
        SetMode::ExactSet => Ok(QueryValue::HashedSet(union)),
        SetMode::IntersectionCardinality => {
            let count = union
                .iter()
                .filter(|digest| sets.iter().all(|s| s.contains(*digest)))
                .count();
            Ok(QueryValue::SetCount(count as u64))
        }
    }
}

/// Server-side half of a masked query: wrapping-sums the masked fixed-point
/// vectors (the pairwise masks telescope away exactly), decodes, and divides
/// for averages.
pub fn secure_aggregate(
    spec: &QuerySpec,
    responses: &[ClientResponse],
) -> Result<QueryValue, QueryError> {
    if responses.len() < 2 {
        return Err(QueryError::CohortTooSmall(responses.len()));
    }
    let masked: Vec<Vec<i64>> = responses
        .iter()
        .map(|r| match &r.payload {
            ResponsePayload::Masked(v) => Ok(v.clone()),
            _ => Err(QueryError::ShapeMismatch),
        })
        .collect::<Result<_, _>>()?;
    let mut sum = secure::unmask_sum(&masked).ok_or(QueryError::ShapeMismatch)?;
    match spec.aggregation {
        Aggregation::Addition => Ok(QueryValue::Vector(sum)),
        Aggregation::Average { weighted } => {
            let total: f64 = if weighted {
                responses.iter().map(|r| r.n_samples as f64).sum()
            } else {
                responses.len() as f64
            };
            if total == 0.0 {
                return Err(QueryError::ZeroTotalWeight);
            }
            for s in &mut sum {
                *s /= total;
            }
            Ok(QueryValue::Vector(sum))
        }
        Aggregation::Cumulative => Err(QueryError::IncompatibleAggregation {
            kernel: spec.kernel.name().into(),
            aggregation: "secure cumulative".into(),
        }),
    }
}

/// Set query over a categorical attribute's salted-hash digests.
pub fn set_query(
    query_id: impl Into<String>,
    attribute: impl Into<String>,
    mode: SetMode,
    cohort_ids: Vec<u64>,
    cohort: &mut impl QueryCohort,
) -> Result<QueryResult, QueryError> {
    let spec = QuerySpec {
        query_id: query_id.into(),
        category: QueryCategory::Set,
        kernel: Kernel::SetCardinality {
            attribute: attribute.into(),
            mode,
        },
        aggregation: Aggregation::Cumulative,
        cohort: cohort_ids,
        secure: false,
    };
    execute_query(&spec, cohort)
}

/// Matrix-transformation query: top-k pooled principal components from
/// additively aggregated Gram contributions.
pub fn federated_pca(
    query_id: impl Into<String>,
    components: usize,
    cohort_ids: Vec<u64>,
    cohort: &mut impl QueryCohort,
) -> Result<PcaResult, QueryError> {
    let spec = QuerySpec {
        query_id: query_id.into(),
        category: QueryCategory::MatrixTransformation,
        kernel: Kernel::GramForPca { components },
        aggregation: Aggregation::Addition,
        cohort: cohort_ids,
        secure: false,
    };
    match execute_query(&spec, cohort)?.aggregated {
        QueryValue::Pca(result) => Ok(result),
        _ => Err(QueryError::ShapeMismatch),
    }
}

#[cfg(test)]
mod tests;
