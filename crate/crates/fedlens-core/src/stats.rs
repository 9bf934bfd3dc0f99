//! Mergeable statistical kernels executed locally on each client: counts,
//! central moments, skewness, extrema, histograms.
//!
//! [`MomentSketch`] carries (n, mean, M2, M3) and recombines exactly across
//! partitions, which is what lets the server answer pooled moment queries
//! from abstracted per-client summaries alone.

// `!(a < b)` is the NaN-rejecting form of the bound checks below.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("non-finite input value {0}")]
    NonFiniteInput(f64),
    #[error("need at least 3 samples for skewness, have {0}")]
    InsufficientSamples(u64),
    #[error("zero variance: skewness undefined")]
    DegenerateDistribution,
    #[error("invalid histogram range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
}

/// Mergeable accumulator of count, mean, and second/third central moment
/// sums. One-pass updates keep the recurrence stable for large offsets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentSketch {
    pub n: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    /// Sum of cubed deviations from the mean.
    pub m3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewnessConvention {
    /// Biased moment coefficient g1 = (M3/n) / (M2/n)^(3/2).
    MomentG1,
    /// Adjusted Fisher-Pearson: g1 * sqrt(n(n-1)) / (n-2).
    Adjusted,
}

impl MomentSketch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(x: f64) -> Result<Self, StatsError> {
        let mut s = Self::new();
        s.accumulate(x)?;
        Ok(s)
    }

    pub fn from_values(values: &[f64]) -> Result<Self, StatsError> {
        let mut s = Self::new();
        for &x in values {
            s.accumulate(x)?;
        }
        Ok(s)
    }

    /// One-pass central-moment update.
    pub fn accumulate(&mut self, x: f64) -> Result<(), StatsError> {
        if !x.is_finite() {
            return Err(StatsError::NonFiniteInput(x));
        }
        let n0 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let term = delta * delta_n * n0;
        self.m3 += term * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term;
        self.mean += delta_n;
        Ok(())
    }

    /// Combines two sketches into the sketch of the concatenated samples.
    pub fn merge(a: &Self, b: &Self) -> Self {
        if a.n == 0 {
            return *b;
        }
        if b.n == 0 {
            return *a;
        }
        let na = a.n as f64;
        let nb = b.n as f64;
        let n = na + nb;
        let delta = b.mean - a.mean;
        let mean = (na * a.mean + nb * b.mean) / n;
        let m2 = a.m2 + b.m2 + delta * delta * na * nb / n;
        let m3 = a.m3
            + b.m3
            + delta.powi(3) * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * b.m2 - nb * a.m2) / n;
        MomentSketch { n: a.n + b.n, mean, m2, m3 }
    }

    pub fn variance_population(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    pub fn variance_sample(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    pub fn skewness(&self, convention: SkewnessConvention) -> Result<f64, StatsError> {
        if self.n < 3 {
            return Err(StatsError::InsufficientSamples(self.n));
        }
        if self.m2 <= 0.0 {
            return Err(StatsError::DegenerateDistribution);
        }
        let n = self.n as f64;
        let g1 = (self.m3 / n) / (self.m2 / n).powf(1.5);
        Ok(match convention {
            SkewnessConvention::MomentG1 => g1,
            SkewnessConvention::Adjusted => g1 * (n * (n - 1.0)).sqrt() / (n - 2.0),
        })
    }
}

/// Per-feature summary: moments plus extrema. Extrema are not moments, so
/// they merge by elementwise min/max rather than through the sketch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: String,
    pub sketch: MomentSketch,
    pub min: f64,
    pub max: f64,
}

impl FeatureStats {
    pub fn from_values(feature: impl Into<String>, values: &[f64]) -> Result<Self, StatsError> {
        let sketch = MomentSketch::from_values(values)?;
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            min = min.min(v);
            max = max.max(v);
        }
        Ok(FeatureStats {
            feature: feature.into(),
            sketch,
            min,
            max,
        })
    }

    pub fn merge(a: &Self, b: &Self) -> Self {
        FeatureStats {
            feature: a.feature.clone(),
            sketch: MomentSketch::merge(&a.sketch, &b.sketch),
            min: a.min.min(b.min),
            max: a.max.max(b.max),
        }
    }
}

/// Histogram bin counts plus overflow buckets for out-of-range values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramCounts {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

/// Buckets values over `[lo, hi]` into `bins` equal-width bins; `hi` lands
/// in the last bin, out-of-range values in the overflow counters.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<HistogramCounts, StatsError> {
    if bins == 0 || !(lo < hi) {
        return Err(StatsError::InvalidRange { lo, hi });
    }
    let mut counts = HistogramCounts {
        lo,
        hi,
        bins: vec![0; bins],
        below: 0,
        above: 0,
    };
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo {
            counts.below += 1;
        } else if v > hi {
            counts.above += 1;
        } else {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts.bins[idx] += 1;
        }
    }
    Ok(counts)
}
