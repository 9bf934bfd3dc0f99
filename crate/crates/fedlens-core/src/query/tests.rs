use std::collections::BTreeSet;

use super::kernels::hash_value;
use super::*;
use crate::model::{ClientDataset, FeatureKind, Schema};
use crate::rng::SplitMix64;

fn test_schema() -> Schema {
    Schema::new(
        vec![
            ("x".into(), FeatureKind::Numeric),
            ("tag".into(), FeatureKind::Categorical),
            ("y".into(), FeatureKind::Numeric),
        ],
        "y",
    )
    .unwrap()
}

fn two_col(id: u64, xs: &[f64]) -> ClientDataset {
    let rows = xs.iter().map(|&x| vec![x, 0.0]).collect();
    ClientDataset::new(id, test_schema(), rows)
}

fn with_tags(mut ds: ClientDataset, tags: &[&str]) -> ClientDataset {
    ds.categorical_values.insert(
        "tag".into(),
        tags.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>(),
    );
    ds
}

fn spec(kernel: Kernel, aggregation: Aggregation, cohort: Vec<u64>) -> QuerySpec {
    QuerySpec {
        query_id: "q-test".into(),
        category: kernel.category(),
        kernel,
        aggregation,
        cohort,
        secure: false,
    }
}

fn scalar_response(client_id: u64, n: u64, value: f64) -> ClientResponse {
    ClientResponse {
        query_id: "q".into(),
        client_id,
        n_samples: n,
        payload: ResponsePayload::Scalar(value),
    }
}

/// Cohort wrapper that silently swallows responses from selected clients,
/// standing in for unreachable links.
struct DroppingCohort<'a> {
    inner: LocalCohort<'a>,
    drop: Vec<u64>,
}

impl QueryCohort for DroppingCohort<'_> {
    fn epoch(&self) -> u64 {
        self.inner.epoch()
    }
    fn registered(&self) -> Vec<u64> {
        self.inner.registered()
    }
    fn dispatch(&mut self, spec: &QuerySpec) -> Result<Vec<ClientResponse>, QueryError> {
        Ok(self
            .inner
            .dispatch(spec)?
            .into_iter()
            .filter(|r| !self.drop.contains(&r.client_id))
            .collect())
    }
}

#[test]
fn count_addition_sums_client_counts() {
    let a = two_col(1, &[1.0, 2.0]);
    let b = two_col(2, &[5.0, 6.0, 7.0]);
    let mut cohort = LocalCohort::new([&a, &b], 0);
    let result =
        execute_query(&spec(Kernel::Count, Aggregation::Addition, vec![1, 2]), &mut cohort)
            .unwrap();
    assert_eq!(result.aggregated, QueryValue::Scalar(5.0));
    assert_eq!(result.respondent_count, 2);
    assert!(!result.partial);
    assert!(result.per_client.is_none());
}

#[test]
fn weighted_mean_matches_pooled_oracle() {
    let xs_a = [1.0, 2.0, 3.0];
    let xs_b = [10.0, 20.0];
    let pooled: Vec<f64> = xs_a.iter().chain(xs_b.iter()).copied().collect();
    let oracle = pooled.iter().sum::<f64>() / pooled.len() as f64;

    let a = two_col(1, &xs_a);
    let b = two_col(2, &xs_b);
    let mut cohort = LocalCohort::new([&a, &b], 0);
    let result = execute_query(
        &spec(
            Kernel::Mean { feature: "x".into() },
            Aggregation::Average { weighted: true },
            vec![1, 2],
        ),
        &mut cohort,
    )
    .unwrap();
    match result.aggregated {
        QueryValue::Scalar(got) => assert!((got - oracle).abs() < 1e-12),
        other => panic!("unexpected value {other:?}"),
    }
}

#[test]
fn aggregate_addition_scalars() {
    let responses = [
        scalar_response(1, 1, 1.0),
        scalar_response(2, 1, 2.0),
        scalar_response(3, 1, 3.0),
    ];
    assert_eq!(
        aggregate(Aggregation::Addition, &responses).unwrap(),
        QueryValue::Scalar(6.0)
    );
}

#[test]
fn aggregate_weighted_average_hand_oracle() {
    // Weights 1 and 3 realize the fractions 0.25 / 0.75: (2 + 3*4)/4 = 3.5.
    let responses = [scalar_response(1, 1, 2.0), scalar_response(2, 3, 4.0)];
    assert_eq!(
        aggregate(Aggregation::Average { weighted: true }, &responses).unwrap(),
        QueryValue::Scalar(3.5)
    );
}

#[test]
fn aggregate_zero_total_weight() {
    let responses = [scalar_response(1, 0, 2.0), scalar_response(2, 0, 4.0)];
    assert_eq!(
        aggregate(Aggregation::Average { weighted: true }, &responses),
        Err(QueryError::ZeroTotalWeight)
    );
}

#[test]
fn aggregate_shape_mismatch() {
    let responses = [
        ClientResponse {
            query_id: "q".into(),
            client_id: 1,
            n_samples: 1,
            payload: ResponsePayload::Vector(vec![1.0, 2.0]),
        },
        ClientResponse {
            query_id: "q".into(),
            client_id: 2,
            n_samples: 1,
            payload: ResponsePayload::Vector(vec![1.0]),
        },
    ];
    assert_eq!(
        aggregate(Aggregation::Addition, &responses),
        Err(QueryError::ShapeMismatch)
    );
}

#[test]
fn cumulative_preserves_cohort_order() {
    let a = two_col(1, &[1.0]);
    let b = two_col(2, &[2.0, 3.0]);
    // Reversed cohort order: client 2 first.
    let mut cohort = LocalCohort::new([&a, &b], 0);
    let result =
        execute_query(&spec(Kernel::Count, Aggregation::Cumulative, vec![2, 1]), &mut cohort)
            .unwrap();
    assert_eq!(
        result.aggregated,
        QueryValue::Collection(vec![
            ResponsePayload::Scalar(2.0),
            ResponsePayload::Scalar(1.0)
        ])
    );
    let per_client = result.per_client.unwrap();
    assert_eq!(per_client[&1], ResponsePayload::Scalar(1.0));
    assert_eq!(per_client[&2], ResponsePayload::Scalar(2.0));
}

#[test]
fn set_query_single_client_union() {
    let a = with_tags(two_col(1, &[0.0]), &["a", "b"]);
    let mut cohort = LocalCohort::new([&a], 5);
    let result = set_query("s1", "tag", SetMode::UnionCardinality, vec![1], &mut cohort).unwrap();
    assert_eq!(result.aggregated, QueryValue::SetCount(2));
}

#[test]
fn set_query_union_and_intersection() {
    let a = with_tags(two_col(1, &[0.0]), &["a", "b"]);
    let b = with_tags(two_col(2, &[0.0]), &["b", "c"]);
    let mut cohort = LocalCohort::new([&a, &b], 5);
    let union = set_query("s2", "tag", SetMode::UnionCardinality, vec![1, 2], &mut cohort).unwrap();
    assert_eq!(union.aggregated, QueryValue::SetCount(3));
    let inter = set_query(
        "s3",
        "tag",
        SetMode::IntersectionCardinality,
        vec![1, 2],
        &mut cohort,
    )
    .unwrap();
    assert_eq!(inter.aggregated, QueryValue::SetCount(1));
}

#[test]
fn set_query_disjoint_intersection_is_zero() {
    let a = with_tags(two_col(1, &[0.0]), &["a"]);
    let b = with_tags(two_col(2, &[0.0]), &["z"]);
    let mut cohort = LocalCohort::new([&a, &b], 5);
    let inter = set_query(
        "s4",
        "tag",
        SetMode::IntersectionCardinality,
        vec![1, 2],
        &mut cohort,
    )
    .unwrap();
    assert_eq!(inter.aggregated, QueryValue::SetCount(0));
}

#[test]
fn set_query_exact_set_returns_salted_digests() {
    let a = with_tags(two_col(1, &[0.0]), &["a", "b"]);
    let mut cohort = LocalCohort::new([&a], 9);
    let result = set_query("s5", "tag", SetMode::ExactSet, vec![1], &mut cohort).unwrap();
    let want: BTreeSet<String> = ["a", "b"].iter().map(|v| hash_value(9, v)).collect();
    assert_eq!(result.aggregated, QueryValue::HashedSet(want.clone()));
    // Raw values never appear.
    for digest in &want {
        assert_ne!(digest, "a");
        assert_ne!(digest, "b");
    }
    // A different epoch salts differently.
    assert_ne!(hash_value(9, "a"), hash_value(10, "a"));
}

#[test]
fn set_query_non_categorical_attribute() {
    let a = two_col(1, &[0.0]);
    let mut cohort = LocalCohort::new([&a], 0);
    let err = set_query("s6", "x", SetMode::UnionCardinality, vec![1], &mut cohort).unwrap_err();
    assert_eq!(err, QueryError::NonCategoricalAttribute("x".into()));
}

#[test]
fn federated_pca_split_matches_single_pooled_client() {
    // Five numeric columns, four predictors; target is last.
    let schema = Schema::new(
        (0..4)
            .map(|i| (format!("p{i}"), FeatureKind::Numeric))
            .chain([("y".to_string(), FeatureKind::Numeric)])
            .collect(),
        "y",
    )
    .unwrap();
    let mut rng = SplitMix64::new(50);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let base = rng.normal();
            let mut row: Vec<f64> = (0..4).map(|j| base * (j as f64 + 1.0) + rng.normal()).collect();
            row.push(0.0);
            row
        })
        .collect();

    let pooled = ClientDataset::new(1, schema.clone(), rows.clone());
    let mut pooled_cohort = LocalCohort::new([&pooled], 0);
    let reference = federated_pca("pca-pooled", 2, vec![1], &mut pooled_cohort).unwrap();

    for split_at in [10usize, 25, 40] {
        let a = ClientDataset::new(1, schema.clone(), rows[..split_at].to_vec());
        let b = ClientDataset::new(2, schema.clone(), rows[split_at..].to_vec());
        let mut cohort = LocalCohort::new([&a, &b], 0);
        let split = federated_pca("pca-split", 2, vec![1, 2], &mut cohort).unwrap();
        for (col, ref_col) in split.components.iter().zip(&reference.components) {
            let cos: f64 = col.iter().zip(ref_col).map(|(a, b)| a * b).sum();
            assert!(cos.abs() >= 1.0 - 1e-10, "cosine {cos}");
        }
        for (a, b) in split
            .explained_variance_ratio
            .iter()
            .zip(&reference.explained_variance_ratio)
        {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn secure_count_equals_plain_count() {
    let datasets: Vec<ClientDataset> = (1..=4)
        .map(|id| two_col(id, &vec![1.0; id as usize * 3]))
        .collect();
    let refs: Vec<&ClientDataset> = datasets.iter().collect();
    let mut cohort = LocalCohort::new(refs.clone(), 11);

    let mut secure_spec = spec(Kernel::Count, Aggregation::Addition, vec![1, 2, 3, 4]);
    secure_spec.secure = true;
    let masked = execute_query(&secure_spec, &mut cohort).unwrap();

    let plain = execute_query(
        &spec(Kernel::Count, Aggregation::Addition, vec![1, 2, 3, 4]),
        &mut cohort,
    )
    .unwrap();

    let masked_total = match &masked.aggregated {
        QueryValue::Vector(v) => v[0],
        other => panic!("unexpected {other:?}"),
    };
    let plain_total = match &plain.aggregated {
        QueryValue::Scalar(x) => *x,
        other => panic!("unexpected {other:?}"),
    };
    assert!((masked_total - plain_total).abs() < 1e-6);
    assert_eq!(plain_total, (3 + 6 + 9 + 12) as f64);
}

#[test]
fn secure_histogram_vector_payloads() {
    let a = two_col(1, &[0.1, 0.2, 0.8]);
    let b = two_col(2, &[0.4, 0.9]);
    let kernel = Kernel::Histogram { feature: "x".into(), bins: 2, lo: 0.0, hi: 1.0 };
    let mut cohort = LocalCohort::new([&a, &b], 2);

    let mut masked_spec = spec(kernel.clone(), Aggregation::Addition, vec![1, 2]);
    masked_spec.secure = true;
    let masked = execute_query(&masked_spec, &mut cohort).unwrap();
    let plain = execute_query(&spec(kernel, Aggregation::Addition, vec![1, 2]), &mut cohort).unwrap();

    let flat_plain = match &plain.aggregated {
        QueryValue::Histogram(h) => {
            let mut v = vec![h.below as f64];
            v.extend(h.bins.iter().map(|&b| b as f64));
            v.push(h.above as f64);
            v
        }
        other => panic!("unexpected {other:?}"),
    };
    match &masked.aggregated {
        QueryValue::Vector(v) => {
            assert_eq!(v.len(), flat_plain.len());
            for (m, p) in v.iter().zip(&flat_plain) {
                assert!((m - p).abs() < 1e-6);
            }
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn secure_cohort_too_small() {
    let a = two_col(1, &[1.0]);
    let mut cohort = LocalCohort::new([&a], 0);
    let mut s = spec(Kernel::Count, Aggregation::Addition, vec![1]);
    s.secure = true;
    assert_eq!(
        execute_query(&s, &mut cohort),
        Err(QueryError::CohortTooSmall(1))
    );
}

#[test]
fn secure_dropout_aborts() {
    let a = two_col(1, &[1.0]);
    let b = two_col(2, &[2.0]);
    let c = two_col(3, &[3.0]);
    let mut cohort = DroppingCohort {
        inner: LocalCohort::new([&a, &b, &c], 0),
        drop: vec![2],
    };
    let mut s = spec(Kernel::Count, Aggregation::Addition, vec![1, 2, 3]);
    s.secure = true;
    assert_eq!(
        execute_query(&s, &mut cohort),
        Err(QueryError::DropoutUnsupported { missing: vec![2] })
    );
}

#[test]
fn statistical_query_survives_dropout_with_partial_flag() {
    let a = two_col(1, &[1.0]);
    let b = two_col(2, &[2.0, 3.0]);
    let c = two_col(3, &[4.0, 5.0, 6.0]);
    let mut cohort = DroppingCohort {
        inner: LocalCohort::new([&a, &b, &c], 0),
        drop: vec![3],
    };
    let result =
        execute_query(&spec(Kernel::Count, Aggregation::Addition, vec![1, 2, 3]), &mut cohort)
            .unwrap();
    assert!(result.partial);
    assert_eq!(result.respondent_count, 2);
    assert_eq!(result.aggregated, QueryValue::Scalar(3.0));
}

#[test]
fn total_dropout_is_a_timeout() {
    let a = two_col(1, &[1.0]);
    let mut cohort = DroppingCohort {
        inner: LocalCohort::new([&a], 0),
        drop: vec![1],
    };
    assert_eq!(
        execute_query(&spec(Kernel::Count, Aggregation::Addition, vec![1]), &mut cohort),
        Err(QueryError::QueryTimeout { responded: 0, cohort: 1 })
    );
}

#[test]
fn pca_aborts_on_dropout() {
    let a = two_col(1, &[1.0, 2.0]);
    let b = two_col(2, &[3.0, 4.0]);
    let mut cohort = DroppingCohort {
        inner: LocalCohort::new([&a, &b], 0),
        drop: vec![2],
    };
    let err = federated_pca("pca-drop", 1, vec![1, 2], &mut cohort).unwrap_err();
    assert_eq!(err, QueryError::QueryTimeout { responded: 1, cohort: 2 });
}

#[test]
fn validation_rejects_incompatible_pairs() {
    // Skewness profiles only aggregate cumulatively.
    let s = spec(
        Kernel::StatsProfile { convention: crate::stats::SkewnessConvention::Adjusted },
        Aggregation::Addition,
        vec![1],
    );
    assert!(matches!(
        s.validate(),
        Err(QueryError::IncompatibleAggregation { .. })
    ));

    // Gram matrices require addition.
    let s = spec(Kernel::GramForPca { components: 1 }, Aggregation::Cumulative, vec![1]);
    assert!(matches!(
        s.validate(),
        Err(QueryError::IncompatibleAggregation { .. })
    ));

    // Category must match the kernel.
    let mut s = spec(Kernel::Count, Aggregation::Addition, vec![1]);
    s.category = QueryCategory::Set;
    assert!(matches!(s.validate(), Err(QueryError::CategoryMismatch { .. })));
}

#[test]
fn empty_cohort_rejected() {
    let a = two_col(1, &[1.0]);
    let mut cohort = LocalCohort::new([&a], 0);
    assert_eq!(
        execute_query(&spec(Kernel::Count, Aggregation::Addition, vec![]), &mut cohort),
        Err(QueryError::EmptyCohort)
    );
}

#[test]
fn unregistered_client_rejected() {
    let a = two_col(1, &[1.0]);
    let mut cohort = LocalCohort::new([&a], 0);
    assert_eq!(
        execute_query(&spec(Kernel::Count, Aggregation::Addition, vec![1, 9]), &mut cohort),
        Err(QueryError::UnknownClient(9))
    );
}

#[test]
fn eq1_fidelity_for_linear_kernels() {
    // Federated count/mean/variance/gram equal the pooled kernel over random
    // splits of a fixed dataset.
    let mut rng = SplitMix64::new(123);
    let pooled_xs: Vec<f64> = (0..200).map(|_| rng.normal() * 4.0 + 2.0).collect();
    let pooled = two_col(99, &pooled_xs);
    let mut pooled_cohort = LocalCohort::new([&pooled], 0);

    let pooled_mean = match execute_query(
        &spec(Kernel::Mean { feature: "x".into() }, Aggregation::Average { weighted: true }, vec![99]),
        &mut pooled_cohort,
    )
    .unwrap()
    .aggregated
    {
        QueryValue::Scalar(x) => x,
        _ => unreachable!(),
    };
    let pooled_bundle = match execute_query(
        &spec(
            Kernel::Moments { features: FeatureSelection::Named(vec!["x".into()]) },
            Aggregation::Addition,
            vec![99],
        ),
        &mut pooled_cohort,
    )
    .unwrap()
    .aggregated
    {
        QueryValue::Bundle(b) => b,
        _ => unreachable!(),
    };

    for split_seed in 0..10u64 {
        let mut split_rng = SplitMix64::new(split_seed);
        let k = 2 + split_rng.below(5) as usize;
        let mut parts: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &x in &pooled_xs {
            parts[split_rng.below(k as u64) as usize].push(x);
        }
        let datasets: Vec<ClientDataset> = parts
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(i, p)| two_col(i as u64 + 1, p))
            .collect();
        let ids: Vec<u64> = datasets.iter().map(|d| d.client_id).collect();
        let refs: Vec<&ClientDataset> = datasets.iter().collect();
        let mut cohort = LocalCohort::new(refs, 0);

        let count = execute_query(&spec(Kernel::Count, Aggregation::Addition, ids.clone()), &mut cohort)
            .unwrap()
            .aggregated;
        assert_eq!(count, QueryValue::Scalar(200.0));

        let mean = match execute_query(
            &spec(
                Kernel::Mean { feature: "x".into() },
                Aggregation::Average { weighted: true },
                ids.clone(),
            ),
            &mut cohort,
        )
        .unwrap()
        .aggregated
        {
            QueryValue::Scalar(x) => x,
            _ => unreachable!(),
        };
        assert!((mean - pooled_mean).abs() <= 1e-9 * pooled_mean.abs().max(1.0));

        let bundle = match execute_query(
            &spec(
                Kernel::Moments { features: FeatureSelection::Named(vec!["x".into()]) },
                Aggregation::Addition,
                ids.clone(),
            ),
            &mut cohort,
        )
        .unwrap()
        .aggregated
        {
            QueryValue::Bundle(b) => b,
            _ => unreachable!(),
        };
        let (got, want) = (&bundle[0].sketch, &pooled_bundle[0].sketch);
        assert_eq!(got.n, want.n);
        for (g, w) in [(got.mean, want.mean), (got.m2, want.m2), (got.m3, want.m3)] {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{g} vs {w}");
        }
        assert_eq!(bundle[0].min, pooled_bundle[0].min);
        assert_eq!(bundle[0].max, pooled_bundle[0].max);
    }
}

#[test]
fn spec_and_result_serde_round_trip() {
    let specs = vec![
        spec(Kernel::Count, Aggregation::Addition, vec![1, 2, 3]),
        spec(
            Kernel::Histogram { feature: "x".into(), bins: 4, lo: 0.0, hi: 1.0 },
            Aggregation::Cumulative,
            vec![2, 1],
        ),
        spec(
            Kernel::SetCardinality { attribute: "tag".into(), mode: SetMode::ExactSet },
            Aggregation::Cumulative,
            vec![7],
        ),
        spec(Kernel::GramForPca { components: 2 }, Aggregation::Addition, vec![1, 2]),
    ];
    for s in specs {
        let json = serde_json::to_string(&s).unwrap();
        let back: QuerySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    let a = with_tags(two_col(1, &[0.5, 1.5, 2.5]), &["u", "v"]);
    let b = with_tags(two_col(2, &[3.5, 4.5]), &["v"]);
    let mut cohort = LocalCohort::new([&a, &b], 3);
    let results = vec![
        execute_query(
            &spec(
                Kernel::Moments { features: FeatureSelection::All },
                Aggregation::Cumulative,
                vec![1, 2],
            ),
            &mut cohort,
        )
        .unwrap(),
        set_query("sq", "tag", SetMode::ExactSet, vec![1, 2], &mut cohort).unwrap(),
        federated_pca_result(&mut cohort),
    ];
    for r in results {
        let json = serde_json::to_string(&r).unwrap();
        let back: QueryResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}

fn federated_pca_result(cohort: &mut impl QueryCohort) -> QueryResult {
    let s = spec(Kernel::GramForPca { components: 1 }, Aggregation::Addition, vec![1, 2]);
    execute_query(&s, cohort).unwrap()
}

#[test]
fn stats_profile_values_and_degenerate_error() {
    // Feature x of [0,0,0,1] has the Bernoulli closed-form skewness; y is
    // constant so the profile query fails with a degenerate distribution.
    let ds = two_col(1, &[0.0, 0.0, 0.0, 1.0]);
    let mut cohort = LocalCohort::new([&ds], 0);
    let err = execute_query(
        &spec(
            Kernel::StatsProfile { convention: crate::stats::SkewnessConvention::MomentG1 },
            Aggregation::Cumulative,
            vec![1],
        ),
        &mut cohort,
    )
    .unwrap_err();
    assert_eq!(err, QueryError::Stats(crate::stats::StatsError::DegenerateDistribution));

    // With a varying target the profile comes back with both skews.
    let mut rows: Vec<Vec<f64>> = vec![
        vec![0.0, 1.0],
        vec![0.0, 2.0],
        vec![0.0, 4.0],
        vec![1.0, 3.0],
    ];
    rows.iter_mut().for_each(|r| r.truncate(2));
    let ds = ClientDataset::new(1, test_schema(), rows);
    let mut cohort = LocalCohort::new([&ds], 0);
    let result = execute_query(
        &spec(
            Kernel::StatsProfile { convention: crate::stats::SkewnessConvention::MomentG1 },
            Aggregation::Cumulative,
            vec![1],
        ),
        &mut cohort,
    )
    .unwrap();
    match &result.per_client.unwrap()[&1] {
        ResponsePayload::Profile(p) => {
            assert_eq!(p.n_samples, 4);
            assert_eq!(p.n_features, 2);
            assert_eq!(p.skewness[0].0, "x");
            assert!((p.skewness[0].1 - 1.1547).abs() < 1e-4);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unknown_feature_errors() {
    let ds = two_col(1, &[1.0]);
    let mut cohort = LocalCohort::new([&ds], 0);
    let err = execute_query(
        &spec(Kernel::Mean { feature: "nope".into() }, Aggregation::Average { weighted: true }, vec![1]),
        &mut cohort,
    )
    .unwrap_err();
    assert_eq!(err, QueryError::UnknownFeature("nope".into()));
}

#[test]
fn partition_invariance_of_additive_queries() {
    let mut rng = SplitMix64::new(31);
    let pooled_xs: Vec<f64> = (0..120).map(|_| rng.uniform(-3.0, 9.0)).collect();
    let mut reference: Option<(f64, f64)> = None;
    for k in [1usize, 2, 3, 5, 8] {
        let chunk = pooled_xs.len().div_ceil(k);
        let datasets: Vec<ClientDataset> = pooled_xs
            .chunks(chunk)
            .enumerate()
            .map(|(i, c)| two_col(i as u64 + 1, c))
            .collect();
        let ids: Vec<u64> = datasets.iter().map(|d| d.client_id).collect();
        let refs: Vec<&ClientDataset> = datasets.iter().collect();
        let mut cohort = LocalCohort::new(refs, 0);
        let count = match execute_query(&spec(Kernel::Count, Aggregation::Addition, ids.clone()), &mut cohort)
            .unwrap()
            .aggregated
        {
            QueryValue::Scalar(x) => x,
            _ => unreachable!(),
        };
        let mean = match execute_query(
            &spec(Kernel::Mean { feature: "x".into() }, Aggregation::Average { weighted: true }, ids),
            &mut cohort,
        )
        .unwrap()
        .aggregated
        {
            QueryValue::Scalar(x) => x,
            _ => unreachable!(),
        };
        match reference {
            None => reference = Some((count, mean)),
            Some((c0, m0)) => {
                assert_eq!(count, c0);
                assert!((mean - m0).abs() <= 1e-9 * m0.abs().max(1.0));
            }
        }
    }
}
