//! Pairwise-mask secure aggregation.
//!
//! For every client pair (i, j) with i < j, both sides derive the same mask
//! from a seed mixed out of (federation epoch, i, j, query id); i adds it, j
//! subtracts it, so the cohort-wide sum telescopes to the plain sum while any
//! single payload stays uninformative. Values are carried in fixed-point so
//! masking and unmasking are exact wrapping group arithmetic; the only loss
//! is the initial quantization. There is no dropout recovery: a missing
//! masked response aborts the query.

use crate::rng::{fnv1a, mix, SplitMix64};

/// Fixed-point scale: payload units are multiples of 2^-28.
pub const FIXED_POINT_SCALE: f64 = (1u64 << 28) as f64;

/// Largest payload magnitude that survives encoding without overflow.
pub const MAX_SECURE_MAGNITUDE: f64 = (1u64 << 34) as f64;

/// Masks span [-2^32, 2^32) in payload units, i.e. [-2^60, 2^60) fixed-point.
fn pair_mask(epoch: u64, low: u64, high: u64, query_id: &str, len: usize) -> Vec<i64> {
    let seed = mix(epoch, &[low, high, fnv1a(query_id.as_bytes())]);
    let mut rng = SplitMix64::new(seed);
    (0..len)
        .map(|_| ((rng.next_u64() >> 3) as i64).wrapping_sub(1 << 60))
        .collect()
}

/// Quantizes a payload vector onto the fixed-point grid.
///
/// Returns `None` when any coordinate is non-finite or too large to encode.
pub fn encode_fixed(values: &[f64]) -> Option<Vec<i64>> {
    values
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < MAX_SECURE_MAGNITUDE {
                Some((v * FIXED_POINT_SCALE).round() as i64)
            } else {
                None
            }
        })
        .collect()
}

pub fn decode_fixed(values: &[i64]) -> Vec<f64> {
    values.iter().map(|&v| v as f64 / FIXED_POINT_SCALE).collect()
}

/// Applies this client's pairwise masks to its fixed-point payload.
///
/// The client adds the mask of every pair where it holds the smaller id and
/// subtracts where it holds the larger; arithmetic wraps mod 2^64 so the
/// masks form an exact group.
pub fn mask_fixed(
    encoded: &[i64],
    client_id: u64,
    cohort: &[u64],
    epoch: u64,
    query_id: &str,
) -> Vec<i64> {
    let mut out = encoded.to_vec();
    for &peer in cohort {
        if peer == client_id {
            continue;
        }
        let (low, high, add) = if client_id < peer {
            (client_id, peer, true)
        } else {
            (peer, client_id, false)
        };
        let mask = pair_mask(epoch, low, high, query_id, encoded.len());
        for (o, m) in out.iter_mut().zip(mask) {
            *o = if add { o.wrapping_add(m) } else { o.wrapping_sub(m) };
        }
    }
    out
}

/// Convenience: quantize then mask. Fails on unencodable payloads.
pub fn mask_payload(
    values: &[f64],
    client_id: u64,
    cohort: &[u64],
    epoch: u64,
    query_id: &str,
) -> Option<Vec<i64>> {
    let encoded = encode_fixed(values)?;
    Some(mask_fixed(&encoded, client_id, cohort, epoch, query_id))
}

/// Server side: wrapping sum of masked vectors, then decode. With the full
/// cohort present the pairwise masks cancel exactly.
pub fn unmask_sum(masked: &[Vec<i64>]) -> Option<Vec<f64>> {
    let len = masked.first()?.len();
    let mut total = vec![0i64; len];
    for m in masked {
        if m.len() != len {
            return None;
        }
        for (t, x) in total.iter_mut().zip(m) {
            *t = t.wrapping_add(*x);
        }
    }
    Some(decode_fixed(&total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn plain_sum(payloads: &[Vec<f64>]) -> Vec<f64> {
        let len = payloads[0].len();
        let mut out = vec![0.0; len];
        for p in payloads {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    #[test]
    fn two_client_masked_sum() {
        let cohort = [1u64, 2];
        let a = mask_payload(&[1.0], 1, &cohort, 7, "q").unwrap();
        let b = mask_payload(&[2.0], 2, &cohort, 7, "q").unwrap();
        let total = unmask_sum(&[a.clone(), b.clone()]).unwrap();
        assert!((total[0] - 3.0).abs() < 1e-6);
        // Masked payloads are nowhere near the plain ones.
        assert!((decode_fixed(&a)[0] - 1.0).abs() > 1.0);
        assert!((decode_fixed(&b)[0] - 2.0).abs() > 1.0);
    }

    #[test]
    fn masks_cancel_across_cohort_sizes() {
        let mut rng = SplitMix64::new(99);
        for size in 2..=10u64 {
            let cohort: Vec<u64> = (1..=size).collect();
            let payloads: Vec<Vec<f64>> = cohort
                .iter()
                .map(|_| (0..6).map(|_| rng.uniform(-5.0, 5.0)).collect())
                .collect();
            let masked: Vec<Vec<i64>> = cohort
                .iter()
                .zip(&payloads)
                .map(|(&id, p)| mask_payload(p, id, &cohort, 3, "query-7").unwrap())
                .collect();
            let want = plain_sum(&payloads);
            let got = unmask_sum(&masked).unwrap();
            for (w, g) in want.iter().zip(&got) {
                assert!((w - g).abs() < 1e-6, "cohort {size}: {w} vs {g}");
            }
        }
    }

    #[test]
    fn all_zero_payloads_sum_to_zero() {
        let cohort: Vec<u64> = vec![4, 9, 11];
        let masked: Vec<Vec<i64>> = cohort
            .iter()
            .map(|&id| mask_payload(&[0.0, 0.0], id, &cohort, 1, "z").unwrap())
            .collect();
        let total = unmask_sum(&masked).unwrap();
        assert!(total.iter().all(|v| v.abs() < 1e-6));
        // Each individual message is still masked.
        assert!(masked
            .iter()
            .all(|m| decode_fixed(m).iter().any(|v| v.abs() > 1.0)));
    }

    #[test]
    fn masks_depend_on_query_and_epoch() {
        let cohort = [1u64, 2];
        let a = mask_payload(&[0.0], 1, &cohort, 7, "q1").unwrap();
        let b = mask_payload(&[0.0], 1, &cohort, 7, "q2").unwrap();
        let c = mask_payload(&[0.0], 1, &cohort, 8, "q1").unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mask_payload(&[0.0], 1, &cohort, 7, "q1").unwrap());
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(encode_fixed(&[f64::NAN]).is_none());
        assert!(encode_fixed(&[1e12]).is_none());
        assert!(encode_fixed(&[1e3, -42.5]).is_some());
    }

    #[test]
    fn quantization_error_is_tiny() {
        let mut rng = SplitMix64::new(5);
        let values: Vec<f64> = (0..100).map(|_| rng.uniform(-1e4, 1e4)).collect();
        let decoded = decode_fixed(&encode_fixed(&values).unwrap());
        for (v, d) in values.iter().zip(&decoded) {
            assert!((v - d).abs() <= 0.5 / FIXED_POINT_SCALE);
        }
    }
}
