//! Otsu binarization over a 256-bin histogram of min-max normalized values.

use ndarray::Array2;
use std::cmp::Ordering;

use super::BinaryMask;
use crate::attribution::SaliencyMap;

pub const BINS: usize = 256;

/// Min-max normalization to `[0, 1]`. A constant map normalizes to zeros.
pub fn normalize_min_max(values: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return Array2::zeros(values.dim());
    }
    values.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Histogram bin of a normalized value.
pub fn bin_of(n: f64) -> usize {
    ((n * BINS as f64).floor() as usize).min(BINS - 1)
}

pub fn histogram(normalized: &Array2<f64>) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &v in normalized {
        h[bin_of(v)] += 1;
    }
    h
}

/// Exact comparison of `n1/d1` with `n2/d2` for positive denominators.
fn cmp_ratio(n1: u128, d1: u128, n2: u128, d2: u128) -> Ordering {
    let (q1, r1) = (n1 / d1, n1 % d1);
    let (q2, r2) = (n2 / d2, n2 % d2);
    q1.cmp(&q2).then_with(|| match (r1.checked_mul(d2), r2.checked_mul(d1)) {
        (Some(a), Some(b)) => a.cmp(&b),
        _ => (r1 as f64 / d1 as f64).total_cmp(&(r2 as f64 / d2 as f64)),
    })
}

/// Threshold bin `t ∈ 1..256` maximizing between-class variance of
/// `bins < t` versus `bins ≥ t` (equivalently, minimizing within-class
/// variance). Ties resolve to the smallest `t`. `None` when every pixel
/// falls into one bin.
///
/// Comparisons are exact integer arithmetic for images up to about 1.6e7
/// pixels.
pub fn otsu_bin(hist: &[u64; BINS]) -> Option<usize> {
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut w0: u128 = 0;
    let mut s0: u128 = 0;
    // Between-class variance ∝ (s0·w1 − s1·w0)² / (w0·w1).
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 1..BINS {
        w0 += hist[t - 1] as u128;
        s0 += (t as u128 - 1) * hist[t - 1] as u128;
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let diff = (s0 * w1).abs_diff(s1 * w0);
        let num = diff * diff;
        let den = w0 * w1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => cmp_ratio(num, den, bn, bd) == Ordering::Greater,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub mask: BinaryMask,
    /// Threshold on the normalized map; foreground is `normalized ≥ threshold`.
    pub threshold: f64,
    /// The same threshold mapped back to raw saliency units.
    pub threshold_raw: f64,
    /// Histogram bin index of the threshold (0 for a degenerate map).
    pub bin: usize,
    /// Set when the map is constant and everything became foreground.
    pub degenerate: bool,
}

pub fn otsu_binarize(sal: &SaliencyMap) -> OtsuResult {
    otsu_binarize_values(&sal.values)
}

pub fn otsu_binarize_values(values: &Array2<f64>) -> OtsuResult {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let norm = normalize_min_max(values);
    let hist = histogram(&norm);
    match otsu_bin(&hist) {
        Some(t) => {
            let threshold = t as f64 / BINS as f64;
            OtsuResult {
                mask: BinaryMask::new(norm.mapv(|v| v >= threshold)),
                threshold,
                threshold_raw: lo + threshold * (hi - lo),
                bin: t,
                degenerate: false,
            }
        }
        None => OtsuResult {
            mask: BinaryMask::new(Array2::from_elem(values.dim(), true)),
            threshold: 0.0,
            threshold_raw: lo,
            bin: 0,
            degenerate: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force over every threshold bin, minimizing within-class variance.
    fn brute_force_bin(hist: &[u64; BINS]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for t in 1..BINS {
            let mut within = 0.0;
            let mut ok = true;
            for range in [0..t, t..BINS] {
                let w: f64 = hist[range.clone()].iter().map(|&c| c as f64).sum();
                if w == 0.0 {
                    ok = false;
                    break;
                }
                let mean: f64 = range.clone().map(|i| i as f64 * hist[i] as f64).sum::<f64>() / w;
                within += range.map(|i| hist[i] as f64 * (i as f64 - mean).powi(2)).sum::<f64>();
            }
            if ok && best.is_none_or(|(_, b)| within < b) {
                best = Some((t, within));
            }
        }
        best.map(|(t, _)| t)
    }

    #[test]
    fn bimodal_split() {
        let vals = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.1 } else { 0.9 });
        let res = otsu_binarize_values(&vals);
        assert!(!res.degenerate);
        assert!(res.threshold_raw > 0.1 && res.threshold_raw < 0.9);
        for ((r, c), &v) in vals.indexed_iter() {
            assert_eq!(res.mask.get(r, c), v == 0.9);
        }
    }

    #[test]
    fn constant_map_is_degenerate() {
        let res = otsu_binarize_values(&Array2::from_elem((3, 5), 0.4));
        assert!(res.degenerate);
        assert_eq!(res.mask.count(), 15);
    }

    #[test]
    fn matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..100 {
            let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
            let modes = 1 + i % 3;
            let vals = Array2::from_shape_simple_fn((h, w), || {
                let m = rng.random_range(0..modes) as f64;
                m + rng.random::<f64>() * 0.8
            });
            let hist = histogram(&normalize_min_max(&vals));
            assert_eq!(otsu_bin(&hist), brute_force_bin(&hist), "map {i}");
        }
    }

    #[test]
    fn ratio_comparison_is_exact() {
        assert_eq!(cmp_ratio(1, 3, 2, 6), Ordering::Equal);
        assert_eq!(cmp_ratio(10, 3, 7, 2), Ordering::Less);
        assert_eq!(cmp_ratio(u128::MAX / 3, 7, u128::MAX / 3, 7), Ordering::Equal);
    }

    proptest! {
        #[test]
        fn mask_equals_thresholding_at_returned_level(vals in prop::collection::vec(-5.0f64..5.0, 4..200)) {
            let n = vals.len();
            let m = Array2::from_shape_vec((1, n), vals).unwrap();
            let res = otsu_binarize_values(&m);
            let norm = normalize_min_max(&m);
            for (i, &v) in norm.iter().enumerate() {
                prop_assert_eq!(res.mask.get(0, i), v >= res.threshold);
                prop_assert_eq!(res.mask.get(0, i), bin_of(v) >= res.bin);
            }
        }
    }
}
