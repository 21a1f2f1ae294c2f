use ndarray::Array2;

use crate::error::{QpiError, Result};
use crate::forward_model::PhaseMap;

/// Local Shannon entropy of quantised phase, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Array2<f64>,
    pub window_px: usize,
    pub bin_count: usize,
}

impl EntropyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Shannon entropy `−Σ pᵢ ln pᵢ` of a histogram with the given counts.
pub fn histogram_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Entropy of each `n × n` neighbourhood after quantising the whole map into
/// `bins` uniform bins over its global range. Edges replicate.
pub fn entropy_map(phase: &PhaseMap, window_px: usize, bins: usize) -> Result<EntropyMap> {
    entropy_map_with_span(phase, window_px, bins, 0.0)
}

/// As [`entropy_map`], but the quantised range is at least `min_span` wide
/// (starting at the map minimum), so a field holding only background noise
/// is not stretched over every bin.
pub fn entropy_map_with_span(phase: &PhaseMap, window_px: usize, bins: usize, min_span: f64) -> Result<EntropyMap> {
    let (rows, cols) = phase.shape();
    if window_px % 2 == 0 || window_px < 3 || window_px > rows.min(cols) {
        return Err(QpiError::Domain(format!(
            "entropy window must be odd and within 3..={}, got {window_px}",
            rows.min(cols)
        )));
    }
    if bins < 2 {
        return Err(QpiError::Domain(format!("entropy needs at least 2 bins, got {bins}")));
    }
    let (lo, hi) = phase
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(EntropyMap {
            values: Array2::zeros((rows, cols)),
            window_px,
            bin_count: bins,
        });
    }
    let scale = bins as f64 / (hi - lo).max(min_span);
    let quantised = phase
        .values
        .mapv(|v| (((v - lo) * scale) as usize).min(bins - 1) as u32);

    let half = (window_px / 2) as isize;
    let n2 = (window_px * window_px) as f64;
    // -p ln p for every possible count.
    let term: Vec<f64> = (0..=window_px * window_px)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                let p = k as f64 / n2;
                -p * p.ln()
            }
        })
        .collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut counts = vec![0u32; bins];
    let mut touched = Vec::with_capacity(window_px * window_px);
    let values = Array2::from_shape_fn((rows, cols), |(r, c)| {
        for dr in -half..=half {
            let rr = clamp(r as isize + dr, rows);
            for dc in -half..=half {
                let bin = quantised[[rr, clamp(c as isize + dc, cols)]] as usize;
                if counts[bin] == 0 {
                    touched.push(bin);
                }
                counts[bin] += 1;
            }
        }
        let mut h = 0.0;
        for &bin in &touched {
            h += term[counts[bin] as usize];
            counts[bin] = 0;
        }
        touched.clear();
        h
    });
    Ok(EntropyMap {
        values,
        window_px,
        bin_count: bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: Array2<f64>) -> PhaseMap {
        PhaseMap::unwrapped(values, 0.632)
    }

    #[test]
    fn constant_region_has_zero_entropy() {
        let em = entropy_map(&map(Array2::from_elem((20, 20), 1.3)), 9, 256).unwrap();
        assert!(em.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn histogram_entropy_of_even_splits() {
        assert!((histogram_entropy(&[40, 40]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((histogram_entropy(&[20, 20, 20, 20, 0]) - 4f64.ln()).abs() < 1e-15);
        assert!(4f64.ln() > 1.0);
        assert_eq!(histogram_entropy(&[81]), 0.0);
    }

    #[test]
    fn window_entropy_matches_histogram() {
        // Checkerboard: a 3×3 window holds five of one value, four of the other.
        let values = Array2::from_shape_fn((9, 9), |(r, c)| ((r + c) % 2) as f64);
        let em = entropy_map(&map(values), 3, 2).unwrap();
        assert!((em.values[[4, 4]] - histogram_entropy(&[5, 4])).abs() < 1e-12);
    }

    #[test]
    fn four_level_texture_exceeds_threshold() {
        let values = Array2::from_shape_fn((40, 40), |(r, c)| ((r * 2 + c) % 4) as f64);
        let em = entropy_map(&map(values), 9, 4).unwrap();
        let v = em.values[[20, 20]];
        assert!((v - 4f64.ln()).abs() < 0.01, "{v}");
        assert!(v > 1.0);
    }

    #[test]
    fn edges_replicate() {
        let values = Array2::from_shape_fn((3, 4), |(_, c)| if c < 2 { 0.0 } else { 1.0 });
        let em = entropy_map(&map(values), 3, 2).unwrap();
        // Window at (0,0) covers columns 0,0,1 for three replicated rows.
        assert_eq!(em.values[[0, 0]], 0.0);
        assert!((em.values[[0, 1]] - histogram_entropy(&[6, 3])).abs() < 1e-12);
    }

    #[test]
    fn minimum_span_quiets_pure_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let noise = map(Array2::from_shape_fn((40, 40), |_| rng.gen_range(-0.01..0.01)));
        let plain = entropy_map(&noise, 9, 32).unwrap();
        let spanned = entropy_map_with_span(&noise, 9, 32, 1.0).unwrap();
        assert!(plain.values[[20, 20]] > 2.0);
        assert!(spanned.values.iter().all(|&v| v < 0.7));
    }

    #[test]
    fn rejects_even_window() {
        assert!(entropy_map(&map(Array2::zeros((10, 10))), 4, 256).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(seed in 0u64..1000, bins in 2usize..64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-3.0..3.0));
            let em = entropy_map(&map(values), 5, bins).unwrap();
            let bound = (bins as f64).ln() + 1e-12;
            prop_assert!(em.values.iter().all(|&v| v >= 0.0 && v <= bound));
        }
    }
}
