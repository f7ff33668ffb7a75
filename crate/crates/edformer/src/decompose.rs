//! Seasonal/trend split by centered moving average with replicate padding.
//!
//! The trend is the windowed mean of the series; the seasonal part is the
//! subtraction residual, so the two components always add back to the input
//! exactly.

use crate::engine::kernels;
use crate::error::{Error, Result};
use crate::series::SeriesBatch;

/// The two additive components of a decomposed batch.
#[derive(Debug, Clone)]
pub struct DecomposedSeries {
    pub seasonal: SeriesBatch,
    pub trend: SeriesBatch,
    pub kernel: usize,
}

/// Replicate-pad a single series: prepend `x[0]` `left` times, append
/// `x[len-1]` `right` times.
pub fn replicate_pad(x: &[f64], left: usize, right: usize) -> Result<Vec<f64>> {
    let (&first, &last) = match (x.first(), x.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptySeries),
    };
    let mut out = Vec::with_capacity(x.len() + left + right);
    out.extend(std::iter::repeat_n(first, left));
    out.extend_from_slice(x);
    out.extend(std::iter::repeat_n(last, right));
    Ok(out)
}

/// Split a batch into trend (centered moving average of odd width `kernel`,
/// replicate-padded) and seasonal (residual) components, independently per
/// batch element and per variate.
///
/// The stored trend is recomputed as `x - seasonal` so that
/// `seasonal + trend` reproduces the input bit for bit; this moves the trend
/// by at most one ulp relative to the raw windowed mean.
pub fn series_decompose(x: &SeriesBatch, kernel: usize) -> Result<DecomposedSeries> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::EvenKernel { kernel });
    }
    let [b, l, n] = x.shape();
    if l == 0 {
        return Err(Error::EmptySeries);
    }
    let mut trend = vec![0.0; b * l * n];
    kernels::moving_avg_seq(x.data(), &mut trend, b, l, n, kernel);
    let seasonal: Vec<f64> = x.data().iter().zip(&trend).map(|(xv, tv)| xv - tv).collect();
    let trend: Vec<f64> = x.data().iter().zip(&seasonal).map(|(xv, sv)| xv - sv).collect();
    Ok(DecomposedSeries {
        seasonal: SeriesBatch::new(b, l, n, seasonal)?,
        trend: SeriesBatch::new(b, l, n, trend)?,
        kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force oracle: windowed mean over an explicitly padded copy.
    fn oracle_trend(x: &[f64], kernel: usize) -> Vec<f64> {
        let half = kernel / 2;
        let padded = replicate_pad(x, half, half).unwrap();
        (0..x.len())
            .map(|t| padded[t..t + kernel].iter().sum::<f64>() / kernel as f64)
            .collect()
    }

    fn batch(x: &[f64]) -> SeriesBatch {
        SeriesBatch::new(1, x.len(), 1, x.to_vec()).unwrap()
    }

    #[test]
    fn replicate_pad_cases() {
        assert_eq!(replicate_pad(&[1.0, 2.0, 3.0], 1, 1).unwrap(), vec![1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(replicate_pad(&[1.0, 2.0], 0, 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(replicate_pad(&[7.0], 2, 2).unwrap(), vec![7.0; 5]);
        assert!(replicate_pad(&[], 1, 1).is_err());
    }

    #[test]
    fn even_kernel_is_config_error() {
        assert!(matches!(
            series_decompose(&batch(&[1.0, 2.0]), 4),
            Err(Error::EvenKernel { kernel: 4 })
        ));
    }

    #[test]
    fn constant_series_decomposes_exactly() {
        for k in [1, 3, 5, 25] {
            let d = series_decompose(&batch(&[0.1; 40]), k).unwrap();
            assert!(d.trend.data().iter().all(|&v| v == 0.1), "k = {k}");
            assert!(d.seasonal.data().iter().all(|&v| v == 0.0), "k = {k}");
        }
    }

    #[test]
    fn kernel_one_is_identity() {
        let x = batch(&[0.3, -1.7, 2.9, 0.0]);
        let d = series_decompose(&x, 1).unwrap();
        assert_eq!(d.trend, x);
        assert!(d.seasonal.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_case_k3_matches_oracle() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let d = series_decompose(&batch(&x), 3).unwrap();
        let expect = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        assert_eq!(d.trend.data(), &expect);
        assert_eq!(oracle_trend(&x, 3), &expect);
        for (s, (xv, tv)) in d.seasonal.data().iter().zip(x.iter().zip(&expect)) {
            assert_eq!(*s, xv - tv);
        }
    }

    #[test]
    fn interior_ramp_trend_is_the_ramp() {
        let l = 32;
        let k = 7;
        let x: Vec<f64> = (0..l).map(|t| 0.25 * t as f64 - 3.0).collect();
        let d = series_decompose(&batch(&x), k).unwrap();
        let half = k / 2;
        for t in half..l - half {
            assert!((d.trend.data()[t] - x[t]).abs() < 1e-12, "t = {t}");
            assert!(d.seasonal.data()[t].abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn reconstruction_is_bitwise_on_random_series() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        for trial in 0..2000 {
            let l = rng.random_range(4..64);
            let kernel = 2 * rng.random_range(0..6) + 1;
            let x: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = series_decompose(&batch(&x), kernel).unwrap();
            for ((s, t), xv) in d.seasonal.data().iter().zip(d.trend.data()).zip(&x) {
                assert_eq!((s + t).to_bits(), xv.to_bits(), "trial {trial} kernel {kernel}");
            }
        }
    }

    proptest! {
        #[test]
        fn decomposition_is_linear(
            pair in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 8..48),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let dx = series_decompose(&batch(&xs), 5).unwrap();
            let dy = series_decompose(&batch(&ys), 5).unwrap();
            let dc = series_decompose(&batch(&combo), 5).unwrap();
            for i in 0..xs.len() {
                let want = a * dx.trend.data()[i] + b * dy.trend.data()[i];
                prop_assert!((dc.trend.data()[i] - want).abs() < 1e-12);
                let want_s = a * dx.seasonal.data()[i] + b * dy.seasonal.data()[i];
                prop_assert!((dc.seasonal.data()[i] - want_s).abs() < 1e-12);
            }
        }

        #[test]
        fn trend_matches_brute_force_oracle(
            x in proptest::collection::vec(-2.0f64..2.0, 4..48),
            half in 0usize..5,
        ) {
            let kernel = 2 * half + 1;
            let d = series_decompose(&batch(&x), kernel).unwrap();
            for (got, want) in d.trend.data().iter().zip(oracle_trend(&x, kernel)) {
                // stored trend may sit one ulp off the naive mean
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn multivariate_batches_decompose_per_column() {
        // interleave two constant columns with one varying column
        let l = 10;
        let mut data = Vec::new();
        for t in 0..l {
            data.extend_from_slice(&[1.5, t as f64, -0.25]);
        }
        let x = SeriesBatch::new(1, l, 3, data).unwrap();
        let d = series_decompose(&x, 3).unwrap();
        for t in 0..l {
            assert_eq!(d.trend.at(0, t, 0), 1.5);
            assert_eq!(d.trend.at(0, t, 2), -0.25);
        }
        // middle column is a ramp: interior trend equals it
        for t in 1..l - 1 {
            assert!((d.trend.at(0, t, 1) - t as f64).abs() < 1e-12);
        }
    }
}
