//! Error metrics and cross-horizon aggregation.

use crate::error::{Error, Result};

/// Mean squared error over all elements.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

fn check_same_len(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(())
}

/// Per-horizon metrics plus their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub per_horizon: Vec<(usize, f64, f64)>,
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub std_mse: f64,
    pub std_mae: f64,
}

/// Aggregate `(horizon, mse, mae)` rows: arithmetic mean and population
/// standard deviation (divide by count).
pub fn summarize_horizons(entries: &[(usize, f64, f64)]) -> Result<RunSummary> {
    if entries.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = entries.len() as f64;
    let mean_mse = entries.iter().map(|e| e.1).sum::<f64>() / n;
    let mean_mae = entries.iter().map(|e| e.2).sum::<f64>() / n;
    let std_mse = (entries.iter().map(|e| (e.1 - mean_mse).powi(2)).sum::<f64>() / n).sqrt();
    let std_mae = (entries.iter().map(|e| (e.2 - mean_mae).powi(2)).sum::<f64>() / n).sqrt();
    Ok(RunSummary {
        per_horizon: entries.to_vec(),
        mean_mse,
        mean_mae,
        std_mse,
        std_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_arrays_have_zero_error() {
        let a = [1.0, -2.0, 3.0];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_cases() {
        // pred [0,0] vs truth [3,4]
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        // pred [1,2] vs target [2,4]
        assert_eq!(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
    }

    #[test]
    fn nonnegative_and_equal_error_case() {
        let pred = [1.0, -1.0, 2.0];
        let truth = [0.0, 0.0, 1.0]; // all |errors| equal 1
        let m2 = mse(&pred, &truth).unwrap();
        let m1 = mae(&pred, &truth).unwrap();
        assert!(m2 >= 0.0 && m1 >= 0.0);
        assert_eq!(m2, m1 * m1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn translation_invariance() {
        let pred = [0.3, 1.7, -2.0, 0.9];
        let truth = [0.1, 2.0, -1.5, 1.2];
        let c = 13.625;
        let shifted_p: Vec<f64> = pred.iter().map(|v| v + c).collect();
        let shifted_t: Vec<f64> = truth.iter().map(|v| v + c).collect();
        assert!((mse(&pred, &truth).unwrap() - mse(&shifted_p, &shifted_t).unwrap()).abs() < 1e-12);
        assert!((mae(&pred, &truth).unwrap() - mae(&shifted_p, &shifted_t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance_over_elements() {
        let pred = [0.3, 1.7, -2.0];
        let truth = [0.1, 2.0, -1.5];
        let perm_p = [1.7, -2.0, 0.3];
        let perm_t = [2.0, -1.5, 0.1];
        assert_eq!(mse(&pred, &truth).unwrap(), mse(&perm_p, &perm_t).unwrap());
    }

    #[test]
    fn summary_single_entry_has_zero_std() {
        let s = summarize_horizons(&[(96, 0.4, 0.41)]).unwrap();
        assert_eq!(s.std_mse, 0.0);
        assert_eq!(s.std_mae, 0.0);
        assert_eq!(s.mean_mse, 0.4);
    }

    #[test]
    fn summary_hand_case() {
        // mse entries {1, 3} -> mean 2, population std 1
        let s = summarize_horizons(&[(96, 1.0, 0.5), (192, 3.0, 1.5)]).unwrap();
        assert_eq!(s.mean_mse, 2.0);
        assert_eq!(s.std_mse, 1.0);
        assert_eq!(s.mean_mae, 1.0);
        assert_eq!(s.std_mae, 0.5);
    }

    #[test]
    fn summary_is_order_independent() {
        let a = summarize_horizons(&[(96, 1.0, 0.5), (192, 3.0, 1.5), (336, 2.0, 1.0)]).unwrap();
        let b = summarize_horizons(&[(336, 2.0, 1.0), (96, 1.0, 0.5), (192, 3.0, 1.5)]).unwrap();
        assert_eq!(a.mean_mse, b.mean_mse);
        assert_eq!(a.std_mse, b.std_mse);
    }

    #[test]
    fn empty_summary_is_an_error() {
        assert!(summarize_horizons(&[]).is_err());
    }
}
