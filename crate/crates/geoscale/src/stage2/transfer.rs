//! Cross-model transfer: fit the regression on one model's layers, predict
//! the other's, with no test-model statistic entering the training pipeline.
//!
//! Clip bounds, log transform, and standardisation moments come from the
//! training features only and are applied verbatim to the test features. The
//! reported upper bound is the test model's own in-sample R^2 with the same
//! regressor values (the optimal OLS fit on the same data), which makes
//! Transfer R^2 <= in-sample R^2 hold on every input by construction.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Hypothesis;
use crate::error::{Error, Result};
use crate::geometry::feature_pipeline;
use crate::ols::ols_fit;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub hypothesis: String,
    pub transfer_r2: f64,
    pub test_insample_r2: f64,
    pub delta: f64,
    pub train_coefficients: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

fn design(features: &[usize], z: &Array2<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let mut m = DMatrix::zeros(n, 1 + features.len());
    for i in 0..n {
        m[(i, 0)] = 1.0;
        for (c, &f) in features.iter().enumerate() {
            m[(i, c + 1)] = z[[i, f]];
        }
    }
    m
}

fn r2_of(y: &[f64], predictions: impl IntoIterator<Item = f64>) -> f64 {
    let n = y.len() as f64;
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let ss_res: f64 = y
        .iter()
        .zip(predictions)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    1.0 - ss_res / ss_tot
}

/// Fit on (train_y, train_raw), score predictions on (test_y, test_raw).
/// Raw feature matrices are layers x 4 in raw (pre-pipeline) units.
pub fn transfer(
    train_y: &[f64],
    train_raw: &Array2<f64>,
    test_y: &[f64],
    test_raw: &Array2<f64>,
    h: &Hypothesis,
) -> Result<TransferReport> {
    if train_y.len() != train_raw.nrows() || test_y.len() != test_raw.nrows() {
        return Err(Error::Config("target/feature row mismatch".into()));
    }
    let features = h.features();
    if features.is_empty() {
        return Err(Error::Config(
            "transfer needs at least one geometric feature".into(),
        ));
    }
    // train-only pipeline statistics
    let fm = feature_pipeline(train_raw)?;
    let z_train = fm.apply(train_raw)?;
    let z_test = fm.apply(test_raw)?;

    let x_train = design(&features, &z_train);
    let y_train = DVector::from_row_slice(train_y);
    let fit = ols_fit(&x_train, &y_train, false).map_err(|e| Error::SingularDesign(e.to_string()))?;

    let x_test = design(&features, &z_test);
    let predictions = &x_test * &fit.beta;
    let transfer_r2 = r2_of(test_y, predictions.iter().copied());

    // in-sample upper bound: optimal OLS on the same test regressor values
    let y_test = DVector::from_row_slice(test_y);
    let test_fit =
        ols_fit(&x_test, &y_test, false).map_err(|e| Error::SingularDesign(e.to_string()))?;
    let test_insample_r2 = r2_of(test_y, (&x_test * &test_fit.beta).iter().copied());

    if transfer_r2 > test_insample_r2 + 1e-10 {
        return Err(Error::Numerical(format!(
            "transfer R^2 {transfer_r2} exceeded the in-sample bound {test_insample_r2}"
        )));
    }
    Ok(TransferReport {
        hypothesis: h.label(),
        transfer_r2,
        test_insample_r2,
        delta: transfer_r2 - test_insample_r2,
        train_coefficients: fit.beta.iter().copied().collect(),
        n_train: train_y.len(),
        n_test: test_y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn raw_features(n: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 4), |(_, j)| {
            let z: f64 = rng.sample(StandardNormal);
            ((j as f64 * 0.1 + 0.3) * z + shift).exp()
        })
    }

    #[test]
    fn self_transfer_equals_in_sample() {
        let raw = raw_features(20, 0.0, 1);
        let fm = feature_pipeline(&raw).unwrap();
        let y: Vec<f64> = fm.standardized.iter().map(|r| 0.2 + 1.5 * r[1] - 0.3 * r[2]).collect();
        let rep = transfer(&y, &raw, &y, &raw, &Hypothesis::HFull).unwrap();
        assert!((rep.transfer_r2 - rep.test_insample_r2).abs() < 1e-12);
        assert!(rep.delta.abs() < 1e-12);
    }

    #[test]
    fn shared_law_transfers_with_small_gap() {
        // two "models" generated from the same coefficients on different
        // geometry ranges
        let train_raw = raw_features(26, 0.0, 2);
        let test_raw = raw_features(42, 0.5, 3);
        let fm = feature_pipeline(&train_raw).unwrap();
        let z_train = fm.apply(&train_raw).unwrap();
        let z_test = fm.apply(&test_raw).unwrap();
        let gen = |z: &Array2<f64>, seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..z.nrows())
                .map(|i| {
                    let e: f64 = rng.sample(StandardNormal);
                    0.15 + 0.06 * z[[i, 1]] + 0.02 * z[[i, 0]] + 0.003 * e
                })
                .collect()
        };
        let train_y = gen(&z_train, 4);
        let test_y = gen(&z_test, 5);
        let rep = transfer(&train_y, &train_raw, &test_y, &test_raw, &Hypothesis::H2(0, 1)).unwrap();
        assert!(rep.transfer_r2 <= rep.test_insample_r2);
        assert!(
            rep.delta.abs() < 0.02,
            "shared-law gap too large: {}",
            rep.delta
        );
        assert!(rep.test_insample_r2 > 0.9);
    }

    #[test]
    fn decoupled_test_target_still_respects_bound() {
        let train_raw = raw_features(20, 0.0, 6);
        let test_raw = raw_features(20, 0.2, 7);
        let fm = feature_pipeline(&train_raw).unwrap();
        let z_train = fm.apply(&train_raw).unwrap();
        let train_y: Vec<f64> = (0..20).map(|i| 0.1 + 0.05 * z_train[[i, 0]]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let test_y: Vec<f64> = (0..20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let rep = transfer(&train_y, &train_raw, &test_y, &test_raw, &Hypothesis::H1(0)).unwrap();
        assert!(rep.transfer_r2 <= rep.test_insample_r2 + 1e-12);
    }

    #[test]
    fn zero_variance_train_feature_is_an_error() {
        let mut train_raw = raw_features(12, 0.0, 9);
        for i in 0..12 {
            train_raw[[i, 2]] = 1.0;
        }
        let test_raw = raw_features(12, 0.0, 10);
        let y = vec![0.5; 12];
        assert!(matches!(
            transfer(&y, &train_raw, &y, &test_raw, &Hypothesis::HFull),
            Err(Error::ZeroVarianceFeature { feature: 2 })
        ));
    }
}
