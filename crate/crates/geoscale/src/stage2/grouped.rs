//! Row-per-checkpoint and long-format regressions with grouped-by-layer CV.
//!
//! The checkpoint regression regresses log L on the scaling-law base
//! [1, log n, log k, log n log k] augmented, for each geometric feature g in
//! the hypothesis, with the 4-term interaction block
//! [g, g log n, g log k, g log n log k]. The long-format regression fits
//! alpha(layer, k) on (log k, g, g log k) with variants isolating whether
//! geometry enters the level, the tilt, or both. Cross-validation removes
//! whole layers (all rows of the held-out layers together) via the block
//! hat-matrix formula.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lko::lko_r2_grouped;
use super::{Hypothesis, HypothesisFit};
use crate::error::{Error, Result};
use crate::geometry::{FeatureMatrix, FEATURE_NAMES};
use crate::ols::ols_fit;

/// One checkpoint row; `layer_index` addresses the feature-matrix row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub layer_index: usize,
    pub width: f64,
    pub k: f64,
    pub loss: f64,
}

/// A grouped regression result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupedFit {
    pub hypothesis: String,
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub r2: f64,
    /// Grouped leave-one-layer-out R^2.
    pub loo_grouped: f64,
    pub n_rows: usize,
    pub n_groups: usize,
    pub n_params: usize,
    pub rss: f64,
}

fn groups_of(layer_indices: &[usize]) -> Vec<Vec<usize>> {
    let mut sorted: Vec<usize> = layer_indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .iter()
        .map(|&layer| {
            layer_indices
                .iter()
                .enumerate()
                .filter_map(|(row, &l)| (l == layer).then_some(row))
                .collect()
        })
        .collect()
}

fn grouped_fit(
    h: &Hypothesis,
    names: Vec<String>,
    design: DMatrix<f64>,
    y: Vec<f64>,
    layer_indices: &[usize],
) -> Result<GroupedFit> {
    let groups = groups_of(layer_indices);
    if groups.len() < 2 {
        return Err(Error::InsufficientData(
            "grouped leave-one-layer-out is undefined on a single layer".into(),
        ));
    }
    let n = y.len();
    let p = design.ncols();
    let yv = DVector::from_row_slice(&y);
    let fit = ols_fit(&design, &yv, true).map_err(|e| Error::SingularDesign(e.to_string()))?;
    let mean_y = yv.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - fit.rss / ss_tot } else { 0.0 };
    // standard errors from sigma^2 (X'X)^-1
    let xtx_inv = (design.transpose() * &design)
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("X'X not invertible".into()))?;
    let sigma2 = fit.rss / (n - p) as f64;
    let se: Vec<f64> = (0..p).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt()).collect();

    let hfit = HypothesisFit {
        hypothesis: h.clone(),
        coefficients: fit.beta.iter().copied().collect(),
        r2,
        rss: fit.rss,
        ss_tot,
        n,
        p,
        residuals: fit.residuals.iter().copied().collect(),
        degenerate: ss_tot <= 0.0,
        hat: fit.hat.expect("hat requested"),
    };
    let loo = lko_r2_grouped(&hfit, &groups, 1)?;
    Ok(GroupedFit {
        hypothesis: h.label(),
        coefficient_names: names,
        coefficients: hfit.coefficients.clone(),
        standard_errors: se,
        r2,
        loo_grouped: loo.r2,
        n_rows: n,
        n_groups: groups.len(),
        n_params: p,
        rss: hfit.rss,
    })
}

/// Regress log L on the scaling-law base plus per-feature interaction blocks,
/// directly across checkpoints.
pub fn checkpoint_regression(
    rows: &[CheckpointRow],
    x: &FeatureMatrix,
    h: &Hypothesis,
) -> Result<GroupedFit> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no checkpoint rows".into()));
    }
    let mut widths: Vec<f64> = rows.iter().map(|r| r.width).collect();
    widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    widths.dedup();
    let mut ks: Vec<f64> = rows.iter().map(|r| r.k).collect();
    ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ks.dedup();
    if widths.len() < 2 || ks.len() < 2 {
        return Err(Error::InsufficientData(
            "checkpoint regression needs >= 2 widths and >= 2 sparsities".into(),
        ));
    }
    let features = h.features();
    let p = 4 * (1 + features.len());
    let n = rows.len();
    let mut design = DMatrix::zeros(n, p);
    let mut names = vec![
        "1".to_string(),
        "log_n".to_string(),
        "log_k".to_string(),
        "log_n*log_k".to_string(),
    ];
    for &f in &features {
        for base in ["", "*log_n", "*log_k", "*log_n*log_k"] {
            names.push(format!("{}{base}", FEATURE_NAMES[f]));
        }
    }
    let mut y = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        if !(row.loss > 0.0) {
            return Err(Error::NonPositiveLoss {
                line: i + 1,
                value: row.loss,
            });
        }
        let ln_n = row.width.ln();
        let ln_k = row.k.ln();
        design[(i, 0)] = 1.0;
        design[(i, 1)] = ln_n;
        design[(i, 2)] = ln_k;
        design[(i, 3)] = ln_n * ln_k;
        for (b, &f) in features.iter().enumerate() {
            let g = x.standardized[row.layer_index][f];
            let off = 4 + 4 * b;
            design[(i, off)] = g;
            design[(i, off + 1)] = g * ln_n;
            design[(i, off + 2)] = g * ln_k;
            design[(i, off + 3)] = g * ln_n * ln_k;
        }
        y.push(row.loss.ln());
    }
    let layer_indices: Vec<usize> = rows.iter().map(|r| r.layer_index).collect();
    grouped_fit(h, names, design, y, &layer_indices)
}

/// Which terms carry the geometric signal in the long-format design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongVariant {
    /// Geometry enters as a level shift (a beta_n modifier).
    InterceptOnly,
    /// Geometry enters through the log k tilt (a gamma modifier).
    LogKOnly,
    /// Both entries.
    Both,
}

impl LongVariant {
    pub fn label(&self) -> &'static str {
        match self {
            LongVariant::InterceptOnly => "intercept_only",
            LongVariant::LogKOnly => "log_k_only",
            LongVariant::Both => "both",
        }
    }
}

/// One long-format row: the derived exponent of one (layer, k) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaRow {
    pub layer_index: usize,
    pub k: f64,
    pub alpha: f64,
}

/// Single regression of alpha(layer, k) on (log k, g, g log k) across the
/// long-format grid.
pub fn long_format_regression(
    rows: &[AlphaRow],
    x: &FeatureMatrix,
    h: &Hypothesis,
    variant: LongVariant,
) -> Result<GroupedFit> {
    let mut ks: Vec<f64> = rows.iter().map(|r| r.k).collect();
    ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ks.dedup();
    if ks.len() < 2 {
        return Err(Error::InsufficientData(
            "long-format regression needs >= 2 sparsity targets".into(),
        ));
    }
    let features = h.features();
    let per_feature = match variant {
        LongVariant::Both => 2,
        _ => 1,
    };
    let p = 2 + per_feature * features.len();
    let n = rows.len();
    let mut names = vec!["1".to_string(), "log_k".to_string()];
    for &f in &features {
        match variant {
            LongVariant::InterceptOnly => names.push(FEATURE_NAMES[f].to_string()),
            LongVariant::LogKOnly => names.push(format!("{}*log_k", FEATURE_NAMES[f])),
            LongVariant::Both => {
                names.push(FEATURE_NAMES[f].to_string());
                names.push(format!("{}*log_k", FEATURE_NAMES[f]));
            }
        }
    }
    let mut design = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let ln_k = row.k.ln();
        design[(i, 0)] = 1.0;
        design[(i, 1)] = ln_k;
        let mut col = 2;
        for &f in &features {
            let g = x.standardized[row.layer_index][f];
            match variant {
                LongVariant::InterceptOnly => {
                    design[(i, col)] = g;
                    col += 1;
                }
                LongVariant::LogKOnly => {
                    design[(i, col)] = g * ln_k;
                    col += 1;
                }
                LongVariant::Both => {
                    design[(i, col)] = g;
                    design[(i, col + 1)] = g * ln_k;
                    col += 2;
                }
            }
        }
        y.push(row.alpha);
    }
    let layer_indices: Vec<usize> = rows.iter().map(|r| r.layer_index).collect();
    grouped_fit(h, names, design, y, &layer_indices)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::random_features;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const WIDTHS: [f64; 3] = [4096.0, 16384.0, 65536.0];
    const KS: [f64; 5] = [16.0, 32.0, 64.0, 128.0, 192.0];

    fn rows_from_surface(
        x: &FeatureMatrix,
        beta_n_of: impl Fn(&[f64]) -> f64,
        noise_sd: f64,
        seed: u64,
    ) -> Vec<CheckpointRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for (layer, feats) in x.standardized.iter().enumerate() {
            let beta_n = beta_n_of(feats);
            for &n in &WIDTHS {
                for &k in &KS {
                    let log_l = 0.5 + beta_n * n.ln() - 0.4 * k.ln() + 0.01 * n.ln() * k.ln();
                    let eps: f64 = rng.sample(StandardNormal);
                    rows.push(CheckpointRow {
                        layer_index: layer,
                        width: n,
                        k,
                        loss: (log_l + noise_sd * eps).exp(),
                    });
                }
            }
        }
        rows
    }

    #[test]
    fn geometry_independent_surface_has_null_interactions() {
        let x = random_features(10, 1);
        let rows = rows_from_surface(&x, |_| -0.2, 0.01, 2);
        let fit = checkpoint_regression(&rows, &x, &Hypothesis::H1(1)).unwrap();
        // the 4 interaction coefficients are consistent with zero
        for j in 4..8 {
            assert!(
                fit.coefficients[j].abs() < 3.0 * fit.standard_errors[j],
                "{} = {} (se {})",
                fit.coefficient_names[j],
                fit.coefficients[j],
                fit.standard_errors[j]
            );
        }
    }

    #[test]
    fn beta_n_coupling_recovered_via_interaction() {
        let x = random_features(10, 3);
        // beta_n = -0.2 + 0.04 * kappa_ms(standardized)
        let rows = rows_from_surface(&x, |f| -0.2 + 0.04 * f[1], 0.0, 4);
        let fit = checkpoint_regression(&rows, &x, &Hypothesis::H1(1)).unwrap();
        // g*log_n coefficient recovers the planted slope exactly (noiseless)
        let idx = fit
            .coefficient_names
            .iter()
            .position(|n| n == "kappa_ms*log_n")
            .unwrap();
        assert!(
            (fit.coefficients[idx] - 0.04).abs() < 1e-9,
            "{}",
            fit.coefficients[idx]
        );
        assert!(fit.r2 > 0.999999);
    }

    #[test]
    fn single_layer_grouped_cv_is_an_error() {
        let x = random_features(2, 5);
        let rows: Vec<CheckpointRow> = rows_from_surface(&x, |_| -0.2, 0.0, 6)
            .into_iter()
            .filter(|r| r.layer_index == 0)
            .collect();
        assert!(matches!(
            checkpoint_regression(&rows, &x, &Hypothesis::H1(0)),
            Err(Error::InsufficientData(_))
        ));
    }

    fn alpha_rows(
        x: &FeatureMatrix,
        beta_n_of: impl Fn(&[f64]) -> f64,
        gamma_of: impl Fn(&[f64]) -> f64,
    ) -> Vec<AlphaRow> {
        let mut rows = Vec::new();
        for (layer, feats) in x.standardized.iter().enumerate() {
            for &k in &KS {
                rows.push(AlphaRow {
                    layer_index: layer,
                    k,
                    alpha: -(beta_n_of(feats) + gamma_of(feats) * k.ln()),
                });
            }
        }
        rows
    }

    #[test]
    fn level_shift_matches_between_intercept_only_and_both() {
        let x = random_features(12, 7);
        // geometry shifts beta_n only; gamma fixed
        let rows = alpha_rows(&x, |f| -0.2 + 0.05 * f[2], |_| -0.01);
        let a = long_format_regression(&rows, &x, &Hypothesis::H1(2), LongVariant::InterceptOnly)
            .unwrap();
        let b = long_format_regression(&rows, &x, &Hypothesis::H1(2), LongVariant::Both).unwrap();
        assert!(
            (a.loo_grouped - b.loo_grouped).abs() < 0.01,
            "{} vs {}",
            a.loo_grouped,
            b.loo_grouped
        );
        assert!(a.loo_grouped > 0.99);
    }

    #[test]
    fn tilt_shift_prefers_log_k_only() {
        let x = random_features(12, 8);
        // geometry shifts gamma only
        let rows = alpha_rows(&x, |_| -0.2, |f| -0.01 + 0.004 * f[3]);
        let tilt =
            long_format_regression(&rows, &x, &Hypothesis::H1(3), LongVariant::LogKOnly).unwrap();
        let level = long_format_regression(&rows, &x, &Hypothesis::H1(3), LongVariant::InterceptOnly)
            .unwrap();
        assert!(tilt.loo_grouped > level.loo_grouped);
        assert!(tilt.r2 > 0.999999);
    }

    #[test]
    fn zero_gamma_means_zero_log_k_coefficient() {
        let x = random_features(10, 9);
        let rows = alpha_rows(&x, |f| -0.25 + 0.03 * f[0], |_| 0.0);
        let fit =
            long_format_regression(&rows, &x, &Hypothesis::H1(0), LongVariant::InterceptOnly)
                .unwrap();
        let idx = fit.coefficient_names.iter().position(|n| n == "log_k").unwrap();
        assert!(fit.coefficients[idx].abs() < 1e-10);
    }
}
