//! Cross-layer regression of per-layer scaling targets on geometry.
//!
//! A nested hypothesis family is fit per (model, target): H0 (intercept
//! only, the geometry-invariant null), H1 per single feature, H2 (a feature
//! pair, selected either as the lowest-|rho| pair or as best+next), and
//! H_full (all four features). Evaluation: in-sample R^2, closed-form
//! leave-1/2/3-out R^2 via the hat matrix, AIC/BIC, an F-test against H0,
//! and layer-permutation p-values.

pub mod grouped;
pub mod inference;
pub mod lko;
pub mod transfer;

pub use grouped::{checkpoint_regression, long_format_regression, CheckpointRow, GroupedFit, LongVariant};
pub use inference::{
    f_ladder, f_test, information_criteria, permutation_test, Criteria, FTest, LadderReport,
    PermutationReport,
};
pub use lko::{h0_loo_r2, lko_r2, lko_r2_grouped, LkoResult};
pub use transfer::{transfer, TransferReport};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::config::H2Mode;
use crate::error::{Error, Result};
use crate::geometry::{FeatureMatrix, FEATURE_NAMES};
use crate::ols::ols_fit;

/// One member of the nested hypothesis family, by geometric feature subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1(usize),
    H2(usize, usize),
    HFull,
}

impl Hypothesis {
    pub fn features(&self) -> Vec<usize> {
        match self {
            Hypothesis::H0 => vec![],
            Hypothesis::H1(a) => vec![*a],
            Hypothesis::H2(a, b) => vec![*a, *b],
            Hypothesis::HFull => (0..4).collect(),
        }
    }

    /// Parameter count including the intercept.
    pub fn param_count(&self) -> usize {
        1 + self.features().len()
    }

    pub fn label(&self) -> String {
        match self {
            Hypothesis::H0 => "H0".into(),
            Hypothesis::H1(a) => format!("H1_{}", FEATURE_NAMES[*a]),
            Hypothesis::H2(a, b) => format!("H2_{}+{}", FEATURE_NAMES[*a], FEATURE_NAMES[*b]),
            Hypothesis::HFull => "Hfull".into(),
        }
    }

    pub fn is_nested_in(&self, other: &Hypothesis) -> bool {
        let mine = self.features();
        let theirs = other.features();
        mine.iter().all(|f| theirs.contains(f))
    }
}

/// A fitted hypothesis, carrying what the evaluation metrics need.
#[derive(Debug, Clone)]
pub struct HypothesisFit {
    pub hypothesis: Hypothesis,
    /// Intercept first, then one coefficient per feature in subset order.
    pub coefficients: Vec<f64>,
    pub r2: f64,
    pub rss: f64,
    pub ss_tot: f64,
    pub n: usize,
    /// Parameter count including intercept.
    pub p: usize,
    pub residuals: Vec<f64>,
    /// Constant target: SS_tot is zero and variance-ratio metrics degenerate.
    pub degenerate: bool,
    pub(crate) hat: DMatrix<f64>,
}

fn design_for(features: &[usize], x: &FeatureMatrix) -> DMatrix<f64> {
    let n = x.n_rows();
    let mut m = DMatrix::zeros(n, 1 + features.len());
    for i in 0..n {
        m[(i, 0)] = 1.0;
        for (c, &f) in features.iter().enumerate() {
            m[(i, c + 1)] = x.standardized[i][f];
        }
    }
    m
}

/// OLS of a per-layer target on the selected standardized features.
pub fn fit_hypothesis(y: &[f64], x: &FeatureMatrix, h: &Hypothesis) -> Result<HypothesisFit> {
    let n = y.len();
    if n != x.n_rows() {
        return Err(Error::Config(format!(
            "target has {n} rows, features have {}",
            x.n_rows()
        )));
    }
    let p = h.param_count();
    if n <= p + 1 {
        return Err(Error::InsufficientData(format!(
            "need n_layers > p + 1 = {}, got {n}",
            p + 1
        )));
    }
    let design = design_for(&h.features(), x);
    let yv = DVector::from_row_slice(y);
    let fit = ols_fit(&design, &yv, true).map_err(|e| Error::SingularDesign(e.to_string()))?;
    let mean_y = yv.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    // a constant target leaves only rounding noise in SS_tot
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let degenerate = ss_tot <= scale * 1e-28;
    let r2 = if degenerate { 0.0 } else { 1.0 - fit.rss / ss_tot };
    Ok(HypothesisFit {
        hypothesis: h.clone(),
        coefficients: fit.beta.iter().copied().collect(),
        r2,
        rss: fit.rss,
        ss_tot: if degenerate { 0.0 } else { ss_tot },
        n,
        p,
        residuals: fit.residuals.iter().copied().collect(),
        degenerate,
        hat: fit.hat.expect("hat requested"),
    })
}

/// Pearson correlation of two standardized feature columns.
fn column_correlation(x: &FeatureMatrix, a: usize, b: usize) -> f64 {
    let ca = x.column(a);
    let cb = x.column(b);
    let n = ca.len() as f64;
    let ma = ca.iter().sum::<f64>() / n;
    let mb = cb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (xa, xb) in ca.iter().zip(&cb) {
        cov += (xa - ma) * (xb - mb);
        va += (xa - ma) * (xa - ma);
        vb += (xb - mb) * (xb - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// The lowest-pairwise-|correlation| feature pair (table convention).
pub fn h2_lowest_rho(x: &FeatureMatrix) -> (usize, usize) {
    let mut best = (0, 1);
    let mut best_abs = f64::INFINITY;
    for a in 0..4 {
        for b in (a + 1)..4 {
            let r = column_correlation(x, a, b).abs();
            if r < best_abs {
                best_abs = r;
                best = (a, b);
            }
        }
    }
    best
}

/// Features ranked by single-feature in-sample R^2, best first.
pub fn h1_ranking(y: &[f64], x: &FeatureMatrix) -> Result<Vec<(usize, f64)>> {
    let mut ranked = Vec::with_capacity(4);
    for f in 0..4 {
        let fit = fit_hypothesis(y, x, &Hypothesis::H1(f))?;
        ranked.push((f, fit.r2));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(ranked)
}

/// Select the H2 pair under the configured convention.
pub fn select_h2(y: &[f64], x: &FeatureMatrix, mode: H2Mode) -> Result<(usize, usize)> {
    match mode {
        H2Mode::LowestRho => Ok(h2_lowest_rho(x)),
        H2Mode::BestNext => {
            let ranked = h1_ranking(y, x)?;
            Ok((ranked[0].0, ranked[1].0))
        }
    }
}

/// The hierarchy rows of one (model, target) table: H0, H1 x 4, H2, Hfull.
pub fn hierarchy(y: &[f64], x: &FeatureMatrix, mode: H2Mode) -> Result<Vec<Hypothesis>> {
    let (a, b) = select_h2(y, x, mode)?;
    let mut rows = vec![Hypothesis::H0];
    rows.extend((0..4).map(Hypothesis::H1));
    rows.push(Hypothesis::H2(a, b));
    rows.push(Hypothesis::HFull);
    Ok(rows)
}

/// One row of the reported hierarchy table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub hypothesis: String,
    /// How the H2 pair was selected, echoed for the record.
    pub h2_mode: Option<String>,
    pub target: String,
    pub coefficients: Vec<f64>,
    pub r2: f64,
    pub loo: f64,
    pub l2o: f64,
    pub l3o: f64,
    pub aic: f64,
    pub bic: f64,
    /// F statistic against H0; None for the H0 row itself.
    pub f_vs_h0: Option<f64>,
    pub p_value: Option<f64>,
    pub n_layers: usize,
}

/// Fit the full hierarchy for one target and assemble the table rows.
pub fn hierarchy_report(
    target_name: &str,
    y: &[f64],
    x: &FeatureMatrix,
    mode: H2Mode,
) -> Result<Vec<RegressionReport>> {
    let rows = hierarchy(y, x, mode)?;
    let h0_fit = fit_hypothesis(y, x, &Hypothesis::H0)?;
    let mut out = Vec::with_capacity(rows.len());
    for h in &rows {
        let fit = fit_hypothesis(y, x, h)?;
        let crit = information_criteria(&fit);
        let (f_vs_h0, p_value) = if matches!(h, Hypothesis::H0) {
            (None, None)
        } else {
            let ft = f_test(&h0_fit, &fit)?;
            (Some(ft.f), Some(ft.p_value))
        };
        let h2_mode = matches!(h, Hypothesis::H2(_, _)).then(|| {
            match mode {
                H2Mode::LowestRho => "lowest_rho".to_string(),
                H2Mode::BestNext => "best_next".to_string(),
            }
        });
        out.push(RegressionReport {
            hypothesis: h.label(),
            h2_mode,
            target: target_name.to_string(),
            coefficients: fit.coefficients.clone(),
            r2: fit.r2,
            loo: lko_r2(&fit, 1)?.r2,
            l2o: lko_r2(&fit, 2)?.r2,
            l3o: lko_r2(&fit, 3)?.r2,
            aic: crit.aic,
            bic: crit.bic,
            f_vs_h0,
            p_value,
            n_layers: fit.n,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use testutil::{noise, random_features};

    #[test]
    fn exact_single_feature_signal_recovered() {
        let x = random_features(12, 1);
        let y: Vec<f64> = x.standardized.iter().map(|r| 0.4 + 2.5 * r[1]).collect();
        let fit = fit_hypothesis(&y, &x, &Hypothesis::H1(1)).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[0] - 0.4).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.5).abs() < 1e-10);
    }

    #[test]
    fn constant_target_gives_zero_r2_and_zero_slopes() {
        let x = random_features(10, 2);
        let y = vec![1.7; 10];
        for h in [Hypothesis::H0, Hypothesis::H1(0), Hypothesis::HFull] {
            let fit = fit_hypothesis(&y, &x, &h).unwrap();
            assert_eq!(fit.r2, 0.0);
            for c in &fit.coefficients[1..] {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn h0_r2_is_zero_by_definition() {
        let x = random_features(9, 3);
        let y = noise(9, 1.0, 4);
        let fit = fit_hypothesis(&y, &x, &Hypothesis::H0).unwrap();
        assert!(fit.r2.abs() < 1e-15);
        assert_eq!(fit.p, 1);
    }

    #[test]
    fn residuals_permute_with_layers() {
        let x = random_features(11, 5);
        let mut y = noise(11, 1.0, 6);
        y[3] += 2.0;
        let fit = fit_hypothesis(&y, &x, &Hypothesis::HFull).unwrap();
        // permute layer order
        let perm: Vec<usize> = vec![4, 0, 7, 2, 9, 1, 10, 3, 8, 5, 6];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let xp = FeatureMatrix {
            standardized: perm.iter().map(|&i| x.standardized[i].clone()).collect(),
            ..x.clone()
        };
        let fitp = fit_hypothesis(&yp, &xp, &Hypothesis::HFull).unwrap();
        assert!((fit.r2 - fitp.r2).abs() < 1e-12);
        assert!((fit.rss - fitp.rss).abs() < 1e-12);
        for (i, &src) in perm.iter().enumerate() {
            assert!((fitp.residuals[i] - fit.residuals[src]).abs() < 1e-10);
        }
    }

    #[test]
    fn hypothesis_labels_and_nesting() {
        assert_eq!(Hypothesis::H0.label(), "H0");
        assert_eq!(Hypothesis::H1(1).label(), "H1_kappa_ms");
        assert_eq!(Hypothesis::H2(0, 3).label(), "H2_d_int+nu");
        assert!(Hypothesis::H0.is_nested_in(&Hypothesis::H1(2)));
        assert!(Hypothesis::H1(1).is_nested_in(&Hypothesis::HFull));
        assert!(!Hypothesis::H1(1).is_nested_in(&Hypothesis::H2(0, 3)));
        assert_eq!(Hypothesis::H0.param_count(), 1);
        assert_eq!(Hypothesis::H2(0, 1).param_count(), 3);
        assert_eq!(Hypothesis::HFull.param_count(), 5);
    }

    #[test]
    fn h2_selection_modes() {
        let x = random_features(20, 7);
        let (a, b) = h2_lowest_rho(&x);
        assert!(a < b);
        // best+next follows the single-feature R^2 ranking
        let y: Vec<f64> = x
            .standardized
            .iter()
            .enumerate()
            .map(|(i, r)| 3.0 * r[2] + 0.5 * r[0] + noise(20, 0.1, 8)[i])
            .collect();
        let ranked = h1_ranking(&y, &x).unwrap();
        assert_eq!(ranked[0].0, 2);
        let (best, _next) = select_h2(&y, &x, H2Mode::BestNext).unwrap();
        assert_eq!(best, 2);
    }

    #[test]
    fn hierarchy_has_seven_rows() {
        let x = random_features(12, 9);
        let y = noise(12, 1.0, 10);
        let rows = hierarchy_report("alpha_at_k", &y, &x, H2Mode::LowestRho).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].hypothesis, "H0");
        assert!(rows[0].f_vs_h0.is_none());
        assert!(rows[6].hypothesis == "Hfull");
        assert!(rows[1..].iter().all(|r| r.f_vs_h0.is_some()));
    }
}
