//! Model-selection machinery: information criteria, nested F-tests, the
//! F-test ladder, and layer-permutation nulls.
//!
//! AIC/BIC use the Gaussian profile likelihood with sigma^2 = RSS/n and the
//! additive constant n(ln 2pi + 1) dropped; the error variance counts as one
//! parameter, so the penalty applies to p + 1. Only differences between
//! models are meaningful under this convention. The F tail is computed via
//! the regularized incomplete beta function (survival form, so p-values far
//! below 1e-10 keep full precision).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_hypothesis, h1_ranking, lko_r2, Hypothesis, HypothesisFit};
use crate::error::{Error, Result};
use crate::geometry::FeatureMatrix;
use crate::numeric::{mean, std_dev};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Criteria {
    pub aic: f64,
    pub bic: f64,
    /// RSS was exactly zero; criteria are -inf sentinels.
    pub rss_zero: bool,
}

/// Gaussian-likelihood AIC/BIC with the variance counted as a parameter.
pub fn information_criteria(fit: &HypothesisFit) -> Criteria {
    let n = fit.n as f64;
    let p_eff = (fit.p + 1) as f64;
    if fit.rss <= 0.0 {
        return Criteria {
            aic: f64::NEG_INFINITY,
            bic: f64::NEG_INFINITY,
            rss_zero: true,
        };
    }
    let core = n * (fit.rss / n).ln();
    Criteria {
        aic: core + 2.0 * p_eff,
        bic: core + p_eff * n.ln(),
        rss_zero: false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
}

/// Upper tail of the F(d1, d2) distribution via the regularized incomplete
/// beta: P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2).
fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    let x = d2 / (d2 + d1 * f);
    statrs::function::beta::beta_reg(d2 / 2.0, d1 / 2.0, x)
}

/// Standard nested-OLS F test.
pub fn f_test(nested: &HypothesisFit, full: &HypothesisFit) -> Result<FTest> {
    if !nested.hypothesis.is_nested_in(&full.hypothesis) {
        return Err(Error::Config(format!(
            "{} is not nested in {}",
            nested.hypothesis.label(),
            full.hypothesis.label()
        )));
    }
    if nested.n != full.n {
        return Err(Error::Config("F test needs the same target vector".into()));
    }
    let dp = full.p - nested.p;
    if dp == 0 {
        return Err(Error::Config("F test needs delta p >= 1".into()));
    }
    let df_den = full.n - full.p;
    // constant target: both RSS are rounding noise, nothing to test
    if full.degenerate || nested.degenerate {
        return Ok(FTest {
            f: 0.0,
            p_value: 1.0,
            df_num: dp,
            df_den,
        });
    }
    let f = ((nested.rss - full.rss) / dp as f64) / (full.rss / df_den as f64);
    let f = f.max(0.0);
    Ok(FTest {
        f,
        p_value: f_survival(f, dp as f64, df_den as f64),
        df_num: dp,
        df_den,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderStep {
    pub from: String,
    pub to: String,
    pub f: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderReport {
    pub best_feature: usize,
    pub next_feature: usize,
    pub steps: Vec<LadderStep>,
}

/// F-tests for the steps H0 -> H1_best -> H2_best+next -> Hfull.
pub fn f_ladder(y: &[f64], x: &FeatureMatrix) -> Result<LadderReport> {
    let ranked = h1_ranking(y, x)?;
    let (best, next) = (ranked[0].0, ranked[1].0);
    let h0 = fit_hypothesis(y, x, &Hypothesis::H0)?;
    let h1 = fit_hypothesis(y, x, &Hypothesis::H1(best))?;
    let h2 = fit_hypothesis(y, x, &Hypothesis::H2(best.min(next), best.max(next)))?;
    let hf = fit_hypothesis(y, x, &Hypothesis::HFull)?;
    let mut steps = Vec::with_capacity(3);
    for (a, b) in [(&h0, &h1), (&h1, &h2), (&h2, &hf)] {
        let t = f_test(a, b)?;
        steps.push(LadderStep {
            from: a.hypothesis.label(),
            to: b.hypothesis.label(),
            f: t.f,
            p_value: t.p_value,
        });
    }
    Ok(LadderReport {
        best_feature: best,
        next_feature: next,
        steps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationReport {
    pub observed_loo: f64,
    pub p_value: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Layer-permutation null: permute the layer-to-geometry mapping (rows of X;
/// the target stays put), recompute the closed-form LOO R^2, and report the
/// add-one-smoothed fraction of null samples >= observed.
pub fn permutation_test(
    y: &[f64],
    x: &FeatureMatrix,
    h: &Hypothesis,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationReport> {
    let observed_fit = fit_hypothesis(y, x, h)?;
    let observed = lko_r2(&observed_fit, 1)?.r2;
    let n = y.len();
    // permutations drawn sequentially for determinism, evaluated in parallel
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..n_perm)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let null: Vec<f64> = perms
        .par_iter()
        .map(|perm| {
            let xp = FeatureMatrix {
                standardized: perm.iter().map(|&i| x.standardized[i].clone()).collect(),
                clip_lo: x.clip_lo.clone(),
                clip_hi: x.clip_hi.clone(),
                log_mean: x.log_mean.clone(),
                log_sd: x.log_sd.clone(),
            };
            let fit = fit_hypothesis(y, &xp, h).expect("permuted fit");
            lko_r2(&fit, 1).expect("permuted loo").r2
        })
        .collect();
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    Ok(PermutationReport {
        observed_loo: observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        null_mean: mean(&null),
        null_sd: std_dev(&null, 1),
        n_permutations: n_perm,
        seed,
    })
}
