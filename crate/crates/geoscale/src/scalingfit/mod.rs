//! Per-layer scaling-surface estimation.
//!
//! Stage 1 fits the no-floor log-linear surface
//! `log L = a0 + beta_n log n + beta_k log k + gamma log n log k`
//! by OLS at every layer; the derived width exponent at sparsity k is
//! `alpha(k) = -(beta_n + gamma log k)`. The non-parametric companion is the
//! backbone secant: the chord slope of log L against log n between the two
//! backbone widths. At showcase layers (>= 3 widths) the 6-parameter
//! with-floor surface `L = A(k) n^-alpha(k) + B(k)` is refit by multi-start
//! Nelder-Mead after monotone filtering; the floor-attenuation identity links
//! the two exponents. Natural logarithms everywhere.

pub mod filters;
pub mod floor;

pub use filters::{monotone_filters, DropEvent, FilterOutcome, GridCell};
pub use floor::{fit_floor, FloorFit, SeedTrace};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeometrySummary, FEATURE_NAMES};
use crate::interp::SparsityCurve;
use crate::numeric::kendall_tau;
use crate::ols::ols_fit;

/// Stage-1 no-floor surface fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub a0: f64,
    pub beta_n: f64,
    pub beta_k: f64,
    pub gamma: f64,
    pub n_points: usize,
    pub rss: f64,
    pub condition_number: f64,
    pub residuals: Vec<f64>,
    pub hat_diag: Vec<f64>,
}

/// OLS of log L on [1, log n, log k, log n log k] over (n, k, L) triples.
pub fn fit_stage1(triples: &[(f64, f64, f64)]) -> Result<Stage1Fit> {
    if triples.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "stage-1 fit needs >= 5 triples, got {}",
            triples.len()
        )));
    }
    let mut widths: Vec<f64> = triples.iter().map(|t| t.0).collect();
    widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    widths.dedup();
    let mut ks: Vec<f64> = triples.iter().map(|t| t.1).collect();
    ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ks.dedup();
    if widths.len() < 2 {
        return Err(Error::RankDeficient(
            "stage-1 fit needs >= 2 distinct widths".into(),
        ));
    }
    if ks.len() < 2 {
        return Err(Error::RankDeficient(
            "stage-1 fit needs >= 2 distinct sparsity values".into(),
        ));
    }
    for &(n, k, l) in triples {
        if !(n > 0.0 && k > 0.0 && l > 0.0) {
            return Err(Error::InsufficientData(format!(
                "stage-1 triples must be positive, got ({n}, {k}, {l})"
            )));
        }
    }
    let rows = triples.len();
    let mut x = DMatrix::zeros(rows, 4);
    let mut y = DVector::zeros(rows);
    for (i, &(n, k, l)) in triples.iter().enumerate() {
        let ln_n = n.ln();
        let ln_k = k.ln();
        x[(i, 0)] = 1.0;
        x[(i, 1)] = ln_n;
        x[(i, 2)] = ln_k;
        x[(i, 3)] = ln_n * ln_k;
        y[i] = l.ln();
    }
    let fit = ols_fit(&x, &y, true)?;
    let hat = fit.hat.as_ref().expect("hat requested");
    Ok(Stage1Fit {
        a0: fit.beta[0],
        beta_n: fit.beta[1],
        beta_k: fit.beta[2],
        gamma: fit.beta[3],
        n_points: rows,
        rss: fit.rss,
        condition_number: fit.condition_number,
        residuals: fit.residuals.iter().copied().collect(),
        hat_diag: (0..rows).map(|i| hat[(i, i)]).collect(),
    })
}

/// Derived width exponent at sparsity k. Negative values are reported, not
/// clamped.
pub fn alpha_at(fit: &Stage1Fit, k: f64) -> f64 {
    -(fit.beta_n + fit.gamma * k.ln())
}

/// Non-parametric backbone-secant exponent: minus the chord slope of the two
/// widths' interpolated log L at sparsity k.
pub fn secant_alpha(
    curve_lo: &SparsityCurve,
    curve_hi: &SparsityCurve,
    k: f64,
    n_lo: f64,
    n_hi: f64,
) -> Result<f64> {
    if !(n_hi > n_lo) {
        return Err(Error::Config(format!(
            "secant needs n_hi > n_lo, got {n_lo}, {n_hi}"
        )));
    }
    let log_l_lo = curve_lo.eval_log(k)?;
    let log_l_hi = curve_hi.eval_log(k)?;
    Ok(-(log_l_hi - log_l_lo) / (n_hi.ln() - n_lo.ln()))
}

/// Floor-attenuation: how much a no-floor/secant exponent measured between
/// widths (n_lo, n_hi) understates the with-floor exponent at sparsity k.
/// Non-negative whenever the fitted floor is.
pub fn floor_attenuation(wf: &FloorFit, n_lo: f64, n_hi: f64, k: f64) -> f64 {
    let b = wf.b(k);
    let r_lo = wf.reducible(n_lo, k);
    let r_hi = wf.reducible(n_hi, k);
    ((1.0 + b / r_hi) / (1.0 + b / r_lo)).ln() / (n_hi / n_lo).ln()
}

/// Within-model rank concordance between fitted floors and each geometric
/// feature. A ranking table, explicitly not a regression: the floor is
/// identifiable at only a handful of layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloorRanking {
    pub n_layers: usize,
    /// (feature name, Kendall tau against B(k)) in fixed feature order.
    pub tau: Vec<(String, f64)>,
}

pub fn floor_ranking(b_values: &[f64], geoms: &[GeometrySummary]) -> Result<FloorRanking> {
    if b_values.len() != geoms.len() || b_values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "floor ranking needs >= 2 aligned layers, got {} and {}",
            b_values.len(),
            geoms.len()
        )));
    }
    let mut tau = Vec::with_capacity(4);
    for (j, name) in FEATURE_NAMES.iter().enumerate() {
        let feature: Vec<f64> = geoms.iter().map(|g| g.features()[j]).collect();
        tau.push((name.to_string(), kendall_tau(b_values, &feature)));
    }
    Ok(FloorRanking {
        n_layers: b_values.len(),
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::fit_pchip;

    fn surface(a0: f64, bn: f64, bk: f64, g: f64, n: f64, k: f64) -> f64 {
        (a0 + bn * n.ln() + bk * k.ln() + g * n.ln() * k.ln()).exp()
    }

    #[test]
    fn noiseless_surface_recovered_to_1e10() {
        let (a0, bn, bk, g) = (1.0, -0.2, -0.5, 0.03);
        let mut triples = Vec::new();
        for &n in &[16384.0, 65536.0] {
            for &k in &[16.0, 32.0, 64.0, 128.0, 192.0] {
                triples.push((n, k, surface(a0, bn, bk, g, n, k)));
            }
        }
        let fit = fit_stage1(&triples).unwrap();
        assert!((fit.a0 - a0).abs() < 1e-10);
        assert!((fit.beta_n - bn).abs() < 1e-10);
        assert!((fit.beta_k - bk).abs() < 1e-10);
        assert!((fit.gamma - g).abs() < 1e-10);
        assert!(fit.rss < 1e-20);
    }

    #[test]
    fn single_width_is_rank_deficient() {
        let triples: Vec<(f64, f64, f64)> = [16.0, 32.0, 64.0, 128.0, 192.0]
            .iter()
            .map(|&k| (16384.0, k, surface(1.0, -0.2, -0.5, 0.03, 16384.0, k)))
            .collect();
        assert!(matches!(fit_stage1(&triples), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn alpha_at_hand_values() {
        let fit = Stage1Fit {
            a0: 0.0,
            beta_n: -0.2,
            beta_k: 0.0,
            gamma: 0.0,
            n_points: 0,
            rss: 0.0,
            condition_number: 1.0,
            residuals: vec![],
            hat_diag: vec![],
        };
        assert!((alpha_at(&fit, 1.0) - 0.2).abs() < 1e-15);
        assert!((alpha_at(&fit, 123.0) - 0.2).abs() < 1e-15);
        let fit2 = Stage1Fit {
            gamma: 0.03,
            ..fit
        };
        assert!((alpha_at(&fit2, std::f64::consts::E) - 0.17).abs() < 1e-15);
    }

    #[test]
    fn secant_matches_alpha_on_noiseless_no_floor_data() {
        let (a0, bn, bk, g) = (0.8, -0.15, -0.4, -0.01);
        let (n_lo, n_hi) = (16384.0, 131072.0);
        let ks = [16.0, 24.0, 32.0, 48.0, 64.0, 96.0, 128.0, 160.0, 192.0];
        let mut triples = Vec::new();
        let mut pts_lo = Vec::new();
        let mut pts_hi = Vec::new();
        for &k in &ks {
            triples.push((n_lo, k, surface(a0, bn, bk, g, n_lo, k)));
            triples.push((n_hi, k, surface(a0, bn, bk, g, n_hi, k)));
            pts_lo.push((k, surface(a0, bn, bk, g, n_lo, k)));
            pts_hi.push((k, surface(a0, bn, bk, g, n_hi, k)));
        }
        let fit = fit_stage1(&triples).unwrap();
        let curve_lo = fit_pchip(&pts_lo).unwrap();
        let curve_hi = fit_pchip(&pts_hi).unwrap();
        for &k in &[20.0, 50.0, 100.0, 180.0] {
            let sec = secant_alpha(&curve_lo, &curve_hi, k, n_lo, n_hi).unwrap();
            assert!(
                (sec - alpha_at(&fit, k)).abs() < 1e-12,
                "k={k}: {sec} vs {}",
                alpha_at(&fit, k)
            );
        }
        // exact power law -> exact exponent; equal losses -> zero
        let flat_lo = fit_pchip(&[(16.0, 0.5), (64.0, 0.5), (192.0, 0.5)]).unwrap();
        assert_eq!(
            secant_alpha(&flat_lo, &flat_lo, 50.0, n_lo, n_hi).unwrap(),
            0.0
        );
        // out-of-range k errors
        assert!(matches!(
            secant_alpha(&curve_lo, &curve_hi, 1.0, n_lo, n_hi),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn noisy_recovery_within_three_standard_errors() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;
        // Monte-Carlo: with sigma = 0.01 log-noise the OLS solution must land
        // within 3 SE of truth for the overwhelming majority of seeds.
        let (a0, bn, bk, g) = (1.0, -0.2, -0.5, 0.03);
        let widths = [8192.0, 16384.0, 65536.0];
        let ks = [16.0, 32.0, 64.0, 128.0, 192.0];
        let mut failures = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let triples: Vec<(f64, f64, f64)> = widths
                .iter()
                .flat_map(|&n| {
                    ks.iter().map(move |&k| (n, k))
                })
                .map(|(n, k)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    (n, k, surface(a0, bn, bk, g, n, k) * (0.01 * eps).exp())
                })
                .collect();
            let fit = fit_stage1(&triples).unwrap();
            // sigma^2 (X'X)^-1 diagonal via the residuals
            let dof = (fit.n_points - 4) as f64;
            let sigma2 = fit.rss / dof;
            // standard errors from a fresh design (cheap at this size)
            let mut x = DMatrix::zeros(fit.n_points, 4);
            for (i, &(n, k, _)) in triples.iter().enumerate() {
                x[(i, 0)] = 1.0;
                x[(i, 1)] = n.ln();
                x[(i, 2)] = k.ln();
                x[(i, 3)] = n.ln() * k.ln();
            }
            let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
            let se: Vec<f64> = (0..4).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt()).collect();
            let truth = [a0, bn, bk, g];
            let got = [fit.a0, fit.beta_n, fit.beta_k, fit.gamma];
            if truth
                .iter()
                .zip(&got)
                .zip(&se)
                .any(|((t, v), s)| (t - v).abs() > 3.0 * s)
            {
                failures += 1;
            }
        }
        // 4 coefficients at ~99.7% each: a handful of 3-sigma exceedances in
        // 100 runs is expected; a systematic bias would fail most runs.
        assert!(failures <= 10, "{failures} of 100 runs outside 3 SE");
    }

    #[test]
    fn ranking_extremes_and_one_swap() {
        use crate::geometry::GeometrySummary;
        let mk = |d: f64| GeometrySummary {
            d_int: d,
            kappa_ms: d * 2.0,
            kappa_tv: -d,
            nu: 1.0 / d,
            k_t: 2,
            per_point: None,
        };
        let geoms = vec![mk(1.0), mk(2.0), mk(3.0)];
        let rank = floor_ranking(&[0.1, 0.2, 0.3], &geoms).unwrap();
        assert_eq!(rank.tau[0], ("d_int".to_string(), 1.0));
        assert_eq!(rank.tau[1].1, 1.0);
        assert_eq!(rank.tau[2].1, -1.0);
        let swapped = floor_ranking(&[0.2, 0.1, 0.3], &geoms).unwrap();
        assert!((swapped.tau[0].1 - 1.0 / 3.0).abs() < 1e-15);
    }
}
