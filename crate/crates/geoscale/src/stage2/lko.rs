//! Closed-form leave-K-rows-out cross-validation via the hat matrix.
//!
//! For an OLS fit with hat matrix H and residuals e, the residuals of the
//! refit without row subset T are (I - H_TT)^',-1 e_T (block Sherman-
//! Morrison-Woodbury generalisation of e_i / (1 - h_ii)). All binom(n, K)
//! holdout subsets are enumerated exhaustively; the pooled-residual R^2 is
//! 1 - MSE_LKO * n / SS_tot with SS_tot on the full target vector.
//!
//! Specialised to the intercept-only null, the formula collapses to
//! LOO R^2 = 1 - (n/(n-1))^2, a function of the layer count alone.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::HypothesisFit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LkoResult {
    pub r2: f64,
    pub k: usize,
    pub n_subsets: usize,
    /// Subsets excluded because (I - H_TT) was singular.
    pub flagged_subsets: usize,
}

/// All K-element subsets of 0..n in lexicographic order.
pub(crate) fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Solve for the held-out residuals of one subset. Returns None when
/// (I - H_TT) is numerically singular.
fn holdout_residuals(fit: &HypothesisFit, subset: &[usize]) -> Option<Vec<f64>> {
    let m = subset.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (r, &i) in subset.iter().enumerate() {
        for (c, &j) in subset.iter().enumerate() {
            let h = fit.hat[(i, j)];
            a[(r, c)] = if r == c { 1.0 - h } else { -h };
        }
    }
    let e = nalgebra::DVector::from_iterator(m, subset.iter().map(|&i| fit.residuals[i]));
    let lu = a.clone().full_piv_lu();
    // singular block <=> refit on the complement is rank-deficient
    let det_scale: f64 = (0..m).map(|i| a[(i, i)].abs().max(1e-300)).product();
    if lu.determinant().abs() <= 1e-12 * det_scale.max(1e-12) {
        return None;
    }
    lu.solve(&e).map(|v| v.iter().copied().collect())
}

fn pooled_r2(
    fit: &HypothesisFit,
    subsets: &[Vec<usize>],
    total_rows: usize,
) -> Result<(f64, usize)> {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut flagged = 0usize;
    for subset in subsets {
        match holdout_residuals(fit, subset) {
            Some(res) => {
                for r in res {
                    sum_sq += r * r;
                    count += 1;
                }
            }
            None => flagged += 1,
        }
    }
    if count == 0 {
        return Err(Error::Numerical(
            "every holdout subset was singular".into(),
        ));
    }
    if fit.ss_tot <= 0.0 {
        return Err(Error::Numerical(
            "SS_tot is zero; LKO R^2 undefined on a constant target".into(),
        ));
    }
    let mse = sum_sq / count as f64;
    Ok((1.0 - mse * total_rows as f64 / fit.ss_tot, flagged))
}

/// Closed-form leave-K-rows-out R^2 over all binom(n, K) subsets.
pub fn lko_r2(fit: &HypothesisFit, k: usize) -> Result<LkoResult> {
    if k == 0 || k >= fit.n {
        return Err(Error::Config(format!(
            "holdout size {k} must be in [1, n-1]"
        )));
    }
    let subsets = combinations(fit.n, k);
    let (r2, flagged) = pooled_r2(fit, &subsets, fit.n)?;
    Ok(LkoResult {
        r2,
        k,
        n_subsets: subsets.len(),
        flagged_subsets: flagged,
    })
}

/// Grouped leave-K-groups-out: all rows of K held-out groups leave together
/// (the row-per-checkpoint designs hold out whole layers).
pub fn lko_r2_grouped(fit: &HypothesisFit, groups: &[Vec<usize>], k: usize) -> Result<LkoResult> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData(
            "grouped LKO needs >= 2 groups".into(),
        ));
    }
    if k == 0 || k >= groups.len() {
        return Err(Error::Config(format!(
            "group holdout size {k} must be in [1, n_groups-1]"
        )));
    }
    let group_subsets = combinations(groups.len(), k);
    let row_subsets: Vec<Vec<usize>> = group_subsets
        .iter()
        .map(|gs| {
            let mut rows: Vec<usize> = gs.iter().flat_map(|&g| groups[g].iter().copied()).collect();
            rows.sort_unstable();
            rows
        })
        .collect();
    let (r2, flagged) = pooled_r2(fit, &row_subsets, fit.n)?;
    Ok(LkoResult {
        r2,
        k,
        n_subsets: row_subsets.len(),
        flagged_subsets: flagged,
    })
}

/// The intercept-only LOO identity: 1 - (n/(n-1))^2 for any target.
pub fn h0_loo_r2(n: usize) -> f64 {
    let nf = n as f64;
    1.0 - (nf / (nf - 1.0)).powi(2)
}
