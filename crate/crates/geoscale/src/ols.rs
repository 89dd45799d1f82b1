//! Internal ordinary-least-squares solver on small dense designs.
//!
//! SVD-based: rank detection, coefficients, residuals, and (optionally) the
//! full hat matrix X (X'X)^-1 X' = U_r U_r', which the closed-form
//! leave-K-out machinery consumes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Ols {
    pub beta: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    pub rank: usize,
    /// sigma_max / sigma_min over the retained spectrum.
    pub condition_number: f64,
    /// Hat matrix, present when requested.
    pub hat: Option<DMatrix<f64>>,
}

pub(crate) fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, need_hat: bool) -> Result<Ols> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < p {
        return Err(Error::RankDeficient(format!(
            "fewer rows ({n}) than parameters ({p})"
        )));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::RankDeficient(format!(
            "design rank {rank} below parameter count {p}"
        )));
    }
    let smin = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let beta = svd
        .solve(y, 0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let fitted = x * &beta;
    let residuals = y - &fitted;
    let rss = residuals.dot(&residuals);
    let hat = need_hat.then(|| {
        let u = svd.u.as_ref().expect("svd with u");
        u * u.transpose()
    });
    Ok(Ols {
        beta,
        fitted,
        residuals,
        rss,
        rank,
        condition_number: smax / smin,
        hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovered() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_row_slice(&[1.0, 3.0, 5.0, 7.0]);
        let fit = ols_fit(&x, &y, true).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 1e-12);
        assert!((fit.beta[1] - 2.0).abs() < 1e-12);
        assert!(fit.rss < 1e-24);
        // hat matrix is a projector with trace p
        let h = fit.hat.unwrap();
        let trace: f64 = (0..4).map(|i| h[(i, i)]).sum();
        assert!((trace - 2.0).abs() < 1e-10);
        let h2 = &h * &h;
        for (a, b) in h2.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_design_rejected() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(ols_fit(&x, &y, false), Err(Error::RankDeficient(_))));
    }
}
