//! Shape-preserving piecewise-cubic interpolation of log L against log L0,
//! with leave-one-out cross-validation per (layer, width) cell.
//!
//! Slopes follow the Fritsch-Carlson limiter (monotone data give a monotone
//! interpolant, knots are reproduced exactly, linear data are reproduced to
//! machine precision). Endpoint derivatives use the three-point non-centered
//! rule with the conventional monotonicity clamp. No extrapolation: targets
//! outside the knot range are flagged and excluded downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies the (model, layer, width) cell a curve belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTag {
    pub model_id: String,
    pub layer: usize,
    pub width: u64,
}

/// Monotone cubic Hermite interpolant of log L as a function of log L0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityCurve {
    /// Strictly increasing knot abscissae (log l0).
    pub x: Vec<f64>,
    /// Knot ordinates (log L).
    pub y: Vec<f64>,
    /// Knot derivatives.
    pub slopes: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<CellTag>,
}

/// One evaluation at a sparsity target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub k: f64,
    /// Interpolated log L; NaN when out of range.
    pub log_l: f64,
    pub in_range: bool,
}

fn fritsch_carlson_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Three-point non-centered endpoint rule with the monotonicity clamp.
fn edge_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if sgn(d) != sgn(del0) {
        0.0
    } else if sgn(del0) != sgn(del1) && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Fit the interpolant through (l0, L) pairs. Both coordinates are taken to
/// logs; l0 values must be positive and distinct, L values positive.
pub fn fit_pchip(points: &[(f64, f64)]) -> Result<SparsityCurve> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "PCHIP needs >= 2 points, got {}",
            points.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &(l0, l) in points {
        if !(l0 > 0.0) || !(l > 0.0) {
            return Err(Error::InsufficientData(format!(
                "PCHIP needs positive (l0, L), got ({l0}, {l})"
            )));
        }
        pairs.push((l0.ln(), l.ln()));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::DuplicateKnot {
                value: w[0].0.exp(),
            });
        }
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let slopes = fritsch_carlson_slopes(&x, &y);
    Ok(SparsityCurve {
        x,
        y,
        slopes,
        tag: None,
    })
}

impl SparsityCurve {
    pub fn with_tag(mut self, tag: CellTag) -> Self {
        self.tag = Some(tag);
        self
    }

    pub fn n_knots(&self) -> usize {
        self.x.len()
    }

    /// Knot range in l0 units.
    pub fn range(&self) -> (f64, f64) {
        (self.x[0].exp(), self.x[self.x.len() - 1].exp())
    }

    fn interval_of(&self, xq: f64) -> usize {
        // rightmost interval whose left knot is <= xq
        match self
            .x
            .binary_search_by(|v| v.partial_cmp(&xq).unwrap())
        {
            Ok(i) => i.min(self.x.len() - 2),
            Err(ins) => ins.saturating_sub(1).min(self.x.len() - 2),
        }
    }

    /// Evaluate log L at log l0 = xq, which must lie inside the knot range.
    pub fn eval_log(&self, k: f64) -> Result<f64> {
        let xq = k.ln();
        let n = self.x.len();
        if xq < self.x[0] || xq > self.x[n - 1] {
            let (lo, hi) = self.range();
            return Err(Error::OutOfRange { k, lo, hi });
        }
        let i = self.interval_of(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (xq - self.x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Ok(h00 * self.y[i] + h10 * h * self.slopes[i] + h01 * self.y[i + 1] + h11 * h * self.slopes[i + 1])
    }

    /// Analytic derivative d(log L)/d(log l0) of the piece containing xq,
    /// selecting the piece by `from_right` at interior knots.
    pub fn derivative_log(&self, xq: f64, from_right: bool) -> f64 {
        let mut i = self.interval_of(xq);
        if !from_right && i > 0 && xq == self.x[i] {
            i -= 1;
        }
        let h = self.x[i + 1] - self.x[i];
        let t = (xq - self.x[i]) / h;
        let dh00 = (6.0 * t * t - 6.0 * t) / h;
        let dh10 = 3.0 * t * t - 4.0 * t + 1.0;
        let dh01 = (-6.0 * t * t + 6.0 * t) / h;
        let dh11 = 3.0 * t * t - 2.0 * t;
        dh00 * self.y[i] + dh10 * self.slopes[i] + dh01 * self.y[i + 1] + dh11 * self.slopes[i + 1]
    }
}

/// Evaluate a curve at sparsity targets; out-of-range targets are flagged
/// instead of extrapolated.
pub fn eval_at(curve: &SparsityCurve, k_targets: &[f64]) -> Vec<EvalPoint> {
    k_targets
        .iter()
        .map(|&k| match curve.eval_log(k) {
            Ok(v) => EvalPoint {
                k,
                log_l: v,
                in_range: true,
            },
            Err(_) => EvalPoint {
                k,
                log_l: f64::NAN,
                in_range: false,
            },
        })
        .collect()
}

/// Leave-one-out CV report for one (layer, width) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PchipLoo {
    pub r2: f64,
    pub n_held_out: usize,
}

/// Hold out each interior point in turn, refit, predict, pool residuals.
/// Endpoints are excluded: holding one out would turn interpolation into
/// extrapolation. R^2 = 1 - SS_res/SS_tot on the held-out set.
pub fn loo_cv(points: &[(f64, f64)]) -> Result<PchipLoo> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "PCHIP LOO needs >= 3 points, got {}",
            points.len()
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = sorted.len();
    let mut held_y = Vec::with_capacity(n - 2);
    let mut pred_y = Vec::with_capacity(n - 2);
    for i in 1..n - 1 {
        let rest: Vec<(f64, f64)> = sorted
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| (j != i).then_some(p))
            .collect();
        let curve = fit_pchip(&rest)?;
        held_y.push(sorted[i].1.ln());
        pred_y.push(curve.eval_log(sorted[i].0)?);
    }
    let ss_res: f64 = held_y
        .iter()
        .zip(&pred_y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mean_held = crate::numeric::mean(&held_y);
    let ss_tot: f64 = held_y.iter().map(|v| (v - mean_held) * (v - mean_held)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(PchipLoo {
        r2,
        n_held_out: n - 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_give_the_chord() {
        let c = fit_pchip(&[(10.0, 1.0), (100.0, 0.1)]).unwrap();
        // exactly linear in log-log between the two knots
        let mid = (10.0f64.ln() + 100.0f64.ln()) / 2.0;
        let v = c.eval_log(mid.exp()).unwrap();
        let expect = (1.0f64.ln() + 0.1f64.ln()) / 2.0;
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn linear_log_data_reproduced_exactly() {
        // log L = 2 - 0.5 log l0
        let pts: Vec<(f64, f64)> = [4.0, 9.0, 16.0, 31.0, 64.0, 120.0]
            .iter()
            .map(|&k: &f64| (k, (2.0 - 0.5 * k.ln()).exp()))
            .collect();
        let c = fit_pchip(&pts).unwrap();
        for i in 0..=1000 {
            let k = 4.0 + (120.0 - 4.0) * i as f64 / 1000.0;
            let got = c.eval_log(k).unwrap();
            let expect = 2.0 - 0.5 * k.ln();
            assert!((got - expect).abs() < 1e-12, "k={k}: {got} vs {expect}");
        }
    }

    #[test]
    fn knots_are_reproduced_and_out_of_range_flagged() {
        let pts = [(10.0, 0.9), (20.0, 0.5), (80.0, 0.3)];
        let c = fit_pchip(&pts).unwrap();
        let evals = eval_at(&c, &[20.0, 5.0, 200.0]);
        assert!(evals[0].in_range);
        assert!((evals[0].log_l - 0.5f64.ln()).abs() < 1e-14);
        assert!(!evals[1].in_range && evals[1].log_l.is_nan());
        assert!(!evals[2].in_range);
    }

    #[test]
    fn no_overshoot_on_monotone_knots() {
        // decreasing, uneven spacing and curvature
        let pts = [
            (8.0, 1.4),
            (16.0, 0.9),
            (24.0, 0.83),
            (48.0, 0.31),
            (96.0, 0.3),
            (192.0, 0.12),
        ];
        let c = fit_pchip(&pts).unwrap();
        let ymin = 0.12f64.ln();
        let ymax = 1.4f64.ln();
        for i in 0..=1000 {
            let k = 8.0 * (192.0f64 / 8.0).powf(i as f64 / 1000.0);
            let v = c.eval_log(k).unwrap();
            assert!(v >= ymin - 1e-12 && v <= ymax + 1e-12);
        }
        // also monotone between consecutive knots
        for w in c.x.windows(2) {
            let a = c.eval_log(w[0].exp()).unwrap();
            let b = c.eval_log(w[1].exp()).unwrap();
            for t in 1..20 {
                let xq = w[0] + (w[1] - w[0]) * t as f64 / 20.0;
                let v = c.eval_log(xq.exp()).unwrap();
                assert!(v <= a + 1e-12 && v >= b - 1e-12);
            }
        }
    }

    #[test]
    fn c1_at_interior_knots() {
        let pts = [(8.0, 1.4), (16.0, 0.9), (32.0, 0.6), (96.0, 0.3), (192.0, 0.25)];
        let c = fit_pchip(&pts).unwrap();
        for i in 1..c.x.len() - 1 {
            let left = c.derivative_log(c.x[i], false);
            let right = c.derivative_log(c.x[i], true);
            assert!((left - right).abs() < 1e-9, "knot {i}: {left} vs {right}");
        }
        // analytic derivative sanity against central differences mid-interval
        let xq = (c.x[1] + c.x[2]) / 2.0;
        let h = 1e-6;
        let num = (c.eval_log((xq + h).exp()).unwrap() - c.eval_log((xq - h).exp()).unwrap()) / (2.0 * h);
        assert!((num - c.derivative_log(xq, true)).abs() < 1e-6);
    }

    #[test]
    fn duplicate_l0_rejected() {
        assert!(matches!(
            fit_pchip(&[(10.0, 1.0), (10.0, 0.9), (20.0, 0.5)]),
            Err(Error::DuplicateKnot { .. })
        ));
    }

    #[test]
    fn loo_exact_on_linear_cells() {
        let pts: Vec<(f64, f64)> = [4.0, 9.0, 16.0, 31.0, 64.0]
            .iter()
            .map(|&k: &f64| (k, (1.0 - 0.4 * k.ln()).exp()))
            .collect();
        let rep = loo_cv(&pts).unwrap();
        assert!((rep.r2 - 1.0).abs() < 1e-9);
        assert_eq!(rep.n_held_out, 3);
        // 3 collinear points: middle is predicted exactly
        let three: Vec<(f64, f64)> = [4.0, 16.0, 64.0]
            .iter()
            .map(|&k: &f64| (k, (0.5 - 0.3 * k.ln()).exp()))
            .collect();
        let rep3 = loo_cv(&three).unwrap();
        assert_eq!(rep3.n_held_out, 1);
        assert_eq!(rep3.r2, 1.0); // zero residual on the single held-out point
        assert!(matches!(
            loo_cv(&three[..2]),
            Err(Error::InsufficientData(_))
        ));
    }
}
