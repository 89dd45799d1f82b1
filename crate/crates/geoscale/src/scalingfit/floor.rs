//! Joint 6-parameter with-floor surface fit at showcase layers.
//!
//! Minimises the sum of squared log-loss residuals of
//! `L(n, k) = A(k) n^-alpha(k) + B(k)` with
//! `A(k) = exp(a0 + beta_k log k)`, `alpha(k) = -(beta_n + gamma log k)`,
//! `B(k) = exp(zeta + eta log k)` jointly over all six raw parameters, by
//! Nelder-Mead restarted from eight deterministic seeds. A and B stay
//! positive by construction. The model log-loss is evaluated as
//! `logaddexp(log A - alpha log n, log B)` for stability at tiny floors.
//!
//! Seed schedule: a lattice over alpha(50) in {0.1, 0.25} x B(50) in
//! {1e-3, 0.05} x gamma in {-0.02, 0}; the remaining coordinates come from a
//! Stage-1 no-floor OLS fit of the same retained table (a0, beta_k) and
//! eta = 0. One seed slot (the last) is replaced by user-supplied values
//! when configured.

use serde::{Deserialize, Serialize};

use super::filters::{DropEvent, FilterOutcome, GridCell};
use super::fit_stage1;
use crate::dataio::config::FloorConfig;
use crate::error::{Error, Result};
use crate::neldermead::minimize;
use crate::numeric::logaddexp;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTrace {
    pub start: [f64; 6],
    pub rss: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub diverged: bool,
}

/// With-floor surface fit result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloorFit {
    pub a0: f64,
    pub beta_n: f64,
    pub beta_k: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub eta: f64,
    pub rss: f64,
    pub winning_seed: usize,
    pub seeds: Vec<SeedTrace>,
    pub retained: Vec<GridCell>,
    pub dropped: Vec<DropEvent>,
}

impl FloorFit {
    pub fn a(&self, k: f64) -> f64 {
        (self.a0 + self.beta_k * k.ln()).exp()
    }

    pub fn alpha(&self, k: f64) -> f64 {
        -(self.beta_n + self.gamma * k.ln())
    }

    pub fn b(&self, k: f64) -> f64 {
        (self.zeta + self.eta * k.ln()).exp()
    }

    /// Reducible part of the loss: A(k) n^-alpha(k).
    pub fn reducible(&self, n: f64, k: f64) -> f64 {
        self.log_reducible(n, k).exp()
    }

    fn log_reducible(&self, n: f64, k: f64) -> f64 {
        self.a0 + self.beta_k * k.ln() + self.beta_n * n.ln() + self.gamma * n.ln() * k.ln()
    }

    /// Model log-loss at (n, k).
    pub fn log_model(&self, n: f64, k: f64) -> f64 {
        logaddexp(self.log_reducible(n, k), self.zeta + self.eta * k.ln())
    }
}

fn objective(params: &[f64], cells: &[(f64, f64, f64)]) -> f64 {
    let (a0, beta_n, beta_k, gamma, zeta, eta) = (
        params[0], params[1], params[2], params[3], params[4], params[5],
    );
    let mut rss = 0.0;
    for &(ln_n, ln_k, log_l) in cells {
        let log_model = logaddexp(
            a0 + beta_k * ln_k + beta_n * ln_n + gamma * ln_n * ln_k,
            zeta + eta * ln_k,
        );
        let r = log_l - log_model;
        rss += r * r;
    }
    rss
}

/// Deterministic 8-seed schedule. `stage1` supplies (a0, beta_k) anchors.
fn seed_schedule(a0: f64, beta_k: f64, user: Option<[f64; 6]>) -> Vec<[f64; 6]> {
    let ln50 = 50.0_f64.ln();
    let mut seeds = Vec::with_capacity(8);
    for &alpha50 in &[0.1, 0.25] {
        for &b50 in &[1e-3, 0.05] {
            for &gamma in &[-0.02, 0.0] {
                let beta_n = -alpha50 - gamma * ln50;
                let zeta = (b50 as f64).ln(); // eta = 0 start
                seeds.push([a0, beta_n, beta_k, gamma, zeta, 0.0]);
            }
        }
    }
    if let Some(u) = user {
        seeds[7] = u;
    }
    seeds
}

/// Fit the with-floor surface on a filtered table.
pub fn fit_floor(outcome: &FilterOutcome, cfg: &FloorConfig) -> Result<FloorFit> {
    let widths = outcome.distinct_widths();
    let ks = outcome.distinct_k();
    if widths.len() < 3 || ks.len() < 3 {
        return Err(Error::InsufficientGrid(format!(
            "with-floor fit needs >= 3 widths and >= 3 k values retained, got {} and {}",
            widths.len(),
            ks.len()
        )));
    }
    let cells: Vec<(f64, f64, f64)> = outcome
        .retained
        .iter()
        .map(|c| ((c.width as f64).ln(), c.k.ln(), c.log_l))
        .collect();
    // Stage-1 anchors for the seed schedule
    let triples: Vec<(f64, f64, f64)> = outcome
        .retained
        .iter()
        .map(|c| (c.width as f64, c.k, c.log_l.exp()))
        .collect();
    let s1 = fit_stage1(&triples)?;
    let seeds = seed_schedule(s1.a0, s1.beta_k, cfg.user_seed);

    let max_evals = cfg.max_evals_per_param * 6;
    let mut traces = Vec::with_capacity(seeds.len());
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for (i, seed) in seeds.iter().enumerate() {
        let result = minimize(|x| objective(x, &cells), seed, cfg.simplex_tol, max_evals);
        traces.push(SeedTrace {
            start: *seed,
            rss: result.value,
            evaluations: result.evaluations,
            converged: result.converged,
            diverged: result.diverged,
        });
        if !result.diverged {
            let better = match &best {
                Some((_, _, v)) => result.value < *v,
                None => true,
            };
            if better {
                best = Some((i, result.x, result.value));
            }
        }
    }
    let (winning_seed, x, rss) = best.ok_or_else(|| Error::FitFailed {
        trace: traces
            .iter()
            .enumerate()
            .map(|(i, t)| format!("seed {i}: start {:?} diverged after {} evals", t.start, t.evaluations))
            .collect::<Vec<_>>()
            .join("\n"),
    })?;
    Ok(FloorFit {
        a0: x[0],
        beta_n: x[1],
        beta_k: x[2],
        gamma: x[3],
        zeta: x[4],
        eta: x[5],
        rss,
        winning_seed,
        seeds: traces,
        retained: outcome.retained.clone(),
        dropped: outcome.dropped.clone(),
    })
}
