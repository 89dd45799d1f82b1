//! Checkpoint-level aggregation of per-token SAE evaluation arrays.
//!
//! The loss/sparsity pair for a checkpoint is a symmetric trimmed mean of the
//! per-token NMSE and active-latent counts over the *same* token subset: the
//! kept mask is defined by the NMSE distribution alone and applied to both
//! arrays, so the pair shares its underlying tokens by construction.

use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, percentile};
use serde::{Deserialize, Serialize};

/// Per-token evaluation arrays for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEval {
    /// Per-token normalised reconstruction error, >= 0.
    pub nmse: Vec<f64>,
    /// Per-token active-latent count, >= 0.
    pub l0: Vec<f64>,
    /// Optional per-token cosine distance in [0, 2].
    pub cosdist: Option<Vec<f64>>,
}

impl TokenEval {
    pub fn new(nmse: Vec<f64>, l0: Vec<f64>, cosdist: Option<Vec<f64>>) -> Result<Self> {
        if nmse.len() != l0.len() {
            return Err(Error::InsufficientData(format!(
                "per-token arrays differ in length: nmse {} vs l0 {}",
                nmse.len(),
                l0.len()
            )));
        }
        if let Some(cd) = &cosdist {
            if cd.len() != nmse.len() {
                return Err(Error::InsufficientData(
                    "cosdist array length differs from nmse".into(),
                ));
            }
        }
        for (i, v) in nmse.iter().chain(l0.iter()).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i % nmse.len().max(1),
                    col: 0,
                });
            }
        }
        Ok(Self { nmse, l0, cosdist })
    }

    pub fn len(&self) -> usize {
        self.nmse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nmse.is_empty()
    }
}

/// Result of the symmetric trimmed aggregation.
#[derive(Debug, Clone)]
pub struct TrimmedAggregate {
    /// Trimmed-mean NMSE (the checkpoint loss L).
    pub loss: f64,
    /// Trimmed-mean active-latent count over the same tokens (L0).
    pub l0: f64,
    /// Token kept mask; defined by nmse percentiles, applied to both arrays.
    pub kept: Vec<bool>,
}

/// Symmetric trimmed mean under the shared-token contract.
///
/// Tokens whose nmse lies within the inner [P_trim, P_(1-trim)] band are kept
/// (values equal to a boundary are kept; drops are strictly outside). The mask
/// depends only on nmse ranks.
pub fn aggregate_trimmed(evals: &TokenEval, trim: f64) -> Result<TrimmedAggregate> {
    if evals.len() < 20 {
        return Err(Error::InsufficientData(format!(
            "need >= 20 tokens to aggregate, got {}",
            evals.len()
        )));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Config(format!("trim fraction {trim} outside [0, 0.5)")));
    }
    let lo = percentile(&evals.nmse, trim);
    let hi = percentile(&evals.nmse, 1.0 - trim);
    let kept: Vec<bool> = evals.nmse.iter().map(|&v| v >= lo && v <= hi).collect();
    let kept_nmse: Vec<f64> = evals
        .nmse
        .iter()
        .zip(&kept)
        .filter_map(|(&v, &k)| k.then_some(v))
        .collect();
    if kept_nmse.is_empty() {
        return Err(Error::AllTokensTrimmed);
    }
    let kept_l0: Vec<f64> = evals
        .l0
        .iter()
        .zip(&kept)
        .filter_map(|(&v, &k)| k.then_some(v))
        .collect();
    Ok(TrimmedAggregate {
        loss: mean(&kept_nmse),
        l0: mean(&kept_l0),
        kept,
    })
}

/// Cosine distance 1 - cos(angle(h, h_hat)), the unit-sphere angular distance.
/// Bounded in [0, 2]; invariant to positive rescaling of either argument.
pub fn cosine_distance(h: &[f64], h_hat: &[f64]) -> Result<f64> {
    assert_eq!(h.len(), h_hat.len());
    let dot: Vec<f64> = h.iter().zip(h_hat).map(|(a, b)| a * b).collect();
    let n1: Vec<f64> = h.iter().map(|a| a * a).collect();
    let n2: Vec<f64> = h_hat.iter().map(|a| a * a).collect();
    let norm1 = pairwise_sum(&n1).sqrt();
    let norm2 = pairwise_sum(&n2).sqrt();
    if norm1 == 0.0 || norm2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = (pairwise_sum(&dot) / (norm1 * norm2)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// The four aggregations compared in the sensitivity analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateAlternatives {
    pub mean: f64,
    pub median: f64,
    pub trimmed: f64,
    pub geometric_mean: f64,
    /// True when a zero value forced the geometric mean to 0.
    pub geometric_zero_flag: bool,
}

/// Plain mean, median, 5/95 trimmed mean, and geometric mean of the nmse array.
pub fn aggregate_alternatives(evals: &TokenEval) -> Result<AggregateAlternatives> {
    let trimmed = aggregate_trimmed(evals, 0.05)?.loss;
    let m = mean(&evals.nmse);
    let med = crate::numeric::median(&evals.nmse);
    let (geo, flag) = if evals.nmse.iter().any(|&v| v == 0.0) {
        (0.0, true)
    } else {
        let logs: Vec<f64> = evals.nmse.iter().map(|v| v.ln()).collect();
        (mean(&logs).exp(), false)
    };
    Ok(AggregateAlternatives {
        mean: m,
        median: med,
        trimmed,
        geometric_mean: geo,
        geometric_zero_flag: flag,
    })
}
