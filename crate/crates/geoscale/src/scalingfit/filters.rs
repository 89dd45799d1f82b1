//! The three monotone filters applied before a with-floor fit.
//!
//! They are consequences of the scaling-law family, not data cleaning: any
//! member with positive A, alpha, B has loss non-increasing in width at fixed
//! sparsity, and a per-k exponent that behaves smoothly across k. Applied in
//! order, each drop is logged with its filter id and reason:
//!
//! 1. L-monotone prefix per k: keep the longest width-ascending prefix with
//!    non-increasing log L.
//! 2. Local-alpha monotone per k: consecutive-width chord slopes must stay
//!    positive and non-increasing in width (increase tolerance
//!    `local_alpha_tol`); widths beyond the first violation are dropped.
//! 3. Cross-k extremum per layer: k values whose terminal chord slope is a
//!    strict local extremum against both k-neighbours beyond `cross_k_tol`
//!    are dropped. Iterated to a fixpoint so that filtering a filtered table
//!    drops nothing.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One (width, k) grid cell carrying an interpolated log-loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub width: u64,
    pub k: f64,
    pub log_l: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropEvent {
    /// Filter id: 1 = L-monotone prefix, 2 = local-alpha, 3 = cross-k.
    pub filter: u8,
    pub width: u64,
    pub k: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub retained: Vec<GridCell>,
    pub dropped: Vec<DropEvent>,
}

impl FilterOutcome {
    pub fn distinct_widths(&self) -> Vec<u64> {
        let mut w: Vec<u64> = self.retained.iter().map(|c| c.width).collect();
        w.sort();
        w.dedup();
        w
    }

    pub fn distinct_k(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self.retained.iter().map(|c| c.k).collect();
        k.sort_by(|a, b| a.partial_cmp(b).unwrap());
        k.dedup();
        k
    }
}

/// Apply the three filters. When `min_widths` is set (the showcase-fit path),
/// fewer surviving distinct widths is an `InsufficientGrid` error.
pub fn monotone_filters(
    cells: &[GridCell],
    local_alpha_tol: f64,
    cross_k_tol: f64,
    min_widths: Option<usize>,
) -> Result<FilterOutcome> {
    // group by k, keyed on bit pattern (k values come from a shared grid)
    let mut by_k: BTreeMap<u64, Vec<GridCell>> = BTreeMap::new();
    for cell in cells {
        by_k.entry(cell.k.to_bits()).or_default().push(cell.clone());
    }
    let mut dropped: Vec<DropEvent> = Vec::new();
    // per-k: sort by width, filter 1 then filter 2
    let mut survivors: BTreeMap<u64, Vec<GridCell>> = BTreeMap::new();
    let mut k_order: Vec<f64> = by_k.keys().map(|&b| f64::from_bits(b)).collect();
    k_order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &k in &k_order {
        let mut col = by_k.remove(&k.to_bits()).unwrap();
        col.sort_by_key(|c| c.width);
        // (1) longest non-increasing prefix
        let mut cut = col.len();
        for i in 1..col.len() {
            if col[i].log_l > col[i - 1].log_l {
                cut = i;
                break;
            }
        }
        let last_kept = col[cut - 1].width;
        for cell in col.drain(cut..) {
            dropped.push(DropEvent {
                filter: 1,
                width: cell.width,
                k,
                reason: format!("log L rises with width beyond n={last_kept}"),
            });
        }
        // (2) chord slopes positive and non-increasing
        if col.len() >= 2 {
            let slopes: Vec<f64> = col
                .windows(2)
                .map(|w| -(w[1].log_l - w[0].log_l) / ((w[1].width as f64).ln() - (w[0].width as f64).ln()))
                .collect();
            let mut keep = col.len();
            for (j, &s) in slopes.iter().enumerate() {
                if s <= 0.0 {
                    keep = j + 1;
                    dropped_chord(&mut dropped, &col[keep..], k, "chord slope not positive");
                    break;
                }
                if j > 0 && s > slopes[j - 1] + local_alpha_tol {
                    keep = j + 1;
                    dropped_chord(&mut dropped, &col[keep..], k, "chord slope increases with width");
                    break;
                }
            }
            col.truncate(keep);
        }
        survivors.insert(k.to_bits(), col);
    }

    // (3) cross-k terminal-slope extrema, iterated to fixpoint. Only k values
    // with a defined terminal slope (>= 2 retained widths) participate.
    loop {
        let mut seq: Vec<(f64, f64)> = Vec::new(); // (k, terminal slope)
        for &k in &k_order {
            if let Some(col) = survivors.get(&k.to_bits()) {
                if col.len() >= 2 {
                    let a = &col[col.len() - 2];
                    let b = &col[col.len() - 1];
                    let slope =
                        -(b.log_l - a.log_l) / ((b.width as f64).ln() - (a.width as f64).ln());
                    seq.push((k, slope));
                }
            }
        }
        let mut to_drop: Vec<f64> = Vec::new();
        for i in 1..seq.len().saturating_sub(1) {
            let (k, s) = seq[i];
            let (_, left) = seq[i - 1];
            let (_, right) = seq[i + 1];
            let is_max = s > left.max(right) + cross_k_tol;
            let is_min = s < left.min(right) - cross_k_tol;
            if is_max || is_min {
                to_drop.push(k);
            }
        }
        if to_drop.is_empty() {
            break;
        }
        for k in to_drop {
            if let Some(col) = survivors.remove(&k.to_bits()) {
                for cell in col {
                    dropped.push(DropEvent {
                        filter: 3,
                        width: cell.width,
                        k,
                        reason: "terminal chord slope is a strict local extremum across k".into(),
                    });
                }
            }
        }
    }

    let mut retained: Vec<GridCell> = Vec::new();
    for &k in &k_order {
        if let Some(col) = survivors.get(&k.to_bits()) {
            retained.extend(col.iter().cloned());
        }
    }
    let outcome = FilterOutcome { retained, dropped };
    if let Some(min) = min_widths {
        let got = outcome.distinct_widths().len();
        if got < min {
            return Err(Error::InsufficientGrid(format!(
                "only {got} distinct widths survive (need {min})"
            )));
        }
    }
    Ok(outcome)
}

fn dropped_chord(dropped: &mut Vec<DropEvent>, cells: &[GridCell], k: f64, reason: &str) {
    for cell in cells {
        dropped.push(DropEvent {
            filter: 2,
            width: cell.width,
            k,
            reason: reason.into(),
        });
    }
}
