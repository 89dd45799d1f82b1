//! Shared numeric conventions.
//!
//! One percentile definition, one summation scheme, one median — every module
//! that needs these goes through here so the repo has a single convention.

/// Pairwise (cascade) summation. Deterministic for a given element order and
/// independent of thread count, since reductions over parallel-computed
/// per-point vectors always run through this single-threaded function.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample variance with the given delta degrees of freedom (ddof 1 = unbiased).
pub fn variance(xs: &[f64], ddof: usize) -> f64 {
    let n = xs.len();
    assert!(n > ddof, "variance needs more than ddof values");
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (n - ddof) as f64
}

pub fn std_dev(xs: &[f64], ddof: usize) -> f64 {
    variance(xs, ddof).sqrt()
}

/// Percentile by linear interpolation between closest ranks, on an already
/// sorted slice. `p` in [0, 1]. This is the single percentile convention used
/// everywhere in the repo (norm trimming, token trimming, feature clipping).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile of an unsorted slice (sorts a copy).
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&v, p)
}

pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 0.5)
}

/// log(exp(a) + exp(b)) without overflow.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Kendall rank correlation, tau-a: (concordant - discordant) / (n choose 2).
/// Tied pairs in either argument count as neither concordant nor discordant.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    assert!(n >= 2);
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            let s = dx * dy;
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_statistic_uniform(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let cdf_hi = (i + 1) as f64 / n;
        let cdf_lo = i as f64 / n;
        d = d.max((cdf_hi - x).abs()).max((x - cdf_lo).abs());
    }
    d
}

/// Asymptotic KS critical value at the given level: c(alpha)/sqrt(n) with
/// c(alpha) = sqrt(-ln(alpha/2)/2).
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}
