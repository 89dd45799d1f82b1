//! Nelder-Mead simplex minimiser.
//!
//! Standard coefficients (reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5). The initial simplex perturbs each coordinate of the start by
//! 5% (or an absolute 0.05 where the coordinate is ~0). Converges when the
//! simplex diameter falls below `tol` or the evaluation budget is spent.

/// Outcome of one minimisation run.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// True when every vertex evaluated to a non-finite objective.
    pub diverged: bool,
}

const ALPHA: f64 = 1.0; // reflection
const GAMMA: f64 = 2.0; // expansion
const RHO: f64 = 0.5; // contraction
const SIGMA: f64 = 0.5; // shrink

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..simplex.len() {
        for j in (i + 1)..simplex.len() {
            let dist: f64 = simplex[i]
                .iter()
                .zip(&simplex[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}

pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    tol: f64,
    max_evals: usize,
) -> SimplexResult {
    let n = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += if v[i].abs() > 1e-12 { 0.05 * v[i] } else { 0.05 };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    if values.iter().all(|v| !v.is_finite()) {
        let best = 0;
        return SimplexResult {
            x: simplex[best].clone(),
            value: values[best],
            evaluations: evals,
            converged: false,
            diverged: true,
        };
    }

    let mut converged = false;
    while evals < max_evals {
        // order ascending by value
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = reordered;
        values = revalues;

        if diameter(&simplex) < tol {
            converged = true;
            break;
        }

        // centroid of all but the worst
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = values[n];
        let second_worst = values[n - 1];
        let best = values[0];

        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&simplex[n])
            .map(|(c, w)| c + ALPHA * (c - w))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < best {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + GAMMA * ALPHA * (c - w))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                simplex[n] = expand;
                values[n] = f_expand;
            } else {
                simplex[n] = reflect;
                values[n] = f_reflect;
            }
        } else if f_reflect < second_worst {
            simplex[n] = reflect;
            values[n] = f_reflect;
        } else {
            // contraction, outside or inside of the worst vertex
            let (candidate, f_candidate) = if f_reflect < worst {
                let outside: Vec<f64> = centroid
                    .iter()
                    .zip(&reflect)
                    .map(|(c, r)| c + RHO * (r - c))
                    .collect();
                let fv = eval(&outside, &mut evals);
                (outside, fv)
            } else {
                let inside: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + RHO * (w - c))
                    .collect();
                let fv = eval(&inside, &mut evals);
                (inside, fv)
            };
            if f_candidate < worst.min(f_reflect) {
                simplex[n] = candidate;
                values[n] = f_candidate;
            } else {
                // shrink toward the best vertex
                for i in 1..=n {
                    let shrunk: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, v)| b + SIGMA * (v - b))
                        .collect();
                    values[i] = eval(&shrunk, &mut evals);
                    simplex[i] = shrunk;
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    SimplexResult {
        x: simplex[best].clone(),
        value: values[best],
        evaluations: evals,
        converged,
        diverged: !values[best].is_finite(),
    }
}
