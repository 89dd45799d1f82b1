//! Seeded synthetic generators with known ground truth, plus brute-force
//! reference implementations used to cross-check the closed-form machinery.
//!
//! Everything is a pure function of its spec: generation uses ChaCha8 (a
//! named, portable counter-based generator recorded in the run manifest) and
//! is bit-reproducible across runs and platforms. Random isometric
//! embeddings go through a QR factorisation of a seeded Gaussian matrix,
//! which preserves all ground-truth geometry.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{ActivationCloud, Partition};
use crate::error::{Error, Result};
use crate::geometry::{feature_pipeline, FeatureMatrix};
use crate::ols::ols_fit;
use crate::stage2::lko::combinations;

/// Manifold families with documented ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKind {
    /// Uniform on the unit d_sub-cube: intrinsic dimension d_sub, flat.
    Hypercube { d_sub: usize },
    /// Uniform on a d_sub-sphere of the given radius: d_int = d_sub,
    /// curvature ~ 1/radius^2.
    Sphere { d_sub: usize, radius: f64 },
    /// Unit circle: d_int = 1, curved.
    Circle,
    /// Uniform on an affine d_sub-plane patch: d_int = d_sub, exactly flat.
    Plane { d_sub: usize },
    /// Full-dimensional standard Gaussian: d_int = d, globally flat.
    GaussianNoise { d: usize },
    /// Two clusters on mutually orthogonal 2-planes, far apart.
    TwoClusterOrthogonal,
    /// A 1-D circle and a 5-D Gaussian blob sharing the same region, so
    /// neighbourhoods mix points of different local dimension.
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ManifoldKind,
    pub n_points: usize,
    pub d_ambient: usize,
    /// Ambient Gaussian noise added after embedding.
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureClass {
    Flat,
    Curved,
    Mixed,
}

#[derive(Debug, Clone)]
pub struct SampledManifold {
    pub cloud: ActivationCloud,
    pub true_d_int: f64,
    pub curvature: CurvatureClass,
}

/// Orthonormal columns from the QR of a seeded Gaussian matrix, with the
/// sign convention diag(R) >= 0.
fn random_isometry(rng: &mut ChaCha8Rng, d_ambient: usize, d_src: usize) -> DMatrix<f64> {
    assert!(d_src <= d_ambient);
    let g = DMatrix::from_fn(d_ambient, d_src, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d_src {
        if r[(j, j)] < 0.0 {
            for i in 0..d_ambient {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn embed(rng: &mut ChaCha8Rng, source: &[Vec<f64>], d_ambient: usize) -> Array2<f64> {
    let d_src = source[0].len();
    let n = source.len();
    if d_src == d_ambient {
        let mut out = Array2::zeros((n, d_ambient));
        for (i, row) in source.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        return out;
    }
    let q = random_isometry(rng, d_ambient, d_src);
    let mut out = Array2::zeros((n, d_ambient));
    for (i, row) in source.iter().enumerate() {
        for a in 0..d_ambient {
            let mut acc = 0.0;
            for (j, &v) in row.iter().enumerate() {
                acc += q[(a, j)] * v;
            }
            out[[i, a]] = acc;
        }
    }
    out
}

fn unit_sphere_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draw a cloud from the spec. The returned cloud is tagged as the geometry
/// partition with corpus "synthetic".
pub fn sample_manifold(spec: &SyntheticSpec) -> Result<SampledManifold> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let (source, true_d, curvature): (Vec<Vec<f64>>, f64, CurvatureClass) = match &spec.kind {
        ManifoldKind::Hypercube { d_sub } | ManifoldKind::Plane { d_sub } => {
            let pts = (0..n)
                .map(|_| (0..*d_sub).map(|_| rng.random::<f64>()).collect())
                .collect();
            (pts, *d_sub as f64, CurvatureClass::Flat)
        }
        ManifoldKind::Sphere { d_sub, radius } => {
            let pts = (0..n)
                .map(|_| {
                    unit_sphere_point(&mut rng, d_sub + 1)
                        .into_iter()
                        .map(|v| v * radius)
                        .collect()
                })
                .collect();
            (pts, *d_sub as f64, CurvatureClass::Curved)
        }
        ManifoldKind::Circle => {
            let pts = (0..n)
                .map(|_| {
                    let theta = rng.random::<f64>() * std::f64::consts::TAU;
                    vec![theta.cos(), theta.sin()]
                })
                .collect();
            (pts, 1.0, CurvatureClass::Curved)
        }
        ManifoldKind::GaussianNoise { d } => {
            let pts = (0..n)
                .map(|_| (0..*d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            (pts, *d as f64, CurvatureClass::Flat)
        }
        ManifoldKind::TwoClusterOrthogonal => {
            // cluster A spans (e1, e2); cluster B spans (e3, e4), offset in e5
            let pts = (0..n)
                .map(|i| {
                    let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
                    if i < n / 2 {
                        vec![u, v, 0.0, 0.0, 0.0]
                    } else {
                        vec![0.0, 0.0, u, v, 100.0]
                    }
                })
                .collect();
            (pts, 2.0, CurvatureClass::Flat)
        }
        ManifoldKind::Mixture => {
            // half on the unit circle, half in a 5-D Gaussian blob around the
            // origin: neighbourhoods mix 1-D and 5-D points
            let pts = (0..n)
                .map(|i| {
                    if i % 2 == 0 {
                        let theta = rng.random::<f64>() * std::f64::consts::TAU;
                        vec![theta.cos(), theta.sin(), 0.0, 0.0, 0.0]
                    } else {
                        (0..5)
                            .map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    }
                })
                .collect();
            (pts, 3.0, CurvatureClass::Mixed)
        }
    };
    let d_src = source[0].len();
    if spec.d_ambient < d_src {
        return Err(Error::Config(format!(
            "ambient dimension {} below source dimension {d_src}",
            spec.d_ambient
        )));
    }
    let mut points = embed(&mut rng, &source, spec.d_ambient);
    if spec.noise_sd > 0.0 {
        for v in points.iter_mut() {
            *v += spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cloud = ActivationCloud::new(points, "synthetic", 0, Partition::Geometry, "synthetic")?;
    Ok(SampledManifold {
        cloud,
        true_d_int: true_d,
        curvature,
    })
}

// --- scaling-surface generator ----------------------------------------------

/// Six raw with-floor parameters; zeta = -inf selects the B = 0 mode.
pub type SurfaceParams = [f64; 6];

#[derive(Debug, Clone)]
pub struct SurfaceSample {
    /// (width, k, loss) triples, row-major over the (k, width) grid.
    pub triples: Vec<(f64, f64, f64)>,
    /// True when alpha(k) is non-positive somewhere on the grid (such
    /// parameters defeat the monotone filters by design, for filter tests).
    pub alpha_flagged: bool,
}

/// Forward model L = A(k) n^-alpha(k) + B(k) with multiplicative log-normal
/// noise exp(eps), eps ~ N(0, noise_sd^2).
pub fn generate_surface(
    params: &SurfaceParams,
    widths: &[u64],
    k_grid: &[f64],
    noise_sd: f64,
    seed: u64,
) -> SurfaceSample {
    let [a0, beta_n, beta_k, gamma, zeta, eta] = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(widths.len() * k_grid.len());
    let mut alpha_flagged = false;
    for &k in k_grid {
        let alpha = -(beta_n + gamma * k.ln());
        if alpha <= 0.0 {
            alpha_flagged = true;
        }
        let a = (a0 + beta_k * k.ln()).exp();
        let b = if zeta == f64::NEG_INFINITY {
            0.0
        } else {
            (zeta + eta * k.ln()).exp()
        };
        for &w in widths {
            let n = w as f64;
            let mean = a * n.powf(-alpha) + b;
            let eps: f64 = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            triples.push((n, k, mean * eps.exp()));
        }
    }
    SurfaceSample {
        triples,
        alpha_flagged,
    }
}

// --- planted cross-layer regression instances --------------------------------

/// Latent-factor feature generator: each log-feature is
/// sqrt(rho) z0 + sqrt(1-rho) z_j, so `collinearity` = rho controls the
/// pairwise correlation of the features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureGen {
    pub collinearity: f64,
    pub scales: [f64; 4],
    pub shifts: [f64; 4],
}

impl Default for FeatureGen {
    fn default() -> Self {
        Self {
            collinearity: 0.0,
            scales: [0.4, 0.4, 0.4, 0.4],
            shifts: [1.0, -1.5, -1.0, 0.5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedStage2 {
    pub y: Vec<f64>,
    pub raw_features: Array2<f64>,
    pub features: FeatureMatrix,
    pub true_mu: f64,
    pub true_theta: [f64; 4],
}

/// Plant y = mu + sum theta_p z_p + eps on generated feature rows, where z
/// is the standardized output of the real feature pipeline (so noiseless
/// instances are exactly linear in the regression design).
pub fn plant_stage2(
    mu: f64,
    theta: [f64; 4],
    gen: &FeatureGen,
    noise_sd: f64,
    n_layers: usize,
    seed: u64,
) -> Result<PlantedStage2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = gen.collinearity.clamp(0.0, 1.0);
    let mut raw = Array2::zeros((n_layers, 4));
    for i in 0..n_layers {
        let z0: f64 = rng.sample(StandardNormal);
        for j in 0..4 {
            let zj: f64 = rng.sample(StandardNormal);
            let latent = rho.sqrt() * z0 + (1.0 - rho).sqrt() * zj;
            raw[[i, j]] = (gen.shifts[j] + gen.scales[j] * latent).exp();
        }
    }
    let features = feature_pipeline(&raw)?;
    let y: Vec<f64> = (0..n_layers)
        .map(|i| {
            let eps: f64 = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let signal: f64 = (0..4).map(|j| theta[j] * features.standardized[i][j]).sum();
            mu + signal + eps
        })
        .collect();
    Ok(PlantedStage2 {
        y,
        raw_features: raw,
        features,
        true_mu: mu,
        true_theta: theta,
    })
}

// --- brute-force leave-K-out oracle ------------------------------------------

#[derive(Debug, Clone)]
pub struct BruteLko {
    pub r2: f64,
    pub n_subsets: usize,
    /// Ordinals (in lexicographic subset order) of singular refits.
    pub flagged: Vec<usize>,
    pub pooled_sum_sq: f64,
    pub n_residuals: usize,
}

/// Literal refit on each binom(n, K) complement; residuals on held-out rows.
/// Pooling and the R^2 normalisation match the closed-form definition, so
/// the two must agree to numerical precision on every instance.
pub fn brute_force_lko(y: &[f64], design: &DMatrix<f64>, k: usize) -> Result<BruteLko> {
    let n = y.len();
    if design.nrows() != n {
        return Err(Error::Config("design/target row mismatch".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("holdout size {k} must be in [1, n-1]")));
    }
    let p = design.ncols();
    let subsets = combinations(n, k);
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut flagged = Vec::new();
    for (ordinal, subset) in subsets.iter().enumerate() {
        let keep: Vec<usize> = (0..n).filter(|i| !subset.contains(i)).collect();
        if keep.len() < p {
            flagged.push(ordinal);
            continue;
        }
        let mut xk = DMatrix::zeros(keep.len(), p);
        let mut yk = DVector::zeros(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            for c in 0..p {
                xk[(r, c)] = design[(i, c)];
            }
            yk[r] = y[i];
        }
        match ols_fit(&xk, &yk, false) {
            Ok(refit) => {
                for &i in subset {
                    let mut pred = 0.0;
                    for c in 0..p {
                        pred += design[(i, c)] * refit.beta[c];
                    }
                    let r = y[i] - pred;
                    sum_sq += r * r;
                    count += 1;
                }
            }
            Err(_) => flagged.push(ordinal),
        }
    }
    if count == 0 {
        return Err(Error::Numerical("every brute-force refit was singular".into()));
    }
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    Ok(BruteLko {
        r2: 1.0 - (sum_sq / count as f64) * n as f64 / ss_tot,
        n_subsets: subsets.len(),
        flagged,
        pooled_sum_sq: sum_sq,
        n_residuals: count,
    })
}
