//! Layerwise manifold-geometry estimation and geometry-conditioned
//! scaling-law fits for sparse-autoencoder evaluations.
//!
//! The crate is organised around the batch pipeline stages:
//!
//! - [`dataio`]: on-disk formats (activation clouds, checkpoint records,
//!   run manifest) and configuration.
//! - [`pointcloud`]: norm trimming, centering, and the shared exact k-NN
//!   graph reused by all estimators.
//! - [`geometry`]: the four layerwise geometric summaries and the
//!   clip-log-standardize feature pipeline.
//! - [`recon_metrics`]: trimmed aggregation of per-token evaluation arrays.
//! - [`interp`]: shape-preserving PCHIP interpolation on the sparsity axis.
//! - [`scalingfit`]: per-layer no-floor and with-floor scaling surfaces,
//!   monotone filters, the backbone secant, and the floor-attenuation
//!   identity.
//! - [`stage2`]: cross-layer regression of fitted parameters on geometry,
//!   with closed-form leave-K-out CV, information criteria, F-tests,
//!   permutation nulls, and cross-model transfer.
//! - [`synth`]: seeded synthetic generators with known ground truth and
//!   brute-force reference implementations.
//! - [`pipeline`]: the batch orchestration behind the CLI.

pub mod dataio;
pub mod error;
pub mod geometry;
pub mod interp;
pub mod neldermead;
pub mod numeric;
pub(crate) mod ols;
pub mod pipeline;
pub mod pointcloud;
pub mod recon_metrics;
pub mod scalingfit;
pub mod stage2;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
