//! On-disk formats, loaders, and run configuration.
//!
//! Three formats are defined here:
//! - `.acld` activation clouds: fixed 64-byte little-endian header followed by
//!   row-major 32-bit floats (`cloud` module); a CSV fallback is accepted for
//!   desk-scale tests.
//! - `.jsonl` checkpoint records, one JSON object per line, with per-token
//!   arrays in a binary sidecar referenced by relative path (`records`).
//! - `manifest.json`, the run manifest written before any other output
//!   (`manifest`).
//!
//! Loading is single-threaded per file; loaded objects are immutable.

pub mod cloud;
pub mod config;
pub mod manifest;
pub mod records;

pub use cloud::{load_cloud, save_cloud};
pub use config::{EstimatorConfig, FloorConfig, ModelSpec, RunConfig, Stage2Config};
pub use manifest::{InputHash, Manifest};
pub use records::{load_records, save_records, CheckpointRecord};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Document-index split of the evaluation corpus. Geometry estimation and
/// error measurement use disjoint data; estimators refuse clouds from the
/// wrong partition unless an explicit override is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Geometry,
    Error,
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Partition::Geometry => write!(f, "geometry"),
            Partition::Error => write!(f, "error"),
        }
    }
}

/// Preprocessing stage tag. The pipeline order is fixed (trim by norm, then
/// center, then k-NN); the tag lets the later steps enforce it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepStage {
    Raw,
    Trimmed,
    Centered,
}

/// One layer's activation point cloud: N row vectors of ambient dimension d.
#[derive(Debug, Clone)]
pub struct ActivationCloud {
    pub points: Array2<f64>,
    pub model_id: String,
    pub layer: usize,
    pub partition: Partition,
    pub corpus: String,
    pub stage: PrepStage,
    /// SHA-256 of the source file, recorded in the run manifest. None for
    /// clouds constructed in memory.
    pub sha256: Option<String>,
}

impl ActivationCloud {
    /// Construct an in-memory cloud, validating shape and finiteness.
    pub fn new(
        points: Array2<f64>,
        model_id: impl Into<String>,
        layer: usize,
        partition: Partition,
        corpus: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = points.dim();
        if n < 1 || d < 2 {
            return Err(Error::InsufficientData(format!(
                "cloud must have N >= 1 and d >= 2, got {n}x{d}"
            )));
        }
        for ((r, c), v) in points.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: r, col: c });
            }
        }
        Ok(Self {
            points,
            model_id: model_id.into(),
            layer,
            partition,
            corpus: corpus.into(),
            stage: PrepStage::Raw,
            sha256: None,
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Check the partition tag against what a consumer expects.
    pub fn require_partition(&self, expected: Partition, allow_mismatch: bool) -> Result<()> {
        if self.partition != expected && !allow_mismatch {
            return Err(Error::PartitionMismatch {
                expected: expected.to_string(),
                found: self.partition.to_string(),
            });
        }
        Ok(())
    }
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
