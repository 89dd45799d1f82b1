//! Run configuration. Every field defaults to the value used in the analysis
//! this pipeline implements; overrides arrive via `--override key.path=value`
//! and are echoed into the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One model's declared checkpoint grid and input files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub layer_count: usize,
    /// Declared dictionary-width set; records outside it are rejected.
    pub widths: Vec<u64>,
    /// The two widths released at every layer (lo, hi). When absent, the
    /// smallest and largest width present at all layers are used.
    #[serde(default)]
    pub backbone: Option<(u64, u64)>,
    /// Checkpoint record files (.jsonl).
    #[serde(default)]
    pub records: Vec<PathBuf>,
    /// Activation cloud files (.acld or .csv), any mix of partitions; the
    /// header tags decide how each is used.
    #[serde(default)]
    pub clouds: Vec<PathBuf>,
}

/// Hyperparameters of the four geometric estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Shared neighbour-graph size.
    pub k_max: usize,
    /// TWO-NN local window.
    pub twonn_window: usize,
    /// Multi-scale curvature: small scale.
    pub k_small: usize,
    /// Multi-scale curvature: large scale.
    pub k_large: usize,
    /// Tangent-variation neighbourhood.
    pub k_tangent: usize,
    /// Tangent-variation comparison neighbours.
    pub n_compare: usize,
    /// Heterogeneity neighbourhood.
    pub k_heterogeneity: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_max: 500,
            twonn_window: 100,
            k_small: 30,
            k_large: 200,
            k_tangent: 50,
            n_compare: 5,
            k_heterogeneity: 50,
        }
    }
}

/// With-floor fit settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FloorConfig {
    /// Optional user-supplied start replacing the last lattice seed
    /// (a0, beta_n, beta_k, gamma, zeta, eta).
    pub user_seed: Option<[f64; 6]>,
    /// Simplex-diameter convergence tolerance.
    pub simplex_tol: f64,
    /// Evaluation budget = this times the parameter count.
    pub max_evals_per_param: usize,
    /// Minimum surviving widths/k values for a showcase fit.
    pub min_widths: usize,
    /// Cross-k extremum tolerance of monotone filter (3).
    pub cross_k_tol: f64,
    /// Local-slope increase tolerance of monotone filter (2).
    pub local_alpha_tol: f64,
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self {
            user_seed: None,
            simplex_tol: 1e-10,
            max_evals_per_param: 2000,
            min_widths: 3,
            cross_k_tol: 0.02,
            local_alpha_tol: 1e-6,
        }
    }
}

/// How the H2 feature pair is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum H2Mode {
    /// The two features with the smallest pairwise |correlation|.
    LowestRho,
    /// Best single feature plus the next best.
    BestNext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub permutations: usize,
    pub h2_mode: H2Mode,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            permutations: 1000,
            h2_mode: H2Mode::LowestRho,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub models: Vec<ModelSpec>,
    /// Shared sparsity grid for surface fits.
    pub k_grid: Vec<f64>,
    /// Sparsity target for the derived width exponent.
    pub alpha_k: f64,
    /// Targets for the layerwise alpha profile plot data.
    pub alpha_k_profile: Vec<f64>,
    /// Norm-trim fractions (lower, upper) for geometry preprocessing.
    pub norm_trim_lower: f64,
    pub norm_trim_upper: f64,
    /// Symmetric per-token trim fraction.
    pub token_trim: f64,
    pub estimators: EstimatorConfig,
    pub floor: FloorConfig,
    pub stage2: Stage2Config,
    /// L0 bin edges for the stratified plot data.
    pub l0_bin_edges: Vec<f64>,
    /// Seed for everything random (floor-fit has its own deterministic seed
    /// lattice; this seeds permutations and synthetic generation).
    pub seed: u64,
    /// Write per-point estimator tables next to the per-layer JSON.
    pub emit_per_point: bool,
    /// Allow estimators to accept clouds from the wrong partition.
    pub allow_partition_mismatch: bool,
    /// Output directory (usually overridden by --out).
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            k_grid: vec![16.0, 24.0, 32.0, 48.0, 64.0, 96.0, 128.0, 160.0, 192.0],
            alpha_k: 50.0,
            alpha_k_profile: vec![25.0, 50.0, 75.0],
            norm_trim_lower: 0.05,
            norm_trim_upper: 0.05,
            token_trim: 0.05,
            estimators: EstimatorConfig::default(),
            floor: FloorConfig::default(),
            stage2: Stage2Config::default(),
            l0_bin_edges: vec![10.0, 25.0, 55.0, 130.0, 300.0],
            seed: 42,
            emit_per_point: false,
            allow_partition_mismatch: false,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Load a config from JSON, applying `key.path=value` overrides before
    /// deserialization. Returns the config and the resolved JSON echo.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, serde_json::Value)> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(
        mut value: serde_json::Value,
        overrides: &[String],
    ) -> Result<(Self, serde_json::Value)> {
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        let echo = serde_json::to_value(&cfg).expect("config echo");
        Ok((cfg, echo))
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm_trim_lower < 0.0
            || self.norm_trim_upper < 0.0
            || self.norm_trim_lower + self.norm_trim_upper >= 1.0
        {
            return Err(Error::Config(
                "norm trim fractions must be >= 0 and sum below 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.token_trim) {
            return Err(Error::Config("token trim must be in [0, 0.5)".into()));
        }
        if self.k_grid.len() < 2 || self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "k_grid must be strictly increasing with >= 2 entries".into(),
            ));
        }
        if self.estimators.k_large > self.estimators.k_max
            || self.estimators.twonn_window > self.estimators.k_max
        {
            return Err(Error::Config(
                "estimator neighbourhoods must fit inside k_max".into(),
            ));
        }
        Ok(())
    }
}

/// Apply one `key.path=value` override to a JSON config value. The right-hand
/// side is parsed as JSON when possible and treated as a bare string otherwise.
pub fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let new: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if last {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(seg.to_string(), new);
                    return Ok(());
                }
                _ => return Err(Error::Config(format!("override path '{path}' not an object"))),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new())),
            serde_json::Value::Array(arr) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("bad array index '{seg}' in '{path}'")))?;
                arr.get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in '{path}'")))?
            }
            _ => return Err(Error::Config(format!("override path '{path}' too deep"))),
        };
    }
    unreachable!()
}
