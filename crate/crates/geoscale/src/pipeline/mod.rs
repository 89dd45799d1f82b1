//! Batch orchestration behind the CLI: stage sequencing, the run manifest,
//! and the artifact tree.
//!
//! Stages run in a fixed order (geometry, metrics, stage1, filters, floorfit,
//! stage2, validate, transfer, report); `--stage` recomputes the in-memory
//! prerequisites but writes only the requested stage's artifacts. The
//! manifest is always written first. Any stage failure writes a FAILED
//! marker naming the stage and leaves partial outputs in place.

pub mod artifacts;
pub mod synthcorpus;

pub use synthcorpus::{generate_corpus, SynthCorpusSpec, SynthModelSpec};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    load_cloud, load_records, ActivationCloud, CheckpointRecord, Manifest, ModelSpec, Partition,
    RunConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{estimate_layer, FeatureMatrix, GeometrySummary, FEATURE_NAMES};
use crate::interp::{eval_at, fit_pchip, loo_cv, CellTag, SparsityCurve};
use crate::recon_metrics::aggregate_alternatives;
use crate::scalingfit::{
    alpha_at, fit_floor, fit_stage1, floor_attenuation, floor_ranking, monotone_filters,
    secant_alpha, FloorFit, GridCell, Stage1Fit,
};
use crate::stage2::{
    checkpoint_regression, f_ladder, h1_ranking, h2_lowest_rho, hierarchy_report,
    long_format_regression, permutation_test, transfer, CheckpointRow, Hypothesis, LongVariant,
    RegressionReport,
};

use artifacts::{fmt_f, hierarchy_table_csv, write_json, write_text, Csv};

/// Pipeline stage names, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Geometry,
    Metrics,
    Stage1,
    Filters,
    FloorFit,
    Stage2,
    Validate,
    Transfer,
    Report,
}

impl StageName {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "geometry" => StageName::Geometry,
            "metrics" => StageName::Metrics,
            "stage1" => StageName::Stage1,
            "filters" => StageName::Filters,
            "floorfit" => StageName::FloorFit,
            "stage2" => StageName::Stage2,
            "validate" => StageName::Validate,
            "transfer" => StageName::Transfer,
            "report" => StageName::Report,
            other => return Err(Error::Config(format!("unknown stage '{other}'"))),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Geometry => "geometry",
            StageName::Metrics => "metrics",
            StageName::Stage1 => "stage1",
            StageName::Filters => "filters",
            StageName::FloorFit => "floorfit",
            StageName::Stage2 => "stage2",
            StageName::Validate => "validate",
            StageName::Transfer => "transfer",
            StageName::Report => "report",
        }
    }
}

struct ModelData {
    spec: ModelSpec,
    geometry_clouds: BTreeMap<usize, ActivationCloud>,
    records: Vec<CheckpointRecord>,
    backbone: (u64, u64),
}

struct GeometryOut {
    layers: Vec<usize>,
    summaries: BTreeMap<usize, GeometrySummary>,
    raw: Array2<f64>,
}

struct Stage1Out {
    fits: BTreeMap<usize, Stage1Fit>,
    curves: BTreeMap<(usize, u64), SparsityCurve>,
    alpha: BTreeMap<usize, f64>,
    secant: BTreeMap<usize, f64>,
    skipped: Vec<String>,
}

/// Stage-2 inputs restricted to layers with both geometry and a Stage-1 fit.
struct Stage2Inputs {
    layers: Vec<usize>,
    features: FeatureMatrix,
    raw: Array2<f64>,
    targets: Vec<(&'static str, Vec<f64>)>,
}

pub struct PipelineOptions {
    pub threads: Option<usize>,
    pub only_stage: Option<StageName>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            threads: None,
            only_stage: None,
        }
    }
}

/// Run the pipeline: write the manifest, load inputs, execute the stages.
pub fn run_pipeline(
    cfg: &RunConfig,
    config_echo: serde_json::Value,
    overrides: &[String],
    out_dir: &Path,
    options: &PipelineOptions,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut manifest = Manifest::new(config_echo, cfg.seed, overrides.to_vec());
    for model in &cfg.models {
        for path in model.records.iter().chain(model.clouds.iter()) {
            manifest.add_input(path);
        }
    }
    manifest.write(out_dir)?;
    if let Some(missing) = manifest.inputs.iter().find(|i| i.sha256.is_none()) {
        return Err(Error::io(
            missing.path.clone(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file missing"),
        ));
    }

    let run = || -> Result<()> {
        let mut current_stage = "load";
        let result = execute(cfg, out_dir, options.only_stage, &mut current_stage);
        if let Err(e) = &result {
            let marker = serde_json::json!({
                "stage": current_stage,
                "error": e.to_string(),
            });
            let _ = write_json(&out_dir.join("FAILED"), &marker);
        }
        result
    };

    match options.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(run)
        }
        None => run(),
    }
}

fn should_write(only: Option<StageName>, stage: StageName) -> bool {
    only.map_or(true, |s| s == stage)
}

fn stage_wanted(only: Option<StageName>, stage: StageName) -> bool {
    only.map_or(true, |s| s >= stage)
}

fn execute(
    cfg: &RunConfig,
    out: &Path,
    only: Option<StageName>,
    current_stage: &mut &'static str,
) -> Result<()> {
    let models = load_models(cfg)?;

    let mut geometry: BTreeMap<String, GeometryOut> = BTreeMap::new();
    let mut stage1: BTreeMap<String, Stage1Out> = BTreeMap::new();
    let mut stage2_inputs: BTreeMap<String, Stage2Inputs> = BTreeMap::new();
    let mut raw_reports: BTreeMap<(String, String), Vec<RegressionReport>> = BTreeMap::new();

    *current_stage = StageName::Geometry.as_str();
    for model in &models {
        let g = stage_geometry(cfg, out, model, should_write(only, StageName::Geometry))?;
        geometry.insert(model.spec.model_id.clone(), g);
    }

    *current_stage = StageName::Metrics.as_str();
    if stage_wanted(only, StageName::Metrics) {
        for model in &models {
            stage_metrics(out, model, cfg, should_write(only, StageName::Metrics))?;
        }
    }

    *current_stage = StageName::Stage1.as_str();
    if stage_wanted(only, StageName::Stage1) {
        let mut alpha_csv = Csv::new(&["model", "layer", "k", "alpha"]);
        for model in &models {
            let s1 = stage_stage1(
                cfg,
                out,
                model,
                should_write(only, StageName::Stage1),
                &mut alpha_csv,
            )?;
            stage1.insert(model.spec.model_id.clone(), s1);
        }
        if should_write(only, StageName::Stage1) {
            alpha_csv.save(&out.join("stage1/alpha.csv"))?;
        }
    }

    *current_stage = StageName::Filters.as_str();
    let mut filters: BTreeMap<String, BTreeMap<usize, crate::scalingfit::FilterOutcome>> =
        BTreeMap::new();
    if stage_wanted(only, StageName::Filters) {
        for model in &models {
            let s1 = &stage1[&model.spec.model_id];
            let f = stage_filters(cfg, out, model, s1, should_write(only, StageName::Filters))?;
            filters.insert(model.spec.model_id.clone(), f);
        }
    }

    *current_stage = StageName::FloorFit.as_str();
    if stage_wanted(only, StageName::FloorFit) {
        for model in &models {
            let s1 = &stage1[&model.spec.model_id];
            let g = &geometry[&model.spec.model_id];
            let f = &filters[&model.spec.model_id];
            stage_floorfit(cfg, out, model, s1, g, f, should_write(only, StageName::FloorFit))?;
        }
    }

    *current_stage = StageName::Stage2.as_str();
    if stage_wanted(only, StageName::Stage2) {
        for model in &models {
            let g = &geometry[&model.spec.model_id];
            let s1 = &stage1[&model.spec.model_id];
            let inputs = build_stage2_inputs(g, s1)?;
            let reports = stage_stage2(
                cfg,
                out,
                model,
                &inputs,
                should_write(only, StageName::Stage2),
            )?;
            for (target, rows) in reports {
                raw_reports.insert((model.spec.model_id.clone(), target), rows);
            }
            stage2_inputs.insert(model.spec.model_id.clone(), inputs);
        }
    }

    *current_stage = StageName::Validate.as_str();
    if stage_wanted(only, StageName::Validate) {
        stage_validate(
            cfg,
            out,
            &models,
            &stage2_inputs,
            &stage1,
            should_write(only, StageName::Validate),
        )?;
    }

    *current_stage = StageName::Transfer.as_str();
    if stage_wanted(only, StageName::Transfer) {
        stage_transfer(cfg, out, &stage2_inputs, should_write(only, StageName::Transfer))?;
    }

    *current_stage = StageName::Report.as_str();
    if stage_wanted(only, StageName::Report) && should_write(only, StageName::Report) {
        stage_report(out, &raw_reports)?;
    }
    Ok(())
}

fn load_models(cfg: &RunConfig) -> Result<Vec<ModelData>> {
    if cfg.models.is_empty() {
        return Err(Error::Config("config declares no models".into()));
    }
    let mut out = Vec::with_capacity(cfg.models.len());
    for spec in &cfg.models {
        let mut records = Vec::new();
        for path in &spec.records {
            records.extend(load_records(path, &cfg.models, cfg.token_trim)?);
        }
        let mut geometry_clouds = BTreeMap::new();
        for path in &spec.clouds {
            // header decides the partition; estimators re-check downstream
            let cloud = load_cloud(path, Partition::Geometry, true)?;
            if cloud.partition == Partition::Geometry {
                geometry_clouds.insert(cloud.layer, cloud);
            }
        }
        let backbone = resolve_backbone(spec, &records)?;
        out.push(ModelData {
            spec: spec.clone(),
            geometry_clouds,
            records,
            backbone,
        });
    }
    Ok(out)
}

/// The two widths released at every layer: declared, or derived as the
/// extremes of the widths present at every layer with records.
fn resolve_backbone(spec: &ModelSpec, records: &[CheckpointRecord]) -> Result<(u64, u64)> {
    if let Some(b) = spec.backbone {
        return Ok(b);
    }
    let mut layers: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_id == spec.model_id) {
        layers.entry(r.layer).or_default().push(r.width_n);
    }
    let mut shared: Option<Vec<u64>> = None;
    for widths in layers.values() {
        let mut w = widths.clone();
        w.sort();
        w.dedup();
        shared = Some(match shared {
            None => w,
            Some(prev) => prev.into_iter().filter(|x| w.contains(x)).collect(),
        });
    }
    let shared = shared.unwrap_or_default();
    if shared.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "model {} has no pair of widths shared across all layers",
            spec.model_id
        )));
    }
    Ok((shared[0], *shared.last().unwrap()))
}

// --- geometry ---------------------------------------------------------------

#[derive(Serialize)]
struct GeometryArtifact<'a> {
    model_id: &'a str,
    layer: usize,
    n_points_loaded: usize,
    estimators: &'a crate::dataio::EstimatorConfig,
    summary: &'a GeometrySummary,
}

fn stage_geometry(cfg: &RunConfig, out: &Path, model: &ModelData, write: bool) -> Result<GeometryOut> {
    if model.geometry_clouds.is_empty() {
        return Err(Error::InsufficientData(format!(
            "model {} has no geometry-partition clouds",
            model.spec.model_id
        )));
    }
    let mut summaries = BTreeMap::new();
    let mut layers = Vec::new();
    for (&layer, cloud) in &model.geometry_clouds {
        let mut summary = estimate_layer(
            cloud,
            &cfg.estimators,
            (cfg.norm_trim_lower, cfg.norm_trim_upper),
            cfg.allow_partition_mismatch,
            cfg.emit_per_point,
        )?;
        if write {
            if let Some(tables) = summary.per_point.take() {
                let path = out.join(format!(
                    "geometry/{}_layer{layer}_perpoint.bin",
                    model.spec.model_id
                ));
                write_per_point(&path, &tables)?;
            }
            let artifact = GeometryArtifact {
                model_id: &model.spec.model_id,
                layer,
                n_points_loaded: cloud.n_points(),
                estimators: &cfg.estimators,
                summary: &summary,
            };
            write_json(
                &out.join(format!("geometry/{}_layer{layer}.json", model.spec.model_id)),
                &artifact,
            )?;
        } else {
            summary.per_point = None;
        }
        layers.push(layer);
        summaries.insert(layer, summary);
    }
    let mut raw = Array2::zeros((layers.len(), 4));
    for (i, layer) in layers.iter().enumerate() {
        for (j, v) in summaries[layer].features().iter().enumerate() {
            raw[[i, j]] = *v;
        }
    }
    if write {
        let fm = crate::geometry::feature_pipeline(&raw)?;
        #[derive(Serialize)]
        struct FeaturesArtifact<'a> {
            layers: &'a [usize],
            feature_names: [&'static str; 4],
            raw: Vec<Vec<f64>>,
            pipeline: &'a FeatureMatrix,
        }
        write_json(
            &out.join(format!("geometry/features_{}.json", model.spec.model_id)),
            &FeaturesArtifact {
                layers: &layers,
                feature_names: FEATURE_NAMES,
                raw: raw.rows().into_iter().map(|r| r.to_vec()).collect(),
                pipeline: &fm,
            },
        )?;
        let mut csv = Csv::new(&["layer", "d_int", "kappa_ms", "kappa_tv", "nu", "k_t"]);
        for layer in &layers {
            let s = &summaries[layer];
            csv.row(&[
                layer.to_string(),
                fmt_f(s.d_int),
                fmt_f(s.kappa_ms),
                fmt_f(s.kappa_tv),
                fmt_f(s.nu),
                s.k_t.to_string(),
            ]);
        }
        csv.save(&out.join(format!(
            "plotdata/geometry_profile_{}.csv",
            model.spec.model_id
        )))?;
    }
    Ok(GeometryOut {
        layers,
        summaries,
        raw,
    })
}

fn write_per_point(path: &Path, tables: &crate::geometry::PerPointTables) -> Result<()> {
    let n = tables.twonn_raw.len();
    let mut buf = Vec::with_capacity(16 + n * 8 * 5);
    buf.extend_from_slice(b"GPPT");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for arr in [
        &tables.twonn_raw,
        &tables.twonn_smoothed,
        &tables.curvature,
        &tables.tangent_variation,
        &tables.heterogeneity,
    ] {
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

// --- metrics -----------------------------------------------------------------

fn stage_metrics(out: &Path, model: &ModelData, cfg: &RunConfig, write: bool) -> Result<()> {
    if !write {
        return Ok(());
    }
    let id = &model.spec.model_id;
    let mut csv = Csv::new(&["model", "layer", "width", "l0", "loss", "corpus"]);
    for r in &model.records {
        csv.row(&[
            r.model_id.clone(),
            r.layer.to_string(),
            r.width_n.to_string(),
            fmt_f(r.l0),
            fmt_f(r.loss_l),
            r.corpus.clone(),
        ]);
    }
    csv.save(&out.join(format!("metrics/checkpoints_{id}.csv")))?;

    // aggregation sensitivity on records carrying per-token arrays
    let mut sens = Csv::new(&[
        "layer", "width", "l0", "mean", "median", "trimmed", "geometric_mean", "geometric_zero",
    ]);
    for r in &model.records {
        if let Some(evals) = &r.per_token {
            let alts = aggregate_alternatives(evals)?;
            sens.row(&[
                r.layer.to_string(),
                r.width_n.to_string(),
                fmt_f(r.l0),
                fmt_f(alts.mean),
                fmt_f(alts.median),
                fmt_f(alts.trimmed),
                fmt_f(alts.geometric_mean),
                alts.geometric_zero_flag.to_string(),
            ]);
        }
    }
    sens.save(&out.join(format!("metrics/aggregation_sensitivity_{id}.csv")))?;

    // layerwise profile at the upper backbone width, per corpus
    let (_, hi) = model.backbone;
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in model.records.iter().filter(|r| r.width_n == hi) {
        groups
            .entry((r.corpus.clone(), r.layer))
            .or_default()
            .push(r.loss_l);
    }
    let mut profile = Csv::new(&["corpus", "layer", "width", "mean_loss", "n_checkpoints"]);
    for ((corpus, layer), losses) in &groups {
        profile.row(&[
            corpus.clone(),
            layer.to_string(),
            hi.to_string(),
            fmt_f(crate::numeric::mean(losses)),
            losses.len().to_string(),
        ]);
    }
    profile.save(&out.join(format!("plotdata/nmse_per_layer_{id}.csv")))?;

    // stratification by L0 bin at the upper backbone width
    let edges = &cfg.l0_bin_edges;
    let mut binned: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in model.records.iter().filter(|r| r.width_n == hi) {
        if let Some(bin) = edges.windows(2).position(|w| r.l0 >= w[0] && r.l0 < w[1]) {
            binned.entry((r.layer, bin)).or_default().push(r.loss_l);
        }
    }
    let mut strat = Csv::new(&["layer", "l0_bin_lo", "l0_bin_hi", "mean_loss", "n_checkpoints"]);
    for ((layer, bin), losses) in &binned {
        strat.row(&[
            layer.to_string(),
            fmt_f(edges[*bin]),
            fmt_f(edges[*bin + 1]),
            fmt_f(crate::numeric::mean(losses)),
            losses.len().to_string(),
        ]);
    }
    strat.save(&out.join(format!("plotdata/nmse_by_l0_bin_{id}.csv")))?;
    Ok(())
}

// --- stage 1 ------------------------------------------------------------------

fn stage_stage1(
    cfg: &RunConfig,
    out: &Path,
    model: &ModelData,
    write: bool,
    alpha_csv: &mut Csv,
) -> Result<Stage1Out> {
    let id = &model.spec.model_id;
    // per-(layer, width) sparsity curves
    let mut cells: BTreeMap<(usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &model.records {
        cells
            .entry((r.layer, r.width_n))
            .or_default()
            .push((r.l0, r.loss_l));
    }
    let mut curves = BTreeMap::new();
    let mut skipped = Vec::new();
    for (&(layer, width), points) in &cells {
        if points.len() < 2 {
            skipped.push(format!("layer {layer} width {width}: {} point(s)", points.len()));
            continue;
        }
        let curve = fit_pchip(points)?.with_tag(CellTag {
            model_id: id.clone(),
            layer,
            width,
        });
        curves.insert((layer, width), curve);
    }

    // per-layer surface fits on the shared k grid
    let mut fits = BTreeMap::new();
    let mut alpha = BTreeMap::new();
    let layer_set: Vec<usize> = {
        let mut l: Vec<usize> = curves.keys().map(|&(layer, _)| layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    for &layer in &layer_set {
        let mut triples = Vec::new();
        for (&(l, width), curve) in &curves {
            if l != layer {
                continue;
            }
            for ev in eval_at(curve, &cfg.k_grid) {
                if ev.in_range {
                    triples.push((width as f64, ev.k, ev.log_l.exp()));
                }
            }
        }
        let distinct_widths = {
            let mut w: Vec<u64> = triples.iter().map(|t| t.0 as u64).collect();
            w.sort_unstable();
            w.dedup();
            w.len()
        };
        if triples.len() < 5 || distinct_widths < 2 {
            skipped.push(format!(
                "layer {layer}: insufficient in-range grid for a surface fit"
            ));
            continue;
        }
        let fit = fit_stage1(&triples)?;
        alpha.insert(layer, alpha_at(&fit, cfg.alpha_k));
        fits.insert(layer, fit);
    }

    // backbone secant at the alpha target
    let (lo, hi) = model.backbone;
    let mut secant = BTreeMap::new();
    for &layer in &layer_set {
        if let (Some(c_lo), Some(c_hi)) = (curves.get(&(layer, lo)), curves.get(&(layer, hi))) {
            if let Ok(s) = secant_alpha(c_lo, c_hi, cfg.alpha_k, lo as f64, hi as f64) {
                secant.insert(layer, s);
            }
        }
    }

    if write {
        write_json(&out.join(format!("stage1/fits_{id}.json")), &fits)?;
        #[derive(Serialize)]
        struct SkipLog<'a> {
            skipped: &'a [String],
        }
        write_json(&out.join(format!("stage1/skipped_{id}.json")), &SkipLog { skipped: &skipped })?;
        for (&layer, fit) in &fits {
            let mut ks = cfg.alpha_k_profile.clone();
            if !ks.contains(&cfg.alpha_k) {
                ks.push(cfg.alpha_k);
                ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            for k in ks {
                alpha_csv.row(&[
                    id.clone(),
                    layer.to_string(),
                    fmt_f(k),
                    fmt_f(alpha_at(fit, k)),
                ]);
            }
        }
        let mut sec_csv = Csv::new(&["layer", "alpha_stage1", "alpha_secant", "difference"]);
        for (&layer, s) in &secant {
            if let Some(a) = alpha.get(&layer) {
                sec_csv.row(&[
                    layer.to_string(),
                    fmt_f(*a),
                    fmt_f(*s),
                    fmt_f(a - s),
                ]);
            }
        }
        sec_csv.save(&out.join(format!("stage1/secant_{id}.csv")))?;

        // alpha profile plot data
        let mut prof = Csv::new(&["layer", "k", "alpha"]);
        for (&layer, fit) in &fits {
            for &k in &cfg.alpha_k_profile {
                prof.row(&[layer.to_string(), fmt_f(k), fmt_f(alpha_at(fit, k))]);
            }
        }
        prof.save(&out.join(format!("plotdata/alpha_profile_{id}.csv")))?;

        // per-width curves at the alpha target
        let mut wc = Csv::new(&["layer", "width", "log_l", "in_range"]);
        for (&(layer, width), curve) in &curves {
            let ev = &eval_at(curve, &[cfg.alpha_k])[0];
            wc.row(&[
                layer.to_string(),
                width.to_string(),
                fmt_f(ev.log_l),
                ev.in_range.to_string(),
            ]);
        }
        wc.save(&out.join(format!("plotdata/width_curves_{id}.csv")))?;
    }
    Ok(Stage1Out {
        fits,
        curves,
        alpha,
        secant,
        skipped,
    })
}

// --- filters ------------------------------------------------------------------

fn showcase_layers(cfg: &RunConfig, model: &ModelData) -> Vec<usize> {
    let mut widths_per_layer: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in &model.records {
        widths_per_layer.entry(r.layer).or_default().push(r.width_n);
    }
    widths_per_layer
        .into_iter()
        .filter_map(|(layer, mut w)| {
            w.sort_unstable();
            w.dedup();
            (w.len() >= cfg.floor.min_widths).then_some(layer)
        })
        .collect()
}

fn stage_filters(
    cfg: &RunConfig,
    out: &Path,
    model: &ModelData,
    s1: &Stage1Out,
    write: bool,
) -> Result<BTreeMap<usize, crate::scalingfit::FilterOutcome>> {
    let id = &model.spec.model_id;
    let mut outcomes = BTreeMap::new();
    let mut summary = Csv::new(&["layer", "n_cells", "n_retained", "n_dropped"]);
    for layer in showcase_layers(cfg, model) {
        let mut grid_cells = Vec::new();
        for (&(l, width), curve) in &s1.curves {
            if l != layer {
                continue;
            }
            for ev in eval_at(curve, &cfg.k_grid) {
                if ev.in_range {
                    grid_cells.push(GridCell {
                        width,
                        k: ev.k,
                        log_l: ev.log_l,
                    });
                }
            }
        }
        let outcome = monotone_filters(
            &grid_cells,
            cfg.floor.local_alpha_tol,
            cfg.floor.cross_k_tol,
            Some(cfg.floor.min_widths),
        )?;
        if write {
            write_json(&out.join(format!("filters/{id}_layer{layer}.json")), &outcome)?;
            summary.row(&[
                layer.to_string(),
                grid_cells.len().to_string(),
                outcome.retained.len().to_string(),
                outcome.dropped.len().to_string(),
            ]);
        }
        outcomes.insert(layer, outcome);
    }
    if write {
        summary.save(&out.join(format!("filters/summary_{id}.csv")))?;
    }
    Ok(outcomes)
}

// --- floor fit ------------------------------------------------------------------

fn stage_floorfit(
    cfg: &RunConfig,
    out: &Path,
    model: &ModelData,
    s1: &Stage1Out,
    geometry: &GeometryOut,
    filters: &BTreeMap<usize, crate::scalingfit::FilterOutcome>,
    write: bool,
) -> Result<()> {
    let id = &model.spec.model_id;
    if filters.is_empty() {
        return Ok(());
    }
    let (lo, hi) = model.backbone;
    let mut fits: BTreeMap<usize, FloorFit> = BTreeMap::new();
    let mut summary = Csv::new(&[
        "layer",
        "b_at_k",
        "alpha_wf",
        "alpha_secant",
        "delta",
        "rss",
        "winning_seed",
    ]);
    for (&layer, outcome) in filters {
        let fit = fit_floor(outcome, &cfg.floor)?;
        let b = fit.b(cfg.alpha_k);
        let alpha_wf = fit.alpha(cfg.alpha_k);
        let delta = floor_attenuation(&fit, lo as f64, hi as f64, cfg.alpha_k);
        let sec = s1.secant.get(&layer).copied();
        if write {
            summary.row(&[
                layer.to_string(),
                fmt_f(b),
                fmt_f(alpha_wf),
                sec.map(fmt_f).unwrap_or_default(),
                fmt_f(delta),
                fmt_f(fit.rss),
                fit.winning_seed.to_string(),
            ]);
            write_json(&out.join(format!("floorfit/{id}_layer{layer}.json")), &fit)?;

            // k = alpha_k slice for the showcase plot
            let mut slice = Csv::new(&["width", "log_l_observed", "log_l_fit", "retained"]);
            let mut widths: Vec<u64> = outcome.retained.iter().map(|c| c.width).collect();
            widths.sort_unstable();
            widths.dedup();
            for width in widths {
                let observed = s1
                    .curves
                    .get(&(layer, width))
                    .and_then(|c| c.eval_log(cfg.alpha_k).ok());
                slice.row(&[
                    width.to_string(),
                    observed.map(fmt_f).unwrap_or_default(),
                    fmt_f(fit.log_model(width as f64, cfg.alpha_k)),
                    "true".into(),
                ]);
            }
            slice.save(&out.join(format!("plotdata/showcase_fit_{id}_L{layer}.csv")))?;
        }
        fits.insert(layer, fit);
    }

    // floor-geometry concordance over the showcase layers
    let mut b_values = Vec::new();
    let mut geoms = Vec::new();
    for (&layer, fit) in &fits {
        if let Some(g) = geometry.summaries.get(&layer) {
            b_values.push(fit.b(cfg.alpha_k));
            geoms.push(g.clone());
        }
    }
    if write {
        if b_values.len() >= 2 {
            let ranking = floor_ranking(&b_values, &geoms)?;
            write_json(&out.join(format!("floorfit/ranking_{id}.json")), &ranking)?;
        }
        summary.save(&out.join(format!("floorfit/summary_{id}.csv")))?;
        let mut scatter = Csv::new(&["layer", "feature", "raw_value", "b_at_k"]);
        for (&layer, fit) in &fits {
            if let Some(g) = geometry.summaries.get(&layer) {
                for (j, name) in FEATURE_NAMES.iter().enumerate() {
                    scatter.row(&[
                        layer.to_string(),
                        name.to_string(),
                        fmt_f(g.features()[j]),
                        fmt_f(fit.b(cfg.alpha_k)),
                    ]);
                }
            }
        }
        scatter.save(&out.join(format!("plotdata/geom_vs_floor_{id}.csv")))?;
    }
    Ok(())
}

// --- stage 2 ------------------------------------------------------------------

fn build_stage2_inputs(geometry: &GeometryOut, s1: &Stage1Out) -> Result<Stage2Inputs> {
    let layers: Vec<usize> = geometry
        .layers
        .iter()
        .copied()
        .filter(|l| s1.fits.contains_key(l))
        .collect();
    if layers.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "stage 2 needs >= 4 layers with geometry and a surface fit, got {}",
            layers.len()
        )));
    }
    let mut raw = Array2::zeros((layers.len(), 4));
    for (i, layer) in layers.iter().enumerate() {
        for (j, v) in geometry.summaries[layer].features().iter().enumerate() {
            raw[[i, j]] = *v;
        }
    }
    let features = crate::geometry::feature_pipeline(&raw)?;
    let alpha: Vec<f64> = layers.iter().map(|l| s1.alpha[l]).collect();
    let beta_n: Vec<f64> = layers.iter().map(|l| s1.fits[l].beta_n).collect();
    let gamma: Vec<f64> = layers.iter().map(|l| s1.fits[l].gamma).collect();
    Ok(Stage2Inputs {
        layers,
        features,
        raw,
        targets: vec![
            ("alpha_at_k", alpha),
            ("beta_n", beta_n),
            ("gamma", gamma),
        ],
    })
}

fn stage_stage2(
    cfg: &RunConfig,
    out: &Path,
    model: &ModelData,
    inputs: &Stage2Inputs,
    write: bool,
) -> Result<Vec<(String, Vec<RegressionReport>)>> {
    let id = &model.spec.model_id;
    let mut all_reports = Vec::new();
    for (target, y) in &inputs.targets {
        let rows = hierarchy_report(target, y, &inputs.features, cfg.stage2.h2_mode)?;
        if write {
            write_json(&out.join(format!("stage2/raw/{id}_{target}.json")), &rows)?;
        }
        all_reports.push((target.to_string(), rows));
    }

    // row-per-checkpoint regression with the same hierarchy semantics
    let layer_pos: BTreeMap<usize, usize> = inputs
        .layers
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let rows: Vec<CheckpointRow> = model
        .records
        .iter()
        .filter_map(|r| {
            layer_pos.get(&r.layer).map(|&layer_index| CheckpointRow {
                layer_index,
                width: r.width_n as f64,
                k: r.l0,
                loss: r.loss_l,
            })
        })
        .collect();
    let h2 = h2_lowest_rho(&inputs.features);
    let mut hierarchy: Vec<Hypothesis> = vec![Hypothesis::H0];
    hierarchy.extend((0..4).map(Hypothesis::H1));
    hierarchy.push(Hypothesis::H2(h2.0, h2.1));
    hierarchy.push(Hypothesis::HFull);
    let checkpoint_fits: Vec<_> = hierarchy
        .iter()
        .map(|h| checkpoint_regression(&rows, &inputs.features, h))
        .collect::<Result<_>>()?;
    if write {
        write_json(&out.join(format!("stage2/checkpoint_{id}.json")), &checkpoint_fits)?;
    }

    // long-format alpha-curve regression
    let mut alpha_rows = Vec::new();
    for (i, &layer) in inputs.layers.iter().enumerate() {
        let fit = &model_stage1_fit_for(layer, inputs, i);
        // alpha from the per-layer stage-1 fit at each shared k
        for &k in &cfg.k_grid {
            alpha_rows.push(crate::stage2::grouped::AlphaRow {
                layer_index: i,
                k,
                alpha: -(fit.0 + fit.1 * k.ln()),
            });
        }
    }
    let mut long_reports = Vec::new();
    for variant in [LongVariant::InterceptOnly, LongVariant::LogKOnly, LongVariant::Both] {
        for h in (0..4).map(Hypothesis::H1).chain([Hypothesis::HFull]) {
            let fit = long_format_regression(&alpha_rows, &inputs.features, &h, variant)?;
            long_reports.push((variant.label(), fit));
        }
    }
    if write {
        write_json(&out.join(format!("stage2/long_format_{id}.json")), &long_reports)?;

        // geometry-vs-alpha scatter data
        let mut scatter = Csv::new(&["layer", "feature", "raw_value", "alpha"]);
        let alpha_target = &inputs.targets[0].1;
        for (i, &layer) in inputs.layers.iter().enumerate() {
            for (j, name) in FEATURE_NAMES.iter().enumerate() {
                scatter.row(&[
                    layer.to_string(),
                    name.to_string(),
                    fmt_f(inputs.raw[[i, j]]),
                    fmt_f(alpha_target[i]),
                ]);
            }
        }
        scatter.save(&out.join(format!("plotdata/geom_vs_alpha_{id}.csv")))?;
    }
    Ok(all_reports)
}

/// (beta_n, gamma) of the layer at position `i` of the stage-2 layer list.
fn model_stage1_fit_for(_layer: usize, inputs: &Stage2Inputs, i: usize) -> (f64, f64) {
    let beta_n = inputs.targets[1].1[i];
    let gamma = inputs.targets[2].1[i];
    (beta_n, gamma)
}

// --- validate -----------------------------------------------------------------

fn stage_validate(
    cfg: &RunConfig,
    out: &Path,
    models: &[ModelData],
    stage2_inputs: &BTreeMap<String, Stage2Inputs>,
    stage1: &BTreeMap<String, Stage1Out>,
    write: bool,
) -> Result<()> {
    if !write {
        return Ok(());
    }
    #[derive(Serialize)]
    struct PermutationEntry {
        model: String,
        target: String,
        hypothesis: String,
        observed_loo: f64,
        p_value: f64,
        null_mean: f64,
        null_sd: f64,
        n_permutations: usize,
        seed: u64,
    }
    let mut permutation_entries = Vec::new();
    let mut ladders = Vec::new();
    let mut h0_identities = Vec::new();
    for model in models {
        let id = &model.spec.model_id;
        let inputs = &stage2_inputs[id];
        for (t_idx, (target, y)) in inputs.targets.iter().enumerate() {
            let h2 = crate::stage2::select_h2(y, &inputs.features, cfg.stage2.h2_mode)?;
            let mut hyps: Vec<Hypothesis> = (0..4).map(Hypothesis::H1).collect();
            hyps.push(Hypothesis::H2(h2.0, h2.1));
            hyps.push(Hypothesis::HFull);
            for (h_idx, h) in hyps.iter().enumerate() {
                let seed = cfg
                    .seed
                    .wrapping_add(1000 * t_idx as u64)
                    .wrapping_add(10 * h_idx as u64);
                let rep = permutation_test(y, &inputs.features, h, cfg.stage2.permutations, seed)?;
                permutation_entries.push(PermutationEntry {
                    model: id.clone(),
                    target: target.to_string(),
                    hypothesis: h.label(),
                    observed_loo: rep.observed_loo,
                    p_value: rep.p_value,
                    null_mean: rep.null_mean,
                    null_sd: rep.null_sd,
                    n_permutations: rep.n_permutations,
                    seed: rep.seed,
                });
            }
            let ladder = f_ladder(y, &inputs.features)?;
            ladders.push((id.clone(), target.to_string(), ladder));
        }
        h0_identities.push(serde_json::json!({
            "model": id,
            "n_layers": inputs.layers.len(),
            "h0_loo_r2": crate::stage2::h0_loo_r2(inputs.layers.len()),
        }));
    }
    write_json(&out.join("validate/permutation.json"), &permutation_entries)?;
    write_json(&out.join("validate/f_ladder.json"), &ladders)?;
    write_json(&out.join("validate/h0_identity.json"), &h0_identities)?;

    // PCHIP leave-one-L0-out per (layer, width) cell
    let mut csv = Csv::new(&["model", "layer", "width", "n_points", "r2", "skipped_reason"]);
    for model in models {
        let id = &model.spec.model_id;
        let mut cells: BTreeMap<(usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
        for r in &model.records {
            cells
                .entry((r.layer, r.width_n))
                .or_default()
                .push((r.l0, r.loss_l));
        }
        let _ = &stage1[id];
        for ((layer, width), points) in cells {
            match loo_cv(&points) {
                Ok(rep) => csv.row(&[
                    id.clone(),
                    layer.to_string(),
                    width.to_string(),
                    points.len().to_string(),
                    fmt_f(rep.r2),
                    String::new(),
                ]),
                Err(e) => csv.row(&[
                    id.clone(),
                    layer.to_string(),
                    width.to_string(),
                    points.len().to_string(),
                    String::new(),
                    format!("\"{e}\""),
                ]),
            }
        }
    }
    csv.save(&out.join("validate/pchip_loo.csv"))?;
    Ok(())
}

// --- transfer -----------------------------------------------------------------

fn stage_transfer(
    cfg: &RunConfig,
    out: &Path,
    stage2_inputs: &BTreeMap<String, Stage2Inputs>,
    write: bool,
) -> Result<()> {
    if !write || stage2_inputs.len() < 2 {
        return Ok(());
    }
    let mut csv = Csv::new(&[
        "target",
        "train",
        "test",
        "hypothesis",
        "transfer_r2",
        "test_insample_r2",
        "delta",
    ]);
    let ids: Vec<&String> = stage2_inputs.keys().collect();
    for &train_id in &ids {
        for &test_id in &ids {
            if train_id == test_id {
                continue;
            }
            let train = &stage2_inputs[train_id];
            let test = &stage2_inputs[test_id];
            let train_y = &train.targets[0].1;
            let test_y = &test.targets[0].1;
            let best = h1_ranking(train_y, &train.features)?[0].0;
            let h2 = h2_lowest_rho(&train.features);
            for h in [
                Hypothesis::H1(best),
                Hypothesis::H2(h2.0, h2.1),
                Hypothesis::HFull,
            ] {
                let rep = transfer(train_y, &train.raw, test_y, &test.raw, &h)?;
                csv.row(&[
                    "alpha_at_k".into(),
                    train_id.clone(),
                    test_id.clone(),
                    rep.hypothesis.clone(),
                    fmt_f(rep.transfer_r2),
                    fmt_f(rep.test_insample_r2),
                    fmt_f(rep.delta),
                ]);
            }
        }
    }
    let _ = cfg;
    csv.save(&out.join("transfer/transfer.csv"))
}

// --- report -------------------------------------------------------------------

fn stage_report(
    out: &Path,
    raw_reports: &BTreeMap<(String, String), Vec<RegressionReport>>,
) -> Result<()> {
    for ((model, target), rows) in raw_reports {
        write_text(
            &out.join(format!("stage2/tables/{model}_{target}.csv")),
            &hierarchy_table_csv(rows),
        )?;
    }
    let summary: Vec<serde_json::Value> = raw_reports
        .iter()
        .map(|((model, target), rows)| {
            let best = rows
                .iter()
                .filter(|r| r.hypothesis.starts_with("H1"))
                .max_by(|a, b| a.loo.partial_cmp(&b.loo).unwrap());
            serde_json::json!({
                "model": model,
                "target": target,
                "n_layers": rows.first().map(|r| r.n_layers),
                "best_single_feature": best.map(|r| r.hypothesis.clone()),
                "best_single_feature_loo": best.map(|r| r.loo),
            })
        })
        .collect();
    write_json(&out.join("report/summary.json"), &summary)
}

/// Re-emit the formatted hierarchy tables from an artifact directory's raw
/// stage-2 JSON (the standalone `report` command).
pub fn report_from_artifacts(out: &Path) -> Result<()> {
    let raw_dir = out.join("stage2/raw");
    let entries = std::fs::read_dir(&raw_dir)
        .map_err(|e| Error::io(raw_dir.display().to_string(), e))?;
    let mut reports: BTreeMap<(String, String), Vec<RegressionReport>> = BTreeMap::new();
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    names.sort();
    for path in names {
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let rows: Vec<RegressionReport> =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
        let stem = path.file_stem().unwrap().to_string_lossy();
        // file stem is "{model}_{target}"; recover the split from the rows
        let target = rows
            .first()
            .map(|r| r.target.clone())
            .unwrap_or_else(|| "unknown".into());
        let model = stem
            .strip_suffix(&format!("_{target}"))
            .unwrap_or(&stem)
            .to_string();
        reports.insert((model, target), rows);
    }
    stage_report(out, &reports)
}
