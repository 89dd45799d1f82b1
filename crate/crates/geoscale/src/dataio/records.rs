//! JSON Lines checkpoint records with binary per-token sidecars.
//!
//! Each line holds one checkpoint's metadata and aggregates; bulk per-token
//! arrays live in a sidecar file referenced by relative path. Sidecar layout
//! (little-endian): magic "GTOK", version u32, count u64, has_cosdist u8,
//! 7 pad bytes, then count f64 nmse values, count f64 l0 values, and count
//! f64 cosdist values when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelSpec;
use crate::error::{Error, Result};
use crate::recon_metrics::{aggregate_trimmed, TokenEval};

const TOK_MAGIC: &[u8; 4] = b"GTOK";
const TOK_VERSION: u32 = 1;
const TOK_HEADER: usize = 24;

/// One SAE checkpoint's evaluation.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub model_id: String,
    pub layer: usize,
    /// Dictionary width (number of atoms).
    pub width_n: u64,
    /// Trimmed-mean active latents.
    pub l0: f64,
    /// Trimmed-mean NMSE.
    pub loss_l: f64,
    pub corpus: String,
    pub per_token: Option<TokenEval>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    model_id: String,
    layer: usize,
    width_n: u64,
    l0: f64,
    loss_l: f64,
    corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_token_path: Option<String>,
}

fn encode_sidecar(evals: &TokenEval) -> Vec<u8> {
    let count = evals.len();
    let has_cos = evals.cosdist.is_some();
    let mut buf = Vec::with_capacity(TOK_HEADER + count * 8 * if has_cos { 3 } else { 2 });
    buf.extend_from_slice(TOK_MAGIC);
    buf.extend_from_slice(&TOK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    buf.push(has_cos as u8);
    buf.extend_from_slice(&[0u8; 7]);
    for v in &evals.nmse {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &evals.l0 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(cd) = &evals.cosdist {
        for v in cd {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode_sidecar(bytes: &[u8], path: &str) -> Result<TokenEval> {
    if bytes.len() < TOK_HEADER || &bytes[0..4] != TOK_MAGIC {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: "bad sidecar header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOK_VERSION {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: format!("unsupported sidecar version {version}"),
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let has_cos = bytes[16] != 0;
    let expected = TOK_HEADER + count * 8 * if has_cos { 3 } else { 2 };
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let read_block = |offset: usize| -> Vec<f64> {
        bytes[offset..offset + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let nmse = read_block(TOK_HEADER);
    let l0 = read_block(TOK_HEADER + count * 8);
    let cosdist = has_cos.then(|| read_block(TOK_HEADER + 2 * count * 8));
    TokenEval::new(nmse, l0, cosdist)
}

/// Write records to a `.jsonl` file; records carrying per-token arrays get a
/// sidecar named `<stem>.tok<index>` next to the records file.
pub fn save_records(records: &[CheckpointRecord], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "records".into());
    let mut out = String::new();
    for (i, rec) in records.iter().enumerate() {
        let per_token_path = match &rec.per_token {
            Some(evals) => {
                let name = format!("{stem}.tok{i}");
                fs::write(dir.join(&name), encode_sidecar(evals))
                    .map_err(|e| Error::io(dir.join(&name).display().to_string(), e))?;
                Some(name)
            }
            None => None,
        };
        let line = RecordLine {
            model_id: rec.model_id.clone(),
            layer: rec.layer,
            width_n: rec.width_n,
            l0: rec.l0,
            loss_l: rec.loss_l,
            corpus: rec.corpus.clone(),
            per_token_path,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and validate a records file. Order in the file is preserved.
///
/// Checks per record: positive l0 and loss; no duplicate (model, layer,
/// width, l0-within-1e-6); membership in the declared model grid when a
/// matching [`ModelSpec`] is supplied; and, when per-token arrays are
/// present, that the stored aggregates equal `aggregate_trimmed` on them to
/// 1e-9 relative.
pub fn load_records(
    path: &Path,
    models: &[ModelSpec],
    token_trim: f64,
) -> Result<Vec<CheckpointRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records: Vec<CheckpointRecord> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let line: RecordLine = serde_json::from_str(raw_line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !(line.loss_l > 0.0) || !line.loss_l.is_finite() {
            return Err(Error::NonPositiveLoss {
                line: line_no,
                value: line.loss_l,
            });
        }
        if !(line.l0 > 0.0) || !line.l0.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("l0 must be > 0, got {}", line.l0),
            });
        }
        if let Some(spec) = models.iter().find(|m| m.model_id == line.model_id) {
            if !spec.widths.contains(&line.width_n) {
                return Err(Error::UndeclaredRecord {
                    line: line_no,
                    reason: format!(
                        "width {} not in declared set for {}",
                        line.width_n, line.model_id
                    ),
                });
            }
            if line.layer >= spec.layer_count {
                return Err(Error::UndeclaredRecord {
                    line: line_no,
                    reason: format!(
                        "layer {} >= layer count {} for {}",
                        line.layer, spec.layer_count, line.model_id
                    ),
                });
            }
        }
        for prior in &records {
            if prior.model_id == line.model_id
                && prior.layer == line.layer
                && prior.width_n == line.width_n
                && (prior.l0 - line.l0).abs() <= 1e-6
            {
                return Err(Error::DuplicateRecord {
                    line: line_no,
                    model: line.model_id,
                    layer: line.layer,
                    width: line.width_n,
                    l0: line.l0,
                });
            }
        }
        let per_token = match &line.per_token_path {
            Some(rel) => {
                let spath = dir.join(rel);
                let bytes =
                    fs::read(&spath).map_err(|e| Error::io(spath.display().to_string(), e))?;
                let evals = decode_sidecar(&bytes, &spath.display().to_string())?;
                let agg = aggregate_trimmed(&evals, token_trim)?;
                let rel_err = |stored: f64, computed: f64| {
                    (stored - computed).abs() / computed.abs().max(f64::MIN_POSITIVE)
                };
                if rel_err(line.loss_l, agg.loss) > 1e-9 {
                    return Err(Error::AggregateMismatch {
                        line: line_no,
                        which: "loss_l".into(),
                        stored: line.loss_l,
                        computed: agg.loss,
                    });
                }
                if rel_err(line.l0, agg.l0) > 1e-9 {
                    return Err(Error::AggregateMismatch {
                        line: line_no,
                        which: "l0".into(),
                        stored: line.l0,
                        computed: agg.l0,
                    });
                }
                Some(evals)
            }
            None => None,
        };
        records.push(CheckpointRecord {
            model_id: line.model_id,
            layer: line.layer,
            width_n: line.width_n,
            l0: line.l0,
            loss_l: line.loss_l,
            corpus: line.corpus,
            per_token,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: usize, width: u64, l0: f64, loss: f64) -> CheckpointRecord {
        CheckpointRecord {
            model_id: "m".into(),
            layer,
            width_n: width,
            l0,
            loss_l: loss,
            corpus: "c4".into(),
            per_token: None,
        }
    }

    #[test]
    fn three_lines_three_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = vec![
            rec(0, 1024, 20.0, 0.5),
            rec(1, 1024, 20.0, 0.4),
            rec(0, 2048, 20.0, 0.3),
        ];
        save_records(&recs, &path).unwrap();
        let loaded = load_records(&path, &[], 0.05).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].layer, 0);
        assert_eq!(loaded[1].loss_l, 0.4);
        assert_eq!(loaded[2].width_n, 2048);
    }

    #[test]
    fn negative_loss_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_records(&[rec(0, 1024, 20.0, -0.1)], &path).unwrap();
        assert!(matches!(
            load_records(&path, &[], 0.05),
            Err(Error::NonPositiveLoss { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_within_1e6_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_records(
            &[rec(0, 1024, 20.0, 0.5), rec(0, 1024, 20.0 + 5e-7, 0.4)],
            &path,
        )
        .unwrap();
        assert!(matches!(
            load_records(&path, &[], 0.05),
            Err(Error::DuplicateRecord { line: 2, .. })
        ));
    }

    #[test]
    fn aggregate_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let nmse: Vec<f64> = (1..=100).map(|i| i as f64 * 0.01).collect();
        let l0: Vec<f64> = (1..=100).map(|i| (i % 7) as f64 + 10.0).collect();
        let evals = TokenEval::new(nmse, l0, None).unwrap();
        let agg = aggregate_trimmed(&evals, 0.05).unwrap();
        let mut good = rec(0, 1024, agg.l0, agg.loss);
        good.per_token = Some(evals.clone());
        save_records(&[good.clone()], &path).unwrap();
        assert!(load_records(&path, &[], 0.05).is_ok());

        // perturb the stored loss beyond 1e-9 relative
        let mut bad = good;
        bad.loss_l *= 1.0 + 1e-7;
        save_records(&[bad], &path).unwrap();
        assert!(matches!(
            load_records(&path, &[], 0.05),
            Err(Error::AggregateMismatch { .. })
        ));
    }

    #[test]
    fn declared_grid_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let spec = ModelSpec {
            model_id: "m".into(),
            layer_count: 4,
            widths: vec![1024, 2048],
            ..Default::default()
        };
        save_records(&[rec(0, 4096, 20.0, 0.5)], &path).unwrap();
        assert!(matches!(
            load_records(&path, std::slice::from_ref(&spec), 0.05),
            Err(Error::UndeclaredRecord { .. })
        ));
        save_records(&[rec(9, 1024, 20.0, 0.5)], &path).unwrap();
        assert!(matches!(
            load_records(&path, std::slice::from_ref(&spec), 0.05),
            Err(Error::UndeclaredRecord { .. })
        ));
    }
}
