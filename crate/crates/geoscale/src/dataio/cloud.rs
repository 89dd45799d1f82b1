//! The `.acld` binary cloud format and its CSV fallback.
//!
//! Binary layout (little-endian, 64-byte header):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ACLD"
//!      4     4  version (u32, currently 1)
//!      8     8  N (u64)
//!     16     8  d (u64)
//!     24     4  dtype code (u32, 0 = f32)
//!     28     4  layer (u32)
//!     32     1  partition (0 = geometry, 1 = error)
//!     33    16  model_id, NUL-padded UTF-8
//!     49    15  corpus, NUL-padded UTF-8
//! ```
//!
//! followed by N*d row-major f32 values. The CSV fallback holds one point per
//! row; `# key = value` comment lines carry the metadata.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{sha256_hex, ActivationCloud, Partition, PrepStage};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ACLD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 64;
const MODEL_ID_CAP: usize = 16;
const CORPUS_CAP: usize = 15;

fn pack_str(s: &str, cap: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = s.as_bytes();
    if bytes.len() > cap {
        return Err(Error::Config(format!(
            "{what} '{s}' exceeds {cap} bytes in the cloud header"
        )));
    }
    let mut out = vec![0u8; cap];
    out[..bytes.len()].copy_from_slice(bytes);
    Ok(out)
}

fn unpack_str(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

/// Serialize a cloud to the `.acld` byte layout.
pub fn encode_cloud(cloud: &ActivationCloud) -> Result<Vec<u8>> {
    let (n, d) = cloud.points.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * d * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes()); // dtype f32
    buf.extend_from_slice(&(cloud.layer as u32).to_le_bytes());
    buf.push(match cloud.partition {
        Partition::Geometry => 0,
        Partition::Error => 1,
    });
    buf.extend_from_slice(&pack_str(&cloud.model_id, MODEL_ID_CAP, "model_id")?);
    buf.extend_from_slice(&pack_str(&cloud.corpus, CORPUS_CAP, "corpus")?);
    debug_assert_eq!(buf.len(), HEADER_LEN);
    for v in cloud.points.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Write a cloud to disk. `.csv` extension selects the CSV fallback,
/// everything else gets the binary format.
pub fn save_cloud(cloud: &ActivationCloud, path: &Path) -> Result<()> {
    let is_csv = path.extension().map(|e| e == "csv").unwrap_or(false);
    let bytes = if is_csv {
        let mut s = String::new();
        s.push_str(&format!("# model_id = {}\n", cloud.model_id));
        s.push_str(&format!("# layer = {}\n", cloud.layer));
        s.push_str(&format!("# partition = {}\n", cloud.partition));
        s.push_str(&format!("# corpus = {}\n", cloud.corpus));
        for row in cloud.points.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", *v as f32)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s.into_bytes()
    } else {
        encode_cloud(cloud)?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn decode_binary(bytes: &[u8], path: &str) -> Result<ActivationCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: format!("file too short for header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let dtype = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    if dtype != 0 {
        return Err(Error::FormatMismatch {
            path: path.into(),
            reason: format!("unknown dtype code {dtype}"),
        });
    }
    let layer = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
    let partition = match bytes[32] {
        0 => Partition::Geometry,
        1 => Partition::Error,
        other => {
            return Err(Error::FormatMismatch {
                path: path.into(),
                reason: format!("unknown partition code {other}"),
            })
        }
    };
    let model_id = unpack_str(&bytes[33..33 + MODEL_ID_CAP]);
    let corpus = unpack_str(&bytes[49..49 + CORPUS_CAP]);

    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() / 4;
    if payload.len() % 4 != 0 || found != n * d {
        return Err(Error::ShapeMismatch {
            path: path.into(),
            expected: n * d,
            found,
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    finish_cloud(values, n, d, model_id, layer, partition, corpus)
}

fn decode_csv(bytes: &[u8], path: &str) -> Result<ActivationCloud> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::FormatMismatch {
        path: path.into(),
        reason: "CSV cloud is not valid UTF-8".into(),
    })?;
    let mut model_id = String::from("unknown");
    let mut corpus = String::from("unknown");
    let mut layer = 0usize;
    let mut partition = Partition::Geometry;
    let mut values: Vec<f64> = Vec::new();
    let mut d: Option<usize> = None;
    let mut n = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "model_id" => model_id = v.to_string(),
                    "corpus" => corpus = v.to_string(),
                    "layer" => {
                        layer = v.parse().map_err(|_| Error::Parse {
                            line: lineno + 1,
                            msg: format!("bad layer '{v}'"),
                        })?
                    }
                    "partition" => {
                        partition = match v {
                            "geometry" => Partition::Geometry,
                            "error" => Partition::Error,
                            _ => {
                                return Err(Error::Parse {
                                    line: lineno + 1,
                                    msg: format!("bad partition '{v}'"),
                                })
                            }
                        }
                    }
                    _ => {}
                }
            }
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad float '{c}'"),
                })
            })
            .collect::<Result<_>>()?;
        match d {
            None => d = Some(row.len()),
            Some(width) if width != row.len() => {
                return Err(Error::ShapeMismatch {
                    path: path.into(),
                    expected: width,
                    found: row.len(),
                });
            }
            _ => {}
        }
        values.extend(row);
        n += 1;
    }
    let d = d.ok_or_else(|| Error::FormatMismatch {
        path: path.into(),
        reason: "CSV cloud has no data rows".into(),
    })?;
    finish_cloud(values, n, d, model_id, layer, partition, corpus)
}

fn finish_cloud(
    values: Vec<f64>,
    n: usize,
    d: usize,
    model_id: String,
    layer: usize,
    partition: Partition,
    corpus: String,
) -> Result<ActivationCloud> {
    if n < 1 || d < 2 {
        return Err(Error::InsufficientData(format!(
            "cloud must have N >= 1 and d >= 2, got {n}x{d}"
        )));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row: i / d,
                col: i % d,
            });
        }
    }
    let points = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::InsufficientData(e.to_string()))?;
    Ok(ActivationCloud {
        points,
        model_id,
        layer,
        partition,
        corpus,
        stage: PrepStage::Raw,
        sha256: None,
    })
}

/// Load a cloud, validate it, and check the partition tag. The returned
/// cloud carries the SHA-256 of the file for the run manifest.
pub fn load_cloud(
    path: &Path,
    expected_partition: Partition,
    allow_partition_mismatch: bool,
) -> Result<ActivationCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    let is_csv = path.extension().map(|e| e == "csv").unwrap_or(false);
    let mut cloud = if is_csv {
        decode_csv(&bytes, &display)?
    } else {
        decode_binary(&bytes, &display)?
    };
    cloud.require_partition(expected_partition, allow_partition_mismatch)?;
    cloud.sha256 = Some(sha256_hex(&bytes));
    Ok(cloud)
}
