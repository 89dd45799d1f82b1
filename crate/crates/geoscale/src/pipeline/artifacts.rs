//! Artifact writers: deterministic CSV/JSON emission and the table formats.
//!
//! CSV files use a period decimal separator and fixed column order; identical
//! inputs produce byte-identical files regardless of thread count. Report
//! tables print R^2 columns to 3 decimals, information criteria and F to one,
//! and p-values exactly above 1e-10 with "<1e-10" below.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stage2::RegressionReport;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serialization");
    write_text(path, &text)
}

/// Shortest-roundtrip float formatting for data CSVs.
pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Paper-style p-value formatting: exact above the 1e-10 threshold,
/// "<1e-10" below it.
pub fn fmt_p(p: f64) -> String {
    if p < 1e-10 {
        "<1e-10".into()
    } else {
        format!("{p:.1e}")
    }
}

/// A simple CSV builder with a fixed header.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Csv { buf }
    }

    pub fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.buf, "{}", cells.join(","));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.buf)
    }
}

/// One hierarchy table in the published column layout.
pub fn hierarchy_table_csv(rows: &[RegressionReport]) -> String {
    let mut csv = Csv::new(&[
        "hypothesis", "r2", "loo", "l2o", "l3o", "aic", "bic", "f_vs_h0", "p",
    ]);
    for r in rows {
        csv.row(&[
            r.hypothesis.clone(),
            format!("{:.3}", r.r2),
            format!("{:.3}", r.loo),
            format!("{:.3}", r.l2o),
            format!("{:.3}", r.l3o),
            format!("{:.1}", r.aic),
            format!("{:.1}", r.bic),
            r.f_vs_h0.map(|f| format!("{f:.1}")).unwrap_or_default(),
            r.p_value.map(fmt_p).unwrap_or_default(),
        ]);
    }
    csv.buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_value_formatting_threshold() {
        assert_eq!(fmt_p(3.2e-11), "<1e-10");
        assert_eq!(fmt_p(9.9e-11), "<1e-10");
        assert_eq!(fmt_p(1.5e-12), "<1e-10");
        assert_eq!(fmt_p(1.5e-9), "1.5e-9");
        assert_eq!(fmt_p(7.8e-6), "7.8e-6");
        assert_eq!(fmt_p(1.0), "1.0e0");
    }

    #[test]
    fn table_layout_and_h0_blanks() {
        let rows = vec![
            RegressionReport {
                hypothesis: "H0".into(),
                h2_mode: None,
                target: "alpha_at_k".into(),
                coefficients: vec![0.1],
                r2: 0.0,
                loo: -0.049375,
                l2o: -0.0501,
                l3o: -0.0512,
                aic: -188.2,
                bic: -186.4,
                f_vs_h0: None,
                p_value: None,
                n_layers: 42,
            },
            RegressionReport {
                hypothesis: "H1_kappa_ms".into(),
                h2_mode: None,
                target: "alpha_at_k".into(),
                coefficients: vec![0.1, 0.2],
                r2: 0.929,
                loo: 0.869,
                l2o: 0.869,
                l3o: 0.869,
                aic: -297.0,
                bic: -294.0,
                f_vs_h0: Some(523.6),
                p_value: Some(3.0e-30),
                n_layers: 42,
            },
        ];
        let table = hierarchy_table_csv(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "hypothesis,r2,loo,l2o,l3o,aic,bic,f_vs_h0,p");
        assert_eq!(lines[1], "H0,0.000,-0.049,-0.050,-0.051,-188.2,-186.4,,");
        assert_eq!(
            lines[2],
            "H1_kappa_ms,0.929,0.869,0.869,0.869,-297.0,-294.0,523.6,<1e-10"
        );
    }
}
