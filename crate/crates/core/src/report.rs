//! Attack reports: per-CRP rows, summaries, and CSV/JSON/SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::KernelPreset;
use crate::metrics::{BoxplotStats, Summary};

/// Metrics of one predicted test response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    /// Index of the CRP in its dataset.
    pub index: usize,
    pub fhd: BTreeMap<KernelPreset, f64>,
    /// Absent when the prediction is constant.
    pub pearson: Option<f64>,
    pub ssim: f64,
}

/// Description of the model that produced the predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub attack: String,
    pub lambda: Option<f64>,
    pub features: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

/// Share of predictions an FHD threshold would accept as genuine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVerdict {
    pub threshold: f64,
    pub kernel: KernelPreset,
    pub accepted: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub model: ModelMeta,
    pub rows: Vec<AttackRow>,
    /// Keyed `fhd_G1`, `fhd_G2`, `pearson`, `ssim`.
    pub summaries: BTreeMap<String, Summary>,
    pub threshold: Option<ThresholdVerdict>,
}

impl AttackReport {
    /// Summaries are always derived from the rows.
    pub fn new(model: ModelMeta, rows: Vec<AttackRow>, threshold: Option<(f64, KernelPreset)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("attack report without test rows".into()));
        }
        let mut summaries = BTreeMap::new();
        let kernels: Vec<KernelPreset> = rows[0].fhd.keys().copied().collect();
        for k in &kernels {
            let vals = rows
                .iter()
                .map(|r| r.fhd.get(k).copied().ok_or_else(|| Error::Invalid(format!("row {} lacks {k}", r.index))))
                .collect::<Result<Vec<f64>>>()?;
            summaries.insert(format!("fhd_{k}"), Summary::of(&vals)?);
        }
        let pcs: Vec<f64> = rows.iter().filter_map(|r| r.pearson).collect();
        if !pcs.is_empty() {
            summaries.insert("pearson".into(), Summary::of(&pcs)?);
        }
        let ssims: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
        summaries.insert("ssim".into(), Summary::of(&ssims)?);
        let threshold = match threshold {
            Some((t, kernel)) => {
                if !kernels.contains(&kernel) {
                    return Err(Error::Invalid(format!("threshold kernel {kernel} not evaluated")));
                }
                let accepted = rows.iter().filter(|r| r.fhd[&kernel] <= t).count();
                Some(ThresholdVerdict {
                    threshold: t,
                    kernel,
                    accepted,
                    total: rows.len(),
                    rate: accepted as f64 / rows.len() as f64,
                })
            }
            None => None,
        };
        Ok(AttackReport {
            model,
            rows,
            summaries,
            threshold,
        })
    }

    pub fn kernels(&self) -> Vec<KernelPreset> {
        self.rows[0].fhd.keys().copied().collect()
    }

    pub fn mean_fhd(&self, kernel: KernelPreset) -> Option<f64> {
        self.summaries.get(&format!("fhd_{kernel}")).map(|s| s.mean)
    }

    /// One row per test CRP: `index,fhd_G1,...,pearson,ssim`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let kernels = self.kernels();
        let mut header = vec!["index".to_string()];
        header.extend(kernels.iter().map(|k| format!("fhd_{k}")));
        header.extend(["pearson".into(), "ssim".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.index.to_string()];
            rec.extend(kernels.iter().map(|k| r.fhd[k].to_string()));
            rec.push(r.pearson.map_or(String::new(), |p| p.to_string()));
            rec.push(r.ssim.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON with the model description, summaries and threshold verdict.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "model": self.model,
            "summaries": self.summaries,
            "threshold": self.threshold,
        }))?)
    }

    /// Writes `rows.csv`, `summary.json`, `fhd_boxplot.svg` and
    /// `similarity_boxplot.svg` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(dir.join("rows.csv"))?)?;
        fs::write(dir.join("summary.json"), self.summary_json()?)?;
        let fhd: Vec<(String, &BoxplotStats)> = self
            .kernels()
            .iter()
            .map(|k| (format!("FHD {k}"), &self.summaries[&format!("fhd_{k}")].boxplot))
            .collect();
        fs::write(dir.join("fhd_boxplot.svg"), boxplot_svg("FHD", &fhd, (0.0, 1.0)))?;
        let sim: Vec<(String, &BoxplotStats)> = ["pearson", "ssim"]
            .iter()
            .filter_map(|m| self.summaries.get(*m).map(|s| (m.to_string(), &s.boxplot)))
            .collect();
        fs::write(
            dir.join("similarity_boxplot.svg"),
            boxplot_svg("similarity", &sim, (-1.0, 1.0)),
        )?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// A minimal vertical boxplot chart, one box per series, on a fixed y range.
pub fn boxplot_svg(title: &str, series: &[(String, &BoxplotStats)], range: (f64, f64)) -> String {
    const W_BOX: f64 = 80.0;
    const H: f64 = 300.0;
    const TOP: f64 = 30.0;
    const LEFT: f64 = 50.0;
    let width = LEFT + W_BOX * series.len().max(1) as f64 + 20.0;
    let height = TOP + H + 40.0;
    let (lo, hi) = range;
    let y = |v: f64| TOP + H * (1.0 - ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + H
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 4.0,
            y(v) + 4.0
        );
    }
    for (i, (name, b)) in series.iter().enumerate() {
        let cx = LEFT + W_BOX * (i as f64 + 0.5);
        let (x0, x1) = (cx - W_BOX * 0.3, cx + W_BOX * 0.3);
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{:.2}" x2="{cx}" y2="{:.2}" stroke="black"/>"#,
            y(b.whisker_high),
            y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{:.2}" x2="{cx}" y2="{:.2}" stroke="black"/>"#,
            y(b.q1),
            y(b.whisker_low)
        );
        for w in [b.whisker_low, b.whisker_high] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
                cx - W_BOX * 0.15,
                y(w),
                cx + W_BOX * 0.15,
                y(w)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#cfe0f3" stroke="black"/>"##,
            y(b.q3),
            x1 - x0,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.2}" y1="{:.2}" x2="{x1:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            y(b.median),
            y(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{:.2}" r="2" fill="none" stroke="black"/>"#, y(*o));
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + H + 18.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ModelMeta {
        ModelMeta {
            attack: "lr".into(),
            lambda: None,
            features: 25,
            train_count: 9,
            test_count: 3,
            seed: 1,
            details: BTreeMap::new(),
        }
    }

    fn row(i: usize, g1: f64) -> AttackRow {
        AttackRow {
            index: i,
            fhd: BTreeMap::from([(KernelPreset::G1, g1), (KernelPreset::G2, g1 / 2.0)]),
            pearson: Some(0.5),
            ssim: 0.25,
        }
    }

    #[test]
    fn summaries_follow_rows() {
        let r = AttackReport::new(meta(), vec![row(0, 0.1), row(4, 0.3)], Some((0.2, KernelPreset::G1))).unwrap();
        assert!((r.mean_fhd(KernelPreset::G1).unwrap() - 0.2).abs() < 1e-15);
        assert!((r.mean_fhd(KernelPreset::G2).unwrap() - 0.1).abs() < 1e-15);
        let v = r.threshold.unwrap();
        assert_eq!((v.accepted, v.total), (1, 2));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = AttackReport::new(meta(), vec![row(0, 0.1), row(4, 0.3)], None).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,fhd_G1,fhd_G2,pearson,ssim");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("4,0.3,0.15,"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let b = crate::metrics::boxplot_stats(&[0.1, 0.2, 0.3, 0.9]).unwrap();
        let svg = boxplot_svg("t<", &[("a".into(), &b)], (0.0, 1.0));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("t&lt;"));
        assert_eq!(svg.matches("<rect").count(), 1);
    }
}
