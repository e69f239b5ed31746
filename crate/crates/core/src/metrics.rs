//! Per-layer diagnostics and report emission (CSV + static SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantize::sign;
use crate::rotation::sign_cosine;

pub const METRICS_HEADER: &str =
    "epoch,layer_id,cos_before,cos_after,qerr_base,qerr_rot,flip_rate,alpha,loss,train_acc,test_acc";

/// Diagnostics of one binarized layer at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer_id: String,
    /// Cosine between the latent weights and their signs.
    pub cos_before: f64,
    /// Same for the adjusted weights `w̃` actually binarized.
    pub cos_after: f64,
    /// Total `min_λ‖λ·sign(x) − x‖²` for `x = w` and `x = w̃`.
    pub qerr_base: f64,
    pub qerr_rot: f64,
    pub flip_rate: f64,
    pub alpha: f64,
    pub weight_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub layers: Vec<LayerMetrics>,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// `‖w‖₁ / (√n·‖w‖₂)`, the cosine between `w` and `sign(w)`.
pub fn cosine_similarity(w: &[f64]) -> Result<f64> {
    sign_cosine(w).ok_or_else(|| Error::InvalidInput("cosine similarity of a zero vector".into()))
}

/// Fraction of positions whose signs differ.
pub fn flip_rate(initial_sign: &[f64], current: &[f64]) -> Result<f64> {
    if initial_sign.len() != current.len() {
        return Err(Error::Shape(format!(
            "flip rate of {} against {} signs",
            initial_sign.len(),
            current.len()
        )));
    }
    if initial_sign.is_empty() {
        return Ok(0.0);
    }
    let flips = initial_sign
        .iter()
        .zip(current)
        .filter(|(&a, &b)| sign(a) != sign(b))
        .count();
    Ok(flips as f64 / initial_sign.len() as f64)
}

/// Counts over `bins` equal-width, left-closed bins spanning `[lo, hi)`;
/// values outside the range land in the edge bins.
pub fn histogram(w: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if bins == 0 || !(lo < hi) {
        return Err(Error::InvalidInput(format!("histogram needs bins ≥ 1 and lo < hi, got {bins} over [{lo}, {hi})")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in w {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() || idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(counts)
}

/// Fraction of `w` within `radius` of zero.
pub fn central_mass(w: &[f64], radius: f64) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.iter().filter(|v| v.abs() < radius).count() as f64 / w.len() as f64
}

/// Rows of `metrics.csv`, one per epoch × layer, header included.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        for l in &r.layers {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch, l.layer_id, l.cos_before, l.cos_after, l.qerr_base, l.qerr_rot, l.flip_rate, l.alpha, r.loss, r.train_acc, r.test_acc
            )
            .expect("writing to a string");
        }
    }
    out
}

/// Per-weight means alongside the totals of `metrics.csv`.
pub fn layers_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("epoch,layer_id,weights,qerr_base_per_weight,qerr_rot_per_weight\n");
    for r in records {
        for l in &r.layers {
            let n = l.weight_count.max(1) as f64;
            writeln!(out, "{},{},{},{},{}", r.epoch, l.layer_id, l.weight_count, l.qerr_base / n, l.qerr_rot / n)
                .expect("writing to a string");
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `layers.csv` and one SVG per diagnostic into `out_dir`.
pub fn emit_reports(records: &[MetricsRecord], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("metrics.csv"), &metrics_csv(records))?;
    write(&out_dir.join("layers.csv"), &layers_csv(records))?;
    let charts: [(&str, &str, fn(&LayerMetrics) -> f64); 5] = [
        ("cosine.svg", "cosine after alignment", |l| l.cos_after),
        ("cosine_before.svg", "cosine before alignment", |l| l.cos_before),
        ("qerr.svg", "quantization error (rotated)", |l| l.qerr_rot),
        ("flip_rate.svg", "weight flip rate", |l| l.flip_rate),
        ("alpha.svg", "alpha", |l| l.alpha),
    ];
    for (file, title, value) in charts {
        write(&out_dir.join(file), &line_chart(records, title, value))?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Per-layer line chart over epochs.
pub fn line_chart(records: &[MetricsRecord], title: &str, value: fn(&LayerMetrics) -> f64) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in records {
        for l in &r.layers {
            let y = value(l);
            if !y.is_finite() {
                continue;
            }
            match series.iter_mut().find(|(id, _)| *id == l.layer_id) {
                Some((_, pts)) => pts.push((r.epoch as f64, y)),
                None => series.push((l.layer_id.clone(), vec![(r.epoch as f64, y)])),
            }
        }
    }
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y1:.4}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y0:.4}</text>"#, m - 4.0, h - m);
    let _ = writeln!(svg, r#"<text x="{m}" y="{}" font-family="sans-serif" font-size="11">epoch {x0}</text>"#, h - m + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">epoch {x1}</text>"#, w - m, h - m + 16.0);
    for (k, (id, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            w - m + 4.0 - 120.0,
            m + 16.0 * (k as f64 + 1.0),
            escape(id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of histogram counts over `[lo, hi)`.
pub fn histogram_chart(counts: &[usize], lo: f64, hi: f64, title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 40.0);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar = (w - 2.0 * m) / counts.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    for (i, &c) in counts.iter().enumerate() {
        let bh = c as f64 / max * (h - 2.0 * m);
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
            m + i as f64 * bar,
            h - m - bh,
            (bar - 1.0).max(0.5),
            bh
        );
    }
    let _ = writeln!(svg, r#"<text x="{m}" y="{}" font-family="sans-serif" font-size="11">{lo}</text>"#, h - m + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{hi}</text>"#, w - m, h - m + 16.0);
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_gaussian;
    use proptest::prelude::*;

    fn record(epoch: usize, layers: &[&str]) -> MetricsRecord {
        MetricsRecord {
            epoch,
            layers: layers
                .iter()
                .map(|id| LayerMetrics {
                    layer_id: id.to_string(),
                    cos_before: 0.8,
                    cos_after: 0.85,
                    qerr_base: 2.5,
                    qerr_rot: 2.0,
                    flip_rate: 0.25,
                    alpha: 1.0,
                    weight_count: 10,
                })
                .collect(),
            loss: 0.5,
            train_acc: 0.9,
            test_acc: 0.875,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[3.0, 4.0]).unwrap() - 7.0 / (5.0 * 2f64.sqrt())).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0]).is_err());
        let w = random_gaussian(1, 37, 4).into_vec();
        let signs: Vec<f64> = w.iter().map(|&v| sign(v)).collect();
        let dot: f64 = w.iter().zip(&signs).map(|(a, b)| a * b).sum();
        let norm_w = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_s = signs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((cosine_similarity(&w).unwrap() - dot / (norm_w * norm_s)).abs() < 1e-12);
    }

    #[test]
    fn flip_examples() {
        let a = [1.0, -1.0, 1.0, 1.0];
        assert_eq!(flip_rate(&a, &a).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(flip_rate(&a, &neg).unwrap(), 1.0);
        assert!(flip_rate(&a, &a[..3]).is_err());
    }

    #[test]
    fn histogram_conventions() {
        assert_eq!(histogram(&[0.1, 0.2, 0.24], 4, 0.0, 1.0).unwrap(), vec![3, 0, 0, 0]);
        // Values on an edge go to the bin on their right; `hi` clamps into the last bin.
        assert_eq!(histogram(&[0.0, 0.25, 0.5, 0.75, 1.0], 4, 0.0, 1.0).unwrap(), vec![1, 1, 1, 2]);
        assert_eq!(histogram(&[-5.0, 5.0], 3, -1.0, 1.0).unwrap(), vec![1, 0, 1]);
        assert!(histogram(&[1.0], 0, 0.0, 1.0).is_err());
        let w = crate::data::synthetic_gaussian_weights(100_000, 2);
        assert_eq!(histogram(&w, 50, -3.0, 3.0).unwrap().iter().sum::<usize>(), 100_000);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        let recs = [record(0, &["dense2", "dense4"]), record(1, &["dense2", "dense4"])];
        let csv = metrics_csv(&recs);
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(!csv.contains('\r'));
        assert_eq!(csv.lines().nth(1).unwrap(), "0,dense2,0.8,0.85,2.5,2,0.25,1,0.5,0.9,0.875");
        assert_eq!(csv, metrics_csv(&recs));
    }

    #[test]
    fn reports_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        emit_reports(&[record(0, &["a"]), record(1, &["a"])], &out).unwrap();
        for f in ["metrics.csv", "layers.csv", "cosine.svg", "qerr.svg", "flip_rate.svg", "alpha.svg"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert!(matches!(emit_reports(&[], &blocker.join("sub")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn histogram_partitions(values in proptest::collection::vec(-10.0f64..10.0, 0..200), bins in 1usize..20) {
            let counts = histogram(&values, bins, -2.0, 2.0).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), values.len());
        }

        #[test]
        fn cosine_in_unit_interval(values in proptest::collection::vec(-5.0f64..5.0, 1..64)) {
            if let Ok(c) = cosine_similarity(&values) {
                prop_assert!(c > 0.0 && c <= 1.0);
            }
        }
    }
}
