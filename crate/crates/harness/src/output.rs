//! Flat files: CSV tables and SVG histograms.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{HarnessError, Result};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes `rows` with a header; each row type carries its own
/// `config_hash` column.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_text(path, &csv_string(rows)?)
}

/// A vertical marker on the histogram.
#[derive(Debug, Clone)]
pub struct Marker {
    pub label: String,
    pub value: f64,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

/// Bin counts over `[lo, hi]`; the top edge belongs to the last bin.
pub fn bin_counts(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

/// Histogram of `values` built from rect, line and text elements only.
/// Numbers are printed with fixed precision so the bytes depend only on
/// the inputs.
pub fn histogram_svg(title: &str, values: &[f64], bins: usize, markers: &[Marker], config_hash: &str) -> String {
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for m in markers {
        lo = lo.min(m.value);
        hi = hi.max(m.value);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.02 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let counts = bin_counts(values, bins, lo, hi);
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |v: f64| LEFT + plot_w * (v - lo) / (hi - lo);
    let bar_w = plot_w / bins as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{HEIGHT:.0}" viewBox="0 0 {WIDTH:.0} {HEIGHT:.0}">"#
    );
    let _ = writeln!(s, "<!-- config {config_hash} -->");
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{WIDTH:.0}" height="{HEIGHT:.0}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let h = plot_h * c as f64 / peak;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9e9e9e" stroke="#616161" stroke-width="0.5"/>"##,
            LEFT + i as f64 * bar_w,
            TOP + plot_h - h,
            bar_w,
            h
        );
    }
    let base = TOP + plot_h;
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT:.2}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="#000000"/>"##,
        LEFT + plot_w
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{base:.2}" stroke="#000000"/>"##
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            x_of(v),
            base + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">EIG</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
        LEFT - 6.0,
        TOP + 10.0,
        peak as usize
    );
    for (j, m) in markers.iter().enumerate() {
        let color = COLORS[j % COLORS.len()];
        let x = x_of(m.value);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{TOP:.2}" x2="{x:.2}" y2="{base:.2}" stroke="{color}" stroke-width="2"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{} {:.3}</text>"#,
            x + 3.0,
            TOP + 14.0 * (j + 1) as f64,
            escape(&m.label),
            m.value
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

    #[test]
    fn bins_cover_all_values() {
        let v = [0.0, 0.1, 0.5, 0.99, 1.0];
        let c = bin_counts(&v, 4, 0.0, 1.0);
        assert_eq!(c, vec![2, 0, 1, 2]);
        assert_eq!(c.iter().sum::<usize>(), v.len());
    }

    #[test]
    fn svg_uses_only_primitives() {
        let svg = histogram_svg("t <k>", &[1.0, 2.0, 2.5], 5, &[Marker { label: "gks".into(), value: 2.2 }], "abc");
        for line in svg.lines().skip(1) {
            let tag = line.trim_start_matches('<').split([' ', '>']).next().unwrap();
            assert!(["rect", "line", "text", "!--", "/svg"].contains(&tag), "{line}");
        }
        assert!(svg.contains("t &lt;k&gt;"));
        assert!(svg.contains("config abc"));
    }

    #[test]
    fn degenerate_range_is_widened() {
        let svg = histogram_svg("flat", &[3.0, 3.0], 4, &[], "h");
        assert!(!svg.contains("NaN"));
    }

    #[derive(Serialize)]
    struct Row {
        config_hash: &'static str,
        value: f64,
    }

    #[test]
    fn csv_has_header_and_dot_decimals() {
        let s = csv_string(&[Row { config_hash: "h", value: 0.5 }]).unwrap();
        assert_eq!(s, "config_hash,value\nh,0.5\n");
    }
}
