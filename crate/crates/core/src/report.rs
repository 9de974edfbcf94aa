// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic SVG renderers and file output.
//!
//! Every coordinate is printed with fixed precision so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{PerplexityCurve, SpecializationTable};
use crate::error::{Error, Result};
use crate::lens::LensGrid;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Writes `content`, creating parent directories.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, w: f64, h: f64) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#
    )
    .unwrap();
}

fn text(out: &mut String, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
    writeln!(
        out,
        r#"<text x="{x:.2}" y="{y:.2}" font-size="{size:.0}" text-anchor="{anchor}">{}</text>"#,
        escape_xml(s)
    )
    .unwrap();
}

/// Bar chart of expert shares for one (layer, domain), with the uniform
/// routing baseline as a dashed line.
pub fn specialization_svg(table: &SpecializationTable, layer: usize, domain: usize) -> String {
    let col = table.column(layer, domain);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 40.0);
    let bar = 24.0;
    let plot_w = bar * col.len() as f64;
    let plot_h = 200.0;
    let (w, h) = (left + plot_w + right, top + plot_h + bottom);
    let y_max = col
        .iter()
        .cloned()
        .fold(table.uniform_baseline * 1.5, f64::max)
        .clamp(1e-9, 1.0);
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut out = String::new();
    header(&mut out, w, h);
    text(
        &mut out,
        w / 2.0,
        20.0,
        13.0,
        "middle",
        &format!("layer {layer}, domain {}", table.domains[domain]),
    );
    for tick in 0..=4 {
        let v = y_max * tick as f64 / 4.0;
        writeln!(
            out,
            r##"<line x1="{left:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#dddddd"/>"##,
            y(v),
            left + plot_w
        )
        .unwrap();
        text(
            &mut out,
            left - 4.0,
            y(v) + 4.0,
            10.0,
            "end",
            &format!("{:.0}%", v * 100.0),
        );
    }
    for (e, &f) in col.iter().enumerate() {
        let x = left + bar * e as f64;
        writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"><title>expert {e}: {:.4}</title></rect>"##,
            x + 2.0,
            y(f),
            bar - 4.0,
            top + plot_h - y(f),
            f
        )
        .unwrap();
        text(
            &mut out,
            x + bar / 2.0,
            top + plot_h + 14.0,
            10.0,
            "middle",
            &e.to_string(),
        );
    }
    writeln!(
        out,
        r##"<line x1="{left:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#d62728" stroke-width="1.5" stroke-dasharray="6,4"/>"##,
        y(table.uniform_baseline),
        left + plot_w
    )
    .unwrap();
    text(
        &mut out,
        left + plot_w / 2.0,
        h - 8.0,
        11.0,
        "middle",
        "expert",
    );
    out.push_str("</svg>\n");
    out
}

/// Normalized log perplexity against active experts, one line per domain.
pub fn perplexity_svg(curves: &[PerplexityCurve]) -> String {
    let ks = curves.iter().flat_map(|c| c.k_primes.iter().copied());
    let (k_lo, k_hi) = ks.fold((usize::MAX, 0), |(a, b), k| (a.min(k), b.max(k)));
    let (k_lo, k_hi) = if k_hi == 0 { (1, 1) } else { (k_lo, k_hi) };
    let (left, right, top, bottom) = (60.0, 110.0, 40.0, 40.0);
    let (plot_w, plot_h) = (320.0, 220.0);
    let (w, h) = (left + plot_w + right, top + plot_h + bottom);
    let vals = curves
        .iter()
        .flat_map(|c| c.norm_log_ppx.iter().cloned())
        .filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((1.0f64, 1.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |kp: usize| {
        left + if k_hi > k_lo {
            plot_w * (kp - k_lo) as f64 / (k_hi - k_lo) as f64
        } else {
            plot_w / 2.0
        }
    };
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut out = String::new();
    header(&mut out, w, h);
    text(
        &mut out,
        left + plot_w / 2.0,
        20.0,
        13.0,
        "middle",
        "normalized log perplexity vs active experts",
    );
    for tick in 0..=4 {
        let v = lo + (hi - lo) * tick as f64 / 4.0;
        writeln!(
            out,
            r##"<line x1="{left:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#dddddd"/>"##,
            y(v),
            left + plot_w
        )
        .unwrap();
        text(
            &mut out,
            left - 4.0,
            y(v) + 4.0,
            10.0,
            "end",
            &format!("{v:.3}"),
        );
    }
    for kp in k_lo..=k_hi {
        text(
            &mut out,
            x(kp),
            top + plot_h + 14.0,
            10.0,
            "middle",
            &kp.to_string(),
        );
    }
    text(
        &mut out,
        left + plot_w / 2.0,
        h - 8.0,
        11.0,
        "middle",
        "active experts k'",
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .k_primes
            .iter()
            .zip(&c.norm_log_ppx)
            .map(|(&kp, &v)| format!("{:.2},{:.2}", x(kp), y(v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap();
            writeln!(out, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = top + 16.0 * i as f64;
        writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            left + plot_w + 12.0,
            left + plot_w + 30.0
        )
        .unwrap();
        text(
            &mut out,
            left + plot_w + 34.0,
            ly + 4.0,
            11.0,
            "start",
            &c.domain,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of a lens grid: opacity is confidence, the cell text is the
/// decoded token, with expert gate (top right) and index (bottom left) on
/// single-expert cells.
pub fn lens_grid_svg(grid: &LensGrid) -> String {
    let (cw, ch) = (78.0, 40.0);
    let (left, top) = (70.0, 50.0);
    let w = left + cw * grid.n_cols() as f64 + 10.0;
    let h = top + ch * grid.n_rows() as f64 + 10.0;

    let mut out = String::new();
    header(&mut out, w, h);
    text(
        &mut out,
        w / 2.0,
        18.0,
        13.0,
        "middle",
        &format!("position {} (input {})", grid.position, grid.input_token),
    );
    for (c, label) in grid.column_labels.iter().enumerate() {
        text(
            &mut out,
            left + cw * (c as f64 + 0.5),
            top - 8.0,
            10.0,
            "middle",
            label,
        );
    }
    for (r, row) in grid.cells.iter().enumerate() {
        let y0 = top + ch * r as f64;
        text(
            &mut out,
            left - 6.0,
            y0 + ch / 2.0 + 4.0,
            11.0,
            "end",
            &grid.row_labels[r],
        );
        for (c, cell) in row.iter().enumerate() {
            let x0 = left + cw * c as f64;
            writeln!(
                out,
                r##"<rect x="{x0:.2}" y="{y0:.2}" width="{cw:.2}" height="{ch:.2}" fill="#1f77b4" fill-opacity="{:.4}" stroke="#888888" stroke-width="0.5"><title>{} p={:.4}</title></rect>"##,
                cell.confidence,
                escape_xml(&cell.token_text),
                cell.confidence
            )
            .unwrap();
            text(
                &mut out,
                x0 + cw / 2.0,
                y0 + ch / 2.0 + 5.0,
                14.0,
                "middle",
                &cell.token_text,
            );
            if let Some(g) = cell.expert_gate {
                text(
                    &mut out,
                    x0 + cw - 3.0,
                    y0 + 10.0,
                    8.0,
                    "end",
                    &format!("{g:.2}"),
                );
            }
            if let Some(e) = cell.expert_index {
                text(
                    &mut out,
                    x0 + 3.0,
                    y0 + ch - 4.0,
                    8.0,
                    "start",
                    &format!("E{e}"),
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
