//! CSV and standalone SVG heatmap rendering of (row, column) grids.
//!
//! Numbers are rounded to six significant digits at emission so repeated
//! runs produce byte-identical files. Heatmaps use a fixed three-stop
//! diverging scale: `#2166ac` at the low end, `#f7f7f7` at the midpoint,
//! `#b2182b` at the high end, linear in between and clamped outside.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{depth_labels, role_labels, AttentionSummary, LogitLensGrid, PatchResult, ProbeResult};

pub const SIG_DIGITS: usize = 6;
pub const LOW_COLOR: [u8; 3] = [0x21, 0x66, 0xac];
pub const MID_COLOR: [u8; 3] = [0xf7, 0xf7, 0xf7];
pub const HIGH_COLOR: [u8; 3] = [0xb2, 0x18, 0x2b];

pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap()
}

/// Shortest decimal form of `x` rounded to [`SIG_DIGITS`].
pub fn fmt_num(x: f64) -> String {
    let r = round_sig(x, SIG_DIGITS);
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Value range mapped onto the diverging palette.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub low: f64,
    pub high: f64,
}

impl ColorScale {
    pub const UNIT: ColorScale = ColorScale { low: 0.0, high: 1.0 };
    pub const PERCENT: ColorScale = ColorScale { low: -100.0, high: 100.0 };

    pub fn color(&self, x: f64) -> String {
        let t = ((x - self.low) / (self.high - self.low)).clamp(0.0, 1.0);
        let (a, b, f) = if t < 0.5 {
            (LOW_COLOR, MID_COLOR, t * 2.0)
        } else {
            (MID_COLOR, HIGH_COLOR, (t - 0.5) * 2.0)
        };
        let mix = |i: usize| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * f).round() as u8;
        format!("#{:02x}{:02x}{:02x}", mix(0), mix(1), mix(2))
    }
}

/// A labelled matrix; `None` cells are left blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub title: String,
    pub corner: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Grid {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = std::iter::once(&self.corner).chain(&self.cols).map(|s| csv_field(s)).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (label, row) in self.rows.iter().zip(&self.values) {
            out.push_str(&csv_field(label));
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&fmt_num(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self, scale: ColorScale) -> String {
        let (cell_w, cell_h, left, top) = (56.0, 28.0, 80.0, 70.0);
        let width = left + cell_w * self.cols.len() as f64 + 20.0;
        let height = top + cell_h * self.rows.len() as f64 + 20.0;
        let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, esc(&self.title));
        for (j, c) in self.cols.iter().enumerate() {
            let x = left + cell_w * (j as f64 + 0.5);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, esc(c));
        }
        for (i, (label, row)) in self.rows.iter().zip(&self.values).enumerate() {
            let y = top + cell_h * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 6.0,
                y + cell_h * 0.65,
                esc(label)
            );
            for (j, v) in row.iter().enumerate() {
                let x = left + cell_w * j as f64;
                let (fill, text) = match v {
                    Some(v) => (scale.color(*v), fmt_short(*v)),
                    None => ("#ffffff".to_string(), String::new()),
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" stroke="#999999" stroke-width="0.5"/>"##
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{text}</text>"#,
                    x + cell_w / 2.0,
                    y + cell_h * 0.65
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_short(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn lens_grid(g: &LogitLensGrid) -> Grid {
    let mut rows = g.depths.clone();
    rows.push("mean".into());
    let mut values: Vec<Vec<Option<f64>>> = g.mean.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
    values.push(g.per_position.iter().map(|&v| Some(v)).collect());
    Grid {
        title: format!("logit lens: p({}) over {} correct runs", g.target, g.samples),
        corner: "depth".into(),
        rows,
        cols: role_labels(&g.roles),
        values,
    }
}

/// Probe accuracies arranged by depth and position; missing cells stay blank.
pub fn probe_grid(results: &[ProbeResult], roles: &[crate::taskgen::Role], depths: usize) -> Grid {
    let rows = depth_labels(depths);
    let mut values = vec![vec![None; roles.len()]; depths];
    for r in results {
        if let (Some(i), Some(j)) = (rows.iter().position(|d| *d == r.depth), roles.iter().position(|&x| x == r.role)) {
            values[i][j] = Some(r.accuracy);
        }
    }
    let target = results.first().map(|r| r.target.to_string()).unwrap_or_default();
    Grid {
        title: format!("linear probe accuracy: {target}"),
        corner: "depth".into(),
        rows,
        cols: role_labels(roles),
        values,
    }
}

/// Percent recovery per (depth, position).
pub fn patch_grid(results: &[PatchResult], roles: &[crate::taskgen::Role], depths: usize) -> Grid {
    let mut values = vec![vec![None; roles.len()]; depths];
    for r in results {
        values[r.depth_index][r.position] = r.recovery;
    }
    let corrupted = results.first().map_or(0, |r| r.corrupted_position);
    Grid {
        title: format!("activation patching recovery %, x{corrupted} corrupted"),
        corner: "depth".into(),
        rows: depth_labels(depths),
        cols: role_labels(roles),
        values,
    }
}

pub fn attention_grid(a: &AttentionSummary, layer: usize, head: usize) -> Grid {
    let labels = role_labels(&a.roles);
    Grid {
        title: format!("mean attention, layer {} head {}", layer + 1, head + 1),
        corner: "query\\key".into(),
        rows: labels.clone(),
        cols: labels,
        values: a.matrix(layer, head).into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
    }
}
