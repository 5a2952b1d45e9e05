//! Minimal SVG renderer for BER curves: log-scale BER against the swept
//! variable, one series per device mode. Output depends only on the input
//! rows, so identical reports give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluator::CsvRow;
use crate::metasurface::Polarization;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// `(x, aggregate BER)` pairs per mode, sorted by x.
pub type Series = BTreeMap<&'static str, Vec<(f64, f64)>>;

fn series_name(m: Polarization) -> &'static str {
    match m {
        Polarization::Single => "SIM",
        Polarization::Dual => "DPSIM",
    }
}

/// Collapses per-user rows into aggregate points.
pub fn series(rows: &[CsvRow]) -> Series {
    let mut out: Series = BTreeMap::new();
    for r in rows.iter().filter(|r| r.user == 0) {
        out.entry(series_name(r.mode)).or_default().push((r.value, r.aggregate_ber));
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Renders the report rows as an SVG document.
pub fn render_svg(rows: &[CsvRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("report has no rows to plot"));
    }
    let variable = rows[0].variable.clone();
    let data = series(rows);
    let xs: Vec<f64> = data.values().flatten().map(|p| p.0).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xmax > xmin { (xmin, xmax) } else { (xmin - 1.0, xmax + 1.0) };
    // Zero BER is drawn on the lowest decade.
    let nonzero = data.values().flatten().map(|p| p.1).filter(|&b| b > 0.0).fold(1.0, f64::min);
    let dmin = (nonzero.log10().floor() as i32).min(-1) - if nonzero < 1.0 { 0 } else { 1 };
    let floor = 10f64.powi(dmin);
    let px = |x: f64| LEFT + (x - xmin) / (xmax - xmin) * (W - LEFT - RIGHT);
    let py = |b: f64| {
        let l = b.max(floor).log10();
        TOP + (0.0 - l) / (0.0 - dmin as f64) * (H - TOP - BOTTOM)
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for d in dmin..=0 {
        let y = py(10f64.powi(d));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">1e{d}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in &ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            px(*x),
            H - BOTTOM + 16.0,
            fmt(*x)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{variable}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">BER</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );
    for (k, (name, pts)) in data.iter().enumerate() {
        let (color, dash) = if *name == "SIM" { ("#1f5fbf", "") } else { ("#c0392b", r#" stroke-dasharray="6 3""#) };
        let path: Vec<String> = pts.iter().map(|&(x, b)| format!("{:.2},{:.2}", px(x), py(b))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, path.join(" "));
        for &(x, b) in pts {
            if *name == "SIM" {
                let _ = writeln!(s, r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, px(x), py(b));
            } else {
                let _ = writeln!(
                    s,
                    r#"<rect class="marker" x="{:.2}" y="{:.2}" width="7" height="7" fill="{color}"/>"#,
                    px(x) - 3.5,
                    py(b) - 3.5
                );
            }
        }
        let ly = TOP + 14.0 + 20.0 * k as f64;
        let lx = W - RIGHT + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>"#, lx + 24.0);
        let _ = writeln!(s, r#"<text class="legend" x="{}" y="{}" font-size="12">{name}</text>"#, lx + 30.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}
