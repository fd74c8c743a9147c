//! Minimal static SVG charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#6a4c93", "#30343f"];
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_B: f64 = 42.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 12.0;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

pub struct Axes {
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub x_ticks: Vec<f64>,
    pub y_ticks: Vec<f64>,
    /// Dashed horizontal line.
    pub reference: Option<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Grid of line-chart panels sharing axes, legend on the right.
pub fn line_chart(title: &str, panels: &[Panel], cols: usize, axes: &Axes) -> String {
    let cols = cols.max(1).min(panels.len().max(1));
    let rows = panels.len().div_ceil(cols).max(1);
    let legend_w = 130.0;
    let width = cols as f64 * PANEL_W + legend_w;
    let height = rows as f64 * PANEL_H + 36.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="Helvetica, Arial, sans-serif">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" font-size="15" text-anchor="middle">{}</text>"#, width / 2.0, esc(title)).unwrap();
    let (x0, x1) = axes.x_range;
    let (y0, y1) = axes.y_range;
    for (k, panel) in panels.iter().enumerate() {
        let ox = (k % cols) as f64 * PANEL_W;
        let oy = 36.0 + (k / cols) as f64 * PANEL_H;
        let pw = PANEL_W - MARGIN_L - MARGIN_R;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let px = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| oy + MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;
        writeln!(s, r#"<g>"#).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#, ox + MARGIN_L + pw / 2.0, oy + 16.0, esc(&panel.title)).unwrap();
        writeln!(s, r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##, px(x0), py(y1)).unwrap();
        for &t in &axes.x_ticks {
            writeln!(s, r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#444"/>"##, px(t), py(y0), py(y0) + 4.0).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#, px(t), py(y0) + 15.0, tick_label(t)).unwrap();
        }
        for &t in &axes.y_ticks {
            writeln!(s, r##"<line x1="{:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="#ddd"/>"##, px(x0), py(t), px(x1)).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, px(x0) - 4.0, py(t) + 3.5, tick_label(t)).unwrap();
        }
        if let Some(r) = axes.reference {
            writeln!(s, r##"<line x1="{:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="#888" stroke-dasharray="5,4"/>"##, px(x0), py(r), px(x1)).unwrap();
        }
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, ox + MARGIN_L + pw / 2.0, oy + PANEL_H - 8.0, esc(&axes.x_label)).unwrap();
        let cy = oy + MARGIN_T + ph / 2.0;
        writeln!(s, r#"<text x="{:.1}" y="{cy:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {cy:.1})">{}</text>"#, ox + 14.0, ox + 14.0, esc(&axes.y_label)).unwrap();
        for (i, ser) in panel.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
            for &(x, y) in &ser.points {
                writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(x), py(y)).unwrap();
            }
        }
        writeln!(s, "</g>").unwrap();
    }
    if let Some(first) = panels.first() {
        let lx = cols as f64 * PANEL_W + 8.0;
        for (i, ser) in first.series.iter().enumerate() {
            let y = 60.0 + 18.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            writeln!(s, r#"<line x1="{lx:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, lx + 24.0, y + 4.0, esc(&ser.label)).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side bar histogram; `series` heights are per-bin shares.
pub fn grouped_histogram(title: &str, edges: &[f64], series: &[(String, Vec<f64>)], x_label: &str, y_label: &str) -> String {
    let width = 640.0;
    let height = 380.0;
    let (l, r, t, b) = (60.0, 150.0, 40.0, 50.0);
    let pw = width - l - r;
    let ph = height - t - b;
    let ymax = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0f64, f64::max).max(1e-9);
    let ytop = (ymax * 10.0).ceil() / 10.0;
    let (x0, x1) = (edges[0], edges[edges.len() - 1]);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| t + (1.0 - y / ytop) * ph;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="Helvetica, Arial, sans-serif">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" font-size="15" text-anchor="middle">{}</text>"#, l + pw / 2.0, esc(title)).unwrap();
    let k = series.len().max(1) as f64;
    for (si, (_, h)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (bi, &v) in h.iter().enumerate() {
            let bw = (px(edges[bi + 1]) - px(edges[bi])) / k;
            let x = px(edges[bi]) + bw * si as f64;
            writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#, py(v), (bw - 1.0).max(0.5), py(0.0) - py(v)).unwrap();
        }
    }
    writeln!(s, r##"<rect x="{l:.1}" y="{t:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##).unwrap();
    let steps = 5;
    for i in 0..=steps {
        let v = ytop * i as f64 / steps as f64;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#, l - 4.0, py(v) + 3.5).unwrap();
    }
    for (i, &e) in edges.iter().enumerate() {
        if i % 2 == 0 {
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{e:.1}</text>"#, px(e), t + ph + 15.0).unwrap();
        }
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#, l + pw / 2.0, height - 12.0, esc(x_label)).unwrap();
    let cy = t + ph / 2.0;
    writeln!(s, r#"<text x="16" y="{cy:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 16 {cy:.1})">{}</text>"#, esc(y_label)).unwrap();
    for (si, (label, _)) in series.iter().enumerate() {
        let y = t + 12.0 + 18.0 * si as f64;
        let color = PALETTE[si % PALETTE.len()];
        writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, width - r + 12.0, y - 9.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, width - r + 30.0, y + 1.0, esc(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
