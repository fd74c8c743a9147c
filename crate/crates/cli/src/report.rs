//! Tables and figures from a results file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clustersim::census::{Group, Village};
use clustersim::estimators::Method;
use clustersim::harness::ResultRow;
use clustersim::Error;

use crate::svg::{grouped_histogram, line_chart, Axes, Panel, Series};

/// Panel key: (π₀, coefficient set, ICC).
type PanelKey = (f64, u8, f64);

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn panel_keys(rows: &[&ResultRow]) -> Vec<PanelKey> {
    let mut keys: Vec<PanelKey> = rows.iter().map(|r| (r.scenario.pi0, r.scenario.coef_set, r.scenario.icc)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    keys.dedup();
    keys
}

fn same_panel(r: &ResultRow, k: &PanelKey) -> bool {
    r.scenario.pi0 == k.0 && r.scenario.coef_set == k.1 && r.scenario.icc == k.2
}

fn icc_label(icc: f64) -> String {
    if (icc - 1.0 / 3.0).abs() < 1e-9 {
        "1/3".to_string()
    } else {
        format!("{icc}")
    }
}

fn methods_present(rows: &[ResultRow]) -> Vec<Method> {
    let set: BTreeSet<Method> = rows.iter().map(|r| r.method).collect();
    Method::ALL.iter().copied().filter(|m| set.contains(m)).collect()
}

fn estimate_cell(r: &ResultRow) -> String {
    format!("{:.3} ({:.3}, {:.3})", r.rejection_rate, r.ci_low, r.ci_high)
}

/// Wide table with one row per scenario and one column per method.
fn wide_table(rows: &[ResultRow], with_delta: bool) -> String {
    let methods = methods_present(rows);
    let mut keys: Vec<(f64, f64, u8, f64, usize)> =
        rows.iter().map(|r| (r.scenario.delta_r, r.scenario.pi0, r.scenario.coef_set, r.scenario.icc, r.scenario.n_per_arm)).collect();
    keys.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.total_cmp(&b.3)).then(a.4.cmp(&b.4))
    });
    keys.dedup();
    let mut out = String::new();
    let head: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
    if with_delta {
        out.push_str("delta_r,");
    }
    writeln!(out, "pi0,coef_set,icc,n,{}", head.join(",")).unwrap();
    for k in keys {
        let cells: Vec<String> = methods
            .iter()
            .map(|m| {
                rows.iter()
                    .find(|r| {
                        r.method == *m
                            && r.scenario.delta_r == k.0
                            && r.scenario.pi0 == k.1
                            && r.scenario.coef_set == k.2
                            && r.scenario.icc == k.3
                            && r.scenario.n_per_arm == k.4
                    })
                    .map(|r| format!("\"{}\"", estimate_cell(r)))
                    .unwrap_or_default()
            })
            .collect();
        if with_delta {
            write!(out, "{},", k.0).unwrap();
        }
        writeln!(out, "{},{},{},{},{}", k.1, k.2, icc_label(k.3), k.4, cells.join(",")).unwrap();
    }
    out
}

fn power_axes(ns: &[f64]) -> Axes {
    let lo = ns.first().copied().unwrap_or(0.0);
    let hi = ns.last().copied().unwrap_or(1.0);
    let pad = ((hi - lo) * 0.05).max(5.0);
    Axes {
        x_label: "Villages per arm".into(),
        y_label: "Power".into(),
        x_range: (lo - pad, hi + pad),
        y_range: (0.0, 1.0),
        x_ticks: ns.to_vec(),
        y_ticks: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        reference: Some(0.8),
    }
}

fn power_panel(rows: &[&ResultRow], key: &PanelKey, title: String) -> Panel {
    let deltas = sorted_unique(rows.iter().filter(|r| same_panel(r, key)).map(|r| r.scenario.delta_r).collect());
    let series = deltas
        .iter()
        .map(|&d| {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| same_panel(r, key) && r.scenario.delta_r == d)
                .map(|r| (r.scenario.n_per_arm as f64, r.rejection_rate))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: format!("relative reduction {d}"), points: pts }
        })
        .collect();
    Panel { title, series }
}

/// Histogram of village baseline Penta0 rates by group.
pub fn baseline_histogram(villages: &[Village]) -> String {
    let bins = 20;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let series: Vec<(String, Vec<f64>)> = [(Group::Control, "Group 1 (control)"), (Group::Intervention, "Group 2 (intervention)")]
        .iter()
        .map(|(g, label)| {
            let rates: Vec<f64> = villages.iter().filter(|v| v.group == *g).map(|v| v.baseline_rate()).collect();
            let mut h = vec![0.0; bins];
            for r in &rates {
                h[((r * bins as f64) as usize).min(bins - 1)] += 1.0;
            }
            let total = rates.len().max(1) as f64;
            (label.to_string(), h.into_iter().map(|c| c / total).collect())
        })
        .collect();
    grouped_histogram("Village-level baseline Penta0 rate", &edges, &series, "Baseline Penta0 rate", "Share of villages")
}

/// Renders every table and figure in memory; nothing is written when the
/// input is empty.
pub fn render(rows: &[ResultRow], census: Option<&[Village]>) -> Result<Vec<(String, String)>, Error> {
    if rows.is_empty() {
        return Err(Error::Argument("results table is empty; nothing to report".into()));
    }
    let mut files = Vec::new();
    let null: Vec<ResultRow> = rows.iter().filter(|r| r.scenario.delta_r == 0.0).cloned().collect();
    let alt: Vec<ResultRow> = rows.iter().filter(|r| r.scenario.delta_r > 0.0).cloned().collect();
    if !null.is_empty() {
        files.push(("type1_error.csv".to_string(), wide_table(&null, false)));
    }
    if !alt.is_empty() {
        files.push(("power.csv".to_string(), wide_table(&alt, true)));
    }
    for m in methods_present(&alt) {
        let mrows: Vec<&ResultRow> = alt.iter().filter(|r| r.method == m).collect();
        let ns = sorted_unique(mrows.iter().map(|r| r.scenario.n_per_arm as f64).collect());
        let keys = panel_keys(&mrows);
        let panels: Vec<Panel> = keys
            .iter()
            .map(|k| power_panel(&mrows, k, format!("control rate {}, coefficient set {}, ICC {}", k.0, k.1, icc_label(k.2))))
            .collect();
        let cols = panels.len().min(3);
        files.push((format!("power_{}.svg", m.as_str()), line_chart(&format!("Power of {} at different sample sizes", m.as_str()), &panels, cols, &power_axes(&ns))));
        let base: PanelKey = (0.2, 1, 0.22);
        if m == Method::Beta && keys.contains(&base) {
            let panel = power_panel(&mrows, &base, "control rate 0.2, coefficient set 1, ICC 0.22".into());
            files.push(("beta_power_base_case.svg".to_string(), line_chart("Power of beta regression at different sample sizes", &[panel], 1, &power_axes(&ns))));
        }
    }
    if let Some(v) = census {
        files.push(("baseline_penta0_by_group.svg".to_string(), baseline_histogram(v)));
    }
    Ok(files)
}

pub fn write_report(rows: &[ResultRow], census: Option<&[Village]>, out: &Path) -> Result<Vec<PathBuf>, Error> {
    let files = render(rows, census)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (name, body) in files {
        let p = out.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
