//! CSV metric reports and SVG overlays.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::evaluate::MetricsTable;
use crate::diffusion::CandidateSet;
use crate::error::{Error, Result};
use crate::scenario::{AgentType, EgoSample};

pub const REPORT_COLUMNS: [&str; 5] = ["class", "metric", "value", "count", "config_hash"];

/// Hex SHA-256 of a serialized configuration.
pub fn config_hash(config_json: &str) -> String {
    hex::encode(Sha256::digest(config_json.as_bytes()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("report: {e}"))
}

fn table_records(table: &MetricsTable) -> Vec<[String; 3]> {
    let mut out = Vec::new();
    for (class, m) in table.rows() {
        for (metric, v) in [("min_ade", m.min_ade), ("min_fde", m.min_fde), ("miss_rate", m.miss_rate)] {
            out.push([class.to_string(), metric.to_string(), v.map(|x| format!("{x:e}")).unwrap_or_default()]);
        }
    }
    out
}

fn counts(table: &MetricsTable) -> [usize; 3] {
    [table.vehicle.count, table.pedestrian.count, table.all.count]
}

/// One metrics table as CSV with [`REPORT_COLUMNS`]. Metrics of a class
/// without agents are left empty.
pub fn write_report<W: Write>(table: &MetricsTable, config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    let c = counts(table);
    for (i, r) in table_records(table).iter().enumerate() {
        out.write_record([r[0].as_str(), &r[1], &r[2], &c[i / 3].to_string(), config_hash]).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("report", e))
}

/// Several labelled tables (an ablation sweep) with a leading `setting`
/// column.
pub fn write_sweep_report<W: Write>(tables: &[(String, MetricsTable)], config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["setting"];
    header.extend(REPORT_COLUMNS);
    out.write_record(&header).map_err(csv_err)?;
    for (setting, table) in tables {
        let c = counts(table);
        for (i, r) in table_records(table).iter().enumerate() {
            out.write_record([setting.as_str(), &r[0], &r[1], &r[2], &c[i / 3].to_string(), config_hash])
                .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::io("report", e))
}

pub fn save_report(table: &MetricsTable, config_hash: &str, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(table, config_hash, f)
}

pub fn save_sweep_report(tables: &[(String, MetricsTable)], config_hash: &str, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sweep_report(tables, config_hash, f)
}

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;

fn path_d(points: &[[f64; 2]], to_px: &dyn Fn([f64; 2]) -> (f64, f64)) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let (x, y) = to_px(*p);
        let _ = write!(d, "{}{x:.2} {y:.2} ", if i == 0 { "M" } else { "L" });
    }
    if points.is_empty() {
        d.push_str("M0 0");
    }
    d.trim_end().to_string()
}

/// SVG overlay of one sample: map polylines as lines, then per agent one
/// past path, one ground-truth path and K predicted paths.
pub fn render_plot(sample: &EgoSample, set: &CandidateSet) -> Result<String> {
    let n = sample.num_agents();
    if set.num_agents() != n {
        return Err(Error::Contract(format!("{} candidate agents for {n} sample agents", set.num_agents())));
    }
    let (k, tf) = (set.k, set.t_future);
    let past: Vec<Vec<[f64; 2]>> = (0..n).map(|a| sample.past_positions(a)).collect();
    let gt: Vec<Vec<[f64; 2]>> = (0..n)
        .map(|a| (0..tf).filter(|&t| sample.future_is_valid(a, t)).map(|t| sample.future_point(a, t)).collect())
        .collect();
    let pred = |a: usize, c: usize| -> Vec<[f64; 2]> {
        let block = &set.candidates(a)[c * tf * 2..(c + 1) * tf * 2];
        block.chunks(2).map(|p| [p[0], p[1]]).collect()
    };

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut grow = |p: &[f64; 2]| {
        if p[0].is_finite() && p[1].is_finite() {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
    };
    for a in 0..n {
        past[a].iter().chain(&gt[a]).for_each(&mut grow);
        for c in 0..k {
            pred(a, c).iter().for_each(&mut grow);
        }
    }
    if !lo[0].is_finite() {
        lo = [-10.0; 2];
        hi = [10.0; 2];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let to_px = move |p: [f64; 2]| (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<g id="map" stroke-width="1">"#);
    for (polys, color) in [(&sample.hard, "#555555"), (&sample.soft, "#bbbbbb")] {
        for p in polys.iter() {
            for w in p.points.windows(2) {
                let ((x1, y1), (x2, y2)) = (to_px(w[0]), to_px(w[1]));
                let _ = writeln!(s, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}"/>"#);
            }
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="agents" fill="none" stroke-width="2">"#);
    for a in 0..n {
        let kind = match sample.agent_types[a] {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
        };
        let id = sample.agent_ids[a];
        let _ = writeln!(s, r##"<path class="past {kind}" data-agent="{id}" stroke="#1f77b4" d="{}"/>"##, path_d(&past[a], &to_px));
        let _ = writeln!(s, r##"<path class="truth {kind}" data-agent="{id}" stroke="#2ca02c" d="{}"/>"##, path_d(&gt[a], &to_px));
        let probs = set.probabilities_of(a);
        for c in 0..k {
            let opacity = 0.3 + 0.7 * probs[c].clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r##"<path class="prediction {kind}" data-agent="{id}" data-candidate="{c}" stroke="#d62728" stroke-dasharray="4 3" stroke-opacity="{opacity:.3}" d="{}"/>"##,
                path_d(&pred(a, c), &to_px)
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="14">"#);
    for (i, (label, color)) in [("past", "#1f77b4"), ("ground truth", "#2ca02c"), ("prediction", "#d62728")].iter().enumerate() {
        let y = 20.0 + 20.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="10" y1="{y}" x2="40" y2="{y}" stroke="{color}" stroke-width="3"/>"#);
        let _ = writeln!(s, r#"<text x="48" y="{}">{label}</text>"#, y + 5.0);
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

pub fn save_plot(sample: &EgoSample, set: &CandidateSet, path: &Path) -> Result<()> {
    let svg = render_plot(sample, set)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
