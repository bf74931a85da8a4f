//! Tables, summaries and SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::AttributionMap;
use crate::benchmark::{CombinationSummary, TrialResult};
use crate::error::{Error, Result};
use crate::graph::{BondOrder, Graph};
use crate::metrics::SimilarityMatrix;
use crate::smiles::label_symbol;

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const RESULTS_HEADER: &str = "task,constraint,seed,model_metric,method,attr_metric";

/// One row per (trial, method), sorted by task, constraint, seed, method.
/// Failed trials contribute a single row with empty metric fields.
pub fn results_csv(results: &[TrialResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::contract("no trial results to write"));
    }
    let mut rows = Vec::new();
    for r in results {
        if !r.is_ok() {
            rows.push((r.task.clone(), r.constraint, r.seed, String::new(), String::new(), String::new()));
            continue;
        }
        for (method, value) in &r.attribution {
            rows.push((
                r.task.clone(),
                r.constraint,
                r.seed,
                method.as_str().to_string(),
                fmt_g(r.model_metric),
                fmt_g(*value),
            ));
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1, a.2, &a.3).cmp(&(&b.0, b.1, b.2, &b.3)));
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for (task, constraint, seed, method, model, attr) in rows {
        let _ = writeln!(out, "{task},{constraint},{seed},{model},{method},{attr}");
    }
    Ok(out)
}

pub fn summary_json(summary: &[CombinationSummary]) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)?)
}

/// Box-plot table: one row per (task, constraint, metric).
pub fn boxplot_csv(summary: &[CombinationSummary]) -> String {
    let mut out = String::from("task,constraint,metric,n,failed,min,q1,median,q3,max,mean,std\n");
    for s in summary {
        let _ = write!(out, "{},{},{},", s.task, s.constraint, s.metric);
        match &s.stats {
            Some(st) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    st.n,
                    s.failed,
                    fmt_g(st.min),
                    fmt_g(st.q1),
                    fmt_g(st.median),
                    fmt_g(st.q3),
                    fmt_g(st.max),
                    fmt_g(st.mean),
                    fmt_g(st.std)
                );
            }
            None => {
                let _ = writeln!(out, "0,{},,,,,,,", s.failed);
            }
        }
    }
    out
}

const GREEN: (f64, f64, f64) = (0x2c as f64, 0xa0 as f64, 0x2c as f64);
const MAGENTA: (f64, f64, f64) = (0xd6 as f64, 0x2c as f64, 0xa0 as f64);

/// Diverging color for `t` in `[-1, 1]`: green below zero, white at zero,
/// magenta above.
pub fn diverging_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { GREEN } else { MAGENTA };
    let a = t.abs();
    let mix = |c: f64| (255.0 + (c - 255.0) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(end.0), mix(end.1), mix(end.2))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fnv1a(graph: &Graph) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for &l in graph.labels() {
        eat(l as u64);
    }
    for e in graph.edges() {
        eat(e.a as u64);
        eat(e.b as u64);
    }
    h
}

const CANVAS: f64 = 400.0;
const MARGIN: f64 = 30.0;
const NODE_RADIUS: f64 = 12.0;

/// Fruchterman-Reingold layout in the unit square, seeded by the graph's
/// structure so identical graphs lay out identically.
pub fn layout(graph: &Graph) -> Vec<(f64, f64)> {
    let n = graph.num_nodes();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![(0.5, 0.5)];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(graph));
    let mut pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let k = (1.0 / n as f64).sqrt();
    let iterations = 300;
    let mut temp = 0.1;
    for _ in 0..iterations {
        let mut disp = vec![(0.0, 0.0); n];
        for i in 0..n {
            for j in (i + 1)..n {
                let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
                let d = (dx * dx + dy * dy).sqrt().max(1e-6);
                let f = k * k / d;
                disp[i].0 += dx / d * f;
                disp[i].1 += dy / d * f;
                disp[j].0 -= dx / d * f;
                disp[j].1 -= dy / d * f;
            }
        }
        for e in graph.edges() {
            let (i, j) = (e.a, e.b);
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            let d = (dx * dx + dy * dy).sqrt().max(1e-6);
            let f = d * d / k;
            disp[i].0 -= dx / d * f;
            disp[i].1 -= dy / d * f;
            disp[j].0 += dx / d * f;
            disp[j].1 += dy / d * f;
        }
        for (p, d) in pos.iter_mut().zip(&disp) {
            let len = (d.0 * d.0 + d.1 * d.1).sqrt().max(1e-12);
            let step = len.min(temp);
            p.0 += d.0 / len * step;
            p.1 += d.1 / len * step;
        }
        temp *= 0.98;
    }
    // Rescale to fill the unit square, keeping the aspect ratio.
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pos {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    pos.iter()
        .map(|&(x, y)| ((x - x0) / span, (y - y0) / span))
        .collect()
}

fn node_label(graph: &Graph, i: usize) -> String {
    let l = graph.labels()[i];
    match (&graph.smiles, label_symbol(l)) {
        (Some(_), Some(sym)) => sym.to_string(),
        _ => l.to_string(),
    }
}

/// Draws `graph` with nodes colored by `map`'s scores, scaled by the
/// largest absolute score.
pub fn render_svg(graph: &Graph, map: &AttributionMap) -> Result<String> {
    let n = graph.num_nodes();
    if map.scores.len() != n {
        return Err(Error::contract(format!(
            "attribution has {} scores for {} nodes",
            map.scores.len(),
            n
        )));
    }
    let scale = map.scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let inner = CANVAS - 2.0 * MARGIN;
    let pts: Vec<(f64, f64)> = layout(graph)
        .into_iter()
        .map(|(x, y)| (MARGIN + x * inner, MARGIN + y * inner))
        .collect();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for e in graph.edges() {
        let (a, b) = (pts[e.a], pts[e.b]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt().max(1e-9);
        let (nx, ny) = (-dy / len * 3.0, dx / len * 3.0);
        let line = |svg: &mut String, off: f64, dashed: bool| {
            let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555555" stroke-width="1.5"{dash}/>"##,
                a.0 + nx * off,
                a.1 + ny * off,
                b.0 + nx * off,
                b.1 + ny * off
            );
        };
        match e.order {
            BondOrder::Single => line(&mut svg, 0.0, false),
            BondOrder::Double => {
                line(&mut svg, -0.5, false);
                line(&mut svg, 0.5, false);
            }
            BondOrder::Triple => {
                line(&mut svg, -1.0, false);
                line(&mut svg, 0.0, false);
                line(&mut svg, 1.0, false);
            }
            BondOrder::Aromatic => {
                line(&mut svg, -0.5, false);
                line(&mut svg, 0.5, true);
            }
        }
    }
    for (i, &(x, y)) in pts.iter().enumerate() {
        let t = if scale > 0.0 { map.scores[i] / scale } else { 0.0 };
        let _ = writeln!(
            svg,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="{NODE_RADIUS:.1}" fill="{}" stroke="#333333" stroke-width="1"/>"##,
            diverging_color(t)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            y + 4.0,
            xml_escape(&node_label(graph, i))
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Heatmap of a similarity matrix on a fixed `[-1, 1]` diverging scale.
pub fn heatmap_svg(sim: &SimilarityMatrix, title: &str) -> String {
    let k = sim.size();
    let cell = 16.0;
    let left = 40.0;
    let top = 40.0;
    let w = left + cell * k as f64 + 10.0;
    let h = top + cell * k as f64 + 10.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{left:.0}" y="20" font-family="sans-serif" font-size="12">{}</text>"#,
        xml_escape(title)
    );
    for a in 0..k {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="8" text-anchor="end">{}</text>"#,
            left - 3.0,
            top + cell * (a as f64 + 0.7),
            xml_escape(sim.row_labels.get(a).map(String::as_str).unwrap_or(""))
        );
        for b in 0..k {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}"/>"#,
                left + cell * b as f64,
                top + cell * a as f64,
                diverging_color(sim.entries.get(a, b))
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean of `field` per (task, constraint) over successful trials.
pub fn mean_by_combination(
    results: &[TrialResult],
    field: impl Fn(&TrialResult) -> f64,
) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        let e = acc.entry((r.task.clone(), r.constraint.to_string())).or_default();
        e.0 += field(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}
