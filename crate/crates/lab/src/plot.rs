//! SVG phase portraits and trajectory plots.

use std::fmt::Write as _;

use esc_core::integrator::VectorField;
use esc_core::Result;

/// Streamlines of a planar autonomous field over `[-extent, extent]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub extent: f64,
    /// Seeds per axis, at cell centres.
    pub seeds: usize,
    /// Arc-length step as a fraction of the extent.
    pub step_fraction: f64,
    pub max_steps: usize,
}

impl StreamConfig {
    pub fn new(extent: f64) -> Self {
        Self { extent, seeds: 10, step_fraction: 0.01, max_steps: 300 }
    }
}

/// One streamline; `seed_index` points at the seed inside `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    pub points: Vec<[f64; 2]>,
    pub seed_index: usize,
}

fn unit_direction<F: VectorField + ?Sized>(f: &F, p: [f64; 2], sign: f64, scale: f64) -> Result<Option<[f64; 2]>> {
    let mut d = [0.0; 2];
    f.eval(0.0, &p, &mut d)?;
    let n = d[0].hypot(d[1]);
    if !(n > 1e-12 * scale) || !n.is_finite() {
        return Ok(None);
    }
    Ok(Some([sign * d[0] / n, sign * d[1] / n]))
}

fn trace<F: VectorField + ?Sized>(f: &F, seed: [f64; 2], sign: f64, cfg: &StreamConfig) -> Result<Vec<[f64; 2]>> {
    let h = cfg.step_fraction * cfg.extent;
    let mut p = seed;
    let mut out = Vec::new();
    for _ in 0..cfg.max_steps {
        let at = |p: [f64; 2], k: [f64; 2], s: f64| [p[0] + s * k[0], p[1] + s * k[1]];
        let Some(k1) = unit_direction(f, p, sign, cfg.extent)? else { break };
        let Some(k2) = unit_direction(f, at(p, k1, h / 2.0), sign, cfg.extent)? else { break };
        let Some(k3) = unit_direction(f, at(p, k2, h / 2.0), sign, cfg.extent)? else { break };
        let Some(k4) = unit_direction(f, at(p, k3, h), sign, cfg.extent)? else { break };
        let next = [
            p[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            p[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if next[0].abs() > cfg.extent || next[1].abs() > cfg.extent {
            break;
        }
        out.push(next);
        p = next;
    }
    Ok(out)
}

/// Streamlines of the normalized field from a fixed seed grid, traced
/// forward and backward from each seed.
pub fn streamlines<F: VectorField + ?Sized>(f: &F, cfg: &StreamConfig) -> Result<Vec<Streamline>> {
    if f.dim() != 2 {
        return Err(esc_core::Error::DimensionMismatch { expected: 2, got: f.dim() });
    }
    let n = cfg.seeds.max(1);
    let cell = 2.0 * cfg.extent / n as f64;
    let mut lines = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let seed = [-cfg.extent + (i as f64 + 0.5) * cell, -cfg.extent + (j as f64 + 0.5) * cell];
            let mut back = trace(f, seed, -1.0, cfg)?;
            back.reverse();
            let seed_index = back.len();
            back.push(seed);
            back.extend(trace(f, seed, 1.0, cfg)?);
            lines.push(Streamline { points: back, seed_index });
        }
    }
    Ok(lines)
}

/// A square panel mapping `[-extent, extent]²` to pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub extent: f64,
    pub lines: Vec<Vec<[f64; 2]>>,
    /// Arrow positions with their forward direction.
    pub arrows: Vec<([f64; 2], [f64; 2])>,
}

impl Panel {
    pub fn from_streamlines(title: impl Into<String>, extent: f64, lines: &[Streamline]) -> Self {
        let mut arrows = Vec::new();
        for l in lines {
            let i = l.seed_index;
            if let Some(next) = l.points.get(i + 1) {
                let p = l.points[i];
                arrows.push((p, [next[0] - p[0], next[1] - p[1]]));
            }
        }
        Self { title: title.into(), extent, lines: lines.iter().map(|l| l.points.clone()).collect(), arrows }
    }

    pub fn from_trajectory(title: impl Into<String>, xy: Vec<[f64; 2]>) -> Self {
        let extent = xy.iter().flat_map(|p| [p[0].abs(), p[1].abs()]).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
        let extent = if extent > 0.0 { 1.1 * extent } else { 1.0 };
        let arrows = match (xy.first(), xy.get(1)) {
            (Some(p), Some(q)) => vec![(*p, [q[0] - p[0], q[1] - p[1]])],
            _ => Vec::new(),
        };
        Self { title: title.into(), extent, lines: vec![xy], arrows }
    }
}

const SIZE: f64 = 400.0;
const MARGIN: f64 = 40.0;

/// Renders panels side by side. Coordinates use two decimals, so equal
/// inputs give byte-identical files.
pub fn render_svg(panels: &[Panel]) -> String {
    let width = panels.len().max(1) as f64 * (SIZE + 2.0 * MARGIN);
    let height = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let ox = k as f64 * (SIZE + 2.0 * MARGIN) + MARGIN;
        let oy = MARGIN;
        let e = panel.extent;
        let px = |p: [f64; 2]| (ox + (p[0] + e) / (2.0 * e) * SIZE, oy + (e - p[1]) / (2.0 * e) * SIZE);
        let _ = writeln!(s, r#"<g>"#);
        let _ = writeln!(s, r#"<rect x="{ox:.2}" y="{oy:.2}" width="{SIZE:.2}" height="{SIZE:.2}" fill="none" stroke="black"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            ox + SIZE / 2.0,
            oy - 12.0,
            escape(&panel.title)
        );
        for (v, anchor) in [(-e, "start"), (e, "end")] {
            let (x, _) = px([v, 0.0]);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
                oy + SIZE + 16.0,
                tick(v)
            );
        }
        for line in &panel.lines {
            let pts: Vec<String> = line
                .iter()
                .filter(|p| p[0].is_finite() && p[1].is_finite())
                .map(|&p| {
                    let (x, y) = px(p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            if pts.len() >= 2 {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1" points="{}"/>"#, pts.join(" "));
            }
        }
        for &(p, d) in &panel.arrows {
            let n = d[0].hypot(d[1]);
            if !(n > 0.0) {
                continue;
            }
            let (x, y) = px(p);
            let (ux, uy) = (d[0] / n, -d[1] / n);
            let l = 6.0;
            let tip = (x + l * ux, y + l * uy);
            let left = (x - l * 0.5 * uy, y + l * 0.5 * ux);
            let right = (x + l * 0.5 * uy, y - l * 0.5 * ux);
            let _ = writeln!(
                s,
                r#"<polygon fill="steelblue" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}"/>"#,
                tip.0, tip.1, left.0, left.1, right.0, right.1
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let t = format!("{v}");
    if t.len() > 8 {
        format!("{v:.3e}")
    } else {
        t
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
