//! SVG step-count maps with barrier zero-level contours.

use std::fmt::Write as _;
use std::path::Path;

use rhcbf::compass_gait::LIMIT_CYCLE_IC;
use rhcbf::net::{Barrier, BarrierNet};

use crate::config::ExperimentConfig;
use crate::pipeline::{load_checkpoint, write_resolved, Layout};
use crate::sweep::{SweepMeta, GRID_HEADER};
use crate::{read_file, write_file, ExpError, Result};

/// One row of a grid CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub seed: u64,
    pub steps: usize,
}

pub fn parse_grid_csv(text: &str) -> Result<Vec<GridPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == GRID_HEADER => {}
        _ => return Err(ExpError::Invalid(format!("grid CSV must start with `{GRID_HEADER}`"))),
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || ExpError::Invalid(format!("grid CSV line {}: `{line}`", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        points.push(GridPoint {
            x: f[0].parse().map_err(|_| bad())?,
            y: f[1].parse().map_err(|_| bad())?,
            seed: f[2].parse().map_err(|_| bad())?,
            steps: f[3].parse().map_err(|_| bad())?,
        });
    }
    if points.is_empty() {
        return Err(ExpError::Invalid("grid CSV has no rows".into()));
    }
    Ok(points)
}

/// Mean steps per distinct grid location, in first-seen order.
pub fn seed_average(points: &[GridPoint]) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64, usize)> = Vec::new();
    for p in points {
        match out.iter_mut().find(|(x, y, _, _)| *x == p.x && *y == p.y) {
            Some(e) => {
                e.2 += p.steps as f64;
                e.3 += 1;
            }
            None => out.push((p.x, p.y, p.steps as f64, 1)),
        }
    }
    out.into_iter().map(|(x, y, s, n)| (x, y, s / n as f64)).collect()
}

pub type Segment = [(f64, f64); 2];

/// Zero-level segments of `f` over the rectangle, by marching squares on a
/// `res × res` cell grid with linear interpolation along cell edges.
pub fn contour_segments(f: &dyn Fn(f64, f64) -> f64, x: (f64, f64), y: (f64, f64), res: usize) -> Vec<Segment> {
    let xs: Vec<f64> = (0..=res).map(|i| x.0 + (x.1 - x.0) * i as f64 / res as f64).collect();
    let ys: Vec<f64> = (0..=res).map(|j| y.0 + (y.1 - y.0) * j as f64 / res as f64).collect();
    let v: Vec<Vec<f64>> = ys.iter().map(|&yy| xs.iter().map(|&xx| f(xx, yy)).collect()).collect();
    let lerp = |p: (f64, f64), q: (f64, f64), a: f64, b: f64| {
        let t = a / (a - b);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut segs = Vec::new();
    for j in 0..res {
        for i in 0..res {
            // Corners counter-clockwise from bottom-left.
            let c = [(xs[i], ys[j]), (xs[i + 1], ys[j]), (xs[i + 1], ys[j + 1]), (xs[i], ys[j + 1])];
            let h = [v[j][i], v[j][i + 1], v[j + 1][i + 1], v[j + 1][i]];
            let mut cuts = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (h[e], h[(e + 1) % 4]);
                if (a >= 0.0) != (b >= 0.0) {
                    cuts.push(lerp(c[e], c[(e + 1) % 4], a, b));
                }
            }
            match cuts.len() {
                2 => segs.push([cuts[0], cuts[1]]),
                4 => {
                    let centre = h.iter().sum::<f64>() / 4.0;
                    if (centre >= 0.0) == (h[0] >= 0.0) {
                        segs.push([cuts[0], cuts[3]]);
                        segs.push([cuts[1], cuts[2]]);
                    } else {
                        segs.push([cuts[0], cuts[1]]);
                        segs.push([cuts[2], cuts[3]]);
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

/// Value of `h` on the slice with the stance leg at its limit-cycle state.
pub fn slice_value(h: &BarrierNet, theta_swing: f64, theta_dot_swing: f64) -> f64 {
    h.value(&[LIMIT_CYCLE_IC[0], theta_swing, LIMIT_CYCLE_IC[2], theta_dot_swing])
}

fn colour(steps: f64, max_steps: f64) -> String {
    let t = (steps / max_steps).clamp(0.0, 1.0);
    let (r, g, b) = (255.0 * (1.0 - t), 64.0 + 128.0 * t, 255.0 * t);
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Scatter of seed-averaged steps with optional contour segments.
pub fn render_svg(title: &str, points: &[GridPoint], max_steps: usize, contour: &[Segment]) -> Result<String> {
    if points.is_empty() {
        return Err(ExpError::Invalid("nothing to plot".into()));
    }
    let cells = seed_average(points);
    let (x0, x1, y0, y1) = bounds(points);
    let (w, h, pad) = (480.0, 480.0, 40.0);
    let px = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title)).unwrap();
    for (x, y, m) in &cells {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="{}"/>"#, px(*x), py(*y), colour(*m, max_steps as f64)).unwrap();
    }
    for [(ax, ay), (bx, by)] in contour {
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="1.5"/>"#,
            px(*ax),
            py(*ay),
            px(*bx),
            py(*by)
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">swing angle</text>"#, w / 2.0, h - 8.0).unwrap();
    writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">swing rate</text>"#, h / 2.0, h / 2.0)
        .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn bounds(points: &[GridPoint]) -> (f64, f64, f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |b, p| {
        (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y))
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One SVG per grid CSV, with contours for the filtered controllers.
pub fn plot_grid(text: &str, title: &str, max_steps: usize, net: Option<&BarrierNet>, resolution: usize) -> Result<String> {
    let points = parse_grid_csv(text)?;
    let contour = match net {
        Some(h) => {
            let (x0, x1, y0, y1) = bounds(&points);
            contour_segments(&|x, y| slice_value(h, x, y), (x0, x1), (y0, y1), resolution)
        }
        None => Vec::new(),
    };
    render_svg(title, &points, max_steps, &contour)
}

pub fn cmd_plot(cfg: &ExperimentConfig, force: bool) -> Result<Vec<String>> {
    let layout = Layout::new(&cfg.out);
    let meta_path = layout.sweep().join("meta.json");
    let meta: SweepMeta = crate::pipeline::from_json(&meta_path)?;
    crate::check_hash(&meta_path, &cfg.sweep_hash(), &meta.config_hash, force)?;
    let mut written = Vec::new();
    for &c in &cfg.sweep.controllers {
        let net = match c.variant() {
            Some(v) => Some(load_checkpoint(cfg, v, force)?),
            None => None,
        };
        for &level in cfg.sweep.levels() {
            let name = crate::sweep::grid_file_name(c, &meta.level_name, level);
            let text = read_file(&layout.sweep().join(&name))?;
            let title = format!("{} controller, {} = {}", c.name(), meta.level_name, level);
            let svg = plot_grid(&text, &title, cfg.sweep.max_steps, net.as_ref(), cfg.plot.resolution)?;
            let out = layout.plots().join(name.replace(".csv", ".svg"));
            write_file(&out, svg.as_bytes())?;
            written.push(out.display().to_string());
        }
    }
    write_resolved(cfg, &layout.plots())?;
    Ok(written)
}

/// Reads a grid CSV from disk and renders it without a contour.
pub fn plot_file(path: &Path, max_steps: usize) -> Result<String> {
    let text = read_file(path)?;
    plot_grid(&text, &path.display().to_string(), max_steps, None, 2)
}
