//! PGM heatmaps of attribution maps and SVG score-contour plots for 2-D models.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_class, AttributionConfig, AttributionMap, Method};
use crate::metrics::GridGeometry;
use crate::nn::{ClassSelector, Network, QuantityOfInterest, Stage};

use super::{io_err, HarnessError, Result};

/// Writes `|scores|` min-max scaled to `[0, 255]` as a binary PGM (P5).
/// A constant map becomes uniform mid-gray.
pub fn emit_heatmap(map: &AttributionMap, geom: GridGeometry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let GridGeometry::Grid { height, width } = geom else {
        return Err(HarnessError::InvalidSpec("heatmaps need a grid geometry".into()));
    };
    if map.len() != height * width {
        return Err(HarnessError::InvalidSpec(format!("map has {} scores for a {height}x{width} grid", map.len())));
    }
    let mags: Vec<f64> = map.scores.iter().map(|v| v.abs()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u8> = if !(hi > lo) {
        log::warn!("{}: degenerate map, writing uniform gray", path.display());
        vec![128; mags.len()]
    } else {
        mags.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels);
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Axis-aligned plotting window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arrow {
    pub method: Method,
    pub at: [f64; 2],
    /// Unit direction in data coordinates.
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourSummary {
    pub levels: Vec<f64>,
    /// Line segments per level, in data coordinates.
    pub segments: Vec<Vec<[[f64; 2]; 2]>>,
    pub arrows: Vec<Arrow>,
}

const GRID: usize = 64;
const ARROW_GRID: usize = 8;
const LEVELS: usize = 12;
const CANVAS: f64 = 600.0;
const PALETTE: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
const REGION_FILL: [&str; 4] = ["#fde0dd", "#deebf7", "#e5f5e0", "#efedf5"];

/// Marching squares over a `(n+1) × (n+1)` grid of values (row = y index).
fn march(values: &[Vec<f64>], xs: &[f64], ys: &[f64], level: f64) -> Vec<[[f64; 2]; 2]> {
    let mut segs = Vec::new();
    let lerp = |a: f64, b: f64, va: f64, vb: f64| if vb == va { (a + b) / 2.0 } else { a + (level - va) / (vb - va) * (b - a) };
    for j in 0..ys.len() - 1 {
        for i in 0..xs.len() - 1 {
            let (v00, v10, v11, v01) = (values[j][i], values[j][i + 1], values[j + 1][i + 1], values[j + 1][i]);
            // edges: 0 bottom, 1 right, 2 top, 3 left
            let point = |e: usize| -> [f64; 2] {
                match e {
                    0 => [lerp(xs[i], xs[i + 1], v00, v10), ys[j]],
                    1 => [xs[i + 1], lerp(ys[j], ys[j + 1], v10, v11)],
                    2 => [lerp(xs[i], xs[i + 1], v01, v11), ys[j + 1]],
                    _ => [xs[i], lerp(ys[j], ys[j + 1], v00, v01)],
                }
            };
            let case = (v00 > level) as u8 | ((v10 > level) as u8) << 1 | ((v11 > level) as u8) << 2 | ((v01 > level) as u8) << 3;
            let pairs: &[(usize, usize)] = match case {
                0 | 15 => &[],
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                5 => &[(3, 2), (0, 1)],
                _ => &[(3, 0), (1, 2)],
            };
            segs.extend(pairs.iter().map(|&(a, b)| [point(a), point(b)]));
        }
    }
    segs
}

/// SVG of the class-0 logit surface over `region`: decision regions,
/// marching-squares contours, and unit attribution arrows per method.
pub fn emit_contour_field(
    net: &Network,
    region: Region,
    methods: &[Method],
    cfg: &AttributionConfig,
    path: impl AsRef<Path>,
) -> Result<ContourSummary> {
    let path = path.as_ref();
    if net.input_dim() != 2 {
        return Err(HarnessError::InvalidSpec(format!("contour plots need d = 2, network has d = {}", net.input_dim())));
    }
    let axis = |(lo, hi): (f64, f64), n: usize| (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect::<Vec<_>>();
    let (xs, ys) = (axis(region.x, GRID), axis(region.y, GRID));
    let mut values = vec![vec![0.0; xs.len()]; ys.len()];
    let mut classes = vec![vec![0usize; xs.len()]; ys.len()];
    for (j, &y) in ys.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            let logits = net.logits(&[x, y])?;
            values[j][i] = logits[0];
            classes[j][i] = crate::nn::argmax(&logits);
        }
    }
    let lo = values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let levels: Vec<f64> = if hi > lo {
        (1..=LEVELS).map(|k| lo + (hi - lo) * k as f64 / (LEVELS + 1) as f64).collect()
    } else {
        Vec::new()
    };
    let segments: Vec<_> = levels.iter().map(|&l| march(&values, &xs, &ys, l)).collect();

    let cfg = AttributionConfig {
        qoi: QuantityOfInterest { stage: Stage::PreSoftmax, class: ClassSelector::Fixed(0) },
        ..cfg.clone()
    };
    let mut arrows = Vec::new();
    let (ax, ay) = (axis(region.x, ARROW_GRID + 1), axis(region.y, ARROW_GRID + 1));
    for &y in &ay[1..=ARROW_GRID] {
        for &x in &ax[1..=ARROW_GRID] {
            for &m in methods {
                let s = attribute_class(net, &[x, y], m, &cfg, 0)?.scores;
                let n = s[0].hypot(s[1]);
                if n > 0.0 {
                    arrows.push(Arrow { method: m, at: [x, y], direction: [s[0] / n, s[1] / n] });
                }
            }
        }
    }

    let svg = render_svg(region, &xs, &ys, &classes, &segments, &arrows);
    std::fs::write(path, svg).map_err(io_err(path))?;
    Ok(ContourSummary { levels, segments, arrows })
}

fn render_svg(
    region: Region,
    xs: &[f64],
    ys: &[f64],
    classes: &[Vec<usize>],
    segments: &[Vec<[[f64; 2]; 2]>],
    arrows: &[Arrow],
) -> String {
    let sx = CANVAS / (region.x.1 - region.x.0);
    let sy = CANVAS / (region.y.1 - region.y.0);
    let px = |p: [f64; 2]| ((p[0] - region.x.0) * sx, (region.y.1 - p[1]) * sy);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#);
    out.push_str("<g id=\"regions\" stroke=\"none\">\n");
    let (cw, ch) = ((xs[1] - xs[0]) * sx, (ys[1] - ys[0]) * sy);
    for (j, row) in classes.iter().enumerate() {
        for (i, &c) in row.iter().enumerate() {
            let (x, y) = px([xs[i], ys[j]]);
            let _ = writeln!(
                out,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                x - cw / 2.0,
                y - ch / 2.0,
                cw,
                ch,
                REGION_FILL[c % REGION_FILL.len()]
            );
        }
    }
    out.push_str("</g>\n<g id=\"contours\" stroke=\"#444\" stroke-width=\"1\" fill=\"none\">\n");
    for level in segments {
        for s in level {
            let ((x1, y1), (x2, y2)) = (px(s[0]), px(s[1]));
            let _ = writeln!(out, r#"<line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}"/>"#);
        }
    }
    out.push_str("</g>\n<g id=\"arrows\" fill=\"none\">\n");
    let scale = 0.4 * CANVAS / (ARROW_GRID + 1) as f64;
    for a in arrows {
        let (x, y) = px(a.at);
        let colour = PALETTE[Method::ALL.iter().position(|m| *m == a.method).unwrap_or(0)];
        // unit vector in local coordinates; y flips because SVG grows downward
        let _ = writeln!(
            out,
            r#"<line class="{}" transform="translate({x:.3} {y:.3}) scale({scale:.3})" x1="0" y1="0" x2="{}" y2="{}" stroke="{colour}" stroke-width="{:.4}"/>"#,
            a.method.tag(),
            a.direction[0],
            -a.direction[1],
            2.0 / scale
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
