//! Bird's-eye SVG rendering of a scenario with predicted variants.

use std::fmt::Write as _;
use std::path::Path;

use crate::geom::Vec2;
use crate::scenario::Scenario;

use super::PipelineError;

/// One styled set of per-agent polylines.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub color: String,
    pub dashed: bool,
    pub paths: Vec<Vec<Vec2>>,
}

impl Variant {
    pub fn new(name: &str, color: &str, dashed: bool, paths: Vec<Vec<Vec2>>) -> Self {
        Self {
            name: name.to_string(),
            color: color.to_string(),
            dashed,
            paths,
        }
    }
}

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;

struct Frame {
    min: Vec2,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a Vec2>) -> Self {
        let (mut lo, mut hi) = (
            Vec2::new(f64::INFINITY, f64::INFINITY),
            Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for p in points {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = Vec2::new(0.0, 0.0);
            hi = Vec2::new(1.0, 1.0);
        }
        let span = (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
        let scale = (SIZE - 2.0 * MARGIN) / span;
        Self {
            min: lo,
            scale,
            height: (hi.y - lo.y) * scale + 2.0 * MARGIN,
        }
    }

    fn map(&self, p: Vec2) -> (f64, f64) {
        let x = MARGIN + (p.x - self.min.x) * self.scale;
        let y = self.height - MARGIN - (p.y - self.min.y) * self.scale;
        (x, y)
    }

    fn points(&self, path: &[Vec2]) -> String {
        let mut s = String::new();
        for (i, &p) in path.iter().enumerate() {
            let (x, y) = self.map(p);
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{x:.2},{y:.2}");
        }
        s
    }
}

/// SVG text: map polylines, one group per variant, keypoint markers, legend.
pub fn render_svg(s: &Scenario, variants: &[Variant], keypoints: &[Vec<(u32, Vec2)>]) -> String {
    let all = s
        .map_polylines
        .iter()
        .flatten()
        .chain(variants.iter().flat_map(|v| v.paths.iter().flatten()))
        .chain(keypoints.iter().flatten().map(|(_, p)| p));
    let frame = Frame::fit(all);
    let height = frame.height.max(SIZE / 4.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE:.0}" height="{height:.0}" viewBox="0 0 {SIZE:.0} {height:.0}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", s.id);
    let _ = writeln!(
        out,
        r##"<rect width="100%" height="100%" fill="#ffffff"/>"##
    );
    let _ = writeln!(out, r#"<g class="map">"#);
    for line in &s.map_polylines {
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#bbbbbb" stroke-width="1"/>"##,
            frame.points(line)
        );
    }
    let _ = writeln!(out, "</g>");
    for v in variants {
        let dash = if v.dashed {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let _ = writeln!(out, r#"<g class="variant" data-name="{}">"#, v.name);
        for path in v.paths.iter().filter(|p| !p.is_empty()) {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                frame.points(path),
                v.color
            );
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(out, r#"<g class="keypoints">"#);
    for (agent, kps) in keypoints.iter().enumerate() {
        for &(t, p) in kps {
            let (x, y) = frame.map(p);
            let _ = writeln!(
                out,
                r##"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="#000000" data-agent="{agent}" data-t="{t}"/>"##
            );
        }
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<g class="legend" font-family="sans-serif" font-size="12">"#
    );
    for (i, v) in variants.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="10" y1="{y:.0}" x2="34" y2="{y:.0}" stroke="{}" stroke-width="2"/><text x="40" y="{:.0}">{}</text>"#,
            v.color,
            y + 4.0,
            v.name
        );
    }
    let y = 20.0 + 18.0 * variants.len() as f64;
    let _ = writeln!(
        out,
        r##"<circle cx="22" cy="{y:.0}" r="3.5" fill="#000000"/><text x="40" y="{:.0}">keypoints</text>"##,
        y + 4.0
    );
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}

pub fn plot_scenario(
    s: &Scenario,
    variants: &[Variant],
    keypoints: &[Vec<(u32, Vec2)>],
    path: &Path,
) -> Result<(), PipelineError> {
    std::fs::write(path, render_svg(s, variants, keypoints)).map_err(|e| PipelineError::Stage {
        stage: "plot",
        cause: format!("{}: {e}", path.display()),
    })
}
