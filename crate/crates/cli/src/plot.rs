//! Static SVG views of corridors and rollouts in the position plane.

use contour::ContourBuilder;
use svg::node::element::{Circle, Group, Polyline, Rectangle, Text};
use svg::Document;
use ttr_core::oracle::dubins_distance;
use ttr_core::sysdyn::State;

const SIZE: f64 = 640.0;
const PAD: f64 = 40.0;
/// Scatter points drawn at most; larger corridors are thinned evenly.
const MAX_DOTS: usize = 20_000;
const CONTOUR_GRID: usize = 80;

#[derive(Default)]
pub struct Scene {
    /// `(px, py, value)` dots.
    pub dots: Vec<(f64, f64, f64)>,
    pub paths: Vec<Vec<(f64, f64)>>,
    /// Heading at which oracle contours are drawn, when requested.
    pub contour_heading: Option<f64>,
    pub target: Option<(f64, f64)>,
    pub title: String,
}

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Frame {
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            lo_x = lo_x.min(x);
            lo_y = lo_y.min(y);
            hi_x = hi_x.max(x);
            hi_y = hi_y.max(y);
        }
        if !lo_x.is_finite() {
            (lo_x, lo_y, hi_x, hi_y) = (-1.0, -1.0, 1.0, 1.0);
        }
        let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-6) * 1.1;
        let (cx, cy) = (0.5 * (lo_x + hi_x), 0.5 * (lo_y + hi_y));
        Frame {
            x0: cx - span / 2.0,
            y0: cy - span / 2.0,
            scale: (SIZE - 2.0 * PAD) / span,
        }
    }

    fn span(&self) -> f64 {
        (SIZE - 2.0 * PAD) / self.scale
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (PAD + (x - self.x0) * self.scale, SIZE - PAD - (y - self.y0) * self.scale)
    }
}

/// Blue for low values through to yellow for high ones.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (68.0 + t * (253.0 - 68.0)) as u8;
    let g = (1.0 + t * (231.0 - 1.0)) as u8;
    let b = (84.0 + t * (37.0 - 84.0)).max(0.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn r3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

pub fn render(scene: &Scene) -> String {
    let frame = Frame::fit(
        scene
            .dots
            .iter()
            .map(|d| (d.0, d.1))
            .chain(scene.paths.iter().flatten().copied())
            .chain(scene.target),
    );
    let mut doc = Document::new()
        .set("viewBox", (0, 0, SIZE, SIZE))
        .set("width", SIZE)
        .set("height", SIZE)
        .add(Rectangle::new().set("width", SIZE).set("height", SIZE).set("fill", "white"));

    if let Some(theta) = scene.contour_heading {
        doc = doc.add(oracle_contours(&frame, theta));
    }

    if !scene.dots.is_empty() {
        let (lo, hi) = scene
            .dots
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), d| (l.min(d.2), h.max(d.2)));
        let stride = scene.dots.len().div_ceil(MAX_DOTS);
        let mut g = Group::new().set("stroke", "none");
        for d in scene.dots.iter().step_by(stride) {
            let (x, y) = frame.map(d.0, d.1);
            let t = if hi > lo { (d.2 - lo) / (hi - lo) } else { 0.0 };
            g = g.add(Circle::new().set("cx", r3(x)).set("cy", r3(y)).set("r", 1.2).set("fill", color(t)));
        }
        doc = doc.add(g).add(
            Text::new(format!("value {lo:.2} to {hi:.2} s"))
                .set("x", PAD)
                .set("y", SIZE - 10.0)
                .set("font-size", 12),
        );
    }

    for path in &scene.paths {
        let pts: Vec<String> = path
            .iter()
            .map(|&(x, y)| {
                let (a, b) = frame.map(x, y);
                format!("{},{}", r3(a), r3(b))
            })
            .collect();
        doc = doc.add(
            Polyline::new()
                .set("points", pts.join(" "))
                .set("fill", "none")
                .set("stroke", "crimson")
                .set("stroke-width", 1.5),
        );
    }

    if let Some((x, y)) = scene.target {
        let (a, b) = frame.map(x, y);
        doc = doc.add(Circle::new().set("cx", r3(a)).set("cy", r3(b)).set("r", 4).set("fill", "black"));
    }
    doc = doc.add(Text::new(scene.title.clone()).set("x", PAD).set("y", 24).set("font-size", 14));
    doc.to_string()
}

/// Level sets of the optimal time to the origin at a fixed heading.
fn oracle_contours(frame: &Frame, theta: f64) -> Group {
    let n = CONTOUR_GRID;
    let step = frame.span() / (n - 1) as f64;
    let goal = State::from([0.0, 0.0, 0.0]);
    let mut values = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = State::from([frame.x0 + i as f64 * step, frame.y0 + j as f64 * step, theta]);
            values.push(dubins_distance(&x, &goal).0);
        }
    }
    let hi = values.iter().cloned().fold(0.0, f64::max);
    let levels: Vec<f64> = (1..).map(|k| 2.0 * k as f64).take_while(|&v| v < hi).collect();
    let builder = ContourBuilder::new(n, n, false)
        .x_origin(frame.x0)
        .y_origin(frame.y0)
        .x_step(step)
        .y_step(step);
    let mut g = Group::new()
        .set("fill", "none")
        .set("stroke", "#999999")
        .set("stroke-width", 0.6);
    let Ok(lines) = builder.lines(&values, &levels) else {
        return g;
    };
    for line in lines {
        for ls in &line.geometry().0 {
            let pts: Vec<String> = ls
                .0
                .iter()
                .map(|c| {
                    let (a, b) = frame.map(c.x, c.y);
                    format!("{},{}", r3(a), r3(b))
                })
                .collect();
            g = g.add(Polyline::new().set("points", pts.join(" ")));
        }
    }
    g
}
