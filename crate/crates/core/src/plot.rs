//! Static SVG figures: track overlays and line charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, color: &'static str, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), color, points, markers: false }
    }

    pub fn with_markers(mut self) -> Self {
        self.markers = true;
        self
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series], equal_aspect: bool) -> Self {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |a: f64, b: f64| {
            let span = (b - a).max(1e-9);
            (a - 0.05 * span, b + 0.05 * span)
        };
        let (mut x0, mut x1) = pad(x0, x1);
        let (mut y0, mut y1) = pad(y0, y1);
        if equal_aspect {
            let sx = (x1 - x0) / (W - 2.0 * MARGIN);
            let sy = (y1 - y0) / (H - 2.0 * MARGIN);
            let s = sx.max(sy);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - s * (W - 2.0 * MARGIN) / 2.0;
            x1 = cx + s * (W - 2.0 * MARGIN) / 2.0;
            y0 = cy - s * (H - 2.0 * MARGIN) / 2.0;
            y1 = cy + s * (H - 2.0 * MARGIN) / 2.0;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN),
            H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN),
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(title: &str, xlabel: &str, ylabel: &str, series: &[Series], equal_aspect: bool) -> String {
    let f = Frame::fit(series, equal_aspect);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let (px, _) = f.map((xv, f.y0));
        let (_, py) = f.map((f.x0, yv));
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.4}</text>"#, H - MARGIN + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{py:.1}" text-anchor="end">{yv:.4}</text>"#, MARGIN - 4.0);
    }
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&p| {
                let (x, y) = f.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            ser.color,
            pts.join(" ")
        );
        if ser.markers {
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{}"/>"#, ser.color);
            }
        }
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        let lx = W - MARGIN - 150.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#, lx + 20.0, ser.color);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Longitude/latitude overlay with equal degree scaling.
pub fn track_svg(title: &str, series: &[Series]) -> String {
    render(title, "longitude", "latitude", series, true)
}

pub fn line_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    render(title, xlabel, ylabel, series, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_every_series() {
        let a = Series::new("truth", "black", vec![(0.0, 0.0), (1.0, 1.0)]);
        let b = Series::new("a<b", "red", vec![(0.0, 1.0), (1.0, 0.0)]).with_markers();
        let svg = track_svg("t", &[a, b]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn degenerate_input_is_still_drawable() {
        let svg = line_svg("t", "x", "y", &[Series::new("one", "blue", vec![(2.0, 2.0)])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let empty = line_svg("t", "x", "y", &[]);
        assert!(empty.ends_with("</svg>\n"));
    }
}
