//! Minimal static SVG charts. Coordinates are printed with fixed precision
//! so identical inputs give identical bytes.

use std::fmt::Write as _;

use chauffeur::geometry::Point;

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    /// Same scale on both axes, for maps.
    fn equal_aspect(self) -> Self {
        let sx = (self.x1 - self.x0) / (W - 2.0 * MARGIN);
        let sy = (self.y1 - self.y0) / (H - 2.0 * MARGIN);
        let s = sx.max(sy);
        let cx = (self.x0 + self.x1) / 2.0;
        let cy = (self.y0 + self.y1) / 2.0;
        let hw = s * (W - 2.0 * MARGIN) / 2.0;
        let hh = s * (H - 2.0 * MARGIN) / 2.0;
        Self {
            x0: cx - hw,
            x1: cx + hw,
            y0: cy - hh,
            y1: cy + hh,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        out,
        "<path d=\"M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let x = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let y = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            f.px(x),
            b + 16.0,
            tick(x)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            l - 6.0,
            f.py(y) + 4.0,
            tick(y)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn legend(out: &mut String, labels: &[String]) {
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            color(i)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            x + 14.0,
            escape(l)
        );
    }
}

fn polyline(out: &mut String, f: &Frame, pts: &[Point], stroke: &str, width: f64, dash: Option<&str>) {
    if pts.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, p) in pts.iter().enumerate() {
        let _ = write!(
            d,
            "{}{:.2},{:.2}",
            if i == 0 { "M" } else { " L" },
            f.px(p[0]),
            f.py(p[1])
        );
    }
    let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
    let _ = writeln!(
        out,
        "<path d=\"{d}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"{dash}/>"
    );
}

pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

/// Lines with markers, one colour per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let f = Frame::fit(all().map(|p| p[0]), all().map(|p| p[1]));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        polyline(&mut out, &f, &s.points, color(i), 1.8, None);
        for p in &s.points {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                f.px(p[0]),
                f.py(p[1]),
                color(i)
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Points coloured by group; highlighted points get a ring.
pub fn scatter(title: &str, points: &[(Point, usize)], groups: &[String], highlight: &[usize]) -> String {
    let f = Frame::fit(points.iter().map(|p| p.0[0]), points.iter().map(|p| p.0[1]));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "t-SNE 1", "t-SNE 2");
    for (p, g) in points {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>",
            f.px(p[0]),
            f.py(p[1]),
            color(*g)
        );
    }
    for &i in highlight {
        let p = points[i].0;
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"7\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>",
            f.px(p[0]),
            f.py(p[1])
        );
    }
    legend(&mut out, groups);
    out.push_str("</svg>\n");
    out
}

/// Top-down map: road edges in grey, the logged route dashed, driven paths
/// in colour.
pub fn trajectory(title: &str, edges: &[Vec<Point>], route: &[Point], paths: &[Series]) -> String {
    let all = || {
        edges
            .iter()
            .flatten()
            .chain(route)
            .chain(paths.iter().flat_map(|s| s.points.iter()))
    };
    let f = Frame::fit(all().map(|p| p[0]), all().map(|p| p[1])).equal_aspect();
    let mut out = String::new();
    header(&mut out, title);
    for e in edges {
        polyline(&mut out, &f, e, "#888888", 1.5, None);
    }
    polyline(&mut out, &f, route, "#000000", 1.0, Some("4 3"));
    for (i, s) in paths.iter().enumerate() {
        polyline(&mut out, &f, &s.points, color(i + 1), 2.0, None);
    }
    let mut labels = vec!["route".to_string()];
    labels.extend(paths.iter().map(|s| s.label.clone()));
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let c = if i == 0 { "#000000" } else { color(i) };
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{c}\"/>",
            W - MARGIN - 110.0,
            y - 9.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - MARGIN - 96.0,
            escape(l)
        );
    }
    out.push_str("</svg>\n");
    out
}
