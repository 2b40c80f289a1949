//! Dependency-free SVG emission for scatter and loss-curve plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points(points: &[(f64, f64)]) -> Frame {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in points {
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        for (lo, hi) in [(&mut f.x_min, &mut f.x_max), (&mut f.y_min, &mut f.y_max)] {
            if !lo.is_finite() || !hi.is_finite() {
                *lo = 0.0;
                *hi = 1.0;
            } else if *hi - *lo < 1e-12 {
                *lo -= 0.5;
                *hi += 0.5;
            }
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
}

fn axes(out: &mut String, x_label: &str, y_label: &str, f: &Frame) {
    let x0 = MARGIN;
    let y0 = H - MARGIN;
    let x1 = W - MARGIN;
    let y1 = MARGIN;
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        H - 12.0,
        x_label
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        H / 2.0,
        H / 2.0,
        y_label
    );
    for t in 0..=4 {
        let fx = f.x_min + (f.x_max - f.x_min) * t as f64 / 4.0;
        let fy = f.y_min + (f.y_max - f.y_min) * t as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{:.3}</text>",
            f.px(fx),
            H - MARGIN + 16.0,
            fx
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>",
            MARGIN - 6.0,
            f.py(fy) + 3.0,
            fy
        );
    }
}

/// Scatter plot of `(x, y)` points with axis labels.
pub fn scatter(points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    header(&mut out);
    if points.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\">no data</text>",
            W / 2.0,
            H / 2.0
        );
        let f = Frame::from_points(points);
        axes(&mut out, x_label, y_label, &f);
    } else {
        let f = Frame::from_points(points);
        axes(&mut out, x_label, y_label, &f);
        for &(x, y) in points {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.7\"/>",
                f.px(x),
                f.py(y)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

const SERIES_COLORS: [&str; 6] = [
    "steelblue",
    "firebrick",
    "seagreen",
    "darkorange",
    "purple",
    "gray",
];

/// One polyline per named series over a shared x column.
pub fn lines(x: &[f64], series: &[(String, Vec<f64>)], x_label: &str) -> String {
    let mut out = String::new();
    header(&mut out);
    let mut all: Vec<(f64, f64)> = Vec::new();
    for (_, ys) in series {
        for (&xv, &yv) in x.iter().zip(ys) {
            all.push((xv, yv));
        }
    }
    let f = Frame::from_points(&all);
    axes(&mut out, x_label, "value", &f);
    if all.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\">no data</text>",
            W / 2.0,
            H / 2.0
        );
    }
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut path = String::new();
        for (&xv, &yv) in x.iter().zip(ys) {
            let cmd = if path.is_empty() { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{:.2},{:.2} ", f.px(xv), f.py(yv));
        }
        if !path.is_empty() {
            let _ = writeln!(
                out,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.trim_end()
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            W - MARGIN + 4.0,
            MARGIN + 14.0 * si as f64
        );
    }
    out.push_str("</svg>\n");
    out
}
