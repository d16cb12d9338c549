//! Standalone SVG charts written by hand: no fonts, scripts or external
//! references. Coordinates are printed with two decimals, so equal inputs
//! give equal path data.

use std::fmt::Write as _;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#444444"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str, hash: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <!-- config_hash={} -->\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        escape(hash),
        WIDTH / 2.0,
        escape(title)
    )
}

/// Data-to-pixel map of the plotting area.
struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    /// Bounds of all points, padded so a constant series still has extent.
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Axes {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(a, b) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        let pad = |r: (f64, f64)| {
            if !r.0.is_finite() {
                (0.0, 1.0)
            } else if r.1 - r.0 <= f64::EPSILON * r.0.abs().max(1.0) {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                r
            }
        };
        Axes { x: pad(x), y: pad(y) }
    }

    fn px(&self, (a, b): (f64, f64)) -> (f64, f64) {
        let fx = (a - self.x.0) / (self.x.1 - self.x.0);
        let fy = (b - self.y.0) / (self.y.1 - self.y.0);
        (
            MARGIN + fx * (WIDTH - 2.0 * MARGIN),
            HEIGHT - MARGIN - fy * (HEIGHT - 2.0 * MARGIN),
        )
    }

    fn frame(&self, xlabel: &str, ylabel: &str) -> String {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        format!(
            "<path d=\"M{l} {t} L{l} {b} L{r} {b}\" fill=\"none\" stroke=\"black\"/>\n\
             <text x=\"{l}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
             <text x=\"{r}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{t}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
            b + 14.0,
            self.x.0,
            b + 14.0,
            self.x.1,
            l - 4.0,
            self.y.0,
            l - 4.0,
            self.y.1,
            WIDTH / 2.0,
            HEIGHT - 8.0,
            escape(xlabel),
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(ylabel)
        )
    }

    fn path_data(&self, points: &[(f64, f64)]) -> String {
        let mut d = String::new();
        let mut pen_down = false;
        for &p in points {
            if !(p.0.is_finite() && p.1.is_finite()) {
                pen_down = false;
                continue;
            }
            let (x, y) = self.px(p);
            let cmd = if pen_down { 'L' } else { 'M' };
            if !d.is_empty() {
                d.push(' ');
            }
            write!(d, "{cmd}{x:.2} {y:.2}").expect("write to string");
            pen_down = true;
        }
        d
    }
}

fn legend(labels: &[&str]) -> String {
    let mut out = String::new();
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = WIDTH - MARGIN - 90.0;
        writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"3\" fill=\"{}\"/><text x=\"{}\" y=\"{y}\" font-size=\"10\">{}</text>",
            y - 4.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            escape(l)
        )
        .expect("write to string");
    }
    out
}

fn curves_svg(title: &str, xlabel: &str, ylabel: &str, curves: &[(String, Vec<(f64, f64)>)], hash: &str) -> String {
    let axes = Axes::fit(curves.iter().flat_map(|(_, p)| p.iter()));
    let mut out = header(title, hash);
    out += &axes.frame(xlabel, ylabel);
    for (i, (label, points)) in curves.iter().enumerate() {
        writeln!(
            out,
            "<path class=\"curve\" data-label=\"{}\" d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            escape(label),
            axes.path_data(points),
            PALETTE[i % PALETTE.len()]
        )
        .expect("write to string");
    }
    let labels: Vec<&str> = curves.iter().map(|(l, _)| l.as_str()).collect();
    out += &legend(&labels);
    out + "</svg>\n"
}

/// Latent trajectories in one plane, one curve per rendering variant, on
/// shared axes so coinciding runs draw identical paths.
pub fn overlay(title: &str, xlabel: &str, ylabel: &str, curves: &[(String, Vec<(f64, f64)>)], hash: &str) -> String {
    curves_svg(title, xlabel, ylabel, curves, hash)
}

/// `y` against `x` series, e.g. loss against step.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)], hash: &str) -> String {
    curves_svg(title, xlabel, ylabel, series, hash)
}

/// Vertical bars in the given order; highlighted bars are filled darker.
pub fn bar_chart(title: &str, bars: &[(String, f64, bool)], hash: &str) -> String {
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let bottom = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::min);
    let axes = Axes::fit([(0.0, bottom), (bars.len().max(1) as f64, top)].iter());
    let mut out = header(title, hash);
    out += &axes.frame("", "score");
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64;
    let (_, zero) = axes.px((0.0, 0.0));
    for (i, (label, v, on)) in bars.iter().enumerate() {
        let v = if v.is_finite() { *v } else { 0.0 };
        let (_, y) = axes.px((0.0, v));
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        writeln!(
            out,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" text-anchor=\"middle\">{}</text>",
            y.min(zero),
            slot * 0.8,
            (zero - y).abs(),
            if *on { PALETTE[0] } else { "#a8c5de" },
            x + slot * 0.4,
            HEIGHT - MARGIN + 26.0,
            escape(label)
        )
        .expect("write to string");
    }
    out + "</svg>\n"
}
