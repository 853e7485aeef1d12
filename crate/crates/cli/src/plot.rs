//! Minimal SVG bar and line charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Nice-ish tick step for a range.
fn step(span: f64) -> f64 {
    if span <= 0.0 || !span.is_finite() {
        return 1.0;
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    }
}

struct Frame {
    lo: f64,
    hi: f64,
    svg: String,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, lo: f64, hi: f64) -> Frame {
        let (lo, hi) = if hi - lo < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
        let st = step(hi - lo);
        let (lo, hi) = ((lo / st).floor() * st, (hi / st).ceil() * st);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        let mut f = Frame { lo, hi, svg };
        let mut t = lo;
        while t <= hi + st * 1e-6 {
            let y = f.y(t);
            let _ = writeln!(
                f.svg,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
            t += st;
        }
        let zero = f.y(0.0f64.clamp(lo, hi));
        let _ = writeln!(
            f.svg,
            r#"<line x1="{LEFT}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#,
            W - RIGHT,
            H - BOTTOM
        );
        let _ = writeln!(
            f.svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (W - LEFT - RIGHT) / 2.0,
            H - 14.0,
            esc(x_label)
        );
        let _ = writeln!(
            f.svg,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + (H - TOP - BOTTOM) / 2.0,
            TOP + (H - TOP - BOTTOM) / 2.0,
            esc(y_label)
        );
        f
    }

    fn y(&self, v: f64) -> f64 {
        let frac = (v - self.lo) / (self.hi - self.lo);
        H - BOTTOM - frac * (H - TOP - BOTTOM)
    }

    fn x_label(&mut self, x: f64, label: &str) {
        let _ = writeln!(
            self.svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            esc(label)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Vertical bars, one per label; `highlight` is drawn in a second colour.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)], highlight: Option<usize>) -> String {
    let (lo, hi) = bounds(bars.iter().map(|b| b.1));
    let mut f = Frame::new(title, x_label, y_label, lo, hi);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64;
        let (y0, y1) = (f.y(0.0f64.clamp(f.lo, f.hi)), f.y(*v));
        let color = if highlight == Some(i) { COLORS[1] } else { COLORS[0] };
        let _ = writeln!(
            f.svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>{}: {v}</title></rect>"#,
            x + slot * 0.15,
            y0.min(y1),
            slot * 0.7,
            (y1 - y0).abs(),
            esc(label)
        );
        f.x_label(x + slot / 2.0, label);
    }
    f.finish()
}

/// One polyline per series over shared categorical x positions.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut f = Frame::new(title, x_label, y_label, lo, hi);
    let slot = (W - LEFT - RIGHT) / xs.len().max(1) as f64;
    let px = |i: usize| LEFT + slot * (i as f64 + 0.5);
    for (i, x) in xs.iter().enumerate() {
        f.x_label(px(i), x);
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| format!("{:.1},{:.1}", px(i), f.y(y)))
            .collect();
        let _ = writeln!(f.svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted point");
            let _ = writeln!(f.svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 4.0 + 16.0 * k as f64;
        let _ = writeln!(
            f.svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT - 90.0,
            ly,
            W - RIGHT - 75.0,
            ly + 9.0,
            esc(name)
        );
    }
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_has_one_rect_per_bar() {
        let bars: Vec<(String, f64)> = (0..4).map(|i| (format!("L{i}"), i as f64 * 0.1 - 0.1)).collect();
        let svg = bar_chart("AIE", "layer", "effect", &bars, Some(3));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<title>").count(), 4);
        assert_eq!(svg.matches(COLORS[1]).count(), 1);
    }

    #[test]
    fn line_chart_skips_missing_points() {
        let xs: Vec<String> = ["16", "64", "256"].iter().map(|s| s.to_string()).collect();
        let svg = line_chart("dims", "d_c", "score", &xs, &[("SS", vec![50.0, f64::NAN, 75.0]), ("DS", vec![100.0; 3])]);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn flat_data_still_has_a_range() {
        let svg = bar_chart("t", "x", "y", &[("a".into(), 0.0)], None);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn ticks() {
        assert_eq!(step(1.0), 0.2);
        assert_eq!(step(100.0), 20.0);
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(-0.0), "0");
    }
}
