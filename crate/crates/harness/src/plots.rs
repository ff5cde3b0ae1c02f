//! Self-contained SVG charts.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 110.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Frame {
    svg: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = write!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let _ = write!(svg, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
        for k in 0..=4 {
            let v = y0 + (y1 - y0) * k as f64 / 4.0;
            let y = TOP + ph * (1.0 - k as f64 / 4.0);
            let _ = write!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
            let _ = write!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, tick(v));
        }
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, esc(x_label));
        let _ = write!(
            svg,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(y_label)
        );
        Frame { svg, x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        let span = (self.x1 - self.x0).max(1e-12);
        LEFT + (W - LEFT - RIGHT) * (x - self.x0) / span
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y1 - self.y0).max(1e-12);
        TOP + (H - TOP - BOTTOM) * (1.0 - (y - self.y0) / span)
    }

    fn x_ticks(&mut self) {
        for k in 0..=4 {
            let v = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let x = self.px(v);
            let _ = write!(self.svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, tick(v));
        }
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, n) in names.iter().enumerate() {
            let y = TOP + 8.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = write!(self.svg, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, color(i));
            let _ = write!(self.svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, esc(n));
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// One bar per label; values in `[0, y_max]`.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64], y_max: f64) -> String {
    let mut f = Frame::new(title, "", y_label, (0.0, labels.len().max(1) as f64), (0.0, y_max));
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let y = f.py(v.clamp(0.0, y_max));
        let _ = write!(
            f.svg,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{}: {v:.3}</title></rect>"#,
            slot * 0.7,
            H - BOTTOM - y,
            color(i),
            esc(label)
        );
        let cx = x + slot * 0.35;
        let _ = write!(f.svg, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.2}</text>"#, y - 4.0);
        let ly = H - BOTTOM + 12.0;
        let _ = write!(
            f.svg,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" font-size="10" transform="rotate(-35 {cx:.1} {ly:.1})">{}</text>"#,
            esc(label)
        );
    }
    f.finish()
}

/// Overlaid step histograms over shared bins.
pub fn histograms(title: &str, x_label: &str, series: &[(String, Vec<f64>)], bins: usize) -> String {
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if all.is_empty() { (0.0, 1.0) } else if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0; bins];
            for &x in v.iter().filter(|x| x.is_finite()) {
                c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut f = Frame::new(title, x_label, "count", (lo, hi), (0.0, top));
    f.x_ticks();
    for (i, c) in counts.iter().enumerate() {
        let mut d = format!("M{:.1},{:.1}", f.px(lo), f.py(0.0));
        for (b, &n) in c.iter().enumerate() {
            let (xa, xb) = (f.px(lo + width * b as f64), f.px(lo + width * (b + 1) as f64));
            let y = f.py(n as f64);
            let _ = write!(d, " L{xa:.1},{y:.1} L{xb:.1},{y:.1}");
        }
        let _ = write!(d, " L{:.1},{:.1}", f.px(hi), f.py(0.0));
        let _ = write!(f.svg, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, color(i));
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    f.legend(&names);
    f.finish()
}

/// Polylines with point markers.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], y_range: (f64, f64)) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if xs.is_empty() { (0.0, 1.0) } else if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let mut f = Frame::new(title, x_label, y_label, (lo, hi), y_range);
    f.x_ticks();
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        if !path.is_empty() {
            let _ = write!(f.svg, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, path.join(" "), color(i));
        }
        for &(x, y) in pts {
            let _ = write!(f.svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#, f.px(x), f.py(y), color(i));
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    f.legend(&names);
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg_documents() {
        let b = bar_chart("t", "y", &["a<b".into(), "c".into()], &[0.5, 1.0], 1.0);
        let h = histograms("t", "x", &[("a".into(), vec![1.0, 2.0, 2.5]), ("b".into(), vec![])], 5);
        let l = line_chart("t", "x", "y", &[("a".into(), vec![(0.0, 0.1), (1.0, 0.9)])], (0.0, 1.0));
        for s in [&b, &h, &l] {
            assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        }
        assert!(b.contains("a&lt;b") && !b.contains("a<b"));
        assert_eq!(b.matches("<rect").count(), 2 + 2);
    }
}
