//! Minimal native SVG: line charts with error bands, and bar panels.

use std::fmt::Write;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const POS_FILL: &str = "#4878a8";
const NEG_FILL: &str = "#c0392b";

pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Half-width of the shaded band around `y`.
    pub band: Vec<f64>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

pub struct BarPanel {
    pub title: String,
    pub atoms: Vec<f64>,
    pub masses: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.0e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|f| f * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x_lo) / (self.x_hi - self.x_lo) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y_lo) / (self.y_hi - self.y_lo) * self.height
    }
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let d = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - d, hi + d)
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let (w, h) = (900.0, 560.0);
        let legend_w = 190.0;
        let tf = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };

        let mut x_lo = f64::INFINITY;
        let mut x_hi = f64::NEG_INFINITY;
        let mut y_lo = f64::INFINITY;
        let mut y_hi = f64::NEG_INFINITY;
        for s in &self.series {
            for i in 0..s.x.len() {
                x_lo = x_lo.min(s.x[i]);
                x_hi = x_hi.max(s.x[i]);
                let (a, b) = (s.y[i] - s.band[i], s.y[i] + s.band[i]);
                let a = if self.log_y && a <= 0.0 { s.y[i] } else { a };
                if a.is_finite() && (!self.log_y || a > 0.0) {
                    y_lo = y_lo.min(tf(a));
                }
                if b.is_finite() && (!self.log_y || b > 0.0) {
                    y_hi = y_hi.max(tf(b));
                }
            }
        }
        if !x_lo.is_finite() {
            (x_lo, x_hi) = (0.0, 1.0);
        }
        if !y_lo.is_finite() || !y_hi.is_finite() {
            (y_lo, y_hi) = (0.0, 1.0);
        }
        if self.log_y {
            (y_lo, y_hi) = (y_lo.floor(), y_hi.ceil());
        } else {
            y_lo = y_lo.min(0.0);
        }
        let (x_lo, x_hi) = pad_range(x_lo, x_hi);
        let (y_lo, y_hi) = pad_range(y_lo, y_hi);
        let f = Frame {
            left: 80.0,
            top: 50.0,
            width: w - 80.0 - legend_w - 20.0,
            height: h - 50.0 - 70.0,
            x_lo,
            x_hi,
            y_lo,
            y_hi,
        };

        let mut out = String::new();
        header(&mut out, w, h);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="28" text-anchor="middle" font-size="17">{}</text>"#,
            f.left + f.width / 2.0,
            escape(&self.title)
        );
        axes(&mut out, &f);
        let integer_x = self.series.iter().all(|s| s.x.iter().all(|v| v.fract() == 0.0));
        for t in nice_ticks(x_lo, x_hi, 8) {
            if !integer_x || t.fract() == 0.0 {
                x_tick(&mut out, &f, t, &tick_label(t));
            }
        }
        let y_ticks: Vec<(f64, String)> = if self.log_y {
            let minor: &[f64] = if y_hi - y_lo <= 2.0 { &[1.0, 2.0, 5.0] } else { &[1.0] };
            (y_lo as i64..=y_hi as i64)
                .flat_map(|e| minor.iter().map(move |&c| (e, c)))
                .map(|(e, c)| (e as f64 + c.log10(), tick_label(c * 10f64.powi(e as i32))))
                .filter(|(t, _)| *t <= y_hi + 1e-12)
                .collect()
        } else {
            nice_ticks(y_lo, y_hi, 6).into_iter().map(|t| (t, tick_label(t))).collect()
        };
        for (t, label) in y_ticks {
            y_tick(&mut out, &f, t, &label);
        }
        axis_labels(&mut out, &f, &self.x_label, &self.y_label);

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut upper = Vec::new();
            let mut lower = Vec::new();
            let mut line = Vec::new();
            for j in 0..s.x.len() {
                if !s.y[j].is_finite() || (self.log_y && s.y[j] <= 0.0) {
                    continue;
                }
                let lo = s.y[j] - s.band[j];
                let lo = if self.log_y && lo <= 0.0 { s.y[j] } else { lo };
                let px = f.px(s.x[j]);
                line.push(format!("{:.2},{:.2}", px, f.py(tf(s.y[j]))));
                upper.push(format!("{:.2},{:.2}", px, f.py(tf(s.y[j] + s.band[j]))));
                lower.push(format!("{:.2},{:.2}", px, f.py(tf(lo))));
            }
            lower.reverse();
            if s.band.iter().any(|b| *b > 0.0) {
                upper.extend(lower);
                let _ = writeln!(
                    out,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                    upper.join(" ")
                );
            }
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                line.join(" ")
            );
            let ly = f.top + 10.0 + 20.0 * i as f64;
            let lx = f.left + f.width + 20.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-size="12">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Bar panels laid out in a row; negative masses get their own fill and class.
pub fn bar_panels(title: &str, panels: &[BarPanel]) -> String {
    let pw = 260.0;
    let ph = 240.0;
    let w = 30.0 + pw * panels.len().max(1) as f64;
    let h = ph + 90.0;
    let mut y_lo: f64 = 0.0;
    let mut y_hi: f64 = 0.0;
    for p in panels {
        for &v in &p.masses {
            y_lo = y_lo.min(v);
            y_hi = y_hi.max(v);
        }
    }
    let (y_lo, y_hi) = pad_range(y_lo * 1.05, y_hi * 1.05);

    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let m = p.atoms.len().max(1);
        let f = Frame {
            left: 30.0 + pw * i as f64 + 45.0,
            top: 55.0,
            width: pw - 65.0,
            height: ph - 40.0,
            x_lo: -0.5,
            x_hi: m as f64 - 0.5,
            y_lo,
            y_hi,
        };
        let _ = writeln!(
            out,
            r#"<text x="{}" y="47" text-anchor="middle" font-size="13">{}</text>"#,
            f.left + f.width / 2.0,
            escape(&p.title)
        );
        axes(&mut out, &f);
        for t in nice_ticks(y_lo, y_hi, 5) {
            y_tick(&mut out, &f, t, &tick_label(t));
        }
        let stride = (m - 1).div_ceil(4).max(1);
        for (j, z) in p.atoms.iter().enumerate() {
            if j % stride == 0 {
                x_tick(&mut out, &f, j as f64, &format!("{z:.1}"));
            }
        }
        let zero = f.py(0.0);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="#444" stroke-width="0.8"/>"##,
            f.left,
            f.left + f.width
        );
        let bw = f.width / m as f64 * 0.8;
        for (j, &v) in p.masses.iter().enumerate() {
            let cx = f.px(j as f64);
            let top = f.py(v.max(0.0));
            let height = (f.py(v.min(0.0)) - top).abs();
            let (class, fill, extra) = if v < 0.0 {
                ("neg", NEG_FILL, r##" stroke="#7b241c" stroke-dasharray="3,2""##)
            } else {
                ("pos", POS_FILL, "")
            };
            let _ = writeln!(
                out,
                r#"<rect class="{class}" x="{:.2}" y="{top:.2}" width="{bw:.2}" height="{height:.2}" fill="{fill}"{extra}><title>z={} mass={v:.6}</title></rect>"#,
                cx - bw / 2.0,
                tick_label(p.atoms[j])
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
}

fn axes(out: &mut String, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black" stroke-width="1"/>"#,
        f.left, f.top, f.width, f.height
    );
}

fn x_tick(out: &mut String, f: &Frame, t: f64, label: &str) {
    let x = f.px(t);
    let y = f.top + f.height;
    let _ = writeln!(
        out,
        r#"<line x1="{x:.2}" y1="{y}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
        y + 5.0,
        y + 18.0,
        escape(label)
    );
}

fn y_tick(out: &mut String, f: &Frame, t: f64, label: &str) {
    let y = f.py(t);
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"##,
        f.left,
        f.left + f.width,
        f.left - 6.0,
        y + 4.0,
        escape(label)
    );
}

fn axis_labels(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        f.left + f.width / 2.0,
        f.top + f.height + 40.0,
        escape(x_label)
    );
    let cy = f.top + f.height / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="22" y="{cy}" text-anchor="middle" font-size="13" transform="rotate(-90 22 {cy})">{}</text>"#,
        escape(y_label)
    );
}
