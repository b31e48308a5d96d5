//! Minimal, byte-deterministic SVG plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        W / 2.0,
        escape(title),
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(y_label),
    );
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let pad = (hi - lo) * 0.05;
        Self {
            lo: lo - pad,
            hi: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn y_axis(out: &mut String, s: &Scale) {
    for i in 0..=4 {
        let v = s.lo + (s.hi - s.lo) * i as f64 / 4.0;
        let y = s.map(v);
        let _ = writeln!(
            out,
            "<line x1=\"{LEFT}\" x2=\"{:.1}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Box plot (quartiles, 1.5 IQR whiskers, every point overlaid) per group.
pub fn box_plot(groups: &[(String, Vec<f64>)], title: &str, y_label: &str) -> String {
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    if all.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = Scale::new(lo, hi, H - BOTTOM, TOP);
    y_axis(&mut out, &s);
    let slot = (W - LEFT - RIGHT) / groups.len() as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let cx = LEFT + slot * (g as f64 + 0.5);
        let colour = PALETTE[g % PALETTE.len()];
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let _ = writeln!(
            out,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - BOTTOM + 18.0,
            escape(label)
        );
        if v.is_empty() {
            continue;
        }
        let (q1, q2, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let lo_w = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
        let hi_w = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
        let bw = (slot * 0.35).min(60.0);
        let _ = writeln!(
            out,
            "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"{colour}\"/>\n\
             <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{colour}\" fill-opacity=\"0.25\" stroke=\"{colour}\"/>\n\
             <line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"{colour}\" stroke-width=\"2\"/>",
            s.map(lo_w),
            s.map(hi_w),
            cx - bw / 2.0,
            s.map(q3),
            bw,
            (s.map(q1) - s.map(q3)).max(0.5),
            cx - bw / 2.0,
            cx + bw / 2.0,
            s.map(q2),
            s.map(q2),
        );
        for (i, x) in v.iter().enumerate() {
            let jitter = ((i * 37 % 11) as f64 / 10.0 - 0.5) * bw * 0.8;
            let _ = writeln!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{colour}\"/>",
                cx + jitter,
                s.map(*x)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of named `(x, y)` series; non-finite points break the line.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], title: &str, x_label: &str, y_label: &str, log_y: bool) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    let tr = |y: f64| if log_y { y.max(1e-30).log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, p)| p.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (x, tr(y)))
        .collect();
    if pts.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
    let xs = Scale::new(fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0), LEFT, W - RIGHT);
    let ys = Scale::new(fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1), H - BOTTOM, TOP);
    y_axis(&mut out, &ys);
    for i in 0..=4 {
        let v = xs.lo + (xs.hi - xs.lo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            xs.map(v),
            H - BOTTOM + 16.0,
            tick(v)
        );
    }
    for (n, (label, p)) in series.iter().enumerate() {
        let colour = PALETTE[n % PALETTE.len()];
        let mut d = String::new();
        let mut pen_up = true;
        for &(x, y) in p {
            if !(x.is_finite() && y.is_finite()) {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.1},{:.1} ", if pen_up { "M" } else { "L" }, xs.map(x), ys.map(tr(y)));
            pen_up = false;
        }
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{colour}\">{}</text>",
            d.trim_end(),
            LEFT + 8.0,
            TOP + 14.0 * (n as f64 + 1.0),
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Filled level map of `values[i][j]` over `a[i]` (horizontal) and `b[j]`
/// (vertical), with `levels` equal-width bands and labelled markers.
pub fn level_map(
    a: &[f64],
    b: &[f64],
    values: &[Vec<f64>],
    levels: usize,
    title: &str,
    markers: &[(&str, f64, f64)],
) -> String {
    let mut out = String::new();
    header(&mut out, title, "a", "b");
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = levels.max(2);
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        out.push_str("</svg>\n");
        return out;
    }
    let plot_w = W - LEFT - RIGHT - 60.0;
    let plot_h = H - TOP - BOTTOM;
    let (cw, ch) = (plot_w / na as f64, plot_h / nb as f64);
    for (i, row) in values.iter().enumerate().take(na) {
        for (j, &v) in row.iter().enumerate().take(nb) {
            let fill = if v.is_finite() && hi > lo {
                let band = (((v - lo) / (hi - lo)) * levels as f64).floor().min(levels as f64 - 1.0);
                let t = band / (levels - 1) as f64;
                let r = (40.0 + 215.0 * t) as u8;
                let g = (60.0 + 120.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
                let bl = (200.0 - 170.0 * t) as u8;
                format!("#{r:02x}{g:02x}{bl:02x}")
            } else if v.is_finite() {
                "#888888".to_string()
            } else {
                "#000000".to_string()
            };
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                LEFT + i as f64 * cw,
                TOP + plot_h - (j + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    let (a0, a1) = (a[0], a[na - 1]);
    let (b0, b1) = (b[0], b[nb - 1]);
    let px = |x: f64| LEFT + (x - a0) / (a1 - a0) * (plot_w - cw) + cw / 2.0;
    let py = |y: f64| TOP + plot_h - ((y - b0) / (b1 - b0) * (plot_h - ch) + ch / 2.0);
    for (label, x, y) in markers {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"white\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            px(*x),
            py(*y),
            px(*x) + 6.0,
            py(*y) - 6.0,
            escape(label)
        );
    }
    for (v, x) in [(a0, LEFT), (a1, LEFT + plot_w)] {
        let _ = writeln!(out, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - BOTTOM + 16.0, tick(v));
    }
    for (v, y) in [(b0, TOP + plot_h), (b1, TOP)] {
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\">{}</text>", LEFT - 6.0, tick(v));
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\">min {}</text>\n<text x=\"{:.1}\" y=\"{:.1}\">max {}</text>",
        W - RIGHT - 55.0,
        H - BOTTOM,
        tick(lo),
        W - RIGHT - 55.0,
        TOP + 10.0,
        tick(hi)
    );
    out.push_str("</svg>\n");
    out
}
