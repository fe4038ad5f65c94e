//! Minimal SVG writers for heatmaps, line charts and scatter plots. Every
//! figure is also written as CSV elsewhere, so these favour legibility over
//! polish.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear blue-white-red ramp for `t` in [-1, 1].
fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("rgb({},{},{})", r as u8, g as u8, b as u8)
}

/// White-to-dark ramp for `t` in [0, 1].
fn sequential(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let v = (255.0 * (1.0 - t)) as u8;
    let b = (255.0 * (1.0 - 0.5 * t)) as u8;
    format!("rgb({v},{v},{b})")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// `values[r][c]` drawn row `r` top to bottom. `diverge` centres the colour
/// scale on zero.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>], diverge: bool) -> String {
    let mut s = header(title);
    let rows = values.len().max(1);
    let cols = values.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
    let (cw, ch) = ((W - 2.0 * MARGIN) / cols as f64, (H - 2.0 * MARGIN) / rows as f64);
    let finite = values.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let amax = lo.abs().max(hi.abs()).max(1e-12);
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let fill = if !v.is_finite() {
                "rgb(200,200,200)".to_string()
            } else if diverge {
                diverging(v / amax)
            } else {
                sequential((v - lo) / span)
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"><title>{v}</title></rect>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                cw + 0.1,
                ch + 0.1
            );
        }
    }
    let every = |n: usize| (n / 12).max(1);
    for (r, l) in row_labels.iter().enumerate().step_by(every(row_labels.len())) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            MARGIN + (r as f64 + 0.5) * ch + 4.0,
            escape(l)
        );
    }
    for (c, l) in col_labels.iter().enumerate().step_by(every(col_labels.len())) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN + (c as f64 + 0.5) * cw,
            H - MARGIN + 14.0,
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    (x0, x1, y0, y1)
}

fn axes(s: &mut String, (x0, x1, y0, y1): (f64, f64, f64, f64), xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, x, y, anchor) in [
        (x0, MARGIN, H - MARGIN + 14.0, "start"),
        (x1, W - MARGIN, H - MARGIN + 14.0, "end"),
        (y0, MARGIN - 4.0, H - MARGIN, "end"),
        (y1, MARGIN - 4.0, MARGIN + 4.0, "end"),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
}

fn project((x0, x1, y0, y1): (f64, f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
    (
        MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN),
        H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN),
    )
}

/// One polyline per named series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = header(title);
    let b = bounds(series.iter().flat_map(|(_, pts)| pts.iter().copied()));
    axes(&mut s, b, xlabel, ylabel);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = project(b, x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN + 4.0 - 120.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Points coloured by `group` and labelled with `label`.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64, usize, String)]) -> String {
    let mut s = header(title);
    let b = bounds(points.iter().map(|p| (p.0, p.1)));
    axes(&mut s, b, xlabel, ylabel);
    for (x, y, group, label) in points {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let (px, py) = project(b, *x, *y);
        let color = PALETTE[group % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"><title>{}</title></circle>"#,
            escape(label)
        );
        if points.len() <= 64 {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#, px + 4.0, py - 4.0, escape(label));
        }
    }
    s.push_str("</svg>\n");
    s
}
