//! Minimal hand-written SVG charts: line plots and overlaid step histograms.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        Self {
            x: (x0, x1),
            y: (y0 - pad, y1 + pad),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(out, r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#444444"/>"##, x1 - x0, y1 - y0);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(out, r##"<line x1="{px:.1}" y1="{y1}" x2="{px:.1}" y2="{:.1}" stroke="#444444"/>"##, y1 + 4.0);
            let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#, y1 + 17.0, tick(xv));
            let _ = writeln!(out, r##"<line x1="{:.1}" y1="{py:.1}" x2="{x0}" y2="{py:.1}" stroke="#444444"/>"##, x0 - 4.0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, x0 - 7.0, py + 4.0, tick(yv));
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (x0 + x1) / 2.0, esc(title));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, esc(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 8.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 18.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, x + 24.0, y + 4.0, esc(name));
    }
}

fn open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

/// Polylines with markers; non-finite points break the line.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let frame = Frame::new(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = open();
    frame.axes(&mut out, title, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                segments.last_mut().expect("non-empty").push((frame.px(x), frame.py(y)));
            } else if !segments.last().expect("non-empty").is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.8"/>"#, pts.join(" "));
            for (x, y) in seg {
                let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{c}"/>"#);
            }
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Overlaid step outlines of densities over shared bin edges.
pub fn histogram_chart(title: &str, xlabel: &str, edges: &[f64], hists: &[(String, Vec<usize>)]) -> String {
    let dens: Vec<Vec<f64>> = hists
        .iter()
        .map(|(_, c)| {
            let n = c.iter().sum::<usize>().max(1) as f64;
            c.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let ymax = dens.iter().flatten().copied().fold(0.0, f64::max);
    let x0 = edges.first().copied().unwrap_or(0.0);
    let x1 = edges.last().copied().unwrap_or(1.0);
    let frame = Frame::new([(x0, 0.0), (x1, ymax)].into_iter());
    let mut out = open();
    frame.axes(&mut out, title, xlabel, "fraction of samples");
    for (i, d) in dens.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let mut pts = vec![format!("{:.1},{:.1}", frame.px(x0), frame.py(0.0))];
        for (b, &v) in d.iter().enumerate() {
            if b + 1 >= edges.len() {
                break;
            }
            pts.push(format!("{:.1},{:.1}", frame.px(edges[b]), frame.py(v)));
            pts.push(format!("{:.1},{:.1}", frame.px(edges[b + 1]), frame.py(v)));
        }
        pts.push(format!("{:.1},{:.1}", frame.px(x1), frame.py(0.0)));
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="{c}" fill-opacity="0.15" stroke="{c}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
    legend(&mut out, &hists.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart(
            "t <1>",
            "x",
            "y",
            &[Series {
                name: "a&b".into(),
                points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("t &lt;1&gt;") && s.contains("a&amp;b"));
        assert_eq!(s.matches("<polyline").count(), 2);
        let h = histogram_chart("h", "x", &[0.0, 1.0, 2.0], &[("id".into(), vec![1, 3]), ("ood".into(), vec![0, 0])]);
        assert_eq!(h.matches("<polyline").count(), 2);
    }
}
