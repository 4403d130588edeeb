//! Minimal hand-written SVG: data scatter, trajectory polylines, axis ticks.

use std::fmt::Write;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a [f64]>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-9);
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let half = 0.55 * span;
        Self {
            x0: cx - half,
            x1: cx + half,
            y0: cy - half,
            y1: cy + half,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (SIZE - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (SIZE - 2.0 * MARGIN)
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    step * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<(f64, String)> {
    let step = nice_step(hi - lo);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let (k0, k1) = ((lo / step - 1e-9).ceil() as i64, (hi / step + 1e-9).floor() as i64);
    (k0..=k1)
        .map(|k| {
            let v = k as f64 * step;
            (v, format!("{:.*}", decimals, v + 0.0))
        })
        .collect()
}

/// Renders 2D `data` as dots and each trajectory as a polyline ending in a ring.
pub fn render(data: &[Vec<f64>], paths: &[Vec<Vec<f64>>]) -> String {
    let frame = Frame::fit(
        data.iter()
            .map(Vec::as_slice)
            .chain(paths.iter().flatten().map(Vec::as_slice)),
    );
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, b, t) = (MARGIN, SIZE - MARGIN, SIZE - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        r - l,
        b - t
    );
    for (v, label) in ticks(frame.x0, frame.x1) {
        let x = frame.px(v);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{}" stroke="black"/>"#, b + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" font-size="11" text-anchor="middle">{label}</text>"#,
            b + 18.0
        );
    }
    for (v, label) in ticks(frame.y0, frame.y1) {
        let y = frame.py(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="black"/>"#, l - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{label}</text>"#,
            l - 8.0,
            y + 4.0
        );
    }
    for p in data {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue"/>"#,
            frame.px(p[0]),
            frame.py(p[1])
        );
    }
    for path in paths {
        let pts: Vec<String> = path
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.px(p[0]), frame.py(p[1])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        if let Some(end) = path.last() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="crimson"/>"#,
                frame.px(end[0]),
                frame.py(end[1])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
