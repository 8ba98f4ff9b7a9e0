//! Minimal deterministic SVG drawing: heatmaps, log-scale curves and text.

use std::fmt::Write as _;

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue-white-red ramp over `[0, 1]`.
fn color(u: f64) -> String {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if u < 0.5 {
        let a = u / 0.5;
        (40.0 + 215.0 * a, 80.0 + 175.0 * a, 200.0 + 55.0 * a)
    } else {
        let a = (u - 0.5) / 0.5;
        (255.0 - 35.0 * a, 255.0 - 205.0 * a, 255.0 - 215.0 * a)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="monospace" font-size="{size:.0}">{}</text>"#,
            esc(s)
        );
    }

    /// `values[row][col]` drawn with time down the rows; `None` cells are grey.
    #[allow(clippy::too_many_arguments)]
    pub fn heatmap(
        &mut self,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        title: &str,
        values: &[Vec<Option<f64>>],
        range: (f64, f64),
    ) {
        self.text(x, y - 4.0, 11.0, title);
        let rows = values.len().max(1);
        let cols = values.first().map_or(1, |r| r.len().max(1));
        let (cw, ch) = (w / cols as f64, h / rows as f64);
        let span = if range.1 > range.0 { range.1 - range.0 } else { 1.0 };
        for (j, row) in values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let fill = v.map_or_else(|| "#bbbbbb".to_string(), |v| color((v - range.0) / span));
                let _ = writeln!(
                    self.body,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                    x + i as f64 * cw,
                    y + j as f64 * ch,
                    cw + 0.05,
                    ch + 0.05
                );
            }
        }
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#
        );
    }

    /// Several series on a shared log10 y axis.
    pub fn log_curves(&mut self, x: f64, y: f64, w: f64, h: f64, title: &str, series: &[(&str, Vec<f64>)]) {
        self.text(x, y - 4.0, 11.0, title);
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#
        );
        let logs: Vec<Vec<f64>> = series
            .iter()
            .map(|(_, s)| s.iter().map(|v| v.max(1e-300).log10()).collect())
            .collect();
        let finite = logs.iter().flatten().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return;
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#000000"];
        for (k, (name, pts)) in series.iter().map(|s| s.0).zip(&logs).enumerate() {
            let n = pts.len().max(2) - 1;
            let mut path = String::new();
            for (i, v) in pts.iter().enumerate() {
                let px = x + w * i as f64 / n as f64;
                let py = y + h - h * (v - lo) / span;
                let _ = write!(path, "{px:.2},{py:.2} ");
            }
            let c = palette[k % palette.len()];
            let _ = writeln!(
                self.body,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1"/>"#,
                path.trim_end()
            );
            let ly = y + 12.0 + 12.0 * k as f64;
            let _ = writeln!(
                self.body,
                r#"<text x="{:.1}" y="{ly:.1}" font-family="monospace" font-size="10" fill="{c}">{}</text>"#,
                x + w - 60.0,
                esc(name)
            );
        }
        self.text(x - 2.0, y + h + 12.0, 9.0, &format!("log10 range [{lo:.2}, {hi:.2}]"));
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}
