//! Minimal deterministic SVG line charts for the report curves: per-layer
//! retention (origin vs per-budget), the cumulative RTR distribution, and
//! the similarity CDF. Pure string assembly, no drawing dependencies.

use std::path::Path;

use crate::error::{CliError, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 7] =
    ["#444444", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    /// (x, y) points in data coordinates.
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Chart {
    pub fn render(&self) -> String {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
        if !xmin.is_finite() {
            xmin = 0.0;
            xmax = 1.0;
            ymin = 0.0;
            ymax = 1.0;
        }
        if (xmax - xmin).abs() < 1e-12 {
            xmax = xmin + 1.0;
        }
        if (ymax - ymin).abs() < 1e-12 {
            ymax = ymin + 1.0;
        }
        let px = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| HEIGHT - MARGIN - (y - ymin) / (ymax - ymin) * (HEIGHT - 2.0 * MARGIN);

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));
        // Axes.
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            r = WIDTH - MARGIN,
            t = MARGIN,
            b = HEIGHT - MARGIN
        ));
        for frac in [0.0, 0.5, 1.0] {
            let xv = xmin + frac * (xmax - xmin);
            let yv = ymin + frac * (ymax - ymin);
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{:.3}</text>\n",
                px(xv),
                HEIGHT - MARGIN + 14.0,
                xv
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n",
                MARGIN - 6.0,
                py(yv) + 3.0,
                yv
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            HEIGHT - 8.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        ));
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> =
                s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
                WIDTH - MARGIN + 4.0,
                MARGIN + 12.0 * i as f64,
                escape(&s.label)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.render())
            .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))
    }
}

/// Empirical CDF as a step-ish polyline over sorted values.
pub fn cdf_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut points = Vec::with_capacity(n + 1);
    for (i, v) in sorted.iter().enumerate() {
        points.push((*v, i as f64 / n as f64));
        points.push((*v, (i + 1) as f64 / n as f64));
    }
    points
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_valid_svg_deterministically() {
        let chart = Chart {
            title: "test".into(),
            x_label: "layer".into(),
            y_label: "retention".into(),
            series: vec![Series {
                label: "origin".into(),
                points: vec![(1.0, 0.9), (2.0, 0.6), (3.0, 0.4)],
            }],
        };
        let a = chart.render();
        let b = chart.render();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("polyline"));
    }

    #[test]
    fn empty_series_still_render() {
        let chart = Chart {
            title: "empty".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![],
        };
        let svg = chart.render();
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn cdf_points_are_monotone() {
        let pts = cdf_points(&[0.3, 0.1, 0.9, 0.1]);
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 - 1e-12);
            assert!(w[1].1 >= w[0].1 - 1e-12);
        }
        assert_eq!(pts.last().unwrap().1, 1.0);
    }
}
