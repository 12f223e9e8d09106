//! Minimal hand-written SVG plots. Output depends only on the input values,
//! with numbers printed at fixed precision.

use std::fmt::Write;

use mvpnav_core::harness::{DeploymentReport, TradeoffPoint};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut out = String::new();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(title)
        )
        .unwrap();
        Self { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        writeln!(
            self.out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#
        )
        .unwrap();
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        )
        .unwrap();
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        writeln!(
            self.out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        )
        .unwrap();
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let (x0, y0, x1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT);
        self.line(x0, y0, x1, y0, "black");
        self.line(x0, TOP, x0, y0, "black");
        self.text((x0 + x1) / 2.0, HEIGHT - 15.0, "middle", x_label);
        writeln!(
            self.out,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            (TOP + y0) / 2.0,
            (TOP + y0) / 2.0,
            escape(y_label)
        )
        .unwrap();
    }

    /// Horizontal grid and tick labels for a `[0, 1]` y axis.
    fn unit_y_ticks(&mut self) {
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = y_unit(v);
            self.line(LEFT - 4.0, y, LEFT, y, "black");
            if k > 0 {
                self.line(LEFT, y, WIDTH - RIGHT, y, "#dddddd");
            }
            self.text(LEFT - 8.0, y + 4.0, "end", &format!("{v:.1}"));
        }
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = WIDTH - RIGHT + 15.0;
        for (k, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 10.0 + 20.0 * k as f64;
            self.rect(x, y - 10.0, 12.0, 12.0, color);
            self.text(x + 18.0, y, "start", label);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn y_unit(v: f64) -> f64 {
    let y0 = HEIGHT - BOTTOM;
    y0 - v.clamp(0.0, 1.0) * (y0 - TOP)
}

fn unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Grouped bars: one group per traversal, one bar per variant, with
/// one-standard-deviation whiskers.
pub fn success_by_condition(report: &DeploymentReport) -> String {
    let traversals = unique(report.rows.iter().map(|r| r.traversal.as_str()));
    let variants = unique(report.rows.iter().map(|r| r.variant.as_str()));
    let mut c = Canvas::new("Deployment success rate by condition");
    c.unit_y_ticks();
    c.axes("Deployment traversal", "Success rate");
    let group_w = (WIDTH - RIGHT - LEFT) / traversals.len().max(1) as f64;
    let bar_w = group_w * 0.8 / variants.len().max(1) as f64;
    for (ti, t) in traversals.iter().enumerate() {
        let gx = LEFT + group_w * ti as f64 + group_w * 0.1;
        c.text(gx + group_w * 0.4, HEIGHT - BOTTOM + 16.0, "middle", t);
        for (vi, v) in variants.iter().enumerate() {
            let Some(r) = report.get(v, t) else { continue };
            let color = PALETTE[vi % PALETTE.len()];
            let x = gx + bar_w * vi as f64;
            let (mean, std) = (r.mean(), r.std());
            c.rect(
                x,
                y_unit(mean),
                bar_w * 0.9,
                y_unit(0.0) - y_unit(mean),
                color,
            );
            let cx = x + bar_w * 0.45;
            c.line(cx, y_unit(mean - std), cx, y_unit(mean + std), "black");
        }
    }
    let legend: Vec<(String, &str)> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| (v.to_string(), PALETTE[i % PALETTE.len()]))
        .collect();
    c.legend(&legend);
    c.finish()
}

/// Success rate against measured trajectory RMSE on a log axis. Points with
/// zero RMSE sit on the left edge.
pub fn tradeoff_curve(points: &[TradeoffPoint]) -> String {
    let positive: Vec<f64> = points.iter().map(|p| p.rmse).filter(|&r| r > 0.0).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo_dec, hi_dec) = if positive.is_empty() {
        (-1.0, 1.0)
    } else {
        let (a, b) = (lo.log10().floor(), hi.log10().ceil());
        if b > a {
            (a, b)
        } else {
            (a, a + 1.0)
        }
    };
    let x_of = |rmse: f64| {
        let d = if rmse > 0.0 {
            rmse.log10().clamp(lo_dec, hi_dec)
        } else {
            lo_dec
        };
        LEFT + (d - lo_dec) / (hi_dec - lo_dec) * (WIDTH - RIGHT - LEFT)
    };
    let mut c = Canvas::new("Navigation success vs. motion estimation precision");
    c.unit_y_ticks();
    c.axes("Trajectory RMSE (m, log scale)", "Success rate");
    let mut dec = lo_dec;
    while dec <= hi_dec + 1e-9 {
        let x = LEFT + (dec - lo_dec) / (hi_dec - lo_dec) * (WIDTH - RIGHT - LEFT);
        c.line(x, HEIGHT - BOTTOM, x, HEIGHT - BOTTOM + 4.0, "black");
        c.text(
            x,
            HEIGHT - BOTTOM + 16.0,
            "middle",
            &format!("1e{}", dec as i64),
        );
        dec += 1.0;
    }
    let color = PALETTE[0];
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x_of(p.rmse), y_unit(p.success_rate)))
        .collect();
    writeln!(
        c.out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        path.join(" ")
    )
    .unwrap();
    for p in points {
        let (x, y) = (x_of(p.rmse), y_unit(p.success_rate));
        c.line(
            x,
            y_unit(p.success_rate - p.stderr),
            x,
            y_unit(p.success_rate + p.stderr),
            "black",
        );
        writeln!(
            c.out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#
        )
        .unwrap();
        c.text(x + 6.0, y - 6.0, "start", &format!("σ={}", p.sigma));
    }
    c.legend(&[("MVP-VO".to_string(), color)]);
    c.finish()
}
