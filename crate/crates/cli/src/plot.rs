//! Self-contained SVG line charts of the training curves.

use std::fmt::Write as _;

use reslink::optim::TrainReport;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#d62728";

struct Panel<'a> {
    title: &'a str,
    train: Vec<f64>,
    val: Vec<f64>,
}

/// Accuracy and loss per epoch, each panel with a train and a validation series.
pub fn curves_svg(report: &TrainReport) -> String {
    let rows = &report.epochs;
    let panels = [
        Panel {
            title: "accuracy",
            train: rows.iter().map(|e| e.train_acc).collect(),
            val: rows.iter().map(|e| e.val_acc).collect(),
        },
        Panel {
            title: "loss",
            train: rows.iter().map(|e| e.train_loss).collect(),
            val: rows.iter().map(|e| e.val_loss).collect(),
        },
    ];
    let width = PANEL_W * panels.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        draw_panel(&mut svg, panel, i as f64 * PANEL_W);
    }
    svg.push_str("</svg>\n");
    svg
}

fn draw_panel(svg: &mut String, panel: &Panel, x0: f64) {
    let (left, right) = (x0 + MARGIN, x0 + PANEL_W - MARGIN / 2.0);
    let (top, bottom) = (MARGIN / 2.0 + 12.0, PANEL_H - MARGIN);
    let n = panel.train.len();
    let values = panel.train.iter().chain(&panel.val).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |i: usize| {
        if n <= 1 {
            (left + right) / 2.0
        } else {
            left + (right - left) * i as f64 / (n - 1) as f64
        }
    };
    let sy = |v: f64| bottom - (bottom - top) * (v - lo) / (hi - lo);

    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        (left + right) / 2.0,
        MARGIN / 2.0,
        panel.title
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{left:.1},{top:.1} {left:.1},{bottom:.1} {right:.1},{bottom:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left,
            left - 4.0,
            y + 4.0
        );
    }
    for i in 0..n {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(i),
            bottom + 14.0,
            i + 1
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        (left + right) / 2.0,
        bottom + 30.0
    );
    for (k, (name, series, color)) in [("train", &panel.train, TRAIN_COLOR), ("val", &panel.val, VAL_COLOR)]
        .into_iter()
        .enumerate()
    {
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
        }
        let ly = top + 4.0 + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            right - 60.0,
            right - 44.0,
            right - 40.0,
            ly + 4.0
        );
    }
}
