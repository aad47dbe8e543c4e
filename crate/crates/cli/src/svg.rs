//! Loss curves written as standalone SVG.

use std::fmt::Write;

use plmap_core::TrainLog;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn path(points: &[(f64, f64)]) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
    }
    d
}

/// Training and validation MSE per epoch on a log10 axis.
pub fn loss_curve(log: &TrainLog, title: &str) -> String {
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("train", "#1f77b4", log.epochs.iter().map(|e| e.train_mse).collect()),
        ("val", "#ff7f0e", log.epochs.iter().map(|e| e.val_mse).collect()),
    ];
    let finite = series.iter().flat_map(|s| s.2.iter()).filter(|v| v.is_finite() && **v > 0.0);
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.log10()), b.max(v.log10())));
    if !lo.is_finite() {
        (lo, hi) = (-4.0, 0.0);
    }
    lo = lo.floor();
    hi = hi.ceil().max(lo + 1.0);
    let n = log.epochs.len().max(2) as f64;
    let px = |i: usize| LEFT + (W - LEFT - RIGHT) * i as f64 / (n - 1.0);
    let py = |v: f64| TOP + (H - TOP - BOTTOM) * (hi - v.log10()) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#);
    for k in lo as i32..=hi as i32 {
        let y = py(10f64.powi(k));
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{k}</text>"#, x0 - 6.0, y + 4.0);
    }
    let step = (log.epochs.len() / 10).max(1);
    for i in (0..log.epochs.len()).step_by(step) {
        let x = px(i);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 18.0, log.epochs[i].epoch);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, (x0 + x1) / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">MSE (normalized)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (name, color, values)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite() && **v > 0.0)
            .map(|(i, v)| (px(i), py(*v)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path(&pts));
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 - 80.0, x1 - 60.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, x1 - 55.0, ly + 4.0);
    }
    if log.epochs.get(log.best_epoch).is_some() {
        let x = px(log.best_epoch);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="#888" stroke-dasharray="4 3"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
