use std::fmt::Write as _;

use super::train::DiagnosticsRow;

const W: f64 = 640.0;
const H: f64 = 260.0;
const PAD: f64 = 48.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel(out: &mut String, top: f64, title: &str, series: &[Series]) {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let span_x = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| PAD + (x - x0) / span_x * (W - 2.0 * PAD);
    let py = |y: f64| top + H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="{:.1}" font-size="14">{title}</text>"#,
        top + 20.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        top + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{y:.1}" font-size="10">{v:.3}</text>"#
        );
    }
    if x0.is_finite() {
        let _ = writeln!(
            out,
            r#"<text x="{PAD}" y="{:.1}" font-size="10">{x0}</text>"#,
            top + H - PAD + 14.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10">{x1}</text>"#,
            W - PAD - 30.0,
            top + H - PAD + 14.0
        );
    }
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            pts.join(" ")
        );
        let ly = top + PAD + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{}">{}</text>"#,
            W - PAD - 140.0,
            s.color,
            s.label
        );
    }
}

/// Two stacked line charts: evaluation success rate, and displacement
/// against the mean effective radius.
pub fn diagnostics_svg(rows: &[DiagnosticsRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"#,
        2.0 * H
    );
    let success: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.eval_success_rate.map(|v| (r.step as f64, v)))
        .collect();
    panel(
        &mut out,
        0.0,
        "evaluation success rate",
        &[Series {
            label: "success",
            color: "#1f77b4",
            points: success,
        }],
    );
    let disp = rows
        .iter()
        .map(|r| (r.step as f64, r.displacement_mean))
        .collect();
    let eta = rows
        .iter()
        .map(|r| (r.step as f64, r.eta_eff_mean))
        .collect();
    panel(
        &mut out,
        H,
        "trust region",
        &[
            Series {
                label: "|u_on - u_off|",
                color: "#d62728",
                points: disp,
            },
            Series {
                label: "eta_eff",
                color: "#2ca02c",
                points: eta,
            },
        ],
    );
    out.push_str("</svg>\n");
    out
}
