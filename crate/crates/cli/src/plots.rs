//! Self-contained SVG plots for the evaluation report: error-density
//! histogram, median-error-vs-displacement curve, and per-context bars.

use std::fmt::Write as _;

use semloc_core::metrics::{
    median_error_by_displacement, EvalRecord, MetricsReport, ERROR_HISTOGRAM_BIN_M,
};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_B: f64 = 48.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 20.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let y0 = HEIGHT - MARGIN_B;
    let x1 = WIDTH - MARGIN_R;
    let y1 = MARGIN_T;
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn plot_x(frac: f64) -> f64 {
    MARGIN_L + frac * (WIDTH - MARGIN_L - MARGIN_R)
}

fn plot_y(frac: f64) -> f64 {
    (HEIGHT - MARGIN_B) - frac * (HEIGHT - MARGIN_B - MARGIN_T)
}

/// Histogram of fine-stage position errors (0.25 m bins plus overflow).
pub fn error_histogram_svg(report: &MetricsReport) -> String {
    let hist = &report.overall.error_histogram;
    let total: usize = hist.iter().sum();
    let max = hist.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut out = svg_open("Position error distribution");
    axes(&mut out, "error (m)", "samples");
    let n = hist.len();
    for (i, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x = plot_x(i as f64 / n as f64);
        let w = (WIDTH - MARGIN_L - MARGIN_R) / n as f64 - 1.0;
        let h = (count as f64 / max) * (HEIGHT - MARGIN_B - MARGIN_T);
        let y = (HEIGHT - MARGIN_B) - h;
        let _ = write!(
            out,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n"
        );
    }
    for meters in [0usize, 2, 4, 6, 8, 10] {
        let bin = meters as f64 / ERROR_HISTOGRAM_BIN_M;
        let x = plot_x(bin / n as f64);
        let _ = write!(
            out,
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{meters}</text>\n",
            HEIGHT - MARGIN_B + 16.0
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">n = {total}</text>\n</svg>\n",
        WIDTH - MARGIN_R,
        MARGIN_T + 14.0
    );
    out
}

/// Median position error per spawn-displacement bin.
pub fn error_vs_displacement_svg(records: &[EvalRecord], bin_width: f64) -> String {
    let rows = median_error_by_displacement(records, bin_width, 10);
    let mut out = svg_open("Median error vs spawn displacement");
    axes(&mut out, "displacement from map center (m)", "median error (m)");
    if rows.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let max_x = rows.iter().map(|r| r.0).fold(0.0, f64::max) + bin_width;
    let max_y = rows.iter().map(|r| r.1).fold(0.0, f64::max).max(0.5) * 1.2;
    let mut path = String::new();
    for (i, (x, median, _)) in rows.iter().enumerate() {
        let px = plot_x(x / max_x);
        let py = plot_y(median / max_y);
        let _ = write!(path, "{}{px:.1},{py:.1} ", if i == 0 { "M" } else { "L" });
        let _ = write!(
            out,
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#a84848\"/>\n"
        );
    }
    let _ = write!(out, "<path d=\"{path}\" stroke=\"#a84848\" fill=\"none\"/>\n");
    for frac in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.0}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>\n",
            plot_x(frac),
            HEIGHT - MARGIN_B + 16.0,
            frac * max_x,
            MARGIN_L - 6.0,
            plot_y(frac) + 4.0,
            frac * max_y
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Coarse accuracy and recall per operating context.
pub fn context_bars_svg(report: &MetricsReport) -> String {
    let mut out = svg_open("Accuracy by operating context");
    axes(&mut out, "context", "fraction");
    let contexts: Vec<(&String, _)> = report.per_context.iter().collect();
    if contexts.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let group_w = (WIDTH - MARGIN_L - MARGIN_R) / contexts.len() as f64;
    let colors = ["#4878a8", "#6aa84f", "#a84848"];
    let labels = ["top 1x1", "top 3x3", "recall@1m"];
    for (gi, (name, group)) in contexts.iter().enumerate() {
        let values = [
            group.top_1x1,
            group.top_3x3,
            group.recall.get("1.0").copied().unwrap_or(0.0),
        ];
        for (bi, (&v, color)) in values.iter().zip(colors).enumerate() {
            let bw = group_w / 4.0;
            let x = MARGIN_L + gi as f64 * group_w + (bi as f64 + 0.5) * bw;
            let h = v * (HEIGHT - MARGIN_B - MARGIN_T);
            let y = (HEIGHT - MARGIN_B) - h;
            let _ = write!(
                out,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>\n"
            );
        }
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{name} (n={})</text>\n",
            MARGIN_L + (gi as f64 + 0.5) * group_w,
            HEIGHT - MARGIN_B + 16.0,
            group.samples
        );
    }
    for (i, (label, color)) in labels.iter().zip(colors).enumerate() {
        let y = MARGIN_T + 8.0 + i as f64 * 16.0;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{:.1}\">{label}</text>\n",
            WIDTH - 130.0,
            y - 9.0,
            WIDTH - 114.0,
            y
        );
    }
    out.push_str("</svg>\n");
    out
}
