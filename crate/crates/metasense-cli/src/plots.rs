//! Self-contained SVG figures with companion CSVs holding the exact
//! plotted numbers: mean lines with error bars per mode for sweeps, and
//! annotated heatmaps for detuning matrices. Every value drawn in an SVG is
//! embedded verbatim in `data-*` attributes and appears in the companion
//! CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use metasense::data::ResultRow;
use metasense::error::{Error, Result};
use metasense::metrics::aggregate;

use crate::runner::{detuning_matrices, DetuneMatrix};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Shortest round-trip decimal rendering; shared by SVG attributes and the
/// companion CSVs so the two agree verbatim.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone)]
struct SeriesPoint {
    x: f64,
    mean: f64,
    std: f64,
    n: usize,
}

#[derive(Debug, Clone)]
struct Series {
    label: String,
    color: &'static str,
    points: Vec<SeriesPoint>,
}

fn mode_color(mode: &str) -> &'static str {
    match mode {
        "learned" => "#c62828",
        "random" => "#1565c0",
        _ => "#555555",
    }
}

/// Emit every figure the results table supports. Returns the written file
/// paths (SVGs and companion CSVs).
pub fn emit_plots(rows: &[ResultRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("results table for plotting".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut by_kind: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        by_kind.entry(row.noise_kind.clone()).or_default().push(row);
    }

    for (kind, kind_rows) in &by_kind {
        // Matched rows (test level == train level) carry the headline
        // accuracies and the per-model metrics.
        let matched: Vec<&ResultRow> = kind_rows
            .iter()
            .copied()
            .filter(|r| r.test_level == r.train_level)
            .collect();
        if !matched.is_empty() {
            let mut m_values: Vec<usize> = matched.iter().map(|r| r.m).collect();
            m_values.sort_unstable();
            m_values.dedup();
            let mut levels: Vec<f64> = matched.iter().map(|r| r.train_level).collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();

            let sweep_over_m = m_values.len() > 1;
            let quantities: [(&str, fn(&ResultRow) -> Option<f64>); 4] = [
                ("accuracy", |r| Some(r.accuracy)),
                ("overlap", |r| r.overlap),
                ("intensity_ratio", |r| Some(r.intensity_ratio)),
                ("on_ratio", |r| Some(r.on_ratio)),
            ];
            for (name, getter) in quantities {
                let (series, log_x, x_label) = if sweep_over_m {
                    (
                        collect_series(&matched, |r| r.m as f64, getter),
                        false,
                        "measurements M",
                    )
                } else {
                    (
                        collect_series(&matched, |r| r.train_level, getter),
                        levels.iter().all(|&l| l > 0.0),
                        "noise level",
                    )
                };
                if series.iter().all(|s| s.points.is_empty()) {
                    continue;
                }
                let stem = format!("{kind}_{name}");
                let title = format!("{name} vs {x_label} ({kind})");
                written.extend(write_line_figure(
                    out_dir, &stem, &title, x_label, name, log_x, &series,
                )?);
            }
        }

        // Heatmaps whenever some mode carries a full train x test grid.
        let has_detuning = kind_rows.iter().any(|r| r.test_level != r.train_level);
        if has_detuning {
            let owned: Vec<ResultRow> = kind_rows.iter().map(|&r| r.clone()).collect();
            for matrix in detuning_matrices(&owned)? {
                if matrix.train_levels.len() > 1 || matrix.test_levels.len() > 1 {
                    written.extend(write_heatmap_figure(out_dir, &matrix)?);
                }
            }
        }
    }
    Ok(written)
}

fn collect_series(
    rows: &[&ResultRow],
    x_of: fn(&ResultRow) -> f64,
    y_of: fn(&ResultRow) -> Option<f64>,
) -> Vec<Series> {
    let mut modes: Vec<String> = rows.iter().map(|r| r.mode.clone()).collect();
    modes.sort();
    modes.dedup();
    modes
        .into_iter()
        .map(|mode| {
            let mut by_x: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
            for row in rows.iter().filter(|r| r.mode == mode) {
                if let Some(y) = y_of(row) {
                    let x = x_of(row);
                    by_x.entry(x.to_bits()).or_insert((x, Vec::new())).1.push(y);
                }
            }
            let mut points: Vec<SeriesPoint> = by_x
                .into_values()
                .map(|(x, ys)| {
                    let (mean, std) = aggregate(&ys).expect("nonempty group");
                    SeriesPoint {
                        x,
                        mean,
                        std,
                        n: ys.len(),
                    }
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            Series {
                color: mode_color(&mode),
                label: mode,
                points,
            }
        })
        .collect()
}

fn write_line_figure(
    out_dir: &Path,
    stem: &str,
    title: &str,
    x_label: &str,
    y_label: &str,
    log_x: bool,
    series: &[Series],
) -> Result<Vec<PathBuf>> {
    let svg_path = out_dir.join(format!("{stem}.svg"));
    let csv_path = out_dir.join(format!("{stem}.csv"));
    std::fs::write(&svg_path, line_svg(title, x_label, y_label, log_x, series))?;

    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["x", "mode", "mean", "std", "n"])?;
    for s in series {
        for p in &s.points {
            writer.write_record([
                fmt_num(p.x),
                s.label.clone(),
                fmt_num(p.mean),
                fmt_num(p.std),
                p.n.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(vec![svg_path, csv_path])
}

fn nice_ticks(min: f64, max: f64, count: usize) -> Vec<f64> {
    if min == max {
        return vec![min];
    }
    (0..=count)
        .map(|i| min + (max - min) * i as f64 / count as f64)
        .collect()
}

fn line_svg(title: &str, x_label: &str, y_label: &str, log_x: bool, series: &[Series]) -> String {
    let pts: Vec<&SeriesPoint> = series.iter().flat_map(|s| s.points.iter()).collect();
    let xs: Vec<f64> = pts
        .iter()
        .map(|p| if log_x { p.x.log10() } else { p.x })
        .collect();
    let mut x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let mut y_min = pts.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let mut y_max = pts
        .iter()
        .map(|p| p.mean + p.std)
        .fold(f64::NEG_INFINITY, f64::max);
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.06 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| {
        let t = if log_x { x.log10() } else { x };
        MARGIN_LEFT + (t - x_min) / (x_max - x_min) * plot_w
    };
    let sy = |y: f64| MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        xml_escape(title)
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_BOTTOM
    );
    // Ticks.
    for t in nice_ticks(x_min, x_max, 5) {
        let x_val = if log_x { 10f64.powf(t) } else { t };
        let px = MARGIN_LEFT + (t - x_min) / (x_max - x_min) * plot_w;
        let _ = writeln!(
            svg,
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>",
            HEIGHT - MARGIN_BOTTOM,
            HEIGHT - MARGIN_BOTTOM + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            HEIGHT - MARGIN_BOTTOM + 18.0,
            xml_escape(&format!("{x_val:.3}"))
        );
    }
    for t in nice_ticks(y_min, y_max, 5) {
        let py = sy(t);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{MARGIN_LEFT}\" y2=\"{py}\" stroke=\"black\"/>",
            MARGIN_LEFT - 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            MARGIN_LEFT - 8.0,
            py + 4.0,
            xml_escape(&format!("{t:.3}"))
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        xml_escape(y_label)
    );

    for (si, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{},{}", sx(p.x), sy(p.mean)))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>",
                path.join(" "),
                s.color
            );
        }
        for p in &s.points {
            // Error bars.
            if p.std > 0.0 {
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"1.2\"/>",
                    sy(p.mean - p.std),
                    sy(p.mean + p.std),
                    s.color,
                    x = sx(p.x)
                );
            }
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3.4\" fill=\"{}\" data-x=\"{}\" data-mean=\"{}\" data-std=\"{}\" data-mode=\"{}\"/>",
                sx(p.x),
                sy(p.mean),
                s.color,
                fmt_num(p.x),
                fmt_num(p.mean),
                fmt_num(p.std),
                xml_escape(&s.label)
            );
        }
        // Legend.
        let ly = MARGIN_TOP + 14.0 + 18.0 * si as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>",
            WIDTH - MARGIN_RIGHT - 110.0,
            ly - 10.0,
            s.color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            WIDTH - MARGIN_RIGHT - 93.0,
            ly,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn heat_color(t: f64) -> String {
    // Dark blue (low) to warm red (high).
    let t = t.clamp(0.0, 1.0);
    let r = (30.0 + 215.0 * t) as u8;
    let g = (40.0 + 90.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (160.0 * (1.0 - t) + 40.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn write_heatmap_figure(out_dir: &Path, matrix: &DetuneMatrix) -> Result<Vec<PathBuf>> {
    let stem = format!("{}_{}_detune", matrix.noise_kind, matrix.mode);
    let svg_path = out_dir.join(format!("{stem}.svg"));
    let csv_path = out_dir.join(format!("{stem}.csv"));

    std::fs::write(&svg_path, heatmap_svg(matrix))?;

    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["train_level", "test_level", "mean_accuracy", "std", "n"])?;
    for (ti, &train) in matrix.train_levels.iter().enumerate() {
        for (si, &test) in matrix.test_levels.iter().enumerate() {
            let (mean, std, n) = matrix.cell(ti, si);
            writer.write_record([
                fmt_num(train),
                fmt_num(test),
                fmt_num(mean),
                fmt_num(std),
                n.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(vec![svg_path, csv_path])
}

fn heatmap_svg(matrix: &DetuneMatrix) -> String {
    let n_rows = matrix.train_levels.len();
    let n_cols = matrix.test_levels.len();
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let cell_w = plot_w / n_cols as f64;
    let cell_h = plot_h / n_rows as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        xml_escape(&format!(
            "accuracy, trained vs tested noise level ({}, {})",
            matrix.mode, matrix.noise_kind
        ))
    );
    for (ti, &train) in matrix.train_levels.iter().enumerate() {
        for (si, &test) in matrix.test_levels.iter().enumerate() {
            let (mean, _std, _n) = matrix.cell(ti, si);
            let x = MARGIN_LEFT + si as f64 * cell_w;
            let y = MARGIN_TOP + ti as f64 * cell_h;
            let color = if mean.is_nan() {
                "#dddddd".to_string()
            } else {
                heat_color(mean)
            };
            let _ = writeln!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell_w}\" height=\"{cell_h}\" fill=\"{color}\" stroke=\"white\" data-train=\"{}\" data-test=\"{}\" data-mean=\"{}\"/>",
                fmt_num(train),
                fmt_num(test),
                fmt_num(mean)
            );
            if !mean.is_nan() {
                let _ = writeln!(
                    svg,
                    "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" fill=\"white\">{}</text>",
                    x + cell_w / 2.0,
                    y + cell_h / 2.0 + 4.0,
                    xml_escape(&format!("{mean:.3}"))
                );
            }
        }
    }
    // Axis labels: tested level along x, trained level along y.
    for (si, &test) in matrix.test_levels.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            MARGIN_LEFT + (si as f64 + 0.5) * cell_w,
            HEIGHT - MARGIN_BOTTOM + 18.0,
            xml_escape(&format!("{test}"))
        );
    }
    for (ti, &train) in matrix.train_levels.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            MARGIN_LEFT - 8.0,
            MARGIN_TOP + (ti as f64 + 0.5) * cell_h + 4.0,
            xml_escape(&format!("{train}"))
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">tested noise level</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">trained noise level</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}
