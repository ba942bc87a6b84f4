//! Line plots of run CSVs as standalone SVG files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::run::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Reads the named columns of a CSV as numbers.
pub fn read_columns(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Config(format!("{}: no column named {c}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for record in reader.records() {
        let record = record?;
        for (col, &i) in out.iter_mut().zip(&idx) {
            let cell = record.get(i).unwrap_or("");
            let v = cell
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: cannot read {cell:?} as a number", path.display())))?;
            col.push(v);
        }
    }
    if out[0].is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Ok(out)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Renders `series` (label, ys) against `xs`. Output depends only on the
/// inputs, so reruns are byte-identical.
pub fn render_svg(title: &str, x_label: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let (x0, x1) = padded_range(xs.iter().copied());
    let (y0, y1) = padded_range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ =
        writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{left} {top}V{bottom}H{right}" fill="none" stroke="black"/>"#);
    for t in ticks(x0, x1) {
        let x = px(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 16.0, fmt_tick(t));
    }
    for t in ticks(y0, y1) {
        let y = py(t);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/>"#, left - 4.0);
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    for (i, (label, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            xs.iter().zip(ys.iter()).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, points.join(" "));
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            right - 110.0,
            right - 90.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, right - 86.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plots `y_cols` against `x_col` of `csv_path` into `svg_path`.
pub fn plot_csv(csv_path: &Path, x_col: &str, y_cols: &[&str], title: &str, svg_path: &Path) -> Result<()> {
    let mut cols = vec![x_col];
    cols.extend_from_slice(y_cols);
    let data = read_columns(csv_path, &cols)?;
    let series: Vec<(&str, &[f64])> = y_cols.iter().zip(&data[1..]).map(|(n, v)| (*n, v.as_slice())).collect();
    write_atomic(svg_path, render_svg(title, x_col, &data[0], &series).as_bytes())
}

/// How each known CSV in a run directory is drawn.
fn layout_for(name: &str) -> Option<(&'static str, &'static [&'static str])> {
    if name.starts_with("schedule") {
        Some(("step", &["mean_t"]))
    } else if name.starts_with("metrics") {
        Some(("outer_step", &["mean_reward", "mean_ir", "mean_kl"]))
    } else if name == "gamma_sweep.csv" {
        Some(("gamma", &["mean_N"]))
    } else if name == "complexity.csv" {
        Some(("complexity", &["mean_N"]))
    } else if name.ends_with("-loss.csv") {
        Some(("step", &["loss"]))
    } else {
        None
    }
}

fn plottable_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            plottable_csvs(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv")
            && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| layout_for(n).is_some())
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Writes an SVG next to every recognised CSV under `run_dir`. Step-count
/// metrics go to a second plot since they live on a different scale.
pub fn export_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        return Err(Error::MissingFile(run_dir.to_path_buf()));
    }
    let mut csvs = Vec::new();
    plottable_csvs(run_dir, &mut csvs)?;
    if csvs.is_empty() {
        return Err(Error::Empty(format!("no plottable CSV files under {}", run_dir.display())));
    }
    let mut written = Vec::new();
    for csv_path in csvs {
        let name = csv_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let (x, ys) = layout_for(&name).expect("filtered above");
        let stem = name.trim_end_matches(".csv");
        let svg = csv_path.with_file_name(format!("{stem}.svg"));
        plot_csv(&csv_path, x, ys, stem, &svg)?;
        written.push(svg);
        if name.starts_with("metrics") {
            let svg = csv_path.with_file_name(format!("{stem}-steps.svg"));
            plot_csv(&csv_path, x, &["mean_N"], stem, &svg)?;
            written.push(svg);
        }
    }
    Ok(written)
}
