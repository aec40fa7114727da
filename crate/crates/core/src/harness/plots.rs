//! Learning-curve CSV and SVG figures from finished run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use super::ablation::AblationReport;
use super::train::{RunSummary, METRICS_FILE, SUMMARY_FILE};
use crate::error::{CordError, Result};
use crate::learner::Method;
use crate::stats::{mean, std_dev};

pub const CURVE_CSV: &str = "curves.csv";
pub const CURVE_SVG: &str = "learning_curve.svg";
pub const TEAMS_SVG: &str = "unseen_teams.svg";
pub const AGENTS_SVG: &str = "unseen_agents.svg";
pub const SUMMARY_CSV: &str = "summary.csv";

/// One greedy evaluation point of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub method: Method,
    pub seed: u64,
    pub ret: f64,
    pub r_c: f64,
    pub r_d: f64,
}

#[derive(Deserialize)]
struct EvalEvent {
    event: String,
    step: u64,
    #[serde(rename = "return")]
    ret: Option<f64>,
    r_c: Option<f64>,
    r_d: Option<f64>,
}

/// Run directories below `root` laid out as `<method>/seed_<n>`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<(Method, u64, PathBuf)>> {
    let mut runs = Vec::new();
    for method in Method::ALL {
        let dir = root.join(method.name());
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let seed = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed_"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(seed) = seed {
                if path.join(METRICS_FILE).exists() {
                    runs.push((method, seed, path));
                }
            }
        }
    }
    runs.sort_by(|a, b| (a.0.name(), a.1).cmp(&(b.0.name(), b.1)));
    Ok(runs)
}

pub fn read_curve(method: Method, seed: u64, run: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(run.join(METRICS_FILE))?;
    let mut points = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let ev: EvalEvent = serde_json::from_str(line)?;
        if ev.event != "eval" {
            continue;
        }
        points.push(CurvePoint {
            step: ev.step,
            method,
            seed,
            ret: ev.ret.unwrap_or(f64::NAN),
            r_c: ev.r_c.unwrap_or(f64::NAN),
            r_d: ev.r_d.unwrap_or(f64::NAN),
        });
    }
    Ok(points)
}

pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,method,seed,return,r_c,r_d\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{},{}\n", p.step, p.method.name(), p.seed, p.ret, p.r_c, p.r_d));
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("step,method,seed,return,r_c,r_d") {
        return Err(CordError::Config("unexpected curve CSV header".into()));
    }
    let bad = |l: &str| CordError::Config(format!("malformed curve row: {l}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| bad(l))?,
                method: Method::parse(f[1])?,
                seed: f[2].parse().map_err(|_| bad(l))?,
                ret: num(f[3])?,
                r_c: num(f[4])?,
                r_d: num(f[5])?,
            })
        })
        .collect()
}

/// Mean and sample std of the return across seeds at each step, per method.
pub fn curve_bands(points: &[CurvePoint]) -> BTreeMap<&'static str, Vec<(u64, f64, f64)>> {
    let mut grouped: BTreeMap<&'static str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for p in points {
        grouped.entry(p.method.name()).or_default().entry(p.step).or_default().push(p.ret);
    }
    grouped
        .into_iter()
        .map(|(m, steps)| (m, steps.into_iter().map(|(s, v)| (s, mean(&v), std_dev(&v))).collect()))
        .collect()
}

fn method_color(m: &str) -> RGBColor {
    match m {
        "cord" => RGBColor(200, 50, 40),
        "cord_no_i" => RGBColor(40, 90, 190),
        _ => RGBColor(60, 150, 60),
    }
}

fn plot_err<E: std::fmt::Debug>(e: E) -> CordError {
    CordError::Plot(format!("{e:?}"))
}

pub fn render_learning_curve(points: &[CurvePoint], path: &Path) -> Result<()> {
    let bands = curve_bands(points);
    let max_step = points.iter().map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    let (lo, hi) = bands
        .values()
        .flatten()
        .filter(|(_, m, s)| m.is_finite() && s.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, m, s)| (lo.min(m - s), hi.max(m + s)));
    let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1.0)) } else { (0.0, 1.0) };

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Greedy return during training (mean ± 1 std over seeds)", ("sans-serif", 18))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..max_step, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("episode return")
        .draw()
        .map_err(plot_err)?;
    for (m, band) in &bands {
        let color = method_color(m);
        let mut outline: Vec<(f64, f64)> = band.iter().map(|(s, mu, sd)| (*s as f64, mu + sd)).collect();
        outline.extend(band.iter().rev().map(|(s, mu, sd)| (*s as f64, mu - sd)));
        chart.draw_series(std::iter::once(Polygon::new(outline, color.mix(0.2)))).map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(band.iter().map(|(s, mu, _)| (*s as f64, *mu)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*m)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Grouped bars: one group per category, one bar per method, whiskers at ±1 std.
pub fn render_bars(title: &str, categories: &[String], series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let n_groups = categories.len().max(1);
    let n_series = series.len().max(1);
    let top = series
        .iter()
        .flat_map(|(_, v)| v.iter().map(|(m, s)| m + s))
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let bottom = series
        .iter()
        .flat_map(|(_, v)| v.iter().map(|(m, s)| m - s))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::min);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..n_groups as f64, bottom..top * 1.1)
        .map_err(plot_err)?;
    let labels = categories.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n_groups * 2 + 1)
        .x_label_formatter(&move |x| {
            let g = x.floor() as usize;
            if (x - g as f64 - 0.5).abs() < 1e-6 {
                labels.get(g).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("episode return")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / n_series as f64;
    for (k, (name, values)) in series.iter().enumerate() {
        let color = method_color(name);
        let bars: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(g, (m, _))| {
                let x0 = g as f64 + 0.1 + k as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, *m)], color.filled())
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        let whiskers: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(g, (m, s))| {
                let x = g as f64 + 0.1 + (k as f64 + 0.5) * width;
                PathElement::new(vec![(x, m - s), (x, m + s)], BLACK.stroke_width(1))
            })
            .collect();
        chart.draw_series(whiskers).map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn summaries(runs: &[(Method, u64, PathBuf)]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for (_, _, dir) in runs {
        let path = dir.join(SUMMARY_FILE);
        if path.exists() {
            out.push(serde_json::from_str(&std::fs::read_to_string(path)?)?);
        }
    }
    Ok(out)
}

fn per_method(sums: &[RunSummary], value: impl Fn(&RunSummary) -> Option<f64>) -> Vec<(String, (f64, f64))> {
    Method::ALL
        .iter()
        .filter_map(|&m| {
            let v: Vec<f64> = sums.iter().filter(|s| s.method == m).filter_map(&value).collect();
            (!v.is_empty()).then(|| (m.name().to_string(), (mean(&v), std_dev(&v))))
        })
        .collect()
}

/// Bar series over categories; methods without results in every category are dropped.
fn bar_series(sums: &[RunSummary], cats: &[usize], value: impl Fn(&RunSummary, usize) -> Option<f64>) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for &c in cats {
        for (m, v) in per_method(sums, |s| value(s, c)) {
            series.entry(m).or_default().push(v);
        }
    }
    let order = |n: &str| Method::ALL.iter().position(|m| m.name() == n).unwrap_or(usize::MAX);
    let mut out: Vec<_> = series.into_iter().filter(|(_, v)| v.len() == cats.len()).collect();
    out.sort_by_key(|(n, _)| order(n));
    out
}

/// One row per finished run with its final evaluation scores; missing
/// results are left empty.
pub fn summaries_to_csv(sums: &[RunSummary]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from(
        "method,seed,env_steps,episodes,wall_seconds,training_return,unseen_teams_5,unseen_teams_6,unseen_agents_5,unseen_agents_6\n",
    );
    for s in sums {
        out.push_str(&format!(
            "{},{},{},{},{:.1},{},{},{},{},{}\n",
            s.method.name(),
            s.seed,
            s.env_steps,
            s.episodes,
            s.wall_seconds,
            cell(s.training_return),
            cell(s.unseen_team_return(5)),
            cell(s.unseen_team_return(6)),
            cell(s.unseen_agents_return(5)),
            cell(s.unseen_agents_return(6)),
        ));
    }
    out
}

/// Everything `emit_plots` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutputs {
    pub csv: PathBuf,
    pub learning_curve: PathBuf,
    pub bars: Vec<PathBuf>,
    /// Per-run summary table; absent when rendering from a curve CSV alone.
    pub summary: Option<PathBuf>,
}

/// Collect every run under `root`, write the curve CSV and the figures to `out`.
pub fn emit_plots(root: &Path, out: &Path) -> Result<PlotOutputs> {
    let runs = find_runs(root)?;
    if runs.is_empty() {
        return Err(CordError::Config(format!("no runs found under {}", root.display())));
    }
    std::fs::create_dir_all(out)?;
    let mut points = Vec::new();
    for (m, seed, dir) in &runs {
        points.extend(read_curve(*m, *seed, dir)?);
    }
    let csv = out.join(CURVE_CSV);
    std::fs::write(&csv, curves_to_csv(&points))?;
    let outputs = plots_from_csv(&csv, out)?;

    let sums = summaries(&runs)?;
    let summary = out.join(SUMMARY_CSV);
    std::fs::write(&summary, summaries_to_csv(&sums))?;
    let mut bars = Vec::new();
    let sizes = [5usize, 6];
    let cats: Vec<String> = sizes.iter().map(|n| format!("{n} agents")).collect();
    let teams = bar_series(&sums, &sizes, |s, n| s.unseen_team_return(n));
    if !teams.is_empty() {
        let p = out.join(TEAMS_SVG);
        render_bars("Unseen team sizes (fully controlled)", &cats, &teams, &p)?;
        bars.push(p);
    }
    let agents = bar_series(&sums, &sizes, |s, n| s.unseen_agents_return(n));
    if !agents.is_empty() {
        let p = out.join(AGENTS_SVG);
        render_bars("Unseen agents (averaged over controlled counts)", &cats, &agents, &p)?;
        bars.push(p);
    }
    if let Ok(report) = AblationReport::load(&super::ablation::report_path(root)) {
        std::fs::write(out.join("ablation.txt"), report.render())?;
    }
    Ok(PlotOutputs { bars, summary: Some(summary), ..outputs })
}

/// Learning-curve figure from a curve CSV alone.
pub fn plots_from_csv(csv: &Path, out: &Path) -> Result<PlotOutputs> {
    let points = curves_from_csv(&std::fs::read_to_string(csv)?)?;
    let learning_curve = out.join(CURVE_SVG);
    render_learning_curve(&points, &learning_curve)?;
    Ok(PlotOutputs { csv: csv.to_path_buf(), learning_curve, bars: vec![], summary: None })
}
