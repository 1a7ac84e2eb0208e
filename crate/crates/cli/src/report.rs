//! Summary tables and curves from metrics CSVs.
//!
//! Files written to the report directory:
//!
//! ```text
//! summary.csv            run, pair, variant, epochs, max_accuracy, final_accuracy
//! summary.md             the same table, plus source-only vs DTA per pair
//! accuracy.svg           target accuracy of every run against epoch
//! <run>-accuracy.svg     target accuracy of one run
//! <run>-loss.svg         loss terms of one run
//! ```
//!
//! A run is named after the directory holding its `metrics.csv`; pair and
//! variant come from the `experiment.toml` that `train` leaves next to it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use dta_core::training::{read_metrics, MetricsRow};

use crate::config::ExperimentFile;

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub pair: String,
    /// `dta`, `source-only` or `-` when unknown.
    pub variant: String,
    pub epochs: usize,
    pub max_accuracy: f64,
    pub final_accuracy: f64,
}

pub struct LoadedRun {
    pub row: RunRow,
    pub history: Vec<MetricsRow>,
}

pub fn load_run(csv: &Path) -> Result<LoadedRun> {
    let history = read_metrics(csv).with_context(|| format!("reading {}", csv.display()))?;
    if history.is_empty() {
        bail!("{} has no metric rows", csv.display());
    }
    let dir = csv.parent().filter(|p| !p.as_os_str().is_empty());
    let run = dir
        .and_then(|d| d.file_name())
        .or_else(|| csv.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let experiment = dir
        .map(|d| d.join("experiment.toml"))
        .filter(|p| p.exists())
        .map(|p| ExperimentFile::load(&p, &[]))
        .transpose()?;
    let (pair, variant) = match &experiment {
        Some(e) => (
            e.pair.as_str().to_string(),
            if e.is_source_only() { "source-only" } else { "dta" }.to_string(),
        ),
        None => ("-".into(), "-".into()),
    };
    let max_accuracy = history.iter().map(|r| r.target_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let final_accuracy = history.last().expect("non-empty").target_accuracy;
    Ok(LoadedRun {
        row: RunRow {
            run,
            pair,
            variant,
            epochs: history.len(),
            max_accuracy,
            final_accuracy,
        },
        history,
    })
}

pub fn write_report(csvs: &[&Path], out: &Path) -> Result<Vec<RunRow>> {
    if csvs.is_empty() {
        bail!("report needs at least one metrics CSV");
    }
    let mut runs = csvs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
    // identical directory names get a numeric suffix
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for r in &mut runs {
        let n = seen.entry(r.row.run.clone()).or_default();
        *n += 1;
        if *n > 1 {
            r.row.run = format!("{}-{}", r.row.run, n);
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["run", "pair", "variant", "epochs", "max_accuracy", "final_accuracy"])?;
    for r in &runs {
        let r = &r.row;
        w.write_record([
            r.run.clone(),
            r.pair.clone(),
            r.variant.clone(),
            r.epochs.to_string(),
            r.max_accuracy.to_string(),
            r.final_accuracy.to_string(),
        ])?;
    }
    w.flush()?;

    let rows: Vec<RunRow> = runs.iter().map(|r| r.row.clone()).collect();
    fs::write(out.join("summary.md"), markdown(&rows))?;
    for r in &runs {
        plot_accuracy(&out.join(format!("{}-accuracy.svg", r.row.run)), std::slice::from_ref(r))?;
        plot_losses(&out.join(format!("{}-loss.svg", r.row.run)), r)?;
    }
    plot_accuracy(&out.join("accuracy.svg"), &runs)?;
    Ok(rows)
}

pub fn markdown(rows: &[RunRow]) -> String {
    let mut s = String::from("| run | pair | variant | epochs | max acc (%) | final acc (%) |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.2} | {:.2} |",
            r.run,
            r.pair,
            r.variant,
            r.epochs,
            100.0 * r.max_accuracy,
            100.0 * r.final_accuracy
        );
    }
    let mut by_pair: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.pair != "-") {
        let e = by_pair.entry(&r.pair).or_default();
        let slot = if r.variant == "source-only" { &mut e.0 } else { &mut e.1 };
        *slot = Some(slot.map_or(r.final_accuracy, |v: f64| v.max(r.final_accuracy)));
    }
    if !by_pair.is_empty() {
        s.push_str("\n| pair | source-only final (%) | DTA final (%) | gain (points) |\n|---|---|---|---|\n");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for (pair, (src, dta)) in by_pair {
            let gain = match (src, dta) {
                (Some(a), Some(b)) => format!("{:+.2}", 100.0 * (b - a)),
                _ => "-".into(),
            };
            let _ = writeln!(s, "| {pair} | {} | {} | {gain} |", pct(src), pct(dta));
        }
    }
    s
}

fn plot_accuracy(path: &Path, runs: &[LoadedRun]) -> Result<()> {
    let max_epoch = runs.iter().map(|r| r.history.len()).max().unwrap_or(1).max(2) as f64;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("target accuracy", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..max_epoch, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, r) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = r.history.iter().map(|m| (m.epoch as f64 + 1.0, m.target_accuracy));
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(r.row.run.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
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

fn plot_losses(path: &Path, run: &LoadedRun) -> Result<()> {
    type Field = fn(&MetricsRow) -> f64;
    let series: [(&str, Field); 6] = [
        ("task", |m| m.task),
        ("fdta", |m| m.fdta),
        ("cdta", |m| m.cdta),
        ("entropy", |m| m.entropy),
        ("vat", |m| m.vat),
        ("total", |m| m.total),
    ];
    let top = run
        .history
        .iter()
        .flat_map(|m| series.iter().map(move |(_, f)| f(m)))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let max_epoch = run.history.len().max(2) as f64;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} losses", run.row.run), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..max_epoch, 0f64..top)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(plot_err)?;
    for (i, (name, f)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = run.history.iter().map(|m| (m.epoch as f64 + 1.0, f(m)));
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
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

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e:?}")
}
