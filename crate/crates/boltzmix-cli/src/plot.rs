//! Time-series line plots written as standalone SVG files.

use std::path::{Path, PathBuf};

use boltzmix::diagnostics::DiagnosticsRecord;
use plotters::prelude::*;

use crate::CliError;

struct Panel {
    name: &'static str,
    log: bool,
    series: Vec<(String, Vec<f64>)>,
}

fn panels(records: &[DiagnosticsRecord]) -> Vec<Panel> {
    let ns = records.first().map_or(0, |r| r.mass.len());
    let per_species = |name: &'static str, log: bool, pick: fn(&DiagnosticsRecord) -> &Vec<f64>| Panel {
        name,
        log,
        series: (0..ns)
            .map(|i| (format!("species {}", i + 1), records.iter().map(|r| pick(r)[i]).collect()))
            .collect(),
    };
    let scalar = |name: &'static str, log: bool, pick: fn(&DiagnosticsRecord) -> f64| Panel {
        name,
        log,
        series: vec![(name.to_string(), records.iter().map(pick).collect())],
    };
    vec![
        per_species("mass", false, |r| &r.mass),
        Panel {
            name: "momentum",
            log: false,
            series: ["px", "py", "pz"]
                .iter()
                .enumerate()
                .map(|(d, n)| (n.to_string(), records.iter().map(|r| r.momentum[d]).collect()))
                .collect(),
        },
        scalar("energy", false, |r| r.energy),
        scalar("entropy", false, |r| r.entropy),
        scalar("rel_entropy", true, |r| r.rel_entropy),
        scalar("entropy_production", false, |r| r.entropy_production),
        per_species("winf", true, |r| &r.winf_norm),
        per_species("gauss", true, |r| &r.gauss_monitor),
        per_species("rfreq", false, |r| &r.rfreq_ratio),
    ]
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-300 + 1e-12 * hi.abs() {
        let pad = 0.5 * lo.abs().max(1e-12);
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn draw(panel: &Panel, time: &[f64], path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let (t0, t1) = range(time.iter().copied());
    let all = || panel.series.iter().flat_map(|(_, v)| v.iter().copied());
    let log = panel.log && all().all(|v| v > 0.0);
    let colors = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(panel.name, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80);
    if log {
        let (lo, hi) = range(all());
        let mut chart = builder.build_cartesian_2d(t0..t1, (lo * 0.9..hi * 1.1).log_scale())?;
        chart.configure_mesh().x_desc("time").draw()?;
        for (k, (label, v)) in panel.series.iter().enumerate() {
            let c = colors[k % colors.len()];
            chart
                .draw_series(LineSeries::new(time.iter().copied().zip(v.iter().copied()), c))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    } else {
        let (lo, hi) = range(all());
        let mut chart = builder.build_cartesian_2d(t0..t1, lo..hi)?;
        chart.configure_mesh().x_desc("time").draw()?;
        for (k, (label, v)) in panel.series.iter().enumerate() {
            let c = colors[k % colors.len()];
            chart
                .draw_series(LineSeries::new(time.iter().copied().zip(v.iter().copied()), c))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}

/// One SVG per tracked functional under `dir`; returns the written paths.
pub fn write_plots(records: &[DiagnosticsRecord], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let time: Vec<f64> = records.iter().map(|r| r.time).collect();
    let mut out = Vec::new();
    for panel in panels(records) {
        let path = dir.join(format!("{}.svg", panel.name));
        draw(&panel, &time, &path).map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}
