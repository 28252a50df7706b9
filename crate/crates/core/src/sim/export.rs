use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::metrics::{LapMetrics, LapTiming};
use super::run::{SimResult, SweepScenario, TraceRecord};
use crate::error::{DriftError, Result};

pub const TRACE_COLUMNS: [&str; TraceRecord::COLUMNS] = [
    "t",
    "lap",
    "step",
    "X",
    "Y",
    "phi",
    "V",
    "beta",
    "r",
    "delta_actual",
    "delta",
    "Fxr",
    "V_ref",
    "beta_ref",
    "r_ref",
    "delta_ref",
    "Fxr_ref",
    "e",
    "delta_phi",
    "s_proj",
    "k_p",
    "e_la",
    "k_eq",
    "V_pred",
    "beta_pred",
    "r_pred",
    "V_next",
    "beta_next",
    "r_next",
    "V_nom",
    "beta_nom",
    "r_nom",
    "gp_mean_V",
    "gp_mean_beta",
    "gp_mean_r",
    "gp_std_V",
    "gp_std_beta",
    "gp_std_r",
    "prediction_error",
    "stage_cost",
    "admm_iters",
    "ilqr_iters",
    "primal_res",
    "dual_res",
    "converged",
    "solve_us",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub laps: Vec<LapMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub laps: Vec<LapTiming>,
    pub median_solve_time_ms: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DriftError + '_ {
    move |source| DriftError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DriftError + '_ {
    move |source| DriftError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| DriftError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DriftError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a header row followed by one row per record.
pub fn write_trace_csv<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(TRACE_COLUMNS).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<TraceRecord>, _>>()
        .map_err(csv_err(path))
}

/// Writes the run artifacts into `outdir` and returns the written paths.
pub fn export(result: &SimResult, cfg: &SimConfig, outdir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let mut written = Vec::new();
    for m in &result.laps {
        let path = outdir.join(format!("trace_lap{}.csv", m.lap));
        write_trace_csv(&path, result.lap_records(m.lap))?;
        written.push(path);
    }
    for (i, dump) in result.gp_dumps.iter().enumerate() {
        let path = outdir.join(format!("gp_dict_lap{}.json", i + 1));
        write_json(&path, dump)?;
        written.push(path);
    }
    let metrics = outdir.join("metrics.json");
    write_json(
        &metrics,
        &MetricsReport {
            laps: result.laps.clone(),
        },
    )?;
    written.push(metrics);

    let timing = outdir.join("timing.json");
    let mut all: Vec<f64> = result
        .records
        .iter()
        .map(|r| r.solve_us as f64 / 1000.0)
        .collect();
    all.sort_by(f64::total_cmp);
    let median = if all.is_empty() {
        0.0
    } else {
        all[all.len() / 2]
    };
    write_json(
        &timing,
        &TimingReport {
            laps: result.laps.iter().map(LapTiming::from).collect(),
            median_solve_time_ms: median,
        },
    )?;
    written.push(timing);

    let config = outdir.join("config_resolved.json");
    write_json(&config, cfg)?;
    written.push(config);
    Ok(written)
}

/// Writes `sweep.json` and a lap-by-friction RMSE table `sweep_table.csv`,
/// with columns in the order the friction values were given.
pub fn export_sweep(scenarios: &[SweepScenario], outdir: &Path) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    write_json(&outdir.join("sweep.json"), &scenarios)?;
    let path = outdir.join("sweep_table.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["lap".to_string()];
    header.extend(scenarios.iter().map(|s| format!("mu={:.2}", s.mu)));
    w.write_record(&header).map_err(csv_err(&path))?;
    let laps = scenarios.iter().map(|s| s.laps.len()).max().unwrap_or(0);
    for lap in 0..laps {
        let mut row = vec![(lap + 1).to_string()];
        for s in scenarios {
            row.push(match s.laps.get(lap) {
                Some(m) if m.failed => format!("{:.4} (failed)", m.rmse_lateral),
                Some(m) => format!("{:.4}", m.rmse_lateral),
                None => String::new(),
            });
        }
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}
