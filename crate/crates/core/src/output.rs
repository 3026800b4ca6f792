//! CSV emission and parsing.
//!
//! Floats are written with 17 significant digits so that values survive a
//! round trip bit for bit. Sensors are numbered from 1 in every file.
//!
//! | file               | columns |
//! |--------------------|---------|
//! | `runs.csv`         | `run, seed, status, message, sweeps, admm_iterations, converged, objective`, then per sensor `m` and bias kind `b`: `est_b_m, true_b_m, err_b_m` (meters, radians) |
//! | `rmse.csv`         | `sensor, bias_kind, rmse, units, runs, failures` |
//! | `sweep.csv`        | `parameter, value` followed by the `rmse.csv` columns |
//! | `truth.csv`        | `instance, time_s, sensor, x_m, y_m, z_m, vx_mps, vy_mps, vz_mps` |
//! | `measurements.csv` | `instance, time_s, sensor, range_m, azimuth_rad, elevation_rad` |

use std::fs;
use std::path::{Path, PathBuf};

use crate::assembly::BiasKind;
use crate::error::OutputError;
use crate::harness::{display_unit, RmseTable, RunRecord, SweepPoint};
use crate::model::Dataset;

pub const RMSE_HEADER: [&str; 6] = ["sensor", "bias_kind", "rmse", "units", "runs", "failures"];

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, OutputError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| OutputError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let file = fs::File::create(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), OutputError> {
    w.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn runs_header(sensors: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "run",
        "seed",
        "status",
        "message",
        "sweeps",
        "admm_iterations",
        "converged",
        "objective",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for m in 1..=sensors {
        for kind in BiasKind::ALL {
            for prefix in ["est", "true", "err"] {
                h.push(format!("{prefix}_{}_{m}", kind.name()));
            }
        }
    }
    h
}

/// One row per run, ordered as given. An empty slice produces only the
/// fixed leading columns.
pub fn write_runs(path: &Path, records: &[RunRecord]) -> Result<(), OutputError> {
    let sensors = records.first().map_or(0, |r| r.truth.num_sensors());
    let mut w = writer(path)?;
    w.write_record(runs_header(sensors)).map_err(csv_err(path))?;
    for r in records {
        let errors = r.errors();
        let mut row = vec![r.run.to_string(), r.seed.to_string()];
        match &r.outcome {
            Ok(o) => row.extend([
                "ok".to_string(),
                String::new(),
                o.sweeps.to_string(),
                o.admm_iterations.to_string(),
                o.converged.to_string(),
                fmt_float(o.objective),
            ]),
            Err(msg) => row.extend([
                "failed".to_string(),
                msg.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]),
        }
        for m in 0..sensors {
            for kind in BiasKind::ALL {
                let truth = r.truth.get(kind)[m];
                match (&r.outcome, &errors) {
                    (Ok(o), Some(e)) => {
                        row.push(fmt_float(o.estimate.get(kind)[m]));
                        row.push(fmt_float(truth));
                        row.push(fmt_float(e.get(kind)[m]));
                    }
                    _ => {
                        row.push(String::new());
                        row.push(fmt_float(truth));
                        row.push(String::new());
                    }
                }
            }
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(w, path)
}

fn rmse_rows(table: &RmseTable) -> Vec<[String; 6]> {
    let mut rows = Vec::new();
    for m in 0..table.num_sensors() {
        for kind in BiasKind::ALL {
            rows.push([
                (m + 1).to_string(),
                kind.name().to_string(),
                fmt_float(table.get(m, kind)),
                display_unit(kind).to_string(),
                table.runs.to_string(),
                table.failures.to_string(),
            ]);
        }
    }
    rows
}

pub fn write_rmse(path: &Path, table: &RmseTable) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    w.write_record(RMSE_HEADER).map_err(csv_err(path))?;
    for row in rmse_rows(table) {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_sweep(path: &Path, parameter: &str, points: &[SweepPoint]) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    let mut header = vec!["parameter", "value"];
    header.extend(RMSE_HEADER);
    w.write_record(&header).map_err(csv_err(path))?;
    for p in points {
        for row in rmse_rows(&p.result.rmse) {
            let mut full = vec![parameter.to_string(), p.value.to_string()];
            full.extend(row);
            w.write_record(&full).map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

/// Parses a file written by [`write_rmse`].
pub fn read_rmse(path: &Path) -> Result<RmseTable, OutputError> {
    let malformed = |message: String| OutputError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(RMSE_HEADER) {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut values: Vec<[f64; 5]> = Vec::new();
    let mut counts: Option<(usize, usize)> = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |what: &str| malformed(format!("row {}: bad {what}", line + 1));
        let sensor: usize = rec[0].parse().map_err(|_| bad("sensor"))?;
        let kind = BiasKind::from_name(&rec[1]).ok_or_else(|| bad("bias_kind"))?;
        let value: f64 = rec[2].parse().map_err(|_| bad("rmse"))?;
        let runs: usize = rec[4].parse().map_err(|_| bad("runs"))?;
        let failures: usize = rec[5].parse().map_err(|_| bad("failures"))?;
        if sensor == 0 {
            return Err(bad("sensor"));
        }
        if counts.is_some_and(|c| c != (runs, failures)) {
            return Err(bad("run counts"));
        }
        counts = Some((runs, failures));
        if values.len() < sensor {
            values.resize(sensor, [f64::NAN; 5]);
        }
        let i = BiasKind::ALL.iter().position(|k| *k == kind).expect("known kind");
        values[sensor - 1][i] = value;
    }
    let (runs, failures) = counts.unwrap_or((0, 0));
    Ok(RmseTable {
        values,
        runs,
        failures,
    })
}

/// Writes `truth.csv` and `measurements.csv` into `dir`, returning their paths.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<[PathBuf; 2], OutputError> {
    let truth_path = dir.join("truth.csv");
    let mut w = writer(&truth_path)?;
    w.write_record([
        "instance", "time_s", "sensor", "x_m", "y_m", "z_m", "vx_mps", "vy_mps", "vz_mps",
    ])
    .map_err(csv_err(&truth_path))?;
    for (k, (&(t, s), (p, v))) in data
        .schedule
        .entries()
        .iter()
        .zip(data.truth.positions.iter().zip(&data.truth.velocities))
        .enumerate()
    {
        let mut row = vec![k.to_string(), fmt_float(t), (s + 1).to_string()];
        row.extend(p.iter().chain(v.iter()).map(|x| fmt_float(*x)));
        w.write_record(&row).map_err(csv_err(&truth_path))?;
    }
    finish(w, &truth_path)?;

    let meas_path = dir.join("measurements.csv");
    let mut w = writer(&meas_path)?;
    w.write_record(["instance", "time_s", "sensor", "range_m", "azimuth_rad", "elevation_rad"])
        .map_err(csv_err(&meas_path))?;
    for m in &data.measurements {
        w.write_record([
            m.instance.to_string(),
            fmt_float(m.time),
            (m.sensor + 1).to_string(),
            fmt_float(m.reading.range),
            fmt_float(m.reading.azimuth),
            fmt_float(m.reading.elevation),
        ])
        .map_err(csv_err(&meas_path))?;
    }
    finish(w, &meas_path)?;
    Ok([truth_path, meas_path])
}
