//! File output (CSV and JSON) and trajectory ingestion.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::experiment::Report;
use crate::satfun::Threshold;
use crate::sim::Trajectory;
use crate::tune::TuneResult;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    /// One JSON document per table.
    Structured,
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub k_tilde: Option<usize>,
    pub lambda_x: Option<Threshold>,
    pub lambda_y: Option<Threshold>,
    pub eta: Option<f64>,
    pub rmse: f64,
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda_x: Threshold,
    pub lambda_y: Threshold,
    pub eta: f64,
    pub score: f64,
}

pub fn result_rows(report: &Report) -> Vec<ResultRow> {
    report
        .methods
        .iter()
        .map(|m| ResultRow {
            method: m.label.clone(),
            k_tilde: m.params.filter(|_| m.k_tilde.is_some()).map(|p| p.k_tilde),
            lambda_x: m.params.map(|p| p.lambda_x),
            lambda_y: m.params.map(|p| p.lambda_y),
            eta: m.params.filter(|_| m.k_tilde.is_some()).map(|p| p.eta),
            rmse: m.rmse,
            improvement_pct: m.improvement_pct,
        })
        .collect()
}

pub fn grid_rows(res: &TuneResult) -> Vec<GridRow> {
    res.table
        .iter()
        .map(|c| GridRow {
            lambda_x: c.params.lambda_x,
            lambda_y: c.params.lambda_y,
            eta: c.params.eta,
            score: c.score,
        })
        .collect()
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> IoResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> IoResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn vector_cols(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}{i}"))
}

/// Columns `t, x1..xn, y1..yp, process_outlier, meas_outlier`; the `t = 0`
/// row carries the initial state only.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> IoResult<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let p = traj.measurements.first().map_or(0, |y| y.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(vector_cols("x", n));
    header.extend(vector_cols("y", p));
    header.push("process_outlier".into());
    header.push("meas_outlier".into());
    w.write_record(&header)?;
    for (t, x) in traj.states.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        if t == 0 {
            rec.extend(std::iter::repeat_n(String::new(), p + 2));
        } else {
            rec.extend(traj.measurements[t - 1].iter().map(|v| v.to_string()));
            rec.push(u8::from(traj.process_outlier_flags[t - 1]).to_string());
            rec.push(u8::from(traj.meas_outlier_flags[t - 1]).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> IoResult<f64> {
    s.trim()
        .parse()
        .map_err(|_| IoError::Format(format!("{what}: cannot parse {s:?} as a number")))
}

fn parse_flag(s: &str, what: &str) -> IoResult<bool> {
    match s.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        "" => Ok(false),
        other => Err(IoError::Format(format!("{what}: bad flag {other:?}"))),
    }
}

/// Reads the format written by [`write_trajectory_csv`]. Flag columns are
/// optional.
pub fn read_trajectory_csv(path: &Path, seed: u64) -> IoResult<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let idx = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .map(|(i, _)| i)
            .collect()
    };
    let (xi, yi) = (idx("x"), idx("y"));
    if xi.is_empty() || yi.is_empty() {
        return Err(IoError::Format("need x1.. and y1.. columns".into()));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let (pc, mc) = (col("process_outlier"), col("meas_outlier"));

    let mut traj = Trajectory {
        states: Vec::new(),
        measurements: Vec::new(),
        process_outlier_flags: Vec::new(),
        meas_outlier_flags: Vec::new(),
        seed,
    };
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let what = format!("row {}", row + 1);
        let x = xi
            .iter()
            .map(|&i| parse_f64(&rec[i], &what))
            .collect::<IoResult<Vec<_>>>()?;
        traj.states.push(DVector::from_vec(x));
        if row == 0 {
            continue;
        }
        let y = yi
            .iter()
            .map(|&i| parse_f64(&rec[i], &what))
            .collect::<IoResult<Vec<_>>>()?;
        traj.measurements.push(DVector::from_vec(y));
        traj.process_outlier_flags
            .push(pc.map_or(Ok(false), |i| parse_flag(&rec[i], &what))?);
        traj.meas_outlier_flags
            .push(mc.map_or(Ok(false), |i| parse_flag(&rec[i], &what))?);
    }
    if traj.measurements.is_empty() {
        return Err(IoError::Format("trajectory has no measurement rows".into()));
    }
    traj.validate()
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(traj)
}

/// `t, xhat1..xhatn, abserr1..abserrn` for `t = 0..T`.
fn write_trace_csv(path: &Path, estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> IoResult<()> {
    let n = truth.first().map_or(0, |x| x.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(vector_cols("xhat", n));
    header.extend(vector_cols("abserr", n));
    w.write_record(&header)?;
    for (t, (e, x)) in estimates.iter().zip(truth).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(e.iter().map(|v| v.to_string()));
        rec.extend((e - x).iter().map(|v| v.abs().to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reproducibility record. Deliberately free of timestamps and host data so
/// that repeated runs are byte-identical.
pub fn manifest(report: &Report) -> serde_json::Value {
    let params: serde_json::Map<String, serde_json::Value> = report
        .methods
        .iter()
        .filter_map(|m| m.params.map(|p| (m.label.clone(), json!(p))))
        .collect();
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "example": report.name,
        "seeds": report.config.seeds,
        "steps": report.test_traj.len(),
        "outliers": report.outliers,
        "tolerances": report.config.tolerances,
        "riccati_iterations": report.gains.iterations,
        "chosen_params": params,
        "diagnostics": report.diagnostics,
        "config": report.config,
    })
}

/// Writes every artifact of a run into `dir`.
pub fn write_report(dir: &Path, report: &Report, format: OutputFormat) -> IoResult<()> {
    fs::create_dir_all(dir)?;
    let truth = &report.test_traj.states;
    write_json(&dir.join("manifest.json"), &manifest(report))?;
    write_json(&dir.join("gains.json"), &report.gains)?;
    write_json(&dir.join("model.json"), &report.model)?;
    if report.config.trajectory_file.is_none() {
        write_trajectory_csv(&dir.join("trajectory_test.csv"), &report.test_traj)?;
    }
    if let Some(t) = &report.tune_traj {
        write_trajectory_csv(&dir.join("trajectory_tune.csv"), t)?;
    }
    let results = result_rows(report);
    match format {
        OutputFormat::Csv => {
            write_csv_rows(&dir.join("results.csv"), &results)?;
            for m in &report.methods {
                write_trace_csv(&dir.join(format!("trace_{}.csv", m.label)), &m.estimates, truth)?;
            }
            for (label, g) in &report.grids {
                write_csv_rows(&dir.join(format!("grid_{label}.csv")), &grid_rows(g))?;
            }
            if let Some(s) = &report.sweep {
                let rows: Vec<_> = s
                    .rows
                    .iter()
                    .map(|r| ResultRow {
                        method: format!("iskf_k{}", r.k_tilde),
                        k_tilde: Some(r.k_tilde),
                        lambda_x: Some(r.params.lambda_x),
                        lambda_y: Some(r.params.lambda_y),
                        eta: Some(r.params.eta),
                        rmse: r.rmse,
                        improvement_pct: None,
                    })
                    .collect();
                write_csv_rows(&dir.join("sweep.csv"), &rows)?;
            }
            if let Some(s) = &report.step_size {
                #[derive(Serialize)]
                struct Row<'a> {
                    method: &'a str,
                    lambda_x: Option<Threshold>,
                    lambda_y: Option<Threshold>,
                    eta: Option<f64>,
                    rmse: f64,
                    rmse_no_outliers: f64,
                }
                let rows: Vec<_> = s
                    .rows
                    .iter()
                    .map(|r| Row {
                        method: &r.label,
                        lambda_x: r.params.map(|p| p.lambda_x),
                        lambda_y: r.params.map(|p| p.lambda_y),
                        eta: r.params.map(|p| p.eta),
                        rmse: r.rmse,
                        rmse_no_outliers: r.rmse_no_outliers,
                    })
                    .collect();
                write_csv_rows(&dir.join("step_size.csv"), &rows)?;
            }
        }
        OutputFormat::Structured => {
            let traces: serde_json::Map<String, serde_json::Value> = report
                .methods
                .iter()
                .map(|m| {
                    let xs: Vec<&[f64]> = m.estimates.iter().map(|e| e.as_slice()).collect();
                    (m.label.clone(), json!(xs))
                })
                .collect();
            let grids: serde_json::Map<String, serde_json::Value> = report
                .grids
                .iter()
                .map(|(l, g)| (l.clone(), json!(grid_rows(g))))
                .collect();
            let doc = json!({
                "results": results,
                "sweep": report.sweep,
                "step_size": report.step_size,
                "grids": grids,
                "estimates": traces,
            });
            write_json(&dir.join("report.json"), &doc)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vehicle_model;
    use crate::sim::simulate;

    #[test]
    fn trajectory_round_trip_is_exact() {
        let (model, spec) = vehicle_model(0.05, 0.05).unwrap();
        let traj = simulate(&model, &spec, 50, 3, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let back = read_trajectory_csv(&path, 3).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn results_round_trip_keeps_infinite_thresholds() {
        let rows = vec![
            ResultRow {
                method: "kf".into(),
                k_tilde: None,
                lambda_x: None,
                lambda_y: None,
                eta: None,
                rmse: 0.25,
                improvement_pct: Some(0.0),
            },
            ResultRow {
                method: "iskf_k2".into(),
                k_tilde: Some(2),
                lambda_x: Some(Threshold::INFINITE),
                lambda_y: Some(Threshold::new(0.1).unwrap()),
                eta: Some(1.0),
                rmse: 0.1 + 0.2,
                improvement_pct: Some(-3.5),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv_rows(&path, &rows).unwrap();
        let back: Vec<ResultRow> = read_csv_rows(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn malformed_trajectory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "t,x1,y1\n0,1,\n1,2,abc\n").unwrap();
        assert!(matches!(read_trajectory_csv(&path, 0), Err(IoError::Format(_))));
        fs::write(&path, "t,x1\n0,1\n").unwrap();
        assert!(read_trajectory_csv(&path, 0).is_err());
    }
}
