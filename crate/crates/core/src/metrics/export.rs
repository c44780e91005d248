//! Report files.
//!
//! CSV floats are written as `{:.16e}` (17 significant digits), which
//! parses back to the identical `f64`. Rounds are 0-based round indices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{residual_rank_stats, GridCell, MetricsError, TrajectoryPoint};
use crate::aggregation::{CommReport, Method};
use crate::fedsim::RoundReport;

pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const SPECTRA: &str = "spectra.csv";
pub const RESIDUAL_RANK: &str = "residual_rank.csv";
pub const COMM_COST: &str = "comm_cost.json";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const LANDSCAPE_GRID: &str = "landscape_grid.csv";
pub const RUN_CONFIG: &str = "run_config.json";

/// All rounds of one method's run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub reports: Vec<RoundReport>,
}

/// Everything written by [`export_reports`].
#[derive(Debug, Clone, Copy)]
pub struct ExportBundle<'a> {
    pub runs: &'a [MethodRun],
    pub trajectory: &'a [TrajectoryPoint],
    pub landscape: &'a [GridCell],
    /// Written verbatim (pretty-printed) as `run_config.json`.
    pub run_config: &'a serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub round: usize,
    #[serde(flatten)]
    pub report: CommReport,
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, MetricsError> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|e| MetricsError::csv(&path, e))?;
        let mut out = Self { path, writer };
        out.row(header.iter().map(|s| s.to_string()))?;
        Ok(out)
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), MetricsError> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer
            .write_record(&fields)
            .map_err(|e| MetricsError::csv(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf, MetricsError> {
        self.writer.flush().map_err(|e| MetricsError::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, MetricsError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| MetricsError::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| MetricsError::io(&path, e))?;
    Ok(path)
}

/// Writes every report file into `out_dir` (created if missing) and
/// returns the written paths.
pub fn export_reports(bundle: &ExportBundle<'_>, out_dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(out_dir).map_err(|e| MetricsError::io(out_dir, e))?;
    let mut written = Vec::new();

    let mut loss = CsvOut::create(out_dir, LOSS_CURVE, &["round", "method", "loss"])?;
    for run in bundle.runs {
        for r in &run.reports {
            loss.row([r.round_index.to_string(), run.method.to_string(), format_float(r.loss)])?;
        }
    }
    written.push(loss.finish()?);

    let mut spectra = CsvOut::create(out_dir, SPECTRA, &["round", "method", "layer", "index", "sigma", "r_eff", "s"])?;
    for run in bundle.runs {
        for r in &run.reports {
            for log in &r.spectra {
                for (i, s) in log.sigma.iter().enumerate() {
                    spectra.row([
                        log.round_index.to_string(),
                        run.method.to_string(),
                        log.layer_id.to_string(),
                        i.to_string(),
                        format_float(*s),
                        log.r_eff.to_string(),
                        log.s.to_string(),
                    ])?;
                }
            }
        }
    }
    written.push(spectra.finish()?);

    let mut residual = CsvOut::create(out_dir, RESIDUAL_RANK, &["round", "method", "mean_s", "min_s", "max_s"])?;
    for run in bundle.runs {
        let logs: Vec<_> = run.reports.iter().flat_map(|r| r.spectra.iter().cloned()).collect();
        for row in residual_rank_stats(&logs)? {
            residual.row([
                row.round_index.to_string(),
                run.method.to_string(),
                format_float(row.mean_s),
                row.min_s.to_string(),
                row.max_s.to_string(),
            ])?;
        }
    }
    written.push(residual.finish()?);

    let comm: Vec<CommRow> = bundle
        .runs
        .iter()
        .flat_map(|run| {
            run.reports.iter().map(|r| CommRow {
                round: r.round_index,
                report: r.comm.clone(),
            })
        })
        .collect();
    written.push(write_json(out_dir, COMM_COST, &comm)?);

    let mut traj = CsvOut::create(out_dir, TRAJECTORY, &["round", "method", "x", "y", "loss"])?;
    for p in bundle.trajectory {
        traj.row([
            p.round_index.to_string(),
            p.method.clone(),
            format_float(p.coords[0]),
            format_float(p.coords[1]),
            format_float(p.loss),
        ])?;
    }
    written.push(traj.finish()?);

    let mut grid = CsvOut::create(out_dir, LANDSCAPE_GRID, &["ix", "iy", "x", "y", "loss"])?;
    for c in bundle.landscape {
        grid.row([
            c.ix.to_string(),
            c.iy.to_string(),
            format_float(c.x),
            format_float(c.y),
            format_float(c.loss),
        ])?;
    }
    written.push(grid.finish()?);

    written.push(write_json(out_dir, RUN_CONFIG, bundle.run_config)?);
    Ok(written)
}

/// Reads a CSV file written by [`export_reports`] as header plus rows of strings.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), MetricsError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| MetricsError::csv(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| MetricsError::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| MetricsError::csv(path, e))
        })
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

/// One `loss_curve.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub round_index: usize,
    pub method: Method,
    pub loss: f64,
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRow>, MetricsError> {
    let (_, rows) = read_csv(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = |msg: String| MetricsError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg,
            };
            if row.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", row.len())));
            }
            Ok(LossRow {
                round_index: row[0].parse().map_err(|e| bad(format!("round: {e}")))?,
                method: row[1].parse().map_err(|e| bad(format!("method: {e}")))?,
                loss: row[2].parse().map_err(|e| bad(format!("loss: {e}")))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::comm_cost;
    use crate::metrics::SpectrumLog;

    fn report(round_index: usize, loss: f64, s: usize) -> RoundReport {
        RoundReport {
            round_index,
            method: Method::FedMomentum,
            loss,
            spectra: vec![SpectrumLog {
                round_index,
                layer_id: 0,
                sigma: vec![std::f64::consts::PI, 1.0 / 3.0, 1e-300],
                r_eff: 2 + s,
                s,
            }],
            comm: comm_cost(Method::FedMomentum, &[(4, 4)], 2, s, 3).unwrap(),
            update_error: 0.0,
            tracked_delta: None,
            wall_time_secs: 0.25,
        }
    }

    fn bundle_files(runs: &[MethodRun], dir: &Path) -> Vec<PathBuf> {
        let cfg = serde_json::json!({"seed": 1});
        export_reports(
            &ExportBundle {
                runs,
                trajectory: &[],
                landscape: &[],
                run_config: &cfg,
            },
            dir,
        )
        .unwrap()
    }

    #[test]
    fn empty_reports_give_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = bundle_files(&[], dir.path());
        assert_eq!(files.len(), 7);
        for f in files.iter().filter(|f| f.extension().unwrap() == "csv") {
            let text = fs::read_to_string(f).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", f.display());
        }
        assert_eq!(fs::read_to_string(dir.path().join(COMM_COST)).unwrap().trim(), "[]");
    }

    #[test]
    fn two_rounds_give_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let runs = [MethodRun {
            method: Method::FedMomentum,
            reports: vec![report(0, 1.0, 1), report(1, 0.5, 0)],
        }];
        bundle_files(&runs, dir.path());
        let text = fs::read_to_string(dir.path().join(LOSS_CURVE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "round,method,loss");
        let resid = fs::read_to_string(dir.path().join(RESIDUAL_RANK)).unwrap();
        assert_eq!(resid.lines().count(), 3);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let losses = [0.1 + 0.2, 1.0 / 3.0, 5e-324, 1.797_693_134_862_315_7e308, 123_456.789_012_345_68];
        let runs = [MethodRun {
            method: Method::FedMomentum,
            reports: losses.iter().enumerate().map(|(i, &l)| report(i, l, i % 2)).collect(),
        }];
        bundle_files(&runs, dir.path());
        let back = read_loss_curve(&dir.path().join(LOSS_CURVE)).unwrap();
        assert_eq!(back.len(), losses.len());
        for (row, r) in back.iter().zip(&runs[0].reports) {
            assert_eq!(row.loss.to_bits(), r.loss.to_bits());
            assert_eq!(row.round_index, r.round_index);
            assert_eq!(row.method, Method::FedMomentum);
        }
        let (header, rows) = read_csv(&dir.path().join(SPECTRA)).unwrap();
        assert_eq!(header, ["round", "method", "layer", "index", "sigma", "r_eff", "s"]);
        for (row, expected) in rows.iter().zip(runs[0].reports.iter().flat_map(|r| r.spectra[0].sigma.clone())) {
            assert_eq!(row[4].parse::<f64>().unwrap().to_bits(), expected.to_bits());
        }
        let comm: Vec<CommRow> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(COMM_COST)).unwrap()).unwrap();
        assert_eq!(comm.len(), losses.len());
        assert_eq!(comm[1].report, runs[0].reports[1].comm);
    }

    #[test]
    fn write_failure_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let cfg = serde_json::json!({});
        let err = export_reports(
            &ExportBundle {
                runs: &[],
                trajectory: &[],
                landscape: &[],
                run_config: &cfg,
            },
            &blocker.join("sub"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
