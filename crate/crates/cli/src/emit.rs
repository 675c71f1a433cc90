//! Report files: the JSON report and summaries, plus one CSV table per curve.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use sdelab::density::{csv_number, write_density_csv, GridFileError};
use sdelab::montecarlo::PathStatus;
use serde::Serialize;
use thiserror::Error;

use crate::run::{Artifacts, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    All,
    Json,
    Csv,
}

impl Format {
    fn json(self) -> bool {
        self != Format::Csv
    }

    fn csv(self) -> bool {
        self != Format::Json
    }
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot write {path}: {source}")]
    Grid { path: PathBuf, source: GridFileError },
    #[error("cannot serialize {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn status_name(s: PathStatus) -> &'static str {
    match s {
        PathStatus::Alive => "alive",
        PathStatus::ExitedLargestRadius => "exited-largest-radius",
        PathStatus::Degenerate => "degenerate",
        PathStatus::Failed => "failed",
    }
}

fn num(v: f64) -> String {
    csv_number(v)
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct Out<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Out<'_> {
    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), EmitError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|source| EmitError::Io {
            path: path.clone(),
            source,
        })?;
        Ok((path, BufWriter::new(f)))
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), EmitError> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|source| EmitError::Json {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n")
            .and_then(|_| w.flush())
            .map_err(|source| EmitError::Io {
                path: path.clone(),
                source,
            })?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), EmitError> {
        let (path, w) = self.create(name)?;
        let wrap = |source| EmitError::Csv {
            path: path.clone(),
            source,
        };
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header).map_err(wrap)?;
        for r in rows {
            out.write_record(r).map_err(wrap)?;
        }
        out.flush().map_err(|e| wrap(e.into()))?;
        self.written.push(path);
        Ok(())
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Write the report files into `dir` (created if missing); returns the paths written.
pub fn emit(report: &Report, artifacts: &Artifacts, dir: &Path, format: Format) -> Result<Vec<PathBuf>, EmitError> {
    fs::create_dir_all(dir).map_err(|source| EmitError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Out {
        dir,
        written: Vec::new(),
    };
    let stages = &report.stages;
    let d = report.scenario.dimension;

    if format.json() {
        out.json("report.json", report)?;
        if let Some(c) = stages.criteria.result() {
            out.json("verdicts.json", c)?;
        }
        if let Some(dens) = stages.density.result() {
            out.json("density_diagnostics.json", dens)?;
        }
    }
    if !format.csv() {
        return Ok(out.written);
    }

    if let Some(approx) = &artifacts.density {
        let (path, w) = out.create("density_grid.csv")?;
        write_density_csv(approx, w).map_err(|source| EmitError::Grid {
            path: path.clone(),
            source,
        })?;
        out.written.push(path);
    }
    if let Some(c) = stages.criteria.result() {
        if !c.volume_profile.is_empty() {
            let rows: Vec<_> = c
                .volume_profile
                .iter()
                .map(|r| vec![num(r.radius), num(r.mu_ball), num(r.ratio)])
                .collect();
            out.csv("volume_profile.csv", &header(&["radius", "mu_ball", "ratio"]), &rows)?;
        }
    }
    if let Some(sim) = stages.simulation.result() {
        if !sim.moments.is_empty() {
            let rows: Vec<_> = sim
                .moments
                .iter()
                .flat_map(|c| {
                    c.rows.iter().map(move |r| {
                        vec![
                            c.phi.clone(),
                            num(r.t),
                            num(r.estimate.estimate),
                            num(r.estimate.std_error),
                            r.estimate.paths.to_string(),
                            opt(r.bound),
                            opt(r.ratio),
                        ]
                    })
                })
                .collect();
            out.csv(
                "moments.csv",
                &header(&["phi", "t", "estimate", "std_error", "paths", "bound", "ratio"]),
                &rows,
            )?;
        }
        if !sim.exits.is_empty() {
            let rows: Vec<_> = sim
                .exits
                .iter()
                .map(|r| {
                    vec![
                        num(r.radius),
                        r.paths.to_string(),
                        r.exited.to_string(),
                        num(r.probability),
                        num(r.ci_low),
                        num(r.ci_high),
                        opt(r.median),
                        opt(r.mean.as_ref().map(|m| m.estimate)),
                        opt(r.mean.as_ref().map(|m| m.std_error)),
                    ]
                })
                .collect();
            out.csv(
                "exits.csv",
                &header(&[
                    "radius",
                    "paths",
                    "exited",
                    "probability",
                    "ci_low",
                    "ci_high",
                    "median",
                    "mean",
                    "mean_std_error",
                ]),
                &rows,
            )?;
        }
        if let Some(t) = &sim.transition {
            let rows: Vec<_> = t
                .report
                .means
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let ks = t.report.ks.iter().find(|r| r.coordinate == k + 1);
                    vec![
                        (k + 1).to_string(),
                        num(m.estimate),
                        num(m.std_error),
                        opt(ks.map(|r| r.distance)),
                        opt(ks.map(|r| r.critical_5)),
                        opt(ks.map(|r| r.critical_1)),
                    ]
                })
                .collect();
            out.csv(
                "transition.csv",
                &header(&["coordinate", "mean", "std_error", "ks_distance", "critical_5", "critical_1"]),
                &rows,
            )?;
        }
    }
    if let Some(ens) = &artifacts.ensemble {
        let mut cols = vec!["index".to_string(), "status".to_string()];
        cols.extend(ens.config.radii.iter().map(|r| format!("exit_{r}")));
        cols.extend(header(&["clips", "max_step", "stopped_at"]));
        let rows: Vec<_> = ens
            .paths
            .iter()
            .map(|p| {
                let mut r = vec![p.index.to_string(), status_name(p.status).to_string()];
                r.extend(p.exit_times.iter().map(|t| opt(*t)));
                r.extend([p.clips.to_string(), num(p.max_step), opt(p.stopped_at)]);
                r
            })
            .collect();
        out.csv("ensemble.csv", &cols, &rows)?;
    }
    if let Some(e) = stages.ergodic.result() {
        let rows: Vec<_> = e
            .times
            .iter()
            .zip(&e.averages)
            .map(|(t, a)| vec![num(*t), num(*a)])
            .collect();
        out.csv("ergodic.csv", &header(&["t", "average"]), &rows)?;
    }
    if let Some(k) = stages.krylov.result() {
        let mut cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        cols.extend(header(&["estimate", "std_error", "paths", "skipped", "clips", "absorbed"]));
        let rows: Vec<_> = k
            .report
            .rows
            .iter()
            .map(|r| {
                let mut row: Vec<String> = r.start.iter().copied().map(num).collect();
                row.extend([
                    num(r.estimate.estimate),
                    num(r.estimate.std_error),
                    r.estimate.paths.to_string(),
                    r.skipped.to_string(),
                    r.clips.to_string(),
                    r.absorbed.to_string(),
                ]);
                row
            })
            .collect();
        out.csv("krylov.csv", &cols, &rows)?;
    }
    if let Some(c) = stages.comparisons.result() {
        let rows: Vec<_> = c
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    num(c.observed),
                    num(c.reference),
                    c.consistent.to_string(),
                ]
            })
            .collect();
        out.csv(
            "comparisons.csv",
            &header(&["name", "observed", "reference", "consistent"]),
            &rows,
        )?;
    }
    Ok(out.written)
}
