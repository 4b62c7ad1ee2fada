//! Cartesian experiment grids with replicated, independently seeded runs.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::PipelineConfig;
use super::pipeline::{run_pipeline, RunRecord};
use super::stats::mean_std;
use crate::error::{Error, Result};
use crate::seed;

/// One grid dimension: a dotted config path and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub path: String,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn new(path: impl Into<String>, values: impl IntoIterator<Item = impl Into<Value>>) -> Self {
        Self {
            path: path.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    /// Parses `path=[v1, v2, …]` (a JSON list) or `path=v1,v2,…`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("axis `{spec}` is not path=values")))?;
        let values = match serde_json::from_str::<Value>(raw.trim()) {
            Ok(Value::Array(items)) => items,
            _ => raw
                .split(',')
                .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string())))
                .collect(),
        };
        if values.is_empty() {
            return Err(Error::config(format!("axis `{path}` has no values")));
        }
        Ok(Self::new(path.trim(), values))
    }
}

/// Seed of replicate `r`: the base seed itself for the first one.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    if r == 0 {
        base
    } else {
        seed::derive_indexed(base, "replicate", r as u64)
    }
}

pub(crate) fn work_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build work pool: {e}")))
}

/// Every cell of the product as its list of `(path, value)` assignments, last axis fastest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.path.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub cell: usize,
    pub replicate: usize,
    pub assignments: Vec<(String, Value)>,
    pub record: RunRecord,
}

/// Configurations of every (cell, replicate), validated before anything runs.
pub fn expand(base: &PipelineConfig, axes: &[Axis]) -> Result<Vec<(usize, usize, Vec<(String, Value)>, PipelineConfig)>> {
    let mut jobs = Vec::new();
    for (c, assignments) in cells(axes).into_iter().enumerate() {
        let mut cfg = base.clone();
        for (path, value) in &assignments {
            cfg.set_value(path, value.clone())?;
        }
        cfg.validate()?;
        for r in 0..base.replicates {
            let mut run = cfg.clone();
            run.seed = replicate_seed(base.seed, r);
            run.replicates = 1;
            jobs.push((c, r, assignments.clone(), run));
        }
    }
    Ok(jobs)
}

/// Runs every cell `base.replicates` times on a pool of `jobs` threads.
/// Results come back in (cell, replicate) order regardless of scheduling.
pub fn grid_experiment(base: &PipelineConfig, axes: &[Axis], jobs: usize, out: Option<&Path>) -> Result<Vec<GridRun>> {
    let planned = expand(base, axes)?;
    let runs = work_pool(jobs)?.install(|| {
        planned
            .into_par_iter()
            .map(|(cell, replicate, assignments, cfg)| {
                let record = run_pipeline(&cfg, None)?;
                Ok(GridRun {
                    cell,
                    replicate,
                    assignments,
                    record,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_grid_csv(&runs, axes, &dir.join("grid.csv"))?;
        let file = std::io::BufWriter::new(std::fs::File::create(dir.join("runs.json"))?);
        serde_json::to_writer(file, &runs)?;
    }
    Ok(runs)
}

fn value_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per cell: axis values, replicate count, then mean and standard
/// deviation of standard, robust and pseudo-label accuracy.
pub fn write_grid_csv(runs: &[GridRun], axes: &[Axis], path: &Path) -> Result<()> {
    let attacks: Vec<String> = runs
        .first()
        .map(|r| r.record.report.robust_accuracy.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["cell".to_string()];
    header.extend(axes.iter().map(|a| a.path.clone()));
    header.push("replicates".into());
    let mut metrics = vec!["std_acc".to_string()];
    metrics.extend(attacks.iter().map(|a| format!("robust_acc@{a}")));
    metrics.push("pseudo_acc".into());
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    writeln!(w, "{}", header.join(","))?;
    let n_cells = runs.iter().map(|r| r.cell + 1).max().unwrap_or(0);
    for c in 0..n_cells {
        let group: Vec<&GridRun> = runs.iter().filter(|r| r.cell == c).collect();
        let mut row = vec![c.to_string()];
        row.extend(group[0].assignments.iter().map(|(_, v)| value_cell(v)));
        row.push(group.len().to_string());
        let mut columns: Vec<Vec<f64>> = vec![group.iter().map(|r| r.record.report.standard_accuracy).collect()];
        for a in &attacks {
            columns.push(group.iter().map(|r| r.record.report.robust_accuracy[a]).collect());
        }
        columns.push(group.iter().filter_map(|r| r.record.report.pseudo_label_accuracy).collect());
        for values in columns {
            if values.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (m, s) = mean_std(&values);
                row.extend([m.to_string(), s.to_string()]);
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
