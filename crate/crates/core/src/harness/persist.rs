//! Run artifacts on disk: `run.json`, `epochs.csv`, `annotation.csv`,
//! `annotation_history.csv`.
//!
//! Floats are written in shortest round-trip form, so every file reads back
//! bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::pipeline::RunRecord;
use crate::annotate::{Annotation, HistoryRow};
use crate::data::{read_rows, write_csv, Dataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::robustify::CurvePoint;

pub fn write_run(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = BufWriter::new(File::create(dir.join("run.json"))?);
    serde_json::to_writer_pretty(file, record)?;
    let attacks: Vec<String> = record.config.eval.attacks.iter().map(|a| a.name.clone()).collect();
    write_curves(&record.report.curves, &attacks, &dir.join("epochs.csv"))
}

pub fn read_run(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad number `{field}`"),
    })
}

/// Columns `epoch,std_acc,robust_acc@<attack>…,train_loss,regularizer`; cells
/// of unevaluated epochs are empty.
pub fn write_curves(curves: &[CurvePoint], attacks: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["epoch".to_string(), "std_acc".to_string()];
    header.extend(attacks.iter().map(|a| format!("robust_acc@{a}")));
    header.extend(["train_loss".to_string(), "regularizer".to_string()]);
    writeln!(w, "{}", header.join(","))?;
    for c in curves {
        let mut row = vec![c.epoch.to_string(), opt(c.standard_accuracy)];
        row.extend(attacks.iter().map(|a| opt(c.robust_accuracy.get(a).copied())));
        row.extend([c.train_loss.to_string(), opt(c.regularizer)]);
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let attacks: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("robust_acc@").map(str::to_owned))
        .collect();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| parse_opt(field(i), path, line);
        let epoch = field(0).parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: "bad epoch".into(),
        })?;
        let mut robust_accuracy = BTreeMap::new();
        for (k, name) in attacks.iter().enumerate() {
            if let Some(v) = num(2 + k)? {
                robust_accuracy.insert(name.clone(), v);
            }
        }
        let base = 2 + attacks.len();
        out.push(CurvePoint {
            epoch,
            standard_accuracy: num(1)?,
            robust_accuracy,
            train_loss: num(base)?.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "missing train_loss".into(),
            })?,
            regularizer: num(base + 1)?,
        });
    }
    Ok(out)
}

pub fn write_history(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        // serde writes the header with the first record only
        w.write_record(HISTORY_COLUMNS)?;
    }
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

const HISTORY_COLUMNS: [&str; 10] = [
    "epoch",
    "ce1",
    "ce2",
    "js_unlabeled",
    "js_labeled_adv",
    "js_unlabeled_adv",
    "total_variance",
    "pseudo_acc1",
    "pseudo_acc2",
    "recruited",
];

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// The pseudo-labeled pool in the dataset CSV format plus a `confidence` column.
pub fn write_annotation(pool: &UnlabeledSet, ann: &Annotation, path: &Path) -> Result<()> {
    let ds = pool.with_labels(ann.pseudo_labels.clone(), "pseudo-labeled")?;
    write_csv(&ds, Some(&ann.confidence), path)
}

/// Reads an annotation file back into the pseudo-labeled set and its confidences.
pub fn read_annotation(path: &Path, class_count: usize) -> Result<(Dataset, Vec<f64>)> {
    let rows = read_rows(path)?;
    let mut features = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut confidence = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let bad = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        };
        if fields.len() < 3 {
            return Err(bad("expected label, features and confidence"));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>>>()?;
        let (conf, feats) = nums.split_last().expect("at least two numbers");
        labels.push(fields[0].parse::<usize>().map_err(|_| bad("bad pseudo label"))?);
        confidence.push(*conf);
        features.push(feats.to_vec());
    }
    let tensor = if features.is_empty() {
        Tensor::new(vec![0, 0], vec![])?
    } else {
        Tensor::from_rows(&features)?
    };
    let ds = Dataset::labeled(tensor, labels, class_count, path.display().to_string())?;
    Ok((ds, confidence))
}
