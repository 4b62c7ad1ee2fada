//! Named trend reproductions: each preset runs a small multi-seed experiment,
//! writes its raw rows as CSV and returns a verdict made of individual checks.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AnnotationMethod, PipelineConfig};
use super::grid::{replicate_seed, work_pool};
use super::pipeline::{annotate_stage, prepare, run_pipeline, RunRecord};
use super::stats::{mean_std, sign_test, spearman};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    /// Pseudo-label accuracy of the four annotators across pool sizes.
    LabelQuality,
    /// Late-epoch agreement of the two co-trained networks.
    TotalVariance,
    /// Injected label accuracy against final standard and robust accuracy.
    Heatmap,
    /// Full pipeline with deep, pretrained and oracle annotation.
    AdvTraining,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::LabelQuality, Figure::TotalVariance, Figure::Heatmap, Figure::AdvTraining];

    pub fn name(self) -> &'static str {
        match self {
            Figure::LabelQuality => "label_quality",
            Figure::TotalVariance => "total_variance",
            Figure::Heatmap => "heatmap",
            Figure::AdvTraining => "adv_training",
        }
    }

    /// Seeds used when the caller does not ask for a count.
    pub fn default_seeds(self) -> usize {
        match self {
            Figure::Heatmap => 5,
            _ => 10,
        }
    }

    /// The base configuration of the preset.
    pub fn preset(self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 2024;
        match self {
            Figure::LabelQuality => {}
            Figure::TotalVariance => cfg.data.n_unlabeled = 400,
            Figure::Heatmap => cfg.annotation.method = AnnotationMethod::Oracle,
            Figure::AdvTraining => cfg.data.n_unlabeled = 400,
        }
        cfg
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Figure::ALL.iter().map(|f| f.name()).collect();
                Error::validation(format!("unknown figure `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

pub const LABEL_QUALITY_SIZES: [usize; 4] = [50, 100, 200, 400];
pub const HEATMAP_ACCURACIES: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const HEATMAP_SIZES: [usize; 2] = [100, 200];

/// One named pass/fail statement with the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub figure: Figure,
    pub seeds: usize,
    pub checks: Vec<Check>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(
            f,
            "{} over {} seeds: {}",
            self.figure,
            self.seeds,
            if self.passed() { "trend satisfied" } else { "trend violated" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    pub seeds: usize,
    pub jobs: usize,
}

/// Runs a preset from `base` (normally `figure.preset()` plus user overrides).
/// With `out`, writes `<figure>.csv` and `verdict.json` there.
pub fn reproduce(figure: Figure, base: &PipelineConfig, opts: &ReproduceOptions, out: Option<&Path>) -> Result<Verdict> {
    if opts.seeds < 2 {
        return Err(Error::validation("a trend needs at least two seeds"));
    }
    base.validate()?;
    let seeds: Vec<u64> = (0..opts.seeds).map(|r| replicate_seed(base.seed, r)).collect();
    let table = match figure {
        Figure::LabelQuality => label_quality(base, &seeds, opts.jobs)?,
        Figure::TotalVariance => total_variance(base, &seeds, opts.jobs)?,
        Figure::Heatmap => heatmap(base, &seeds, opts.jobs)?,
        Figure::AdvTraining => adv_training(base, &seeds, opts.jobs)?,
    };
    let verdict = Verdict {
        figure,
        seeds: opts.seeds,
        checks: table.checks,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{figure}.csv")))?);
        writeln!(w, "{}", table.header.join(","))?;
        for row in &table.rows {
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        let file = std::io::BufWriter::new(std::fs::File::create(dir.join("verdict.json"))?);
        serde_json::to_writer_pretty(file, &verdict)?;
    }
    Ok(verdict)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    checks: Vec<Check>,
}

fn par_run<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    work_pool(jobs)?.install(|| items.par_iter().map(&f).collect())
}

fn strings<const N: usize>(items: [&str; N]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// The smallest count that is at least 80% of `n`.
fn majority(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Pseudo-label accuracy of one annotator on one (seed, pool size).
pub fn annotation_accuracy(base: &PipelineConfig, seed: u64, n_unlabeled: usize, method: AnnotationMethod) -> Result<(f64, Vec<f64>)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.data.n_unlabeled = n_unlabeled;
    cfg.annotation.method = method;
    cfg.annotation.label_accuracy = None;
    let prep = prepare(&cfg)?;
    let ann = annotate_stage(&cfg, &prep)?;
    let score = prep
        .pool_accuracy()
        .ok_or_else(|| Error::validation("the pool has no held-back labels to score against"))?;
    let tv = ann.history.iter().filter_map(|h| h.total_variance).collect();
    Ok((score(&ann.pseudo_labels), tv))
}

const ANNOTATORS: [AnnotationMethod; 4] = [
    AnnotationMethod::Pretrained,
    AnnotationMethod::SelfTrain,
    AnnotationMethod::Vanilla,
    AnnotationMethod::Deep,
];

fn label_quality(base: &PipelineConfig, seeds: &[u64], jobs: usize) -> Result<Table> {
    let mut tasks = Vec::new();
    for &n in &LABEL_QUALITY_SIZES {
        for (s, &seed) in seeds.iter().enumerate() {
            for m in ANNOTATORS {
                tasks.push((n, s, seed, m));
            }
        }
    }
    let acc = par_run(jobs, &tasks, |&(n, _, seed, m)| Ok(annotation_accuracy(base, seed, n, m)?.0))?;
    let column = |m: AnnotationMethod, size: Option<usize>| -> Vec<f64> {
        tasks
            .iter()
            .zip(&acc)
            .filter(|((n, _, _, k), _)| *k == m && size.is_none_or(|s| s == *n))
            .map(|(_, a)| *a)
            .collect()
    };
    let rows = tasks
        .iter()
        .zip(&acc)
        .map(|((n, s, _, m), a)| vec![s.to_string(), n.to_string(), m.name().to_string(), a.to_string()])
        .collect();

    let mut checks = Vec::new();
    let mut order_ok = true;
    let mut detail = Vec::new();
    for &n in &LABEL_QUALITY_SIZES {
        let means: Vec<f64> = ANNOTATORS.iter().map(|&m| mean_std(&column(m, Some(n))).0).collect();
        order_ok &= means.windows(2).all(|w| w[1] >= w[0]);
        detail.push(format!(
            "|D_U|={n}: pre {:.3} st {:.3} van {:.3} deep {:.3}",
            means[0], means[1], means[2], means[3]
        ));
    }
    checks.push(Check::new("mean ordering deep >= vanilla >= self_train >= pretrained", order_ok, detail.join("; ")));
    for pair in ANNOTATORS.windows(2).rev() {
        let (lo, hi) = (pair[0], pair[1]);
        let t = sign_test(&column(hi, None), &column(lo, None));
        checks.push(Check::new(
            format!("{} > {} (paired sign test)", hi.name(), lo.name()),
            t.p_value < 0.1,
            format!("wins {} losses {} ties {} p = {:.4}", t.wins, t.losses, t.ties, t.p_value),
        ));
    }
    let deep = column(AnnotationMethod::Deep, None);
    let sizes: Vec<f64> = tasks
        .iter()
        .filter(|t| t.3 == AnnotationMethod::Deep)
        .map(|t| t.0 as f64)
        .collect();
    let rho = spearman(&sizes, &deep);
    checks.push(Check::new(
        "deep accuracy increases with |D_U| (Spearman > 0)",
        rho.is_some_and(|r| r > 0.0),
        format!("rho = {}", rho.map_or("undefined".into(), |r| format!("{r:.4}"))),
    ));
    Ok(Table {
        header: strings(["seed", "n_unlabeled", "method", "pseudo_acc"]),
        rows,
        checks,
    })
}

/// Mean of the last quarter of a curve (at least one point).
pub fn final_quartile_mean(curve: &[f64]) -> f64 {
    let k = curve.len();
    let tail = &curve[(k * 3 / 4).min(k.saturating_sub(1))..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn total_variance(base: &PipelineConfig, seeds: &[u64], jobs: usize) -> Result<Table> {
    let methods = [AnnotationMethod::Vanilla, AnnotationMethod::Deep];
    let tasks: Vec<(usize, u64, AnnotationMethod)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(s, &seed)| methods.map(|m| (s, seed, m)))
        .collect();
    let n = base.data.n_unlabeled;
    let curves = par_run(jobs, &tasks, |&(_, seed, m)| Ok(annotation_accuracy(base, seed, n, m)?.1))?;
    if curves.iter().any(|c| c.is_empty()) {
        return Err(Error::validation("co-training recorded no total variance"));
    }
    let mut rows = Vec::new();
    for ((s, _, m), curve) in tasks.iter().zip(&curves) {
        for (epoch, tv) in curve.iter().enumerate() {
            rows.push(vec![s.to_string(), m.name().to_string(), epoch.to_string(), tv.to_string()]);
        }
    }
    let tail: Vec<f64> = curves.iter().map(|c| final_quartile_mean(c)).collect();
    let vanilla: Vec<f64> = tail.iter().step_by(2).copied().collect();
    let deep: Vec<f64> = tail.iter().skip(1).step_by(2).copied().collect();
    let wins = deep.iter().zip(&vanilla).filter(|(d, v)| d > v).count();
    let need = majority(seeds.len());
    let check = Check::new(
        "final-quartile total variance deep > vanilla",
        wins >= need,
        format!(
            "{wins} of {} seeds (need {need}); mean deep {:.5} vanilla {:.5}",
            seeds.len(),
            mean_std(&deep).0,
            mean_std(&vanilla).0
        ),
    );
    Ok(Table {
        header: strings(["seed", "method", "epoch", "total_variance"]),
        rows,
        checks: vec![check],
    })
}

fn metric_names(base: &PipelineConfig) -> Vec<String> {
    let mut names = vec!["std_acc".to_string()];
    names.extend(base.eval.attacks.iter().map(|a| format!("robust_acc@{}", a.name)));
    names
}

fn metrics(rec: &RunRecord, base: &PipelineConfig) -> Vec<f64> {
    let mut out = vec![rec.report.standard_accuracy];
    out.extend(base.eval.attacks.iter().map(|a| rec.report.robust_accuracy[&a.name]));
    out
}

fn heatmap(base: &PipelineConfig, seeds: &[u64], jobs: usize) -> Result<Table> {
    let mut tasks = Vec::new();
    for (s, &seed) in seeds.iter().enumerate() {
        for &n in &HEATMAP_SIZES {
            for &acc in &HEATMAP_ACCURACIES {
                tasks.push((s, seed, n, acc));
            }
        }
    }
    let results = par_run(jobs, &tasks, |&(_, seed, n, acc)| {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.n_unlabeled = n;
        cfg.annotation.method = AnnotationMethod::Oracle;
        cfg.annotation.label_accuracy = Some(acc);
        Ok(metrics(&run_pipeline(&cfg, None)?, base))
    })?;
    let names = metric_names(base);
    let mut header = strings(["seed", "n_unlabeled", "label_accuracy"]);
    header.extend(names.iter().cloned());
    let rows = tasks
        .iter()
        .zip(&results)
        .map(|((s, _, n, acc), m)| {
            let mut row = vec![s.to_string(), n.to_string(), acc.to_string()];
            row.extend(m.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    let mut checks = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let per_seed: Vec<f64> = (0..seeds.len())
            .map(|s| {
                let (x, y): (Vec<f64>, Vec<f64>) = tasks
                    .iter()
                    .zip(&results)
                    .filter(|(t, _)| t.0 == s)
                    .map(|(t, m)| (t.3, m[k]))
                    .unzip();
                // a seed whose metric never moves carries no rank information
                spearman(&x, &y).unwrap_or(0.0)
            })
            .collect();
        let (rho, sd) = mean_std(&per_seed);
        checks.push(Check::new(
            format!("Spearman(label accuracy, {name}) > 0.7"),
            rho > 0.7,
            format!("mean rho {rho:.4} (sd {sd:.4}) over {} seeds", seeds.len()),
        ));
    }
    Ok(Table { header, rows, checks })
}

fn adv_training(base: &PipelineConfig, seeds: &[u64], jobs: usize) -> Result<Table> {
    let methods = [AnnotationMethod::Pretrained, AnnotationMethod::Deep, AnnotationMethod::Oracle];
    let tasks: Vec<(usize, u64, AnnotationMethod)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(s, &seed)| methods.map(|m| (s, seed, m)))
        .collect();
    let results = par_run(jobs, &tasks, |&(_, seed, m)| {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.annotation.method = m;
        cfg.annotation.label_accuracy = None;
        let rec = run_pipeline(&cfg, None)?;
        Ok((metrics(&rec, base), rec.report.pseudo_label_accuracy))
    })?;
    let names = metric_names(base);
    let mut header = strings(["seed", "method"]);
    header.extend(names.iter().cloned());
    header.push("pseudo_acc".into());
    let rows = tasks
        .iter()
        .zip(&results)
        .map(|((s, _, m), (values, pseudo))| {
            let mut row = vec![s.to_string(), m.name().to_string()];
            row.extend(values.iter().map(|v| v.to_string()));
            row.push(pseudo.map(|p| p.to_string()).unwrap_or_default());
            row
        })
        .collect();
    let by = |m: AnnotationMethod, k: usize| -> Vec<f64> {
        tasks
            .iter()
            .zip(&results)
            .filter(|(t, _)| t.2 == m)
            .map(|(_, r)| r.0[k])
            .collect()
    };
    let need = majority(seeds.len());
    let robust = names.iter().position(|n| n == "robust_acc@PGD-5").unwrap_or(1.min(names.len() - 1));
    let mut checks = Vec::new();
    for k in [0, robust] {
        let (rst, rct, oracle) = (
            by(AnnotationMethod::Pretrained, k),
            by(AnnotationMethod::Deep, k),
            by(AnnotationMethod::Oracle, k),
        );
        let at_least = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x >= y).count();
        let n = at_least(&rct, &rst);
        checks.push(Check::new(
            format!("RCT >= RST in {}", names[k]),
            n >= need,
            format!(
                "{n} of {} seeds (need {need}); mean RCT {:.4} RST {:.4}",
                seeds.len(),
                mean_std(&rct).0,
                mean_std(&rst).0
            ),
        ));
        let n = at_least(&oracle, &rct);
        checks.push(Check::new(
            format!("oracle >= RCT in {}", names[k]),
            n >= need,
            format!("{n} of {} seeds (need {need}); mean oracle {:.4}", seeds.len(), mean_std(&oracle).0),
        ));
    }
    Ok(Table { header, rows, checks })
}
