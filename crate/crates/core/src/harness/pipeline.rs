//! The end-to-end run: split, annotate, build `S = S_L ∪ S_U`, train the
//! robust network, evaluate.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AnnotationMethod, DataSource, PipelineConfig};
use super::persist;
use crate::annotate::{deep_cotrain, pretrained_annotator, self_train, vanilla_cotrain, Annotation, HistoryRow};
use crate::data::{agreement, corrupt_labels, load_csv, split, two_moons, Dataset, GaussianClusters, HiddenLabels, UnlabeledSet};
use crate::error::{Error, Result};
use crate::nets::{MlpSpec, Network};
use crate::robustify::{evaluate, train_from, CurvePoint, EvalReport, TrainOutcome};
use crate::seed;

/// Inputs of the annotation and training stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub labeled: Dataset,
    pub pool: UnlabeledSet,
    pub test: Dataset,
}

impl Prepared {
    /// Scores predictions against the pool's held-back labels, when it has any.
    pub fn pool_accuracy(&self) -> Option<impl Fn(&[usize]) -> f64 + Sync + '_> {
        match self.pool.hidden_labels() {
            HiddenLabels::Known(truth) if !truth.is_empty() => Some(move |pred: &[usize]| agreement(pred, truth)),
            _ => None,
        }
    }
}

fn generate(cfg: &PipelineConfig, n: usize, tag: &str) -> Result<Dataset> {
    let seed = seed::derive(cfg.seed, tag);
    match &cfg.data.source {
        DataSource::TwoMoons { noise } => two_moons(n, *noise, seed),
        DataSource::TwoGaussians {
            separation,
            noise,
            stretch,
            angle_deg,
        } => {
            let ds = GaussianClusters {
                n_per_class: n.div_ceil(2).max(1),
                separation: *separation,
                noise: *noise,
                stretch: *stretch,
                angle: angle_deg.to_radians(),
            }
            .generate(seed)?;
            let idx: Vec<usize> = (0..n).collect();
            Ok(ds.subset(&idx))
        }
        DataSource::Csv { .. } => unreachable!("csv sources are loaded, not generated"),
    }
}

/// Builds `S_L`, `D_U` and the test set.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let (train, test) = match &d.source {
        DataSource::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
        _ => (
            generate(cfg, d.n_labeled + d.n_unlabeled, "train-data")?,
            generate(cfg, d.n_test, "test-data")?,
        ),
    };
    if !test.is_fully_labeled() || test.is_empty() {
        return Err(Error::validation("the test set must be non-empty and fully labeled"));
    }
    let (labeled, pool) = split(&train, d.n_labeled, seed::derive(cfg.seed, "split"))?;
    let pool = pool.take(d.n_unlabeled);
    Ok(Prepared { labeled, pool, test })
}

fn widths(input: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(classes);
    w
}

/// Specs of the two annotator networks.
pub fn annotator_specs(cfg: &PipelineConfig, prep: &Prepared) -> [MlpSpec; 2] {
    let w = widths(prep.labeled.dim(), &cfg.nets.annotator_hidden, prep.labeled.class_count());
    [
        MlpSpec::new(w.clone(), seed::derive(cfg.seed, "annotator-1")),
        MlpSpec::new(w, seed::derive(cfg.seed, "annotator-2")),
    ]
}

pub fn robust_spec(cfg: &PipelineConfig, prep: &Prepared) -> MlpSpec {
    let w = widths(prep.labeled.dim(), &cfg.nets.robust_hidden, prep.labeled.class_count());
    MlpSpec::new(w, seed::derive(cfg.seed, "robust"))
}

/// Runs the configured annotator on the pool.
pub fn annotate_stage(cfg: &PipelineConfig, prep: &Prepared) -> Result<Annotation> {
    let a = &cfg.annotation;
    let specs = annotator_specs(cfg, prep);
    let scorer = prep.pool_accuracy();
    let probe = scorer.as_ref().map(|f| f as &(dyn Fn(&[usize]) -> f64 + Sync));
    match a.method {
        AnnotationMethod::Pretrained => pretrained_annotator(&prep.labeled, &prep.pool, &specs[0], &a.fit, probe),
        AnnotationMethod::SelfTrain => self_train(&prep.labeled, &prep.pool, &specs[0], &a.self_train, probe),
        AnnotationMethod::Vanilla => vanilla_cotrain(&prep.labeled, &prep.pool, &a.cotrain, [&specs[0], &specs[1]], probe),
        AnnotationMethod::Deep => deep_cotrain(&prep.labeled, &prep.pool, &a.cotrain, [&specs[0], &specs[1]], probe),
        AnnotationMethod::Oracle => {
            let truth = prep.pool.hidden_labels().reveal()?.to_vec();
            let n = truth.len();
            let labels = match a.label_accuracy {
                Some(acc) if n > 0 => {
                    let exact = prep.pool.with_labels(truth, "oracle")?;
                    corrupt_labels(&exact, acc, seed::derive(cfg.seed, "corrupt"))?.targets()?
                }
                _ => truth,
            };
            Ok(Annotation {
                pseudo_labels: labels,
                confidence: vec![1.0; n],
                annotator_id: 0,
                history: Vec::new(),
            })
        }
    }
}

/// `S_L ∪ S_U` with the annotation's labels on the pool.
pub fn augmented_set(prep: &Prepared, ann: &Annotation) -> Result<Dataset> {
    if prep.pool.is_empty() {
        return Ok(prep.labeled.clone());
    }
    let pseudo = prep.pool.with_labels(ann.pseudo_labels.clone(), "pseudo-labeled")?;
    Ok(prep.labeled.concat(&pseudo)?.with_provenance("labeled+pseudo-labeled"))
}

/// Trains the robust network on `S`, recording a curve row per epoch.
pub fn train_stage(cfg: &PipelineConfig, prep: &Prepared, ann: &Annotation) -> Result<(TrainOutcome, Vec<CurvePoint>)> {
    let set = augmented_set(prep, ann)?;
    let spec = robust_spec(cfg, prep);
    let init = match &cfg.warm_start {
        Some(path) => {
            let net = Network::load(path)?;
            if net.spec().widths != spec.widths {
                return Err(Error::validation("warm-start network has the wrong shape"));
            }
            net
        }
        None => Network::init(&spec)?,
    };
    let mut trainer = cfg.trainer.clone();
    trainer.seed = seed::derive(cfg.seed, "trainer");
    let every = cfg.eval.every;
    let mut curves = Vec::with_capacity(trainer.epochs);
    let outcome = train_from(init, &set, &trainer, &mut |stats, net| {
        let mut point = CurvePoint {
            epoch: stats.epoch,
            train_loss: stats.train_loss,
            regularizer: stats.regularizer,
            standard_accuracy: None,
            robust_accuracy: Default::default(),
        };
        let last = stats.epoch + 1 == trainer.epochs;
        if every > 0 && (stats.epoch + 1) % every == 0 && !last {
            let r = evaluate(net, &prep.test, &cfg.eval.attacks)?;
            point.standard_accuracy = Some(r.standard_accuracy);
            point.robust_accuracy = r.robust_accuracy;
        }
        curves.push(point);
        Ok(())
    })?;
    Ok((outcome, curves))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentHashes {
    /// SHA-256 of the resolved configuration.
    pub config: String,
    /// SHA-256 of `S_L`, `D_U` features and the test set.
    pub data: String,
    /// SHA-256 of the consumed annotation (labels and confidences).
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: PipelineConfig,
    pub annotation_history: Vec<HistoryRow>,
    pub report: EvalReport,
    pub hashes: ContentHashes,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Everything except the wall-clock time agrees.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        self.run_id == other.run_id
            && self.config == other.config
            && self.annotation_history == other.annotation_history
            && self.report == other.report
            && self.hashes == other.hashes
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn float_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = float_bytes(ds.features().data());
    for l in ds.labels() {
        out.extend(l.map_or(-1, |l| l as i64).to_le_bytes());
    }
    out
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    digest(&[&serde_json::to_vec(cfg).expect("config serializes")])
}

pub fn annotation_hash(ann: &Annotation) -> String {
    let labels: Vec<u8> = ann.pseudo_labels.iter().flat_map(|&l| (l as u64).to_le_bytes()).collect();
    digest(&[&labels, &float_bytes(&ann.confidence)])
}

fn data_hash(prep: &Prepared) -> String {
    digest(&[
        &dataset_bytes(&prep.labeled),
        &float_bytes(prep.pool.features().data()),
        &dataset_bytes(&prep.test),
    ])
}

fn open_out(cfg: &PipelineConfig, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    Ok(())
}

/// Runs every stage and, when `out` is given, persists `config.toml`,
/// `annotation.csv`, `annotation_history.csv`, `epochs.csv`, `run.json` and
/// `model.bin` there. The annotation files are written as soon as that stage
/// finishes.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    open_out(cfg, out).map_err(|e| e.in_stage("persist"))?;
    let prep = prepare(cfg).map_err(|e| e.in_stage("data"))?;
    let ann = annotate_stage(cfg, &prep).map_err(|e| e.in_stage("annotate"))?;
    if let Some(dir) = out {
        persist::write_annotation(&prep.pool, &ann, &dir.join("annotation.csv"))
            .and_then(|_| persist::write_history(&ann.history, &dir.join("annotation_history.csv")))
            .map_err(|e| e.in_stage("persist"))?;
    }
    finish(cfg, &prep, ann, out, started)
}

/// Skips the annotation stage and trains on the given labels for the pool.
pub fn run_with_annotation(cfg: &PipelineConfig, ann: Annotation, out: Option<&Path>) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    open_out(cfg, out).map_err(|e| e.in_stage("persist"))?;
    let prep = prepare(cfg).map_err(|e| e.in_stage("data"))?;
    if ann.pseudo_labels.len() != prep.pool.len() {
        return Err(Error::validation(format!(
            "annotation has {} labels for a pool of {}",
            ann.pseudo_labels.len(),
            prep.pool.len()
        ))
        .in_stage("annotate"));
    }
    finish(cfg, &prep, ann, out, started)
}

/// Reads `annotation.csv` back, checking that it labels exactly this pool.
pub fn load_annotation(path: &Path, prep: &Prepared) -> Result<Annotation> {
    let (ds, confidence) = persist::read_annotation(path, prep.pool.class_count())?;
    if ds.len() != prep.pool.len() || (!ds.is_empty() && ds.features() != prep.pool.features()) {
        return Err(Error::validation(format!(
            "{} does not annotate the configured unlabeled pool",
            path.display()
        )));
    }
    Ok(Annotation {
        pseudo_labels: ds.targets()?,
        confidence,
        annotator_id: 0,
        history: Vec::new(),
    })
}

fn finish(cfg: &PipelineConfig, prep: &Prepared, ann: Annotation, out: Option<&Path>, started: Instant) -> Result<RunRecord> {
    let (outcome, mut curves) = train_stage(cfg, prep, &ann).map_err(|e| e.in_stage("train"))?;
    let mut report = evaluate(&outcome.network, &prep.test, &cfg.eval.attacks).map_err(|e| e.in_stage("eval"))?;
    if let Some(last) = curves.last_mut() {
        last.standard_accuracy = Some(report.standard_accuracy);
        last.robust_accuracy = report.robust_accuracy.clone();
    }
    report.pseudo_label_accuracy = prep.pool_accuracy().map(|f| f(&ann.pseudo_labels));
    report.curves = curves;
    let hashes = ContentHashes {
        config: config_hash(cfg),
        data: data_hash(prep),
        annotation: annotation_hash(&ann),
    };
    let record = RunRecord {
        run_id: hashes.config[..16].to_string(),
        config: cfg.clone(),
        annotation_history: ann.history,
        report,
        hashes,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        persist::write_run(&record, dir).map_err(|e| e.in_stage("persist"))?;
        outcome.network.save(&dir.join("model.bin")).map_err(|e| e.in_stage("persist"))?;
    }
    Ok(record)
}

/// Re-executes a persisted run from its configuration snapshot.
pub fn rerun(record: &RunRecord) -> Result<RunRecord> {
    run_pipeline(&record.config, None)
}
