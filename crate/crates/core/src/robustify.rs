//! Final-stage training on `S = S_L ∪ S_U` (plain, Madry or TRADES) and the
//! evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::Annotation;
use crate::attacks::{pgd, pgd_with, AttackLoss, AttackSpec};
use crate::data::{agreement, Dataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor};
use crate::nets::{sgd_step, MlpSpec, Network, SgdSchedule};
use crate::objectives::{cross_entropy, kl_div};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Empirical risk minimization on natural inputs.
    Standard,
    /// Cross-entropy on PGD adversarial inputs.
    Madry,
    /// Natural cross-entropy plus `λ·KL(g(x) ‖ g(x'))` at the KL-maximizing `x'`.
    Trades,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    #[serde(default = "default_trades_lambda")]
    pub trades_lambda: f64,
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch: usize,
    pub schedule: SgdSchedule,
    /// Seeds batch order and attack random starts. Pipelines derive it from
    /// their master seed, so it is not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

fn default_trades_lambda() -> f64 {
    1.0
}

impl TrainerConfig {
    /// PGD-10 training attack with ε = 0.031, step 0.007 and random start.
    pub fn image_scale(method: Method, epochs: usize) -> Self {
        Self {
            method,
            trades_lambda: 1.0,
            attack: AttackSpec::pgd(0.031, 0.007, 10).with_random_start(true),
            epochs,
            batch: 128,
            schedule: SgdSchedule::step_decay(0.1, 0.9, epochs),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("trainer needs at least one epoch and a positive batch"));
        }
        if !(self.trades_lambda >= 0.0 && self.trades_lambda.is_finite()) {
            return Err(Error::config("TRADES lambda must be non-negative"));
        }
        self.schedule.validate()?;
        if self.method != Method::Standard {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// Aggregates logged once per training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean TRADES KL term, when that method runs with `λ > 0`.
    pub regularizer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
}

/// Trains a freshly initialized network with the configured method.
pub fn train(
    set: &Dataset,
    cfg: &TrainerConfig,
    net_spec: &MlpSpec,
    observer: &mut dyn FnMut(&EpochStats, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    let net = Network::init(net_spec)?;
    train_from(net, set, cfg, observer)
}

/// Continues training `net` (warm start).
pub fn train_from(
    mut net: Network,
    set: &Dataset,
    cfg: &TrainerConfig,
    observer: &mut dyn FnMut(&EpochStats, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if set.dim() != net.spec().input_dim() || set.class_count() != net.spec().classes() {
        return Err(Error::validation("network shape does not match the training set"));
    }
    let targets = set.targets()?;
    let features = set.features();
    let mut order_rng = seed::rng(cfg.seed, "batch-order");
    let mut attack_rng = seed::rng(cfg.seed, "attack-start");
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, reg) = batch_step(&mut net, &x, &y, cfg, &mut attack_rng)?;
            sgd_step(&mut net, &cfg.schedule, epoch)?;
            loss_sum += loss;
            reg_sum += reg.unwrap_or(0.0);
            batches += 1;
        }
        let uses_reg = cfg.method == Method::Trades && cfg.trades_lambda > 0.0;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            regularizer: uses_reg.then(|| reg_sum / batches as f64),
        };
        observer(&stats, &net)?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        network: net,
        history,
    })
}

/// Populates `net`'s gradients for one batch; returns the objective and the KL term.
fn batch_step(
    net: &mut Network,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Option<f64>)> {
    let input = match cfg.method {
        Method::Madry => pgd(net, x, y, &cfg.attack, rng)?,
        Method::Standard | Method::Trades => x.clone(),
    };
    let adversarial = match cfg.method {
        Method::Trades if cfg.trades_lambda > 0.0 => {
            let natural = net.probabilities(x)?;
            // the KL gradient vanishes at x' = x, so the search always starts off-centre
            let spec = cfg.attack.clone().with_random_start(true);
            Some(pgd_with(net, x, AttackLoss::KlFrom(&natural), &spec, rng)?)
        }
        _ => None,
    };

    let tape = Tape::new();
    let bound = net.bind(&tape);
    let probs = net.forward(&bound, tape.constant(input))?.softmax_rows()?;
    let ce = cross_entropy(probs, y)?;
    let (objective, reg) = match adversarial {
        Some(adv) => {
            let adv_probs = net.forward(&bound, tape.constant(adv))?.softmax_rows()?;
            let kl = kl_div(probs, adv_probs)?;
            let reg = kl.item()?;
            (ce.add(kl.scale(cfg.trades_lambda))?, Some(reg))
        }
        None => (ce, None),
    };
    let value = objective.item()?;
    let grads = tape.backward(objective)?;
    net.accumulate_grads(&bound, &grads);
    Ok((value, reg))
}

pub fn madry_train(set: &Dataset, cfg: &TrainerConfig, net_spec: &MlpSpec) -> Result<TrainOutcome> {
    let cfg = TrainerConfig {
        method: Method::Madry,
        ..cfg.clone()
    };
    train(set, &cfg, net_spec, &mut |_, _| Ok(()))
}

pub fn trades_train(set: &Dataset, cfg: &TrainerConfig, net_spec: &MlpSpec) -> Result<TrainOutcome> {
    let cfg = TrainerConfig {
        method: Method::Trades,
        ..cfg.clone()
    };
    train(set, &cfg, net_spec, &mut |_, _| Ok(()))
}

pub fn standard_train(set: &Dataset, cfg: &TrainerConfig, net_spec: &MlpSpec) -> Result<TrainOutcome> {
    let cfg = TrainerConfig {
        method: Method::Standard,
        ..cfg.clone()
    };
    train(set, &cfg, net_spec, &mut |_, _| Ok(()))
}

const EVAL_CHUNK: usize = 64;

/// Argmax accuracy on natural inputs.
pub fn eval_standard(net: &Network, test: &Dataset) -> Result<f64> {
    let targets = test.targets()?;
    if targets.is_empty() {
        return Err(Error::validation("test set is empty"));
    }
    Ok(agreement(&net.predict(test.features())?, &targets))
}

/// Accuracy on PGD inputs crafted against `net` with the true labels.
///
/// Chunks of the test set are attacked in parallel; random starts, when
/// enabled, draw from per-chunk streams so the result does not depend on
/// scheduling.
pub fn eval_robust(net: &Network, test: &Dataset, attack: &AttackSpec) -> Result<f64> {
    attack.validate()?;
    let targets = test.targets()?;
    if targets.is_empty() {
        return Err(Error::validation("test set is empty"));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let correct = indices
        .par_chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(c, chunk)| -> Result<usize> {
            let x = test.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(0, "eval-start", c as u64));
            let adv = pgd(net, &x, &y, attack, &mut rng)?;
            let pred = net.predict(&adv)?;
            Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / targets.len() as f64)
}

/// Fraction of pseudo labels equal to the pool's hidden ground truth.
pub fn pseudo_label_accuracy(ann: &Annotation, pool: &UnlabeledSet) -> Result<f64> {
    let truth = pool.hidden_labels().reveal()?;
    if truth.len() != ann.pseudo_labels.len() {
        return Err(Error::validation("annotation size does not match the unlabeled pool"));
    }
    Ok(agreement(&ann.pseudo_labels, truth))
}

/// Named evaluation attack, e.g. `PGD-20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub spec: AttackSpec,
}

impl NamedAttack {
    /// `PGD-{steps}` without random start.
    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            name: format!("PGD-{steps}"),
            spec: AttackSpec::pgd(epsilon, step_size, steps),
        }
    }
}

/// One row of the per-epoch training curve. Accuracies are present on
/// evaluated epochs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub regularizer: Option<f64>,
    pub standard_accuracy: Option<f64>,
    pub robust_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub standard_accuracy: f64,
    pub robust_accuracy: BTreeMap<String, f64>,
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(default)]
    pub curves: Vec<CurvePoint>,
}

/// Standard accuracy plus robust accuracy under each attack.
pub fn evaluate(net: &Network, test: &Dataset, attacks: &[NamedAttack]) -> Result<EvalReport> {
    let standard_accuracy = eval_standard(net, test)?;
    let robust_accuracy = attacks
        .iter()
        .map(|a| Ok((a.name.clone(), eval_robust(net, test, &a.spec)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport {
        standard_accuracy,
        robust_accuracy,
        pseudo_label_accuracy: None,
        curves: Vec::new(),
    })
}
