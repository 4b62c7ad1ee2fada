//! Strategies that turn a small labeled set `S_L` and an unlabeled pool `D_U`
//! into pseudo labels: a pre-trained annotator, self-training, and vanilla or
//! deep co-training of two networks.
//!
//! Nothing here reads the pool's hidden ground truth. Pseudo-label accuracy
//! during training is reported through a caller-supplied probe.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{peer_adversarial_batch, AttackSpec, AttackTarget};
use crate::data::{Dataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor};
use crate::nets::{sgd_step, MlpSpec, Network, SgdSchedule};
use crate::objectives::{cross_entropy, js_div, total_variance};
use crate::robustify::{train_from, Method, TrainerConfig};
use crate::seed;

/// Scores a vector of predicted pool labels, e.g. against held-back truth.
pub type Probe<'a> = &'a (dyn Fn(&[usize]) -> f64 + Sync);

/// Which co-trained network labels the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorPolicy {
    /// The network with the lower final cross-entropy on `S_L` (first on ties).
    #[default]
    LowerLoss,
    First,
    Second,
    /// Seeded coin flip.
    Random,
}

/// Which network of the pair meets the adversarial inputs of the λ₂ and λ₃ terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialView {
    /// `JS(f₁(x), f₂(x̃))` with `x̃` crafted against `f₁`; the updated network only sees clean inputs.
    #[default]
    OwnExamples,
    /// `JS(f₁(x̃), f₂(x))` with `x̃` crafted against `f₂`; each network trains on its peer's adversarial examples.
    PeerExamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub schedule: SgdSchedule,
    /// Linear ramp of every λ from `1/warmup` to 1 over the first epochs; 0 disables it.
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub annotator: AnnotatorPolicy,
    #[serde(default)]
    pub view: AdversarialView,
}

impl CoTrainConfig {
    /// λ₁ = 10, λ₂ = λ₃ = 0.5, FGSM with ε = 0.02.
    pub fn deep(epochs: usize) -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 0.5,
            lambda3: 0.5,
            attack: AttackSpec::fgsm(0.02),
            epochs,
            batch_labeled: 32,
            batch_unlabeled: 64,
            schedule: SgdSchedule::step_decay(0.05, 0.9, epochs),
            warmup_epochs: 0,
            annotator: AnnotatorPolicy::LowerLoss,
            view: AdversarialView::OwnExamples,
        }
    }

    /// Consistency weight λ = 10 with the adversarial terms switched off.
    pub fn vanilla(epochs: usize) -> Self {
        Self {
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::deep(epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::config("co-training weights must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::config("co-training needs positive epochs and batch sizes"));
        }
        self.schedule.validate()?;
        if self.lambda2 > 0.0 || self.lambda3 > 0.0 {
            self.attack.validate_region()?;
            if self.attack.steps > 1 || self.attack.random_start {
                self.attack.validate()?;
            }
        }
        Ok(())
    }

    fn ramp(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }
}

/// Plain supervised training budget shared by the single-network annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: SgdSchedule,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("supervised fit needs positive epochs and batch"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    /// Points with max softmax probability strictly above `tau` are recruited.
    pub tau: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch: usize,
    pub schedule: SgdSchedule,
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("self-training threshold must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::config("self-training needs at least one round"));
        }
        self.fit().validate()
    }

    fn fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs_per_round,
            batch: self.batch,
            schedule: self.schedule.clone(),
        }
    }
}

/// One logged epoch of an annotator. Fields that do not apply are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HistoryRow {
    pub epoch: usize,
    pub ce1: f64,
    pub ce2: Option<f64>,
    /// `JS(f₁(x_U), f₂(x_U))`, mean over the epoch.
    pub js_unlabeled: Option<f64>,
    /// Labeled adversarial consistency term, mean over both networks.
    pub js_labeled_adv: Option<f64>,
    /// Unlabeled adversarial consistency term, mean over both networks.
    pub js_unlabeled_adv: Option<f64>,
    /// Total variation between the two networks on `D_U` after the epoch.
    pub total_variance: Option<f64>,
    pub pseudo_acc1: Option<f64>,
    pub pseudo_acc2: Option<f64>,
    /// Size of the self-training pool.
    pub recruited: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub pseudo_labels: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Index of the network that produced the labels (0 or 1).
    pub annotator_id: usize,
    pub history: Vec<HistoryRow>,
}

impl Annotation {
    fn label_with(net: &Network, pool: &UnlabeledSet, id: usize, history: Vec<HistoryRow>) -> Result<Self> {
        let (pseudo_labels, confidence) = label_pool(net, pool.features())?;
        Ok(Self {
            pseudo_labels,
            confidence,
            annotator_id: id,
            history,
        })
    }
}

/// Argmax labels and max softmax probabilities.
fn label_pool(net: &Network, x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.rows() == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let probs = net.probabilities(x)?;
    Ok((probs.argmax_rows(), probs.max_rows()))
}

fn check_inputs(labeled: &Dataset, pool: &UnlabeledSet, spec: &MlpSpec) -> Result<()> {
    spec.validate()?;
    if labeled.is_empty() {
        return Err(Error::validation("the labeled set is empty"));
    }
    labeled.targets()?;
    if labeled.dim() != spec.input_dim() || labeled.class_count() != spec.classes() {
        return Err(Error::validation("network shape does not match the labeled set"));
    }
    if !pool.is_empty() && (pool.dim() != labeled.dim() || pool.class_count() != labeled.class_count()) {
        return Err(Error::validation("unlabeled pool does not match the labeled set"));
    }
    Ok(())
}

/// Supervised training with the network's own seed driving the batch order.
/// `start` continues an existing network; round `r > 0` reshuffles with its own stream.
fn fit(
    set: &Dataset,
    spec: &MlpSpec,
    start: Option<(Network, usize)>,
    cfg: &FitConfig,
    epoch_offset: usize,
    history: &mut Vec<HistoryRow>,
    recruited: Option<usize>,
    pool: &UnlabeledSet,
    probe: Option<Probe<'_>>,
) -> Result<Network> {
    let trainer = TrainerConfig {
        method: Method::Standard,
        trades_lambda: 0.0,
        attack: AttackSpec::fgsm(0.0),
        epochs: cfg.epochs,
        batch: cfg.batch,
        schedule: cfg.schedule.clone(),
        seed: match &start {
            Some((_, round)) if *round > 0 => seed::derive_indexed(spec.seed, "annotator-order", *round as u64),
            _ => seed::derive(spec.seed, "annotator-order"),
        },
    };
    let net = match start {
        Some((net, _)) => net,
        None => Network::init(spec)?,
    };
    let outcome = train_from(net, set, &trainer, &mut |stats, net| {
        let pseudo_acc1 = match probe {
            Some(p) if !pool.is_empty() => Some(p(&net.predict(pool.features())?)),
            _ => None,
        };
        history.push(HistoryRow {
            epoch: epoch_offset + stats.epoch,
            ce1: stats.train_loss,
            pseudo_acc1,
            recruited,
            ..HistoryRow::default()
        });
        Ok(())
    })?;
    Ok(outcome.network)
}

/// Trains one network on `S_L` and labels the whole pool once.
pub fn pretrained_annotator(
    labeled: &Dataset,
    pool: &UnlabeledSet,
    spec: &MlpSpec,
    cfg: &FitConfig,
    probe: Option<Probe<'_>>,
) -> Result<Annotation> {
    check_inputs(labeled, pool, spec)?;
    cfg.validate()?;
    let mut history = Vec::new();
    let net = fit(labeled, spec, None, cfg, 0, &mut history, None, pool, probe)?;
    Annotation::label_with(&net, pool, 0, history)
}

/// Repeatedly retrains on `S_L` plus confidently labeled pool points.
///
/// Each round keeps training the previous round's network. Recruited points keep the
/// label they were recruited with. The loop ends after `rounds` rounds or once a
/// round recruits nothing; unrecruited points get the last network's argmax.
pub fn self_train(
    labeled: &Dataset,
    pool: &UnlabeledSet,
    spec: &MlpSpec,
    cfg: &SelfTrainConfig,
    probe: Option<Probe<'_>>,
) -> Result<Annotation> {
    check_inputs(labeled, pool, spec)?;
    cfg.validate()?;
    let fit_cfg = cfg.fit();
    let mut recruited: Vec<Option<(usize, f64)>> = vec![None; pool.len()];
    let mut history = Vec::new();
    let mut net: Option<Network> = None;
    for round in 0..cfg.rounds {
        let idx: Vec<usize> = (0..pool.len()).filter(|&i| recruited[i].is_some()).collect();
        let set = if idx.is_empty() {
            labeled.clone()
        } else {
            let labels = idx.iter().map(|&i| recruited[i].expect("filtered").0).collect();
            let extra = Dataset::labeled(pool.features().select_rows(&idx), labels, pool.class_count(), "recruited")?;
            labeled.concat(&extra)?
        };
        let trained = fit(
            &set,
            spec,
            net.take().map(|n| (n, round)),
            &fit_cfg,
            round * cfg.epochs_per_round,
            &mut history,
            Some(idx.len()),
            pool,
            probe,
        )?;
        let (labels, conf) = label_pool(&trained, pool.features())?;
        net = Some(trained);
        let mut added = 0;
        for (i, slot) in recruited.iter_mut().enumerate() {
            if slot.is_none() && conf[i] > cfg.tau {
                *slot = Some((labels[i], conf[i]));
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
    }
    let net = net.expect("at least one round");
    let (mut pseudo_labels, mut confidence) = label_pool(&net, pool.features())?;
    for (i, slot) in recruited.iter().enumerate() {
        if let Some((label, conf)) = slot {
            pseudo_labels[i] = *label;
            confidence[i] = *conf;
        }
    }
    Ok(Annotation {
        pseudo_labels,
        confidence,
        annotator_id: 0,
        history,
    })
}

/// Co-training with only the clean consistency term: `λ₂ = λ₃ = 0` forced.
pub fn vanilla_cotrain(
    labeled: &Dataset,
    pool: &UnlabeledSet,
    cfg: &CoTrainConfig,
    specs: [&MlpSpec; 2],
    probe: Option<Probe<'_>>,
) -> Result<Annotation> {
    let cfg = CoTrainConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        ..cfg.clone()
    };
    deep_cotrain(labeled, pool, &cfg, specs, probe)
}

/// Labeled batches drawn from a private, reshuffled-on-exhaustion order.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycle {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// State of one co-trained network.
struct Member {
    net: Network,
    order: Cycle,
    attack_rng: ChaCha8Rng,
}

/// Inputs of one network's update, all fixed before either network steps.
struct UpdateInputs {
    x: Tensor,
    y: Vec<usize>,
    /// Peer probabilities on the shared unlabeled batch.
    peer_unlabeled: Option<Tensor>,
    labeled_adv: Option<AdvTerm>,
    unlabeled_adv: Option<AdvTerm>,
}

/// One adversarial consistency term: this network's input and the fixed peer target.
struct AdvTerm {
    /// `None` reuses the clean batch.
    input: Option<Tensor>,
    target: Tensor,
}

#[derive(Default)]
struct Terms {
    ce: f64,
    js_unlabeled: f64,
    js_labeled_adv: f64,
    js_unlabeled_adv: f64,
}

/// Two networks trained on the labeled data in independent orders while being
/// pulled toward each other on the pool and on each other's adversarial
/// examples:
///
/// `CE(f₁(x₁), y₁) + λ₁·JS(f₁(x_U), f₂(x_U)) + λ₂·JS(f₁(x₁), f₂(x̃₁)) + λ₃·JS(f₁(x_U), f₂(x̃_U))`
///
/// with `x̃₁`, `x̃_U` crafted against `f₁` (the unlabeled ones using `f₁`'s own
/// predictions), and symmetrically for `f₂`. Peer outputs and adversarial
/// inputs are constants of each update; both networks step from the same
/// snapshot. Terms with zero weight are skipped entirely.
///
/// Network `i` is initialized from `specs[i].seed`, which also seeds its batch
/// order and attack random starts. The shared unlabeled order is seeded by the
/// pair, so swapping the specs swaps the trained networks.
pub fn deep_cotrain(
    labeled: &Dataset,
    pool: &UnlabeledSet,
    cfg: &CoTrainConfig,
    specs: [&MlpSpec; 2],
    probe: Option<Probe<'_>>,
) -> Result<Annotation> {
    check_inputs(labeled, pool, specs[0])?;
    check_inputs(labeled, pool, specs[1])?;
    cfg.validate()?;
    if specs[0].seed == specs[1].seed {
        return Err(Error::config("co-trained networks need distinct seeds"));
    }
    let pair_seed = specs[0].seed ^ specs[1].seed;
    let targets = labeled.targets()?;
    let mut members = specs
        .iter()
        .map(|s| {
            Ok(Member {
                net: Network::init(s)?,
                order: Cycle::new(labeled.len(), seed::rng(s.seed, "cotrain-order")),
                attack_rng: seed::rng(s.seed, "cotrain-attack"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pool_rng = seed::rng(pair_seed, "cotrain-pool");
    let mut pool_order: Vec<usize> = (0..pool.len()).collect();
    let batch_l = cfg.batch_labeled.min(labeled.len());
    let iterations = if pool.is_empty() {
        labeled.len().div_ceil(batch_l)
    } else {
        pool.len().div_ceil(cfg.batch_unlabeled)
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ramp = cfg.ramp(epoch);
        let lambdas = [cfg.lambda1 * ramp, cfg.lambda2 * ramp, cfg.lambda3 * ramp];
        let use_pool = !pool.is_empty();
        pool_order.shuffle(&mut pool_rng);
        let mut sums = [Terms::default(), Terms::default()];
        for it in 0..iterations {
            let xu = use_pool.then(|| {
                let start = it * cfg.batch_unlabeled;
                let end = (start + cfg.batch_unlabeled).min(pool.len());
                pool.features().select_rows(&pool_order[start..end])
            });
            let mut inputs = Vec::with_capacity(2);
            for i in 0..2 {
                let idx = members[i].order.next(batch_l);
                let x = labeled.features().select_rows(&idx);
                let y: Vec<usize> = idx.iter().map(|&j| targets[j]).collect();
                let peer = &members[1 - i].net;
                let own = &members[i];
                let mut rng = own.attack_rng.clone();
                let peer_unlabeled = match &xu {
                    Some(xu) if lambdas[0] > 0.0 => Some(peer.probabilities(xu)?),
                    _ => None,
                };
                let mut adv_term = |x: &Tensor, target: AttackTarget<'_>| -> Result<AdvTerm> {
                    Ok(match cfg.view {
                        AdversarialView::OwnExamples => AdvTerm {
                            input: None,
                            target: peer.probabilities(&peer_adversarial_batch(&own.net, x, target, &cfg.attack, &mut rng)?)?,
                        },
                        AdversarialView::PeerExamples => AdvTerm {
                            input: Some(peer_adversarial_batch(peer, x, target, &cfg.attack, &mut rng)?),
                            target: peer.probabilities(x)?,
                        },
                    })
                };
                let labeled_adv = if lambdas[1] > 0.0 {
                    Some(adv_term(&x, AttackTarget::Labels(&y))?)
                } else {
                    None
                };
                let unlabeled_adv = match &xu {
                    Some(xu) if lambdas[2] > 0.0 => Some(adv_term(xu, AttackTarget::OwnPrediction)?),
                    _ => None,
                };
                members[i].attack_rng = rng;
                inputs.push(UpdateInputs {
                    x,
                    y,
                    peer_unlabeled,
                    labeled_adv,
                    unlabeled_adv,
                });
            }
            for (i, input) in inputs.into_iter().enumerate() {
                let terms = member_gradients(&mut members[i].net, input, xu.as_ref(), lambdas)?;
                let s = &mut sums[i];
                s.ce += terms.ce;
                s.js_unlabeled += terms.js_unlabeled;
                s.js_labeled_adv += terms.js_labeled_adv;
                s.js_unlabeled_adv += terms.js_unlabeled_adv;
            }
            for m in members.iter_mut() {
                sgd_step(&mut m.net, &cfg.schedule, epoch)?;
            }
        }

        let n = iterations as f64;
        let active = |on: bool, v: f64| on.then_some(v / n);
        let (tv, acc1, acc2) = if use_pool {
            let tv = total_variance(&members[0].net, &members[1].net, pool.features())?;
            match probe {
                Some(p) => (
                    Some(tv),
                    Some(p(&members[0].net.predict(pool.features())?)),
                    Some(p(&members[1].net.predict(pool.features())?)),
                ),
                None => (Some(tv), None, None),
            }
        } else {
            (None, None, None)
        };
        history.push(HistoryRow {
            epoch,
            ce1: sums[0].ce / n,
            ce2: Some(sums[1].ce / n),
            js_unlabeled: active(use_pool && lambdas[0] > 0.0, sums[0].js_unlabeled),
            js_labeled_adv: active(
                lambdas[1] > 0.0,
                0.5 * (sums[0].js_labeled_adv + sums[1].js_labeled_adv),
            ),
            js_unlabeled_adv: active(
                use_pool && lambdas[2] > 0.0,
                0.5 * (sums[0].js_unlabeled_adv + sums[1].js_unlabeled_adv),
            ),
            total_variance: tv,
            pseudo_acc1: acc1,
            pseudo_acc2: acc2,
            recruited: None,
        });
    }

    let chosen = match cfg.annotator {
        AnnotatorPolicy::First => 0,
        AnnotatorPolicy::Second => 1,
        AnnotatorPolicy::Random => usize::from(seed::rng(pair_seed, "annotator-choice").random_bool(0.5)),
        AnnotatorPolicy::LowerLoss => {
            let loss = |net: &Network| -> Result<f64> {
                let tape = Tape::new();
                let probs = tape.constant(net.probabilities(labeled.features())?);
                cross_entropy(probs, &targets)?.item()
            };
            usize::from(loss(&members[1].net)? < loss(&members[0].net)?)
        }
    };
    Annotation::label_with(&members[chosen].net, pool, chosen, history)
}

/// Accumulates one network's co-training gradients; returns the unweighted terms.
fn member_gradients(net: &mut Network, input: UpdateInputs, xu: Option<&Tensor>, lambdas: [f64; 3]) -> Result<Terms> {
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let probs = net.forward(&bound, tape.constant(input.x))?.softmax_rows()?;
    let ce = cross_entropy(probs, &input.y)?;
    let mut terms = Terms {
        ce: ce.item()?,
        ..Terms::default()
    };
    let mut objective = ce;
    let unlabeled_probs = match xu {
        Some(xu) if input.peer_unlabeled.is_some() || input.unlabeled_adv.as_ref().is_some_and(|t| t.input.is_none()) => {
            Some(net.forward(&bound, tape.constant(xu.clone()))?.softmax_rows()?)
        }
        _ => None,
    };
    if let (Some(own), Some(peer)) = (unlabeled_probs, input.peer_unlabeled) {
        let js = js_div(own, tape.constant(peer))?;
        terms.js_unlabeled = js.item()?;
        objective = objective.add(js.scale(lambdas[0]))?;
    }
    let on = |clean: Option<_>, adv: Option<Tensor>| -> Result<_> {
        match adv {
            Some(x) => net.forward(&bound, tape.constant(x))?.softmax_rows(),
            None => Ok(clean.expect("clean probabilities are computed when needed")),
        }
    };
    if let Some(term) = input.labeled_adv {
        let js = js_div(on(Some(probs), term.input)?, tape.constant(term.target))?;
        terms.js_labeled_adv = js.item()?;
        objective = objective.add(js.scale(lambdas[1]))?;
    }
    if let Some(term) = input.unlabeled_adv {
        let js = js_div(on(unlabeled_probs, term.input)?, tape.constant(term.target))?;
        terms.js_unlabeled_adv = js.item()?;
        objective = objective.add(js.scale(lambdas[2]))?;
    }
    let grads = tape.backward(objective)?;
    net.accumulate_grads(&bound, &grads);
    Ok(terms)
}
