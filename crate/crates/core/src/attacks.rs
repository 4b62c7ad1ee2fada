//! FGSM and PGD under an L∞ ball intersected with the valid input box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{sign, Tape, Tensor};
use crate::nets::Network;
use crate::objectives::{cross_entropy, kl_div};

/// Perturbation region and step rule for a sign-gradient attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub clamp_lo: f64,
    #[serde(default = "one")]
    pub clamp_hi: f64,
    #[serde(default)]
    pub random_start: bool,
}

fn one() -> f64 {
    1.0
}

impl AttackSpec {
    /// PGD-`steps` without random start on the unit box.
    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            random_start: false,
        }
    }

    /// Single-step attack with step size `epsilon`.
    pub fn fgsm(epsilon: f64) -> Self {
        Self::pgd(epsilon, epsilon, 1)
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    /// Checks the perturbation region only; single-step FGSM ignores the step fields.
    pub fn validate_region(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config("attack epsilon must be finite and non-negative"));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::config("attack clamp box is empty"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_region()?;
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("attack step size must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        Ok(())
    }
}

/// Quantity an attack ascends.
#[derive(Debug, Clone, Copy)]
pub enum AttackLoss<'a> {
    /// Cross-entropy against these labels.
    CrossEntropy(&'a [usize]),
    /// `KL(reference ‖ f(x'))` against fixed natural-input probabilities.
    KlFrom(&'a Tensor),
}

/// Gradient of the attack loss with respect to the input batch.
fn input_gradient(net: &Network, x: &Tensor, loss: AttackLoss<'_>) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = net.bind_frozen(&tape);
    let xv = tape.param(x.clone());
    let probs = net.forward(&bound, xv)?.softmax_rows()?;
    let objective = match loss {
        AttackLoss::CrossEntropy(labels) => cross_entropy(probs, labels)?,
        AttackLoss::KlFrom(reference) => kl_div(tape.constant(reference.clone()), probs)?,
    };
    let mut grads = tape.backward(objective)?;
    Ok(grads.take(xv).expect("input is a tracked leaf"))
}

/// `x' = clamp(x + ε·sign(∇ₓ CE), box)`.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate_region()?;
    let grad = input_gradient(net, x, AttackLoss::CrossEntropy(labels))?;
    let eps = spec.epsilon;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| (xi + eps * sign(gi)).clamp(spec.clamp_lo, spec.clamp_hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Signed-gradient ascent on cross-entropy, projected onto `B∞(x, ε) ∩ box`
/// after every step. Returns the final iterate.
pub fn pgd<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    pgd_with(net, x, AttackLoss::CrossEntropy(labels), spec, rng)
}

/// PGD on an arbitrary [`AttackLoss`].
pub fn pgd_with<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    loss: AttackLoss<'_>,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    let (lo, hi, eps) = (spec.clamp_lo, spec.clamp_hi, spec.epsilon);
    let project = |origin: f64, candidate: f64| candidate.clamp(origin - eps, origin + eps).clamp(lo, hi);

    let mut current = x.clone();
    if spec.random_start && eps > 0.0 {
        for (c, &o) in current.data_mut().iter_mut().zip(x.data()) {
            *c = project(o, o + rng.random_range(-eps..=eps));
        }
    }
    for _ in 0..spec.steps {
        let grad = input_gradient(net, &current, loss)?;
        for ((c, &o), &g) in current.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            *c = project(o, *c + spec.step_size * sign(g));
        }
    }
    Ok(current)
}

/// Labels used when attacking a network on a batch.
#[derive(Debug, Clone, Copy)]
pub enum AttackTarget<'a> {
    /// Ground-truth (or pool) labels of a labeled batch.
    Labels(&'a [usize]),
    /// The target network's own current predictions, recomputed on every call.
    OwnPrediction,
}

/// Adversarial batch maximizing the target network's cross-entropy inside
/// the perturbation region: FGSM for single-step specs, PGD otherwise.
///
/// The result is a plain tensor; callers feed it into later losses as a constant.
pub fn peer_adversarial_batch<R: Rng + ?Sized>(
    target: &Network,
    x: &Tensor,
    labels: AttackTarget<'_>,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    let predicted;
    let labels = match labels {
        AttackTarget::Labels(l) => l,
        AttackTarget::OwnPrediction => {
            predicted = target.predict(x)?;
            &predicted
        }
    };
    if spec.steps == 1 && !spec.random_start {
        fgsm(target, x, labels, spec)
    } else {
        pgd(target, x, labels, spec, rng)
    }
}

/// Largest `|x'ᵢ − xᵢ|`.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}
