//! Softmax, cross-entropy, KL and Jensen-Shannon divergences, and the
//! total-variation distance between two networks' predictions.
//!
//! Losses take row-stochastic probability matrices `[batch, classes]` and
//! return the mean over the batch as a scalar on the tape.

use crate::error::{Error, Result};
use crate::ndgrad::{Tensor, Var};
use crate::nets::Network;

pub fn softmax<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.softmax_rows()
}

/// Mean of `-ln p[label]`, with the log input floored.
pub fn cross_entropy<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(probs.pick(labels)?.log().mean().scale(-1.0))
}

fn check_pair(p: &Var<'_>, q: &Var<'_>, op: &'static str) -> Result<usize> {
    let (ps, qs) = (p.shape(), q.shape());
    if ps != qs || ps.len() != 2 {
        return Err(Error::Dimension { op, lhs: ps, rhs: qs });
    }
    Ok(ps[0])
}

/// Mean over rows of `Σᵢ pᵢ ln(pᵢ / qᵢ)`; zero-probability terms of `p` contribute nothing.
///
/// Rounding can leave the sum an ulp below zero, so the result is clamped to
/// `[0, ∞)`; the gradient is unaffected inside that range.
pub fn kl_div<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let rows = check_pair(&p, &q, "kl_div")?;
    let log_ratio = p.log().sub(q.log())?;
    Ok(p.mul(log_ratio)?.sum().scale(1.0 / rows as f64).clamp(0.0, f64::INFINITY))
}

/// Mean over rows of `½ KL(p‖m) + ½ KL(q‖m)` with `m = (p + q) / 2`, in nats,
/// clamped to `[0, ln 2]` against rounding.
pub fn js_div<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    check_pair(&p, &q, "js_div")?;
    let m = p.add(q)?.scale(0.5);
    Ok(kl_div(p, m)?
        .add(kl_div(q, m)?)?
        .scale(0.5)
        .clamp(0.0, std::f64::consts::LN_2))
}

/// Mean total-variation distance `½ Σᵢ |p1ᵢ − p2ᵢ|` between the two networks'
/// softmax outputs over the rows of `data`.
pub fn total_variance(f1: &Network, f2: &Network, data: &Tensor) -> Result<f64> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::validation("total variance needs at least one sample"));
    }
    let p1 = f1.probabilities(data)?;
    let p2 = f2.probabilities(data)?;
    Ok(tv_distance(&p1, &p2))
}

/// Mean row-wise total-variation distance between two probability matrices.
pub fn tv_distance(p1: &Tensor, p2: &Tensor) -> f64 {
    let c = p1.cols();
    let rows = p1.rows();
    let total: f64 = p1
        .data()
        .chunks(c)
        .zip(p2.data().chunks(c))
        .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    (total / rows as f64).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;
    use crate::nets::MlpSpec;

    fn probs<'t>(tape: &'t Tape, rows: &[&[f64]]) -> Var<'t> {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let p = softmax(probs(&tape, &[&[0.0, 0.0], &[2.0, 2.0]])).unwrap();
        assert_eq!(p.value().data(), &[0.5, 0.5, 0.5, 0.5]);
        let u = softmax(probs(&tape, &[&[3.3, 3.3, 3.3]])).unwrap();
        for v in u.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(probs(&tape, &[&[1000.0, 0.0]])).unwrap();
        assert!(tape.check_finite().is_ok());
        assert_eq!(big.value().data()[0], 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let ce = cross_entropy(probs(&tape, &[&[0.0, 1.0]]), &[1]).unwrap();
        assert_eq!(ce.item().unwrap(), 0.0);
        let ce = cross_entropy(probs(&tape, &[&[0.25; 4]]), &[2]).unwrap();
        assert!((ce.item().unwrap() - 4f64.ln()).abs() < 1e-15);
        let ce = cross_entropy(probs(&tape, &[&[0.25, 0.75]]), &[0]).unwrap();
        assert!((ce.item().unwrap() - 1.3862943611198906).abs() < 1e-12);
        assert!(cross_entropy(probs(&tape, &[&[0.25, 0.75]]), &[2]).is_err());
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let p = probs(&tape, &[&[0.3, 0.7]]);
        assert_eq!(kl_div(p, p).unwrap().item().unwrap(), 0.0);
        let kl = kl_div(probs(&tape, &[&[1.0, 0.0]]), probs(&tape, &[&[0.5, 0.5]])).unwrap();
        assert!((kl.item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let kl = kl_div(probs(&tape, &[&[0.5, 0.5]]), probs(&tape, &[&[0.25, 0.75]])).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl.item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1438410362258904).abs() < 1e-15);
    }

    #[test]
    fn js_examples() {
        let tape = Tape::new();
        let p = probs(&tape, &[&[0.5, 0.5]]);
        let q = probs(&tape, &[&[0.25, 0.75]]);
        assert_eq!(js_div(p, p).unwrap().item().unwrap(), 0.0);
        let disjoint = js_div(probs(&tape, &[&[1.0, 0.0]]), probs(&tape, &[&[0.0, 1.0]])).unwrap();
        assert!((disjoint.item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let a = js_div(p, q).unwrap().item().unwrap();
        let b = js_div(q, p).unwrap().item().unwrap();
        // ½[½ln(0.5/0.375) + ½ln(0.5/0.625)] + ½[¼ln(0.25/0.375) + ¾ln(0.75/0.625)]
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.375).ln() + 0.5 * (0.5f64 / 0.625).ln())
            + 0.5 * (0.25 * (0.25f64 / 0.375).ln() + 0.75 * (0.75f64 / 0.625).ln());
        assert!((a - oracle).abs() < 1e-15);
        assert!((a - 0.0338).abs() < 5e-5);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn divergences_reject_shape_mismatch() {
        let tape = Tape::new();
        let p = probs(&tape, &[&[0.5, 0.5]]);
        let q = probs(&tape, &[&[0.2, 0.3, 0.5]]);
        assert!(kl_div(p, q).is_err());
        assert!(js_div(p, q).is_err());
    }

    #[test]
    fn total_variance_examples() {
        let f = Network::init(&MlpSpec::new(vec![2, 8, 2], 1)).unwrap();
        let g = Network::init(&MlpSpec::new(vec![2, 8, 2], 2)).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.9, 0.4], [0.5, 0.5]]).unwrap();
        assert_eq!(total_variance(&f, &f, &x).unwrap(), 0.0);
        let tv = total_variance(&f, &g, &x).unwrap();
        assert!(tv > 0.0 && tv <= 1.0);
        assert!(total_variance(&f, &g, &Tensor::zeros(&[0, 2])).is_err());

        let a = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(tv_distance(&a, &b), 1.0);
    }
}
