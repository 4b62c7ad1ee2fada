//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! Values are computed eagerly as operations are recorded on a [`Tape`];
//! [`Tape::backward`] replays the recorded operations in reverse. Work done on
//! plain [`Tensor`]s never touches a tape and so never produces gradients.

mod tape;
mod tensor;

pub use tape::{sign, Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error, with `floor` guarding tiny magnitudes.
pub fn max_relative_error(actual: &Tensor, expected: &Tensor, floor: f64) -> f64 {
    actual
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, e)| (a - e).abs() / a.abs().max(e.abs()).max(floor))
        .fold(0.0, f64::max)
}
