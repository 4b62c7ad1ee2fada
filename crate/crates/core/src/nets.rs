//! Multilayer perceptrons, SGD with momentum and a step-decay schedule.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths from input dimension to class count, plus the init seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.classes() < 2 {
            return Err(Error::config("at least two output classes are required"));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
            .collect()
    }
}

/// Learning rate `initial * factor^k` where `k` counts decay epochs already reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdSchedule {
    pub initial_rate: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl SgdSchedule {
    /// Decays by 10x at 50% and 75% of `epochs`.
    pub fn step_decay(initial_rate: f64, momentum: f64, epochs: usize) -> Self {
        let mut decay_epochs = vec![epochs / 2, epochs * 3 / 4];
        decay_epochs.retain(|&e| e > 0);
        decay_epochs.dedup();
        Self {
            initial_rate,
            momentum,
            decay_epochs,
            decay_factor: 0.1,
        }
    }

    pub fn constant(rate: f64, momentum: f64) -> Self {
        Self {
            initial_rate: rate,
            momentum,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.initial_rate * self.decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_rate > 0.0 && self.initial_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1)"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay epochs must be strictly increasing"));
        }
        Ok(())
    }
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self::step_decay(0.1, 0.9, 100)
    }
}

/// A ReLU MLP; weights are stored `[out, in]` so a layer computes `x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    velocity: Vec<Tensor>,
}

/// Parameters of a network recorded on a tape.
pub struct BoundNetwork<'t> {
    params: Vec<Var<'t>>,
}

impl<'t> BoundNetwork<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }
}

impl Network {
    /// He-style fan-in uniform weights `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (6.0 / shape[1] as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::from_raw(shape, data)
                }
            })
            .collect();
        Ok(Self::from_params(spec.clone(), params))
    }

    /// Builds a network from explicit parameters in layer order (W₀, b₀, W₁, b₁, …).
    pub fn with_params(spec: &MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if p.shape() != s.as_slice() {
                return Err(Error::Dimension {
                    op: "with_params",
                    lhs: s.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(Self::from_params(spec.clone(), params))
    }

    fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Self {
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let grads = vec![None; params.len()];
        Self {
            spec,
            params,
            grads,
            velocity,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn grads(&self) -> &[Option<Tensor>] {
        &self.grads
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the parameters on `tape` as gradient-tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        BoundNetwork {
            params: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Records the parameters on `tape` as constants (for input-gradient attacks).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        BoundNetwork {
            params: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.spec.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![self.spec.input_dim()],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits on the tape.
    pub fn forward<'t>(&self, bound: &BoundNetwork<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        let layers = bound.params.len() / 2;
        let mut h = x;
        for (l, pair) in bound.params.chunks(2).enumerate() {
            h = h.matmul(pair[0].transpose()?)?.add(pair[1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Logits computed without recording anything.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let layers = self.params.len() / 2;
        let mut h = x.clone();
        for (l, pair) in self.params.chunks(2).enumerate() {
            h = h
                .matmul(&pair[0].transpose()?)?
                .zip_with(&pair[1], "add", |a, b| a + b)?;
            if l + 1 < layers {
                h = h.map(|v| v.max(0.0));
            }
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(h)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x)?.softmax_rows()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Adds the gradients of `bound`'s parameters to the stored gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &BoundNetwork<'_>, grads: &Gradients) {
        for ((slot, var), param) in self.grads.iter_mut().zip(&bound.params).zip(&self.params) {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(param.shape()));
            match slot {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Resets momentum buffers.
    pub fn reset_velocity(&mut self) {
        for v in &mut self.velocity {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Flat copy of every parameter in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Writes the binary parameter file: magic, version, spec, then
    /// little-endian `f64` parameters in layer order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.spec.seed.to_le_bytes())?;
        w.write_all(&(self.spec.widths.len() as u32).to_le_bytes())?;
        for &width in &self.spec.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::validation("not a network parameter file"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::validation(format!(
                "unsupported network file version {version}"
            )));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let n_widths = read_u32(&mut r)? as usize;
        if n_widths > 64 {
            return Err(Error::validation("implausible layer count"));
        }
        let widths = (0..n_widths)
            .map(|_| read_u32(&mut r).map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(widths, u64::from_le_bytes(seed));
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product::<usize>();
                let mut buf = [0u8; 8];
                let data = (0..n)
                    .map(|_| {
                        r.read_exact(&mut buf)?;
                        Ok(f64::from_le_bytes(buf))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_params(&spec, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const MAGIC: &[u8; 8] = b"RCTNET\0\0";
const FORMAT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// One momentum SGD update: `v ← μv − η(epoch)·g; p ← p + v`, then clears gradients.
pub fn sgd_step(net: &mut Network, schedule: &SgdSchedule, epoch: usize) -> Result<()> {
    if net.grads.iter().any(Option::is_none) {
        return Err(Error::contract("sgd_step called before gradients were populated"));
    }
    let rate = schedule.rate(epoch);
    let momentum = schedule.momentum;
    for ((param, vel), grad) in net.params.iter_mut().zip(&mut net.velocity).zip(&mut net.grads) {
        let g = grad.take().expect("checked above");
        for ((p, v), gi) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
            *v = momentum * *v - rate * gi;
            *p += *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![2, 5, 3], 11)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Network::init(&spec()).unwrap();
        let b = Network::init(&spec()).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = Network::init(&spec().with_seed(12)).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
        assert!(a.params()[3].data().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 2.0).sqrt();
        assert!(a.params()[0].data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(vec![3], 0).validate().is_err());
        assert!(MlpSpec::new(vec![3, 1], 0).validate().is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], 0).validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let s = spec();
        let params = s.param_shapes().iter().map(|sh| Tensor::zeros(sh)).collect();
        let net = Network::with_params(&s, params).unwrap();
        let x = Tensor::from_rows(&[[0.3, 0.9], [0.1, 0.2]]).unwrap();
        assert_eq!(net.logits(&x).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn single_linear_layer_is_x_times_w_transposed() {
        let s = MlpSpec::new(vec![2, 2], 0);
        let w = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let net = Network::with_params(&s, vec![w, Tensor::zeros(&[2])]).unwrap();
        let x = Tensor::from_rows(&[[1.0, -1.0]]).unwrap();
        assert_eq!(net.logits(&x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn golden_forward() {
        let net = Network::init(&MlpSpec::new(vec![2, 4, 2], 2024)).unwrap();
        let x = Tensor::from_rows(&[[0.25, 0.75]]).unwrap();
        let logits = net.logits(&x).unwrap();
        let golden = [1.1912214272225503, 0.5186508494809332];
        for (a, b) in logits.data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let net = Network::init(&spec()).unwrap();
        let x = Tensor::from_rows(&[[0.3, 0.9], [0.1, 0.2]]).unwrap();
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let out = net.forward(&bound, tape.constant(x.clone())).unwrap();
        assert_eq!(*out.value(), net.logits(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::init(&spec()).unwrap();
        assert!(net.logits(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn sgd_plain_step_and_zero_gradient() {
        let mut net = Network::init(&spec()).unwrap();
        let before = net.flat_params();
        let schedule = SgdSchedule::constant(0.1, 0.0);
        assert!(matches!(sgd_step(&mut net, &schedule, 0), Err(Error::Contract(_))));

        let grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::full(p.shape(), 2.0)).collect();
        net.grads = grads.into_iter().map(Some).collect();
        sgd_step(&mut net, &schedule, 0).unwrap();
        for (a, b) in net.flat_params().iter().zip(&before) {
            assert_eq!(*a, b - 0.1 * 2.0);
        }
        assert!(net.grads().iter().all(Option::is_none));

        let mut fresh = Network::init(&spec()).unwrap();
        let momentum = SgdSchedule::constant(0.1, 0.9);
        for _ in 0..3 {
            fresh.grads = fresh.params().iter().map(|p| Some(Tensor::zeros(p.shape()))).collect();
            sgd_step(&mut fresh, &momentum, 0).unwrap();
        }
        assert_eq!(fresh.flat_params(), before);
    }

    #[test]
    fn schedule_decays() {
        let s = SgdSchedule::step_decay(0.1, 0.9, 100);
        assert_eq!(s.decay_epochs, vec![50, 75]);
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(49), 0.1);
        assert!((s.rate(50) - 0.01).abs() < 1e-15);
        assert!((s.rate(99) - 0.001).abs() < 1e-15);
        let rates: Vec<f64> = (0..100).map(|e| s.rate(e)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        let mut bad = s.clone();
        bad.decay_epochs = vec![5, 5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn binary_round_trip() {
        let net = Network::init(&spec()).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf.len(), 8 + 4 + 8 + 4 + 3 * 4 + 8 * net.param_count());
        let back = Network::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.flat_params(), net.flat_params());
        buf[0] = b'X';
        assert!(Network::read_from(buf.as_slice()).is_err());
    }
}
