//! Two-layer per-modality hash network with a scaled-tanh output.
//!
//! `h = tanh(η · (W2 · act(W1 · x + b1) + b2))`. Parameters are kept in f64
//! for training and stored as f32 in checkpoints.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learningRate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weightDecay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tensors with the shapes of the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ParamSet {
    fn zeros(d_in: usize, d_hidden: usize, k: usize) -> Self {
        Self {
            w1: Array2::zeros((d_hidden, d_in)),
            b1: Array1::zeros(d_hidden),
            w2: Array2::zeros((k, d_hidden)),
            b2: Array1::zeros(k),
        }
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

pub type Gradients = ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct HashNet {
    params: ParamSet,
    velocity: ParamSet,
    activation: Activation,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre_hidden: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

impl HashNet {
    /// Glorot-uniform weights, zero biases and velocities; deterministic per seed.
    pub fn init(d_in: usize, d_hidden: usize, k: usize, seed: u64, activation: Activation) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || k == 0 {
            return Err(Error::Config(format!(
                "network dims must be >= 1, got ({d_in}, {d_hidden}, {k})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let w1 = glorot(d_hidden, d_in);
        let w2 = glorot(k, d_hidden);
        Ok(Self {
            params: ParamSet {
                w1,
                b1: Array1::zeros(d_hidden),
                w2,
                b2: Array1::zeros(k),
            },
            velocity: ParamSet::zeros(d_in, d_hidden, k),
            activation,
        })
    }

    pub fn from_params(params: ParamSet, activation: Activation) -> Result<Self> {
        let (d_hidden, d_in) = params.w1.dim();
        let (k, d_h2) = params.w2.dim();
        if d_h2 != d_hidden || params.b1.len() != d_hidden || params.b2.len() != k {
            return Err(Error::Dimension("inconsistent parameter shapes".into()));
        }
        Ok(Self {
            velocity: ParamSet::zeros(d_in, d_hidden, k),
            params,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.params.w1.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.params.w1.nrows()
    }

    pub fn code_length(&self) -> usize {
        self.params.w2.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::Dimension(format!(
                "network expects {} input columns, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>, eta: f64) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let p = &self.params;
        let pre_hidden = x.dot(&p.w1.t()) + &p.b1;
        let act = self.activation;
        let hidden = pre_hidden.mapv(|z| act.apply(z));
        let mut output = hidden.dot(&p.w2.t()) + &p.b2;
        output.mapv_inplace(|z| (eta * z).tanh());
        Ok(ForwardCache {
            pre_hidden,
            hidden,
            output,
        })
    }

    /// Continuous codes in `(-1, 1)`, one row per input row.
    pub fn forward(&self, x: ArrayView2<f64>, eta: f64) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, eta)?.output)
    }

    /// Exact parameter gradients of a loss whose gradient w.r.t. the output is `dl_dh`.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        eta: f64,
        dl_dh: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let cache = self.forward_cached(x, eta)?;
        let grads = self.backward_from_cache(x, eta, &cache, dl_dh)?;
        Ok((grads, cache.output))
    }

    pub fn backward_from_cache(
        &self,
        x: ArrayView2<f64>,
        eta: f64,
        cache: &ForwardCache,
        dl_dh: ArrayView2<f64>,
    ) -> Result<Gradients> {
        if dl_dh.dim() != cache.output.dim() {
            return Err(Error::Dimension(format!(
                "output gradient shape {:?} does not match output {:?}",
                dl_dh.dim(),
                cache.output.dim()
            )));
        }
        let p = &self.params;
        let d_out = Zip::from(&dl_dh)
            .and(&cache.output)
            .map_collect(|&g, &h| g * eta * (1.0 - h * h));
        let w2 = d_out.t().dot(&cache.hidden);
        let b2 = d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&p.w2);
        let act = self.activation;
        Zip::from(&mut d_hidden)
            .and(&cache.pre_hidden)
            .and(&cache.hidden)
            .for_each(|d, &z, &a| *d *= act.derivative(z, a));
        let w1 = d_hidden.t().dot(&x);
        let b1 = d_hidden.sum_axis(Axis(0));
        Ok(Gradients { w1, b1, w2, b2 })
    }

    /// Momentum SGD; weight decay applies to weights only.
    pub fn sgd_step(&mut self, grads: &Gradients, opt: &OptimizerConfig) -> Result<()> {
        let shapes_match = grads.w1.dim() == self.params.w1.dim()
            && grads.b1.dim() == self.params.b1.dim()
            && grads.w2.dim() == self.params.w2.dim()
            && grads.b2.dim() == self.params.b2.dim();
        if !shapes_match {
            return Err(Error::Dimension("gradient shapes do not match parameters".into()));
        }
        let (lr, mu, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
        let weight = |p: &mut f64, v: &mut f64, g: &f64| {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        };
        let bias = |p: &mut f64, v: &mut f64, g: &f64| {
            *v = mu * *v + g;
            *p -= lr * *v;
        };
        let (p, v) = (&mut self.params, &mut self.velocity);
        Zip::from(&mut p.w1).and(&mut v.w1).and(&grads.w1).for_each(weight);
        Zip::from(&mut p.b1).and(&mut v.b1).and(&grads.b1).for_each(bias);
        Zip::from(&mut p.w2).and(&mut v.w2).and(&grads.w2).for_each(weight);
        Zip::from(&mut p.b2).and(&mut v.b2).and(&grads.b2).for_each(bias);
        if !self.params.is_finite() || !self.velocity.is_finite() {
            return Err(Error::Divergence("non-finite parameter after SGD step".into()));
        }
        Ok(())
    }

    /// Rounds every parameter to f32 precision, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = f64::from(*v as f32);
        self.params.w1.map_inplace(r);
        self.params.b1.map_inplace(r);
        self.params.w2.map_inplace(r);
        self.params.b2.map_inplace(r);
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(20 + 4 * (p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for w in [CHECKPOINT_VERSION, self.d_in() as u32, self.d_hidden() as u32, self.code_length() as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in p.w1.iter().chain(p.b1.iter()).chain(p.w2.iter()).chain(p.b2.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], activation: Activation) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("ASSP checkpoint", "bad magic or truncated header"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let version = word(4) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("ASSP checkpoint", format!("unsupported version {version}")));
        }
        let (d_in, d_hidden, k) = (word(8), word(12), word(16));
        if d_in == 0 || d_hidden == 0 || k == 0 {
            return Err(Error::format("ASSP checkpoint", "zero dimension"));
        }
        let counts = [d_hidden * d_in, d_hidden, k * d_hidden, k];
        let total: usize = counts.iter().sum();
        let body = &bytes[20..];
        if body.len() != total * 4 {
            return Err(Error::format(
                "ASSP checkpoint",
                format!("expected {} body bytes, found {}", total * 4, body.len()),
            ));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
        let w1 = Array2::from_shape_vec((d_hidden, d_in), take(counts[0])).expect("sized");
        let b1 = Array1::from_vec(take(counts[1]));
        let w2 = Array2::from_shape_vec((k, d_hidden), take(counts[2])).expect("sized");
        let b2 = Array1::from_vec(take(counts[3]));
        let params = ParamSet { w1, b1, w2, b2 };
        if !params.is_finite() {
            return Err(Error::format("ASSP checkpoint", "non-finite parameter"));
        }
        Self::from_params(params, activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, activation: Activation) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, activation)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ASSP";
const CHECKPOINT_VERSION: u32 = 1;
const CODES_MAGIC: &[u8; 4] = b"ASSB";

/// Hash codes over `{-1, +1}`, one row per instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeMatrix {
    codes: Array2<i8>,
}

impl BinaryCodeMatrix {
    pub fn new(codes: Array2<i8>) -> Result<Self> {
        if let Some(((i, j), v)) = codes.indexed_iter().find(|(_, &v)| v != 1 && v != -1) {
            return Err(Error::format("codes", format!("entry ({i},{j}) = {v} is not ±1")));
        }
        Ok(Self { codes })
    }

    pub fn rows(&self) -> usize {
        self.codes.nrows()
    }

    pub fn code_length(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> &Array2<i8> {
        &self.codes
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.codes.mapv(f64::from)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            codes: self.codes.select(Axis(0), indices),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.codes.len());
        out.extend_from_slice(CODES_MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.code_length() as u32).to_le_bytes());
        out.extend(self.codes.iter().map(|&v| v as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CODES_MAGIC {
            return Err(Error::format("ASSB codes", "bad magic or truncated header"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != rows * k {
            return Err(Error::format(
                "ASSB codes",
                format!("header declares {rows}x{k}, body has {} bytes", body.len()),
            ));
        }
        let data = body.iter().map(|&b| b as i8).collect();
        Self::new(Array2::from_shape_vec((rows, k), data).expect("sized"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `+1` where `h ≥ 0` (so `sgn(0) = +1`), `-1` elsewhere.
pub fn sign_codes(h: ArrayView2<f64>) -> BinaryCodeMatrix {
    BinaryCodeMatrix {
        codes: h.mapv(|v| if v >= 0.0 { 1 } else { -1 }),
    }
}
