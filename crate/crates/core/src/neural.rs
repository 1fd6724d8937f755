//! Small fully connected networks with hand-written backpropagation.
//!
//! Weights are stored `fan_in x fan_out` and applied to row-major batches, so a
//! layer computes `z = a W + b`. Hidden layers use SiLU; the output layer is linear.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, model has {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Sinusoidal features of `t / T` at geometrically spaced frequencies in
/// `[1, max_freq]`. Width 0 disables the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub width: usize,
    pub max_freq: f64,
}

impl TimeEmbedding {
    pub fn new(width: usize) -> Self {
        assert!(width % 2 == 0, "embedding width must be even");
        TimeEmbedding {
            width,
            max_freq: 1000.0,
        }
    }

    pub fn none() -> Self {
        TimeEmbedding {
            width: 0,
            max_freq: 1.0,
        }
    }

    fn frequency(&self, k: usize) -> f64 {
        let half = self.width / 2;
        if half <= 1 {
            1.0
        } else {
            self.max_freq.powf(k as f64 / (half - 1) as f64)
        }
    }

    pub fn embed(&self, t: usize, t_max: usize) -> Vec<f64> {
        let s = t as f64 / t_max.max(1) as f64;
        let half = self.width / 2;
        let mut out = Vec::with_capacity(self.width);
        for k in 0..half {
            out.push((self.frequency(k) * s).sin());
        }
        for k in 0..half {
            out.push((self.frequency(k) * s).cos());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut d = Dense::zeros(fan_in, fan_out);
        d.w.mapv_inplace(|_| rng.random_range(-bound..bound));
        d.b.mapv_inplace(|_| rng.random_range(-bound..bound));
        d
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}

/// Feedforward network taking `[x | embed(t)]` as input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub data_dim: usize,
    pub embedding: TimeEmbedding,
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// The noise-prediction network of one decoupled half.
pub type DenoiserModel = Mlp;

struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Randomly initialised network with the given hidden widths.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        embedding: TimeEmbedding,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![data_dim + embedding.width];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        let layers = widths
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Mlp {
            data_dim,
            embedding,
            activation: Activation::Silu,
            layers,
        }
    }

    pub fn from_layers(data_dim: usize, embedding: TimeEmbedding, layers: Vec<Dense>) -> Self {
        Mlp {
            data_dim,
            embedding,
            activation: Activation::Silu,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.embedding.width
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), |l| l.w.ncols())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.w.ncols()));
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.n_params() {
            return Err(NeuralError::ParamCount {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|p| p.is_finite()))
    }

    fn check_batch(&self, x: &ArrayView2<f64>, t: &[usize]) -> Result<(), NeuralError> {
        if x.ncols() != self.data_dim {
            return Err(NeuralError::Dimension {
                expected: self.data_dim,
                got: x.ncols(),
            });
        }
        if t.len() != x.nrows() {
            return Err(NeuralError::Dimension {
                expected: x.nrows(),
                got: t.len(),
            });
        }
        Ok(())
    }

    fn assemble_input(&self, x: &ArrayView2<f64>, t: &[usize], t_max: usize) -> Array2<f64> {
        if self.embedding.width == 0 {
            return x.to_owned();
        }
        let mut e = Array2::zeros((x.nrows(), self.embedding.width));
        for (r, &tr) in t.iter().enumerate() {
            for (c, v) in self.embedding.embed(tr, t_max).into_iter().enumerate() {
                e[[r, c]] = v;
            }
        }
        concatenate(Axis(1), &[x.view(), e.view()]).expect("row counts agree")
    }

    fn forward_cached(&self, x: &ArrayView2<f64>, t: &[usize], t_max: usize) -> (Array2<f64>, Cache) {
        let mut a = self.assemble_input(x, t, t_max);
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            cache.inputs.push(a);
            if k == last {
                a = z;
            } else {
                let act = self.activation;
                a = z.mapv(|v| act.apply(v));
                cache.pre.push(z);
            }
        }
        (a, cache)
    }

    /// Batched forward pass; row `r` of `x` is evaluated at step `t[r]`.
    pub fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        t_max: usize,
    ) -> Result<Array2<f64>, NeuralError> {
        self.check_batch(&x, t)?;
        Ok(self.forward_cached(&x, t, t_max).0)
    }

    pub fn forward(&self, x: &[f64], t: usize, t_max: usize) -> Result<Vec<f64>, NeuralError> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(xv, &[t], t_max)?.into_raw_vec_and_offset().0)
    }

    /// Pulls `grad_out` (d loss / d output) back through the network. Returns the
    /// parameter gradients and the gradient with respect to the full input.
    fn backward(&self, cache: &Cache, grad_out: Array2<f64>) -> (Vec<Dense>, Array2<f64>) {
        let mut g = grad_out;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a_in = &cache.inputs[k];
            grads.push(Dense {
                w: a_in.t().dot(&g),
                b: g.sum_axis(Axis(0)),
            });
            let mut g_in = g.dot(&layer.w.t());
            if k > 0 {
                let act = self.activation;
                Zip::from(&mut g_in)
                    .and(&cache.pre[k - 1])
                    .for_each(|gi, &z| *gi *= act.derivative(z));
            }
            g = g_in;
        }
        grads.reverse();
        (grads, g)
    }

    /// Mean over rows of the squared error `|f(x, t) - target|^2` and its exact
    /// parameter gradient.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        t_max: usize,
        target: ArrayView2<f64>,
    ) -> Result<(f64, Gradients), NeuralError> {
        self.check_batch(&x, t)?;
        if target.dim() != (x.nrows(), self.output_dim()) {
            return Err(NeuralError::Dimension {
                expected: self.output_dim(),
                got: target.ncols(),
            });
        }
        let (out, cache) = self.forward_cached(&x, t, t_max);
        let diff = out - &target;
        let n = x.nrows().max(1) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let (layers, _) = self.backward(&cache, diff * (2.0 / n));
        Ok((loss, Gradients { layers }))
    }

    /// Row-wise vector-Jacobian products `cot[r]^T d f(x[r], t[r]) / d x[r]`,
    /// restricted to the data block of the input.
    pub fn input_vjp_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        t_max: usize,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>, NeuralError> {
        self.check_batch(&x, t)?;
        if cot.dim() != (x.nrows(), self.output_dim()) {
            return Err(NeuralError::Dimension {
                expected: self.output_dim(),
                got: cot.ncols(),
            });
        }
        let (_, cache) = self.forward_cached(&x, t, t_max);
        let (_, g) = self.backward(&cache, cot.to_owned());
        Ok(g.slice(s![.., ..self.data_dim]).to_owned())
    }

    pub fn input_vjp(
        &self,
        x: &[f64],
        t: usize,
        t_max: usize,
        cot: &[f64],
    ) -> Result<Vec<f64>, NeuralError> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let cv = ArrayView2::from_shape((1, cot.len()), cot).expect("contiguous row");
        Ok(self
            .input_vjp_batch(xv, &[t], t_max, cv)?
            .into_raw_vec_and_offset()
            .0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(model: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Dense> = model
            .layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut self.m[k].w)
                .and(&mut self.v[k].w)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
            Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut self.m[k].b)
                .and(&mut self.v[k].b)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}
