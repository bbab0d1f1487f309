//! Dense ReLU networks with hand-written backprop and an Adam optimiser.
//!
//! Parameters live in one flat vector so optimisers, target-network averaging
//! and checkpoints can treat a network as a single slice. Matrices are
//! row-major; a layer computes `Y = X·W + b` with `W` stored `n_in × n_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpData", into = "MlpData")]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    slots: Vec<LayerSlot>,
}

#[derive(Serialize, Deserialize)]
struct MlpData {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl TryFrom<MlpData> for Mlp {
    type Error = String;

    fn try_from(d: MlpData) -> Result<Self, String> {
        let mut m = Mlp::zeros(&d.sizes);
        if d.params.len() != m.params.len() {
            return Err(format!("expected {} parameters for sizes {:?}, found {}", m.params.len(), d.sizes, d.params.len()));
        }
        if d.params.iter().any(|p| !p.is_finite()) {
            return Err("non-finite parameter".into());
        }
        m.activation = d.activation;
        m.params = d.params;
        Ok(m)
    }
}

impl From<Mlp> for MlpData {
    fn from(m: Mlp) -> Self {
        MlpData { sizes: m.sizes, activation: m.activation, params: m.params }
    }
}

/// Per-layer outputs kept for the backward pass. `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
    // and m×n views; `c` does not alias `a` or `b` because it is a distinct
    // `&mut` borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut slots = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            slots.push(LayerSlot { n_in, n_out, w: off, b: off + n_in * n_out });
            off += n_in * n_out + n_out;
        }
        Mlp { sizes: sizes.to_vec(), activation: Activation::Relu, params: vec![0.0; off], slots }
    }

    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut m = Self::zeros(sizes);
        for s in m.slots.clone() {
            let bound = 1.0 / (s.n_in as f64).sqrt();
            for p in &mut m.params[s.w..s.b + s.n_out] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        m
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable view of the output layer (weights, biases).
    pub fn output_layer_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let s = *self.slots.last().unwrap();
        let (w, b) = self.params[s.w..s.b + s.n_out].split_at_mut(s.n_in * s.n_out);
        (w, b)
    }

    /// Forward pass over `batch` rows, keeping intermediates.
    pub fn forward(&self, input: &[f64], batch: usize) -> ForwardCache {
        assert_eq!(input.len(), batch * self.input_dim(), "input shape");
        let mut acts = Vec::with_capacity(self.slots.len() + 1);
        acts.push(input.to_vec());
        let last = self.slots.len() - 1;
        for (li, s) in self.slots.iter().enumerate() {
            let mut y = vec![0.0; batch * s.n_out];
            let bias = &self.params[s.b..s.b + s.n_out];
            for row in y.chunks_exact_mut(s.n_out) {
                row.copy_from_slice(bias);
            }
            let x = &acts[li];
            gemm(
                batch,
                s.n_in,
                s.n_out,
                x,
                (s.n_in as isize, 1),
                &self.params[s.w..s.b],
                (s.n_out as isize, 1),
                1.0,
                &mut y,
            );
            if li != last {
                for v in &mut y {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(y);
        }
        ForwardCache { batch, acts }
    }

    pub fn predict(&self, input: &[f64], batch: usize) -> Vec<f64> {
        self.forward(input, batch).acts.pop().unwrap()
    }

    /// Backpropagate `d_out` (batch × n_out). Parameter gradients are added
    /// into `grad` when given; returns the gradient wrt the input when
    /// `want_input` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        assert_eq!(d_out.len(), batch * self.output_dim(), "d_out shape");
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "grad shape");
        }
        let mut dy = d_out.to_vec();
        for li in (0..self.slots.len()).rev() {
            let s = self.slots[li];
            let x = &cache.acts[li];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[s.w..s.b + s.n_out].split_at_mut(s.n_in * s.n_out);
                // dW += Xᵀ·dY
                gemm(s.n_in, batch, s.n_out, x, (1, s.n_in as isize), &dy, (s.n_out as isize, 1), 1.0, gw);
                for row in dy.chunks_exact(s.n_out) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            if li == 0 && !want_input {
                return None;
            }
            // dX = dY·Wᵀ
            let mut dx = vec![0.0; batch * s.n_in];
            gemm(
                batch,
                s.n_out,
                s.n_in,
                &dy,
                (s.n_out as isize, 1),
                &self.params[s.w..s.b],
                (1, s.n_out as isize),
                0.0,
                &mut dx,
            );
            if li > 0 {
                for (d, a) in dx.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dy = dx;
        }
        Some(dy)
    }

    /// `self ← (1−rate)·self + rate·source`.
    pub fn polyak_from(&mut self, source: &Mlp, rate: f64) {
        assert_eq!(self.params.len(), source.params.len());
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t += rate * (s - *t);
        }
    }

    pub fn param_distance(&self, other: &Mlp) -> f64 {
        self.params.iter().zip(&other.params).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Adam { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let step = lr / bc1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] / bc2).sqrt() + eps);
        }
    }
}
