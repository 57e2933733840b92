//! Dense and LSTM layers with explicit backward passes, plus the two
//! optimizers used by the trainers. Everything is f64; parameter blocks
//! flatten to plain vectors so optimizers, serialization, and finite
//! difference checks all share one representation.

use ndarray::{Array1, Array2, Axis};
use rand::rngs::StdRng;
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// `-log p[target]`, clamped at 1e-12 inside the log.
pub fn cross_entropy(probs: &Array1<f64>, target: usize) -> f64 {
    -probs[target].max(1e-12).ln()
}

/// A parameter block that can round-trip through a flat `Vec<f64>`.
pub trait ParamBlock {
    fn param_count(&self) -> usize;
    fn write_flat(&self, out: &mut Vec<f64>);
    fn read_flat(&mut self, data: &[f64], cursor: &mut usize);

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// Uniform init in [-scale, scale], zero bias.
    pub fn init(out_dim: usize, in_dim: usize, scale: f64, rng: &mut StdRng) -> Self {
        Self {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-scale..scale)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Accumulates dW, db into `grads` and returns dx.
    pub fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>, grads: &mut Linear) -> Array1<f64> {
        for (r, &dv) in dy.iter().enumerate() {
            grads.w.row_mut(r).scaled_add(dv, x);
        }
        grads.b += dy;
        self.w.t().dot(dy)
    }
}

impl ParamBlock for Linear {
    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    fn read_flat(&mut self, data: &[f64], cursor: &mut usize) {
        for v in self.w.iter_mut() {
            *v = data[*cursor];
            *cursor += 1;
        }
        for v in self.b.iter_mut() {
            *v = data[*cursor];
            *cursor += 1;
        }
    }
}

/// One LSTM layer. Gate pre-activations are stacked `[i, f, g, o]` in
/// blocks of the hidden width:
///
/// ```text
/// pre = wx·x + wh·h_prev + b
/// i = σ(pre_i)  f = σ(pre_f)  g = tanh(pre_g)  o = σ(pre_o)
/// c = f∘c_prev + i∘g          h = o∘tanh(c)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// (4h, in)
    pub wx: Array2<f64>,
    /// (4h, h)
    pub wh: Array2<f64>,
    /// (4h)
    pub b: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            wx: Array2::zeros((4 * hidden, input)),
            wh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform weight init in [-scale, scale]; the forget-gate bias block
    /// starts at `forget_bias`, the rest at zero.
    pub fn init(
        hidden: usize,
        input: usize,
        scale: f64,
        forget_bias: f64,
        rng: &mut StdRng,
    ) -> Self {
        let mut layer = Self {
            wx: Array2::from_shape_fn((4 * hidden, input), |_| rng.random_range(-scale..scale)),
            wh: Array2::from_shape_fn((4 * hidden, hidden), |_| rng.random_range(-scale..scale)),
            b: Array1::zeros(4 * hidden),
        };
        layer.b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(forget_bias);
        layer
    }

    pub fn hidden(&self) -> usize {
        self.wh.len_of(Axis(1))
    }

    pub fn input(&self) -> usize {
        self.wx.len_of(Axis(1))
    }

    /// One forward step; the cache carries everything backward needs.
    pub fn step(
        &self,
        x: &Array1<f64>,
        h_prev: &Array1<f64>,
        c_prev: &Array1<f64>,
    ) -> LstmStepCache {
        let h = self.hidden();
        let pre = self.wx.dot(x) + self.wh.dot(h_prev) + &self.b;
        let i: Array1<f64> = pre.slice(ndarray::s![0..h]).mapv(sigmoid);
        let f: Array1<f64> = pre.slice(ndarray::s![h..2 * h]).mapv(sigmoid);
        let g: Array1<f64> = pre.slice(ndarray::s![2 * h..3 * h]).mapv(f64::tanh);
        let o: Array1<f64> = pre.slice(ndarray::s![3 * h..4 * h]).mapv(sigmoid);
        let c = &f * c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h_out = &o * &tanh_c;
        LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            c,
            tanh_c,
            h: h_out,
        }
    }

    /// Backward through one step. `dh` is the loss gradient w.r.t. this
    /// step's hidden output (including any contribution from the next
    /// step), `dc_next` the carried cell gradient. Accumulates parameter
    /// gradients into `grads` and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward_step(
        &self,
        cache: &LstmStepCache,
        dh: &Array1<f64>,
        dc_next: &Array1<f64>,
        grads: &mut LstmLayer,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let h = self.hidden();
        let d_o = dh * &cache.tanh_c;
        let dc = dc_next + &(dh * &cache.o * cache.tanh_c.mapv(|t| 1.0 - t * t));
        let di = &dc * &cache.g;
        let df = &dc * &cache.c_prev;
        let dg = &dc * &cache.i;
        let dc_prev = &dc * &cache.f;

        let mut dpre = Array1::zeros(4 * h);
        dpre.slice_mut(ndarray::s![0..h])
            .assign(&(&di * &cache.i * cache.i.mapv(|v| 1.0 - v)));
        dpre.slice_mut(ndarray::s![h..2 * h])
            .assign(&(&df * &cache.f * cache.f.mapv(|v| 1.0 - v)));
        dpre.slice_mut(ndarray::s![2 * h..3 * h])
            .assign(&(&dg * cache.g.mapv(|v| 1.0 - v * v)));
        dpre.slice_mut(ndarray::s![3 * h..4 * h])
            .assign(&(&d_o * &cache.o * cache.o.mapv(|v| 1.0 - v)));

        for (r, &dv) in dpre.iter().enumerate() {
            grads.wx.row_mut(r).scaled_add(dv, &cache.x);
            grads.wh.row_mut(r).scaled_add(dv, &cache.h_prev);
        }
        grads.b += &dpre;

        let dx = self.wx.t().dot(&dpre);
        let dh_prev = self.wh.t().dot(&dpre);
        (dx, dh_prev, dc_prev)
    }
}

impl ParamBlock for LstmLayer {
    fn param_count(&self) -> usize {
        self.wx.len() + self.wh.len() + self.b.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.wx.iter());
        out.extend(self.wh.iter());
        out.extend(self.b.iter());
    }

    fn read_flat(&mut self, data: &[f64], cursor: &mut usize) {
        for v in self.wx.iter_mut().chain(self.wh.iter_mut()).chain(self.b.iter_mut()) {
            *v = data[*cursor];
            *cursor += 1;
        }
    }
}

/// Per-step state cached during the forward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
    pub h: Array1<f64>,
}

/// RMSProp accumulator: `cache ← decay·cache + (1−decay)·g²`,
/// `p ← p − lr·g/(√cache + eps)`.
#[derive(Debug, Clone)]
pub struct RmspropState {
    cache: Vec<f64>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl RmspropState {
    pub fn new(n_params: usize) -> Self {
        Self {
            cache: vec![0.0; n_params],
            skipped: 0,
        }
    }
}

/// Applies one RMSProp update in place. A non-finite gradient anywhere
/// skips the whole step (parameters and cache untouched) and bumps the
/// skip counter. Returns whether the step was applied.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut RmspropState,
    lr: f64,
    decay: f64,
    eps: f64,
) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.cache.len());
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return false;
    }
    for ((p, &g), c) in params.iter_mut().zip(grads).zip(&mut state.cache) {
        *c = decay * *c + (1.0 - decay) * g * g;
        *p -= lr * g / (c.sqrt() + eps);
    }
    true
}

/// Plain SGD step; skips (and counts towards nothing) on non-finite
/// gradients, mirroring the RMSProp contract.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> bool {
    assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    true
}
