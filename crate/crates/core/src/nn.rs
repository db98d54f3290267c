//! Small sequence regressor: a gated recurrent layer, a stack of dense
//! `tanh` layers and either a linear vector head or a per-step sigmoid head,
//! trained by mini-batch backpropagation through time with step masking.
//!
//! The recurrent cell is the standard GRU:
//!
//! ```text
//! z = sigmoid(Wz x + Uz h + bz)          update gate
//! r = sigmoid(Wr x + Ur h + br)          reset gate
//! n = tanh(Wn x + Un (r * h) + bn)       candidate
//! h' = (1 - z) * n + z * h
//! ```
//!
//! At a masked step the state is carried through unchanged (`h' = h`) and the
//! step contributes nothing to the loss, so inputs at masked steps cannot
//! influence either the loss or the gradients.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{sigmoid, Scalar};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Body {
    Gru,
    /// A single affine map of the flattened input window.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "size")]
pub enum OutputHead {
    /// Unbounded outputs read from the final step.
    Vector(usize),
    /// One sigmoid output per step.
    PerStepSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    /// Conditional density loss `sum_j beta_j^2 - 2 sum_j beta_j phi_j(z_i)` for
    /// coefficients of an orthonormal basis; the target holds `phi(z_i)`.
    Cde,
    MaskedBinaryCrossentropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Features per time step.
    pub input_dim: usize,
    pub history_u: usize,
    pub body: Body,
    pub dense_layers: usize,
    pub dense_units: usize,
    pub recurrent_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub output_head: OutputHead,
    pub optimizer: Optimizer,
    /// Rescale batch gradients whose L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl NetConfig {
    /// Defaults: two dense layers of `max(4, D)` units, eight recurrent units,
    /// batches of 128, learning rate 0.01, 50 epochs of plain gradient descent.
    pub fn new(input_dim: usize, dim_d: usize, output_head: OutputHead) -> Self {
        Self {
            input_dim,
            history_u: 1,
            body: Body::Gru,
            dense_layers: 2,
            dense_units: dim_d.max(4),
            recurrent_units: 8,
            batch_size: 128,
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
            output_head,
            optimizer: Optimizer::Sgd,
            clip_norm: None,
        }
    }

    pub fn linear(input_dim: usize, output_head: OutputHead) -> Self {
        Self { body: Body::Linear, dense_layers: 0, ..Self::new(input_dim, 1, output_head) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.history_u == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("input_dim, history_u, batch_size and epochs must be >= 1".into());
        }
        if self.body == Body::Gru && (self.recurrent_units == 0 || self.dense_layers == 0 || self.dense_units == 0) {
            return bad("recurrent networks need >= 1 dense layer, dense unit and recurrent unit".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let OutputHead::Vector(0) = self.output_head {
            return bad("vector head needs >= 1 output".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive".into());
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.output_head {
            OutputHead::Vector(j) => j,
            OutputHead::PerStepSigmoid => 1,
        }
    }

    /// Width of the vector fed to the body at one step.
    fn step_input(&self) -> usize {
        match (self.body, self.output_head) {
            (Body::Gru, OutputHead::Vector(_)) => self.input_dim,
            (Body::Linear, OutputHead::Vector(_)) => self.input_dim * self.history_u,
            (_, OutputHead::PerStepSigmoid) => self.input_dim * self.history_u,
        }
    }
}

/// Tuning ranges for random hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpace {
    /// Maximum follow-up; bounds dense layers and recurrent units.
    pub max_followup: usize,
    /// Covariate dimension; bounds dense units.
    pub dim_d: usize,
    pub n_samples: usize,
}

impl HyperSpace {
    pub fn sample(&self, base: &NetConfig, rng: &mut rng::Rng) -> NetConfig {
        let theta = self.max_followup.max(1);
        let lo_batch = self.n_samples.clamp(1, 128);
        NetConfig {
            dense_layers: rng.random_range(1..=theta),
            recurrent_units: rng.random_range(1..=theta),
            dense_units: rng.random_range(1..=self.dim_d.max(1)),
            batch_size: rng.random_range(lo_batch..=self.n_samples.max(lo_batch)),
            ..base.clone()
        }
    }
}

/// Draws `trials` configurations and returns the one with the lowest score.
pub fn random_search<F>(space: &HyperSpace, base: &NetConfig, trials: usize, seed: u64, mut score: F) -> Result<NetConfig>
where
    F: FnMut(&NetConfig) -> Result<f64>,
{
    let mut rng = rng::stream(seed, rng::streams::SEARCH);
    let mut best: Option<(f64, NetConfig)> = None;
    for _ in 0..trials.max(1) {
        let cfg = space.sample(base, &mut rng);
        let s = score(&cfg)?;
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, cfg));
        }
    }
    Ok(best.expect("at least one trial").1)
}

/// Per-sample step mask. Observed steps form a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMask(pub Vec<bool>);

impl StepMask {
    pub fn full(len: usize) -> Self {
        StepMask(vec![true; len])
    }

    pub fn prefix(len: usize, observed: usize) -> Self {
        StepMask((0..len).map(|t| t < observed).collect())
    }

    pub fn is_prefix(&self) -> bool {
        self.0.windows(2).all(|w| w[0] || !w[1])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    /// Vector-head target (regression values or basis evaluations).
    Vector(Vec<T>),
    /// Per-step labels.
    Steps(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `steps * input_dim` values, step-major.
    pub inputs: Vec<T>,
    pub mask: StepMask,
    pub target: Target<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn steps(&self) -> usize {
        self.mask.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    /// `[3H x I]`, gate order z, r, n.
    w: usize,
    /// `[3H x H]`
    u: usize,
    /// `[3H]`
    b: usize,
    hidden: usize,
    input: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    gru: Option<Gru>,
    dense: Vec<Dense>,
    head: Dense,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let step_in = cfg.step_input();
        let out = cfg.output_dim();
        match cfg.body {
            Body::Linear => {
                let cols = match cfg.output_head {
                    OutputHead::Vector(_) => step_in,
                    OutputHead::PerStepSigmoid => step_in,
                };
                let head = Dense { w: take(out * cols), b: take(out), rows: out, cols };
                Layout { gru: None, dense: Vec::new(), head, total: off }
            }
            Body::Gru => {
                let h = cfg.recurrent_units;
                let gru = Gru { w: take(3 * h * step_in), u: take(3 * h * h), b: take(3 * h), hidden: h, input: step_in };
                let mut dense = Vec::with_capacity(cfg.dense_layers);
                let mut cols = h;
                for _ in 0..cfg.dense_layers {
                    let rows = cfg.dense_units;
                    dense.push(Dense { w: take(rows * cols), b: take(rows), rows, cols });
                    cols = rows;
                }
                let head = Dense { w: take(out * cols), b: take(out), rows: out, cols };
                Layout { gru: Some(gru), dense, head, total: off }
            }
        }
    }

    /// `(offset, len, fan_in)` of every parameter block.
    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        if let Some(g) = self.gru {
            v.push((g.w, 3 * g.hidden * g.input, g.input));
            v.push((g.u, 3 * g.hidden * g.hidden, g.hidden));
            v.push((g.b, 3 * g.hidden, g.input));
        }
        for d in self.dense.iter().chain(std::iter::once(&self.head)) {
            v.push((d.w, d.rows * d.cols, d.cols));
            v.push((d.b, d.rows, d.cols));
        }
        v
    }
}

#[inline]
fn matvec_acc<T: Scalar>(out: &mut [T], w: &[T], cols: usize, x: &[T]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        *o += acc;
    }
}

#[inline]
fn matvec_t_acc<T: Scalar>(out: &mut [T], w: &[T], cols: usize, dy: &[T]) {
    for (row, &d) in w.chunks_exact(cols).zip(dy) {
        if d == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * d;
        }
    }
}

#[inline]
fn outer_acc<T: Scalar>(gw: &mut [T], cols: usize, dy: &[T], x: &[T]) {
    for (row, &d) in gw.chunks_exact_mut(cols).zip(dy) {
        if d == T::zero() {
            continue;
        }
        for (g, &xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

/// Activations of one step kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct StepCache<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    h: Vec<T>,
    /// Outputs of each dense layer.
    dense: Vec<Vec<T>>,
    /// Head pre-activation.
    out: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    cfg: NetConfig,
    layout_total: usize,
    params: Vec<T>,
}

/// Training history of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss over each epoch.
    pub epoch_losses: Vec<f64>,
    /// True when training failed to improve and the initial weights were kept.
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: NetConfig,
    pub params: Vec<f64>,
}

impl<T: Scalar> Network<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, deterministic in `cfg.seed`.
    pub fn init(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut rng = rng::stream(cfg.seed, 0);
        let mut params = vec![T::zero(); layout.total];
        for (off, len, fan_in) in layout.blocks() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[off..off + len] {
                *p = T::of(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { layout_total: layout.total, cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.layout_total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.layout_total, params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layout_total
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    fn check_sample(&self, inputs: &[T], mask: &StepMask) -> Result<usize> {
        let steps = mask.len();
        if steps == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if inputs.len() != steps * self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "{} input values for {steps} steps of width {}",
                inputs.len(),
                self.cfg.input_dim
            )));
        }
        if let OutputHead::Vector(_) = self.cfg.output_head {
            if steps != self.cfg.history_u {
                return Err(Error::Shape(format!(
                    "input window has {steps} steps, network expects history_u = {}",
                    self.cfg.history_u
                )));
            }
        }
        Ok(steps)
    }

    /// Body input at step `t`: the trailing `history_u` steps (zero padded) for
    /// per-step heads, the raw step for recurrent vector heads.
    fn step_input(&self, inputs: &[T], t: usize, buf: &mut Vec<T>) {
        let d = self.cfg.input_dim;
        buf.clear();
        match (self.cfg.body, self.cfg.output_head) {
            (Body::Gru, OutputHead::Vector(_)) => buf.extend_from_slice(&inputs[t * d..(t + 1) * d]),
            (Body::Linear, OutputHead::Vector(_)) => buf.extend_from_slice(inputs),
            (_, OutputHead::PerStepSigmoid) => {
                let u = self.cfg.history_u;
                for k in 0..u {
                    let back = u - 1 - k;
                    if back > t {
                        buf.extend(std::iter::repeat_n(T::zero(), d));
                    } else {
                        let s = t - back;
                        buf.extend_from_slice(&inputs[s * d..(s + 1) * d]);
                    }
                }
            }
        }
    }

    /// Runs dense layers and the head from `h`, filling `cache.dense` and `cache.out`.
    fn head_forward(&self, layout: &Layout, h: &[T], cache: &mut StepCache<T>) {
        let p = &self.params;
        cache.dense.resize(layout.dense.len(), Vec::new());
        let mut prev: &[T] = h;
        for (l, d) in layout.dense.iter().enumerate() {
            let mut y: Vec<T> = p[d.b..d.b + d.rows].to_vec();
            matvec_acc(&mut y, &p[d.w..d.w + d.rows * d.cols], d.cols, prev);
            for v in &mut y {
                *v = v.tanh();
            }
            cache.dense[l] = y;
            prev = &cache.dense[l];
        }
        let hd = layout.head;
        let mut out: Vec<T> = p[hd.b..hd.b + hd.rows].to_vec();
        matvec_acc(&mut out, &p[hd.w..hd.w + hd.rows * hd.cols], hd.cols, prev);
        cache.out = out;
    }

    fn forward_cached(&self, inputs: &[T], mask: &StepMask) -> Result<Vec<StepCache<T>>> {
        let steps = self.check_sample(inputs, mask)?;
        let layout = self.layout();
        let p = &self.params;
        let per_step = matches!(self.cfg.output_head, OutputHead::PerStepSigmoid);
        let mut caches: Vec<StepCache<T>> = Vec::with_capacity(steps);

        match layout.gru {
            None => {
                let iter_steps = if per_step { steps } else { 1 };
                for t in 0..iter_steps {
                    let mut c = StepCache::default();
                    self.step_input(inputs, t, &mut c.x);
                    let x = c.x.clone();
                    self.head_forward(&layout, &x, &mut c);
                    caches.push(c);
                }
            }
            Some(g) => {
                let hsz = g.hidden;
                let mut h = vec![T::zero(); hsz];
                for t in 0..steps {
                    let mut c = StepCache::default();
                    self.step_input(inputs, t, &mut c.x);
                    c.h_prev = h.clone();
                    if mask.0[t] {
                        let mut gates: Vec<T> = p[g.b..g.b + 3 * hsz].to_vec();
                        matvec_acc(&mut gates, &p[g.w..g.w + 3 * hsz * g.input], g.input, &c.x);
                        let uw = &p[g.u..g.u + 3 * hsz * hsz];
                        matvec_acc(&mut gates[..2 * hsz], &uw[..2 * hsz * hsz], hsz, &h);
                        let z: Vec<T> = gates[..hsz].iter().map(|&v| sigmoid(v)).collect();
                        let r: Vec<T> = gates[hsz..2 * hsz].iter().map(|&v| sigmoid(v)).collect();
                        let rh: Vec<T> = r.iter().zip(&h).map(|(&a, &b)| a * b).collect();
                        matvec_acc(&mut gates[2 * hsz..], &uw[2 * hsz * hsz..], hsz, &rh);
                        let n: Vec<T> = gates[2 * hsz..].iter().map(|&v| v.tanh()).collect();
                        for k in 0..hsz {
                            h[k] = (T::one() - z[k]) * n[k] + z[k] * h[k];
                        }
                        c.z = z;
                        c.r = r;
                        c.n = n;
                    }
                    c.h = h.clone();
                    if per_step || t + 1 == steps {
                        let hh = c.h.clone();
                        self.head_forward(&layout, &hh, &mut c);
                    }
                    caches.push(c);
                }
            }
        }
        Ok(caches)
    }

    /// Raw network outputs: `J` values for a vector head, one sigmoid value per
    /// step for a per-step head.
    pub fn forward(&self, inputs: &[T], mask: &StepMask) -> Result<Vec<T>> {
        let caches = self.forward_cached(inputs, mask)?;
        Ok(match self.cfg.output_head {
            OutputHead::Vector(_) => caches.last().expect("non-empty").out.clone(),
            OutputHead::PerStepSigmoid => caches.iter().map(|c| sigmoid(c.out[0])).collect(),
        })
    }

    /// Forward passes over many samples in parallel.
    pub fn predict_many(&self, samples: &[(Vec<T>, StepMask)]) -> Result<Vec<Vec<T>>> {
        samples.par_iter().map(|(x, m)| self.forward(x, m)).collect()
    }

    /// Loss of one sample as `(sum of loss terms, number of terms)` together
    /// with the gradient of the summed loss with respect to each step's head
    /// pre-activation.
    fn sample_loss(&self, caches: &[StepCache<T>], sample: &Sample<T>, kind: LossKind) -> Result<(T, T, Vec<Vec<T>>)> {
        let two = T::of(2.0);
        match (self.cfg.output_head, kind, &sample.target) {
            (OutputHead::Vector(j), LossKind::Mse | LossKind::Cde, Target::Vector(y)) => {
                if y.len() != j {
                    return Err(Error::Shape(format!("target has {} values, head has {j}", y.len())));
                }
                let out = &caches.last().expect("non-empty").out;
                let jt = T::of(j as f64);
                let (loss, grad): (T, Vec<T>) = if kind == LossKind::Mse {
                    let l = out.iter().zip(y).map(|(&o, &t)| (o - t) * (o - t)).sum::<T>() / jt;
                    (l, out.iter().zip(y).map(|(&o, &t)| two * (o - t) / jt).collect())
                } else {
                    let l = out.iter().zip(y).map(|(&o, &t)| o * o - two * o * t).sum::<T>();
                    (l, out.iter().zip(y).map(|(&o, &t)| two * (o - t)).collect())
                };
                let mut grads = vec![Vec::new(); caches.len()];
                *grads.last_mut().expect("non-empty") = grad;
                Ok((loss, T::one(), grads))
            }
            (OutputHead::PerStepSigmoid, LossKind::MaskedBinaryCrossentropy | LossKind::Mse, Target::Steps(y)) => {
                if y.len() != caches.len() {
                    return Err(Error::Shape(format!("{} labels for {} steps", y.len(), caches.len())));
                }
                let mut loss = T::zero();
                let mut count = T::zero();
                let mut grads = Vec::with_capacity(caches.len());
                for ((c, &label), &m) in caches.iter().zip(y).zip(&sample.mask.0) {
                    if !m {
                        grads.push(vec![T::zero()]);
                        continue;
                    }
                    let logit = c.out[0];
                    let p = sigmoid(logit);
                    count += T::one();
                    if kind == LossKind::MaskedBinaryCrossentropy {
                        // softplus(z) - y z
                        let sp = logit.max(T::zero()) + (-logit.abs()).exp().ln_1p();
                        loss += sp - label * logit;
                        grads.push(vec![p - label]);
                    } else {
                        loss += (p - label) * (p - label);
                        grads.push(vec![two * (p - label) * p * (T::one() - p)]);
                    }
                }
                Ok((loss, count, grads))
            }
            _ => Err(Error::InvalidInput(format!(
                "loss {kind:?} is incompatible with head {:?} and the given target",
                self.cfg.output_head
            ))),
        }
    }

    /// Accumulates gradients of the summed loss of one sample into `grad`.
    fn backward(&self, layout: &Layout, caches: &[StepCache<T>], mask: &StepMask, dout: &[Vec<T>], grad: &mut [T]) {
        let p = &self.params;

        // dense stack + head for one step; returns d(loss)/d(head input h)
        let head_back = |c: &StepCache<T>, d_out: &[T], grad: &mut [T], h_in: &[T]| -> Vec<T> {
            let hd = layout.head;
            let last: &[T] = c.dense.last().map(|v| v.as_slice()).unwrap_or(h_in);
            outer_acc(&mut grad[hd.w..hd.w + hd.rows * hd.cols], hd.cols, d_out, last);
            for (g, &d) in grad[hd.b..hd.b + hd.rows].iter_mut().zip(d_out) {
                *g += d;
            }
            let mut dy = vec![T::zero(); hd.cols];
            matvec_t_acc(&mut dy, &p[hd.w..hd.w + hd.rows * hd.cols], hd.cols, d_out);
            for l in (0..layout.dense.len()).rev() {
                let d = layout.dense[l];
                let y = &c.dense[l];
                let da: Vec<T> = dy.iter().zip(y).map(|(&g, &v)| g * (T::one() - v * v)).collect();
                let input: &[T] = if l == 0 { h_in } else { &c.dense[l - 1] };
                outer_acc(&mut grad[d.w..d.w + d.rows * d.cols], d.cols, &da, input);
                for (g, &v) in grad[d.b..d.b + d.rows].iter_mut().zip(&da) {
                    *g += v;
                }
                dy = vec![T::zero(); d.cols];
                matvec_t_acc(&mut dy, &p[d.w..d.w + d.rows * d.cols], d.cols, &da);
            }
            dy
        };

        let Some(g) = layout.gru else {
            for (c, d) in caches.iter().zip(dout) {
                if d.iter().any(|v| *v != T::zero()) {
                    head_back(c, d, grad, &c.x);
                }
            }
            return;
        };

        let hsz = g.hidden;
        let uw = &p[g.u..g.u + 3 * hsz * hsz];
        let mut dh_next = vec![T::zero(); hsz];
        for t in (0..caches.len()).rev() {
            let c = &caches[t];
            let mut dh = std::mem::take(&mut dh_next);
            if !dout[t].is_empty() && dout[t].iter().any(|v| *v != T::zero()) {
                let dhead = head_back(c, &dout[t], grad, &c.h);
                for (a, b) in dh.iter_mut().zip(dhead) {
                    *a += b;
                }
            }
            if !mask.0[t] {
                dh_next = dh;
                continue;
            }
            let hp = &c.h_prev;
            let mut dh_prev = vec![T::zero(); hsz];
            let mut dpre = vec![T::zero(); 3 * hsz]; // z, r, n pre-activations
            for k in 0..hsz {
                let dn = dh[k] * (T::one() - c.z[k]);
                let dz = dh[k] * (hp[k] - c.n[k]);
                dh_prev[k] += dh[k] * c.z[k];
                dpre[2 * hsz + k] = dn * (T::one() - c.n[k] * c.n[k]);
                dpre[k] = dz * c.z[k] * (T::one() - c.z[k]);
            }
            // candidate path through r * h
            let rh: Vec<T> = c.r.iter().zip(hp).map(|(&a, &b)| a * b).collect();
            let mut drh = vec![T::zero(); hsz];
            matvec_t_acc(&mut drh, &uw[2 * hsz * hsz..], hsz, &dpre[2 * hsz..]);
            for k in 0..hsz {
                dh_prev[k] += drh[k] * c.r[k];
                let dr = drh[k] * hp[k];
                dpre[hsz + k] = dr * c.r[k] * (T::one() - c.r[k]);
            }
            outer_acc(&mut grad[g.w..g.w + 3 * hsz * g.input], g.input, &dpre, &c.x);
            outer_acc(&mut grad[g.u..g.u + 2 * hsz * hsz], hsz, &dpre[..2 * hsz], hp);
            outer_acc(&mut grad[g.u + 2 * hsz * hsz..g.u + 3 * hsz * hsz], hsz, &dpre[2 * hsz..], &rh);
            for (gb, &v) in grad[g.b..g.b + 3 * hsz].iter_mut().zip(&dpre) {
                *gb += v;
            }
            matvec_t_acc(&mut dh_prev, &uw[..2 * hsz * hsz], hsz, &dpre[..2 * hsz]);
            dh_next = dh_prev;
        }
    }

    /// Per-step samples cut to their observed prefix. Masked trailing steps
    /// carry no loss and cannot influence earlier steps, so this leaves loss
    /// and gradient unchanged.
    fn trimmed<'s>(&self, s: &'s Sample<T>) -> std::borrow::Cow<'s, Sample<T>> {
        let keep = s.mask.count();
        if self.cfg.output_head != OutputHead::PerStepSigmoid || keep == 0 || keep == s.mask.len() || !s.mask.is_prefix() {
            return std::borrow::Cow::Borrowed(s);
        }
        let d = self.cfg.input_dim;
        match &s.target {
            Target::Steps(y) if y.len() == s.mask.len() && s.inputs.len() == s.mask.len() * d => {
                std::borrow::Cow::Owned(Sample {
                    inputs: s.inputs[..keep * d].to_vec(),
                    mask: StepMask::full(keep),
                    target: Target::Steps(y[..keep].to_vec()),
                })
            }
            _ => std::borrow::Cow::Borrowed(s),
        }
    }

    /// Summed loss, number of loss terms and summed gradient over `samples`.
    fn accumulate(&self, samples: &[&Sample<T>], kind: LossKind) -> Result<(T, T, Vec<T>)> {
        let layout = self.layout();
        let mut grad = vec![T::zero(); self.layout_total];
        let mut loss = T::zero();
        let mut count = T::zero();
        for s in samples {
            let s = self.trimmed(s);
            let caches = self.forward_cached(&s.inputs, &s.mask)?;
            let (l, c, dout) = self.sample_loss(&caches, &s, kind)?;
            self.backward(&layout, &caches, &s.mask, &dout, &mut grad);
            loss += l;
            count += c;
        }
        Ok((loss, count, grad))
    }

    /// Mean loss over `samples` and its gradient. The mean is per loss term:
    /// per sample for vector heads, per observed step for per-step heads.
    pub fn loss_and_grad(&self, samples: &[&Sample<T>], kind: LossKind) -> Result<(T, Vec<T>)> {
        let (loss, count, mut grad) = self.accumulate(samples, kind)?;
        if count == T::zero() {
            return Ok((T::zero(), grad));
        }
        for g in &mut grad {
            *g /= count;
        }
        Ok((loss / count, grad))
    }

    pub fn loss(&self, samples: &[&Sample<T>], kind: LossKind) -> Result<T> {
        let terms: Result<Vec<(T, T)>> = samples
            .par_chunks(256)
            .map(|chunk| {
                let mut l = T::zero();
                let mut c = T::zero();
                for s in chunk {
                    let s = self.trimmed(s);
                    let caches = self.forward_cached(&s.inputs, &s.mask)?;
                    let (sl, sc, _) = self.sample_loss(&caches, &s, kind)?;
                    l += sl;
                    c += sc;
                }
                Ok((l, c))
            })
            .collect();
        let (l, c) = terms?.into_iter().fold((T::zero(), T::zero()), |(a, b), (x, y)| (a + x, b + y));
        Ok(if c == T::zero() { T::zero() } else { l / c })
    }

    /// Mini-batch training. Single-threaded and bit-deterministic in
    /// `(config, data)`.
    pub fn train(&mut self, data: &[Sample<T>], kind: LossKind) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let refs: Vec<&Sample<T>> = data.iter().collect();
        let initial = self.loss(&refs, kind)?;
        let start = self.params.clone();
        let mut rng = rng::stream(self.cfg.seed, 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let lr = T::of(self.cfg.learning_rate);
        let mut m1 = vec![T::zero(); self.layout_total];
        let mut m2 = vec![T::zero(); self.layout_total];
        let mut step = 0i32;
        let mut epoch_losses = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &data[i]).collect();
                let (loss, mut grad) = self.loss_and_grad(&batch, kind)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, loss: loss.as_f64() });
                }
                if let Some(c) = self.cfg.clip_norm {
                    let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
                    if norm > T::of(c) {
                        let s = T::of(c) / norm;
                        grad.iter_mut().for_each(|g| *g *= s);
                    }
                }
                step += 1;
                match self.cfg.optimizer {
                    Optimizer::Sgd => {
                        for (p, g) in self.params.iter_mut().zip(&grad) {
                            *p -= lr * *g;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let (b1, b2) = (T::of(beta1), T::of(beta2));
                        let c1 = T::one() - b1.powi(step);
                        let c2 = T::one() - b2.powi(step);
                        let e = T::of(eps);
                        for k in 0..grad.len() {
                            let gk = grad[k];
                            m1[k] = b1 * m1[k] + (T::one() - b1) * gk;
                            m2[k] = b2 * m2[k] + (T::one() - b2) * gk * gk;
                            self.params[k] -= lr * (m1[k] / c1) / ((m2[k] / c2).sqrt() + e);
                        }
                    }
                }
                sum += loss.as_f64();
                batches += 1;
            }
            epoch_losses.push(sum / batches as f64);
        }

        let mut final_loss = self.loss(&refs, kind)?;
        if !final_loss.is_finite() {
            return Err(Error::Diverged { epoch: self.cfg.epochs, loss: final_loss.as_f64() });
        }
        let reverted = final_loss > initial;
        if reverted {
            self.params = start;
            final_loss = initial;
        }
        Ok(TrainReport { initial_loss: initial.as_f64(), final_loss: final_loss.as_f64(), epoch_losses, reverted })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            params: self.params.iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version(ck.version));
        }
        let mut net = Self::init(ck.config.clone())?;
        net.set_params(ck.params.iter().map(|&p| T::of(p)).collect())?;
        Ok(net)
    }
}

/// Largest relative discrepancy between backpropagated gradients and central
/// finite differences (step `1e-5`) over every parameter.
///
/// The relative error of one parameter is `|g - f| / max(|g|, |f|, floor)`;
/// the floor `1e-6` keeps round-off on vanishing gradients from dominating.
pub fn gradient_check(net: &Network<f64>, samples: &[&Sample<f64>], kind: LossKind) -> Result<f64> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, analytic) = net.loss_and_grad(samples, kind)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for k in 0..net.num_params() {
        let orig = net.params[k];
        probe.params[k] = orig + STEP;
        let up = probe.loss_and_grad(samples, kind)?.0;
        probe.params[k] = orig - STEP;
        let down = probe.loss_and_grad(samples, kind)?.0;
        probe.params[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gru_cfg(input_dim: usize, head: OutputHead, seed: u64) -> NetConfig {
        NetConfig { seed, recurrent_units: 3, dense_units: 4, ..NetConfig::new(input_dim, 4, head) }
    }

    fn seq_sample(rng: &mut rng::Rng, steps: usize, dim: usize, observed: usize) -> Sample<f64> {
        Sample {
            inputs: (0..steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mask: StepMask::prefix(steps, observed),
            target: Target::Steps((0..steps).map(|t| if t + 1 == observed { 1.0 } else { 0.0 }).collect()),
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = gru_cfg(4, OutputHead::Vector(3), 7);
        let a = Network::<f64>::init(cfg.clone()).unwrap();
        let b = Network::<f64>::init(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Network::<f64>::init(NetConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.params(), c.params());

        let lin = Network::<f64>::init(NetConfig::linear(4, OutputHead::Vector(1))).unwrap();
        assert!(lin.params().iter().all(|p| p.abs() <= 0.5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = gru_cfg(2, OutputHead::Vector(1), 0);
        cfg.learning_rate = 0.0;
        assert!(Network::<f64>::init(cfg.clone()).is_err());
        cfg.learning_rate = 0.1;
        cfg.recurrent_units = 0;
        assert!(Network::<f64>::init(cfg).is_err());
        assert!(Network::<f64>::init(NetConfig::linear(0, OutputHead::PerStepSigmoid)).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Network::<f64>::init(gru_cfg(2, OutputHead::Vector(1), 0)).unwrap();
        assert!(net.forward(&[0.0; 3], &StepMask::full(1)).is_err());
        // history_u = 1 but two steps supplied
        assert!(net.forward(&[0.0; 4], &StepMask::full(2)).is_err());
    }

    #[test]
    fn linear_identity_network_is_hand_computable() {
        let mut net = Network::<f64>::init(NetConfig::linear(1, OutputHead::Vector(1))).unwrap();
        net.set_params(vec![2.5, 0.0]).unwrap();
        assert_eq!(net.forward(&[3.0], &StepMask::full(1)).unwrap(), vec![7.5]);
        net.set_params(vec![2.5, -1.0]).unwrap();
        assert_eq!(net.forward(&[3.0], &StepMask::full(1)).unwrap(), vec![6.5]);
    }

    #[test]
    fn sigmoid_head_stays_in_unit_interval() {
        let mut rng = rng::stream(3, 0);
        let net = Network::<f64>::init(gru_cfg(3, OutputHead::PerStepSigmoid, 3)).unwrap();
        for _ in 0..20 {
            let s = seq_sample(&mut rng, 6, 3, 6);
            let big: Vec<f64> = s.inputs.iter().map(|v| v * 50.0).collect();
            for p in net.forward(&big, &s.mask).unwrap() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn all_zero_mask_contributes_nothing() {
        let mut rng = rng::stream(4, 0);
        let net = Network::<f64>::init(gru_cfg(2, OutputHead::PerStepSigmoid, 4)).unwrap();
        let mut s = seq_sample(&mut rng, 5, 2, 3);
        s.mask = StepMask::prefix(5, 0);
        let (loss, grad) = net.loss_and_grad(&[&s], LossKind::MaskedBinaryCrossentropy).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_inputs_do_not_change_loss_or_gradients() {
        let mut rng = rng::stream(5, 0);
        let mut cfg = gru_cfg(2, OutputHead::PerStepSigmoid, 5);
        cfg.history_u = 2;
        let net = Network::<f64>::init(cfg).unwrap();
        let s = seq_sample(&mut rng, 6, 2, 3);
        let mut t = s.clone();
        for v in &mut t.inputs[3 * 2..] {
            *v += 9.0;
        }
        let a = net.loss_and_grad(&[&s], LossKind::MaskedBinaryCrossentropy).unwrap();
        let b = net.loss_and_grad(&[&t], LossKind::MaskedBinaryCrossentropy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut rng = rng::stream(6, 0);
        let net = Network::<f64>::init(NetConfig::linear(3, OutputHead::Vector(2))).unwrap();
        let samples: Vec<Sample<f64>> = (0..5)
            .map(|_| Sample {
                inputs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mask: StepMask::full(1),
                target: Target::Vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            })
            .collect();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        assert!(gradient_check(&net, &refs, LossKind::Mse).unwrap() < 1e-6);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = rng::stream(7, 0);
        let mut cfg = gru_cfg(2, OutputHead::PerStepSigmoid, 7);
        cfg.history_u = 2;
        let net = Network::<f64>::init(cfg).unwrap();
        let samples: Vec<Sample<f64>> = (0..3).map(|k| seq_sample(&mut rng, 5, 2, 2 + k)).collect();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        for kind in [LossKind::MaskedBinaryCrossentropy, LossKind::Mse] {
            let err = gradient_check(&net, &refs, kind).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }

        let mut cfg = gru_cfg(3, OutputHead::Vector(4), 8);
        cfg.history_u = 3;
        let net = Network::<f64>::init(cfg).unwrap();
        let samples: Vec<Sample<f64>> = (0..3)
            .map(|_| Sample {
                inputs: (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mask: StepMask::full(3),
                target: Target::Vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        for kind in [LossKind::Mse, LossKind::Cde] {
            let err = gradient_check(&net, &refs, kind).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn masked_steps_receive_zero_gradient() {
        let mut rng = rng::stream(9, 0);
        let net = Network::<f64>::init(NetConfig::linear(2, OutputHead::PerStepSigmoid)).unwrap();
        let mut s = seq_sample(&mut rng, 4, 2, 4);
        let full = net.loss_and_grad(&[&s], LossKind::MaskedBinaryCrossentropy).unwrap().1;
        s.mask = StepMask::prefix(4, 2);
        let part = net.loss_and_grad(&[&s], LossKind::MaskedBinaryCrossentropy).unwrap().1;
        assert_ne!(full, part);
        // unmasked prefix alone
        let prefix = Sample {
            inputs: s.inputs[..4].to_vec(),
            mask: StepMask::full(2),
            target: Target::Steps(match &s.target {
                Target::Steps(v) => v[..2].to_vec(),
                _ => unreachable!(),
            }),
        };
        let pre = net.loss_and_grad(&[&prefix], LossKind::MaskedBinaryCrossentropy).unwrap().1;
        for (a, b) in part.iter().zip(&pre) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn learns_a_slope_of_two() {
        let mut rng = rng::stream(10, 0);
        let samples: Vec<Sample<f64>> = (0..200)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                Sample { inputs: vec![u], mask: StepMask::full(1), target: Target::Vector(vec![2.0 * u]) }
            })
            .collect();
        let mut cfg = NetConfig::linear(1, OutputHead::Vector(1));
        cfg.batch_size = 20;
        cfg.learning_rate = 0.1;
        cfg.epochs = 200;
        let mut net = Network::<f64>::init(cfg).unwrap();
        let rep = net.train(&samples, LossKind::Mse).unwrap();
        assert!(rep.final_loss <= rep.initial_loss);
        assert!((net.params()[0] - 2.0).abs() < 1e-3, "w = {}", net.params()[0]);
        assert!(net.params()[1].abs() < 1e-3);
    }

    #[test]
    fn constant_target_is_learned() {
        let samples: Vec<Sample<f64>> = (0..64)
            .map(|k| Sample {
                inputs: vec![(k as f64 / 64.0) - 0.5],
                mask: StepMask::full(1),
                target: Target::Vector(vec![0.7]),
            })
            .collect();
        let mut cfg = NetConfig::new(1, 1, OutputHead::Vector(1));
        cfg.optimizer = Optimizer::adam();
        cfg.epochs = 100;
        cfg.batch_size = 16;
        let mut net = Network::<f64>::init(cfg).unwrap();
        let rep = net.train(&samples, LossKind::Mse).unwrap();
        assert!(rep.final_loss < 1e-4, "{rep:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = rng::stream(12, 0);
        let samples: Vec<Sample<f64>> = (0..30).map(|_| seq_sample(&mut rng, 4, 2, 3)).collect();
        let cfg = NetConfig { epochs: 3, batch_size: 8, ..gru_cfg(2, OutputHead::PerStepSigmoid, 12) };
        let mut a = Network::<f64>::init(cfg.clone()).unwrap();
        let mut b = Network::<f64>::init(cfg).unwrap();
        let ra = a.train(&samples, LossKind::MaskedBinaryCrossentropy).unwrap();
        let rb = b.train(&samples, LossKind::MaskedBinaryCrossentropy).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
    }

    #[test]
    fn divergence_is_reported() {
        let samples = vec![Sample { inputs: vec![1e200], mask: StepMask::full(1), target: Target::Vector(vec![1e200]) }];
        let mut net = Network::<f64>::init(NetConfig::linear(1, OutputHead::Vector(1))).unwrap();
        assert!(matches!(net.train(&samples, LossKind::Mse), Err(Error::Diverged { .. })));
    }

    #[test]
    fn works_in_single_precision() {
        let net = Network::<f32>::init(gru_cfg(2, OutputHead::PerStepSigmoid, 1)).unwrap();
        let out = net.forward(&[0.1, -0.2, 0.3, 0.4], &StepMask::full(2)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::<f64>::init(gru_cfg(2, OutputHead::Vector(3), 2)).unwrap();
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = Network::<f64>::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut ck = net.to_checkpoint();
        ck.version = 99;
        assert!(matches!(Network::<f64>::from_checkpoint(&ck), Err(Error::Version(99))));
    }

    #[test]
    fn random_search_stays_in_range_and_picks_minimum() {
        let space = HyperSpace { max_followup: 12, dim_d: 8, n_samples: 500 };
        let base = NetConfig::new(2, 8, OutputHead::PerStepSigmoid);
        let mut seen = Vec::new();
        let best = random_search(&space, &base, 10, 3, |c| {
            assert!((1..=12).contains(&c.dense_layers) && (1..=12).contains(&c.recurrent_units));
            assert!((1..=8).contains(&c.dense_units) && (128..=500).contains(&c.batch_size));
            let s = (c.dense_units as f64 - 5.0).abs() + c.batch_size as f64 * 1e-6;
            seen.push((s, c.clone()));
            Ok(s)
        })
        .unwrap();
        let min = seen.iter().map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        assert!(seen.iter().any(|(s, c)| *s == min && *c == best));
    }
}
