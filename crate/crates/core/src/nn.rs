//! Dense tanh networks over one flat parameter vector, with exact
//! backpropagation.
//!
//! Every layer addresses its weights by offset into a shared `[f64]`, so a
//! whole model (encoder, actor, log-std, critics) is one contiguous vector
//! that the optimizer and checkpoints treat uniformly. Rows of a batch are
//! computed independently with a fixed summation order, which makes results
//! independent of batch composition.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{exp, log, sqrt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::SimRng;
use crate::scm::{Environment, Policy};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Critic head slots.
pub const V_R: usize = 0;
pub const V_G_PI: usize = 1;
pub const V_G_MU: usize = 2;
pub const V_H: usize = 3;
pub const N_CRITICS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn n_params(&self) -> usize {
        self.output * (self.input + 1)
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.output * self.input
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut s = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        s[0] += x[0] * y[0];
        s[1] += x[1] * y[1];
        s[2] += x[2] * y[2];
        s[3] += x[3] * y[3];
    }
    let mut total = (s[0] + s[1]) + (s[2] + s[3]);
    for (x, y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

/// Four dot products against the same `x`, each summed exactly as `dot`.
#[inline]
fn dot4(w: [&[f64]; 4], x: &[f64]) -> [f64; 4] {
    let n4 = x.len() / 4 * 4;
    let mut s = [[0.0; 4]; 4];
    let mut i = 0;
    while i < n4 {
        let xs = &x[i..i + 4];
        for k in 0..4 {
            let ws = &w[k][i..i + 4];
            s[k][0] += ws[0] * xs[0];
            s[k][1] += ws[1] * xs[1];
            s[k][2] += ws[2] * xs[2];
            s[k][3] += ws[3] * xs[3];
        }
        i += 4;
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        let mut total = (s[k][0] + s[k][1]) + (s[k][2] + s[k][3]);
        for j in n4..x.len() {
            total += w[k][j] * x[j];
        }
        out[k] = total;
    }
    out
}

/// `tanh` through a single `exp`; absolute error near 1e-16.
#[inline]
pub fn tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = exp(-2.0 * z.abs());
    let t = (1.0 - e) / (1.0 + e);
    if z < 0.0 {
        -t
    } else {
        t
    }
}

#[inline]
fn activate(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => tanh(z),
        Activation::Linear => z,
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    batch: usize,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layers `sizes[0] → … → sizes[n]` starting at `offset`; hidden layers
    /// use tanh, the last layer `output_activation`.
    pub fn new(sizes: &[usize], offset: usize, output_activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut at = offset;
        for k in 0..sizes.len() - 1 {
            let activation = if k + 2 == sizes.len() {
                output_activation
            } else {
                Activation::Tanh
            };
            let d = Dense {
                input: sizes[k],
                output: sizes[k + 1],
                offset: at,
                activation,
            };
            at += d.n_params();
            layers.push(d);
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn end(&self) -> usize {
        let last = &self.layers[self.layers.len() - 1];
        last.offset + last.n_params()
    }

    /// Batched forward pass; the output is `cache.output()`.
    pub fn forward(&self, p: &[f64], input: &[f64], batch: usize, cache: &mut MlpCache) {
        cache.batch = batch;
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(&input[..batch * self.input_dim()]);
        for (l, d) in self.layers.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.resize(batch * d.output, 0.0);
            let w = &p[d.offset..d.bias_offset()];
            let b = &p[d.bias_offset()..d.bias_offset() + d.output];
            let wr = |o: usize| &w[o * d.input..(o + 1) * d.input];
            let o4 = d.output / 4 * 4;
            for r in 0..batch {
                let xr = &x[r * d.input..(r + 1) * d.input];
                let yr = &mut y[r * d.output..(r + 1) * d.output];
                for o in (0..o4).step_by(4) {
                    let z = dot4([wr(o), wr(o + 1), wr(o + 2), wr(o + 3)], xr);
                    for k in 0..4 {
                        yr[o + k] = activate(d.activation, z[k] + b[o + k]);
                    }
                }
                for o in o4..d.output {
                    yr[o] = activate(d.activation, dot(wr(o), xr) + b[o]);
                }
            }
        }
    }

    /// Accumulate `∂L/∂p` into `grads` given `∂L/∂output`; optionally
    /// return `∂L/∂input` (overwritten, not accumulated).
    pub fn backward(
        &self,
        p: &[f64],
        cache: &MlpCache,
        grad_output: &[f64],
        grads: &mut [f64],
        grad_input: Option<&mut Vec<f64>>,
    ) {
        let batch = cache.batch;
        let mut delta = grad_output[..batch * self.output_dim()].to_vec();
        let mut next = Vec::new();
        let want_input = grad_input.is_some();
        for (l, d) in self.layers.iter().enumerate().rev() {
            if d.activation == Activation::Tanh {
                for (g, y) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *g *= 1.0 - y * y;
                }
            }
            let x = &cache.acts[l];
            let (wo, bo) = (d.offset, d.bias_offset());
            {
                let (gw, gb) = grads[wo..bo + d.output].split_at_mut(bo - wo);
                for r in 0..batch {
                    let xr = &x[r * d.input..(r + 1) * d.input];
                    let dr = &delta[r * d.output..(r + 1) * d.output];
                    for o in 0..d.output {
                        if dr[o] != 0.0 {
                            axpy(dr[o], xr, &mut gw[o * d.input..(o + 1) * d.input]);
                        }
                        gb[o] += dr[o];
                    }
                }
            }
            if l > 0 || want_input {
                let w = &p[wo..bo];
                next.clear();
                next.resize(batch * d.input, 0.0);
                for r in 0..batch {
                    let dr = &delta[r * d.output..(r + 1) * d.output];
                    let nr = &mut next[r * d.input..(r + 1) * d.input];
                    for o in 0..d.output {
                        if dr[o] != 0.0 {
                            axpy(dr[o], &w[o * d.input..(o + 1) * d.input], nr);
                        }
                    }
                }
                core::mem::swap(&mut delta, &mut next);
            }
        }
        if let Some(out) = grad_input {
            *out = delta;
        }
    }

    /// Scaled normal initialization: weights `N(0, gain² / fan_in)`, zero
    /// biases; the last layer uses `output_gain`.
    pub fn init(&self, p: &mut [f64], rng: &mut SimRng, output_gain: f64) {
        for (l, d) in self.layers.iter().enumerate() {
            let gain = if l + 1 == self.layers.len() { output_gain } else { 1.0 };
            let scale = gain / sqrt(d.input as f64);
            for w in &mut p[d.offset..d.bias_offset()] {
                let z: f64 = StandardNormal.sample(rng);
                *w = scale * z;
            }
            for b in &mut p[d.bias_offset()..d.bias_offset() + d.output] {
                *b = 0.0;
            }
        }
    }
}

/// Layout of the critic networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticTrunk {
    /// One trunk with four scalar outputs.
    Shared,
    /// Four independent networks.
    Separate,
}

/// Output transform of a critic head. Sigmoid heads are trained with
/// cross-entropy on targets in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Sigmoid,
}

impl HeadKind {
    #[inline]
    pub fn value(self, raw: f64) -> f64 {
        match self {
            HeadKind::Linear => raw,
            HeadKind::Sigmoid => sigmoid(raw),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(exp(-z))
    } else {
        libm::log1p(exp(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Hidden widths of the actor and each critic.
    pub hidden: Vec<usize>,
    /// Widths of a shared observation encoder; empty for none.
    pub encoder: Vec<usize>,
    pub critic_trunk: CriticTrunk,
    pub heads: [HeadKind; N_CRITICS],
    pub log_std_init: f64,
    /// Initialization gain of the actor's output layer.
    pub actor_output_gain: f64,
}

/// Parameter layout of encoder, actor mean, log-std and critics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Option<Mlp>,
    pub actor: Mlp,
    pub log_std_offset: usize,
    pub critics: Vec<Mlp>,
    pub n_params: usize,
}

/// Forward caches for one model evaluation.
#[derive(Debug, Clone, Default)]
pub struct ModelCache {
    encoder: MlpCache,
    actor: MlpCache,
    critics: Vec<MlpCache>,
    batch: usize,
}

impl ModelCache {
    /// Actor means, `batch × action_dim`.
    pub fn means(&self) -> &[f64] {
        self.actor.output()
    }

    /// Raw (pre-head) critic output of slot `k` for row `r`.
    pub fn critic_raw(&self, r: usize, k: usize) -> f64 {
        if self.critics.len() == 1 {
            self.critics[0].output()[r * N_CRITICS + k]
        } else {
            self.critics[k].output()[r]
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.obs_dim == 0 || spec.action_dim == 0 || spec.hidden.is_empty() {
            return Err(Error::Config("model needs observations, actions and a hidden layer".into()));
        }
        let mut at = 0;
        let encoder = if spec.encoder.is_empty() {
            None
        } else {
            let mut sizes = vec![spec.obs_dim];
            sizes.extend_from_slice(&spec.encoder);
            let m = Mlp::new(&sizes, at, Activation::Tanh)?;
            at = m.end();
            Some(m)
        };
        let feat = spec.encoder.last().copied().unwrap_or(spec.obs_dim);
        let body = |at: usize, out: usize| {
            let mut sizes = vec![feat];
            sizes.extend_from_slice(&spec.hidden);
            sizes.push(out);
            Mlp::new(&sizes, at, Activation::Linear)
        };
        let actor = body(at, spec.action_dim)?;
        at = actor.end();
        let log_std_offset = at;
        at += spec.action_dim;
        let mut critics = Vec::new();
        match spec.critic_trunk {
            CriticTrunk::Shared => {
                let c = body(at, N_CRITICS)?;
                at = c.end();
                critics.push(c);
            }
            CriticTrunk::Separate => {
                for _ in 0..N_CRITICS {
                    let c = body(at, 1)?;
                    at = c.end();
                    critics.push(c);
                }
            }
        }
        Ok(Self {
            spec,
            encoder,
            actor,
            log_std_offset,
            critics,
            n_params: at,
        })
    }

    pub fn init(&self, rng: &mut SimRng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        if let Some(e) = &self.encoder {
            e.init(&mut p, rng, 1.0);
        }
        self.actor.init(&mut p, rng, self.spec.actor_output_gain);
        for v in self.log_std_mut(&mut p) {
            *v = self.spec.log_std_init;
        }
        for c in &self.critics {
            c.init(&mut p, rng, 1.0);
        }
        p
    }

    pub fn log_std<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.log_std_offset..self.log_std_offset + self.spec.action_dim]
    }

    pub fn log_std_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.log_std_offset..self.log_std_offset + self.spec.action_dim]
    }

    /// Keep log-std inside its admissible range.
    pub fn project(&self, p: &mut [f64]) {
        for v in self.log_std_mut(p) {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn check_params(&self, p: &[f64]) -> Result<()> {
        check_len("parameter vector", self.n_params, p.len())
    }

    fn features<'a>(&self, p: &[f64], obs: &'a [f64], cache: &'a mut MlpCache, batch: usize) -> &'a [f64] {
        match &self.encoder {
            Some(e) => {
                e.forward(p, obs, batch, cache);
                cache.output()
            }
            None => obs,
        }
    }

    /// Forward pass of the actor and/or critics over `batch` observations.
    pub fn forward(
        &self,
        p: &[f64],
        obs: &[f64],
        batch: usize,
        actor: bool,
        critics: bool,
        cache: &mut ModelCache,
    ) {
        cache.batch = batch;
        let ModelCache {
            encoder,
            actor: ac,
            critics: cc,
            ..
        } = cache;
        let feat = self.features(p, obs, encoder, batch);
        if actor {
            self.actor.forward(p, feat, batch, ac);
        }
        if critics {
            cc.resize_with(self.critics.len(), MlpCache::default);
            for (c, k) in self.critics.iter().zip(cc.iter_mut()) {
                c.forward(p, feat, batch, k);
            }
        }
    }

    /// Backward pass from gradients of the actor means (`batch ×
    /// action_dim`) and raw critic outputs (`batch × 4`, slot-major within a
    /// row). Either may be omitted when the corresponding forward was skipped.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &ModelCache,
        grad_means: Option<&[f64]>,
        grad_critics: Option<&[f64]>,
        grads: &mut [f64],
    ) {
        let batch = cache.batch;
        let want = self.encoder.is_some();
        let feat_dim = self.spec.encoder.last().copied().unwrap_or(self.spec.obs_dim);
        let mut grad_feat = if want { vec![0.0; batch * feat_dim] } else { Vec::new() };
        let mut tmp = Vec::new();
        if let Some(g) = grad_means {
            self.actor
                .backward(p, &cache.actor, g, grads, want.then_some(&mut tmp));
            if want {
                axpy(1.0, &tmp, &mut grad_feat);
            }
        }
        if let Some(g) = grad_critics {
            if self.critics.len() == 1 {
                self.critics[0].backward(p, &cache.critics[0], g, grads, want.then_some(&mut tmp));
                if want {
                    axpy(1.0, &tmp, &mut grad_feat);
                }
            } else {
                let mut col = vec![0.0; batch];
                for (k, c) in self.critics.iter().enumerate() {
                    for r in 0..batch {
                        col[r] = g[r * N_CRITICS + k];
                    }
                    c.backward(p, &cache.critics[k], &col, grads, want.then_some(&mut tmp));
                    if want {
                        axpy(1.0, &tmp, &mut grad_feat);
                    }
                }
            }
        }
        if let Some(e) = &self.encoder {
            e.backward(p, &cache.encoder, &grad_feat, grads, None);
        }
    }

    /// Head-transformed critic values, `batch × 4`.
    pub fn critic_values(&self, p: &[f64], obs: &[f64], batch: usize, cache: &mut ModelCache) -> Vec<f64> {
        self.forward(p, obs, batch, false, true, cache);
        let mut out = vec![0.0; batch * N_CRITICS];
        for r in 0..batch {
            for k in 0..N_CRITICS {
                out[r * N_CRITICS + k] = self.spec.heads[k].value(cache.critic_raw(r, k));
            }
        }
        out
    }
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((m, s), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) * exp(-s);
        lp += -0.5 * z * z - s - HALF_LOG_2PI;
    }
    lp
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let per_dim = 0.5 * log(2.0 * PI * core::f64::consts::E);
    log_std.iter().map(|s| s + per_dim).sum()
}

pub fn sample_gaussian(mean: &[f64], log_std: &[f64], rng: &mut SimRng, out: &mut [f64]) {
    for ((o, m), s) in out.iter_mut().zip(mean).zip(log_std) {
        let z: f64 = StandardNormal.sample(rng);
        *o = m + exp(*s) * z;
    }
}

/// How an actor turns its distribution into an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Mean,
}

/// Gaussian actor over a frozen parameter snapshot.
pub struct ActorPolicy<'a> {
    pub model: &'a Model,
    pub params: &'a [f64],
    pub mode: ActionMode,
    cache: ModelCache,
}

impl<'a> ActorPolicy<'a> {
    pub fn new(model: &'a Model, params: &'a [f64], mode: ActionMode) -> Self {
        Self {
            model,
            params,
            mode,
            cache: ModelCache::default(),
        }
    }
}

impl<E: Environment> Policy<E> for ActorPolicy<'_> {
    fn act(&mut self, _: &E, _: &E::State, obs: &[f64], rng: &mut SimRng, action: &mut [f64]) -> f64 {
        self.model
            .forward(self.params, obs, 1, true, false, &mut self.cache);
        let mean = self.cache.means();
        let log_std = self.model.log_std(self.params);
        match self.mode {
            ActionMode::Sample => sample_gaussian(mean, log_std, rng, action),
            ActionMode::Mean => action.copy_from_slice(mean),
        }
        gaussian_log_prob(mean, log_std, action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn spec(trunk: CriticTrunk, encoder: Vec<usize>) -> ModelSpec {
        ModelSpec {
            obs_dim: 3,
            action_dim: 2,
            hidden: vec![5, 4],
            encoder,
            critic_trunk: trunk,
            heads: [HeadKind::Linear, HeadKind::Sigmoid, HeadKind::Linear, HeadKind::Sigmoid],
            log_std_init: -0.5,
            actor_output_gain: 0.01,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = Mlp::new(&[3, 4, 2], 0, Activation::Linear).unwrap();
        let p = vec![0.0; m.n_params()];
        let mut c = MlpCache::default();
        m.forward(&p, &[1.0, -2.0, 0.5], 1, &mut c);
        assert_eq!(c.output(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_tanh_path() {
        // 1 → 1 → 1: y = w2·tanh(w1·x + b1) + b2.
        let m = Mlp::new(&[1, 1, 1], 0, Activation::Linear).unwrap();
        let p = [0.7, 0.1, -1.3, 0.2];
        let mut c = MlpCache::default();
        m.forward(&p, &[2.0], 1, &mut c);
        let expected = -1.3 * libm::tanh(0.7 * 2.0 + 0.1) + 0.2;
        assert!((c.output()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rows_do_not_interact() {
        let model = Model::new(spec(CriticTrunk::Shared, vec![])).unwrap();
        let p = model.init(&mut stream(1, Stream::Learner, 0));
        let obs = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0];
        let mut c = ModelCache::default();
        model.forward(&p, &obs, 2, true, true, &mut c);
        let both: Vec<f64> = c.means().to_vec();
        model.forward(&p, &obs[3..], 1, true, true, &mut c);
        assert_eq!(&both[2..], c.means());
    }

    fn finite_difference_check(model: &Model) {
        let mut rng = stream(3, Stream::Learner, 0);
        let mut p = model.init(&mut rng);
        for v in p.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.3 * z;
        }
        let batch = 3;
        let obs: Vec<f64> = (0..batch * model.spec.obs_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let wm: Vec<f64> = (0..batch * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let wc: Vec<f64> = (0..batch * N_CRITICS).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Scalar loss: fixed random linear functional of all outputs.
        let loss = |p: &[f64]| {
            let mut c = ModelCache::default();
            model.forward(p, &obs, batch, true, true, &mut c);
            let mut l: f64 = c.means().iter().zip(&wm).map(|(a, b)| a * b).sum();
            for r in 0..batch {
                for k in 0..N_CRITICS {
                    l += c.critic_raw(r, k) * wc[r * N_CRITICS + k];
                }
            }
            l
        };
        let mut c = ModelCache::default();
        model.forward(&p, &obs, batch, true, true, &mut c);
        let mut g = vec![0.0; p.len()];
        model.backward(&p, &c, Some(&wm), Some(&wc), &mut g);
        for i in 0..p.len() {
            if i >= model.log_std_offset && i < model.log_std_offset + 2 {
                assert_eq!(g[i], 0.0);
                continue;
            }
            let eps = 1e-5;
            let mut hi = p.clone();
            hi[i] += eps;
            let mut lo = p.clone();
            lo[i] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            let err = (fd - g[i]).abs() / g[i].abs().max(1.0);
            assert!(err < 1e-7, "param {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(&Model::new(spec(CriticTrunk::Shared, vec![])).unwrap());
        finite_difference_check(&Model::new(spec(CriticTrunk::Separate, vec![])).unwrap());
        finite_difference_check(&Model::new(spec(CriticTrunk::Shared, vec![6, 4])).unwrap());
        finite_difference_check(&Model::new(spec(CriticTrunk::Separate, vec![4])).unwrap());
    }

    #[test]
    fn gaussian_closed_forms() {
        let lp = gaussian_log_prob(&[0.3, -1.0], &[0.0, 0.0], &[0.3, -1.0]);
        assert!((lp + libm::log(2.0 * PI)).abs() < 1e-14);
        // 2·½·log(2πe), summed directly.
        let h = gaussian_entropy(&[0.0, 0.0]);
        assert!((h - 2.837_877_066_409_345_6).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_log_prob_against_quadrature() {
        // ∫ p(a) da = 1 and −∫ p log p = entropy, by the trapezoid rule.
        let (m, s) = (0.4, -0.3);
        let (mut mass, mut ent) = (0.0, 0.0);
        let h = 1e-3;
        let mut a = m - 12.0;
        while a <= m + 12.0 {
            let lp = gaussian_log_prob(&[m], &[s], &[a]);
            let pdf = exp(lp);
            mass += pdf * h;
            ent -= pdf * lp * h;
            a += h;
        }
        assert!((mass - 1.0).abs() < 1e-3);
        assert!((ent - gaussian_entropy(&[s])).abs() < 1e-3);
    }

    #[test]
    fn sampled_log_prob_is_self_consistent() {
        let model = Model::new(spec(CriticTrunk::Shared, vec![])).unwrap();
        let p = model.init(&mut stream(2, Stream::Learner, 0));
        let mut pol = ActorPolicy::new(&model, &p, ActionMode::Sample);
        let env = crate::env::WallEnv::new(Default::default()).unwrap();
        let mut rng = stream(2, Stream::Action, 0);
        let obs = [0.1, 0.2, 0.3];
        let mut a = [0.0; 2];
        let lp = Policy::<crate::env::WallEnv>::act(
            &mut pol,
            &env,
            &crate::env::WallState { x: 0.0, v: 0.0 },
            &obs,
            &mut rng,
            &mut a,
        );
        let mut c = ModelCache::default();
        model.forward(&p, &obs, 1, true, false, &mut c);
        assert_eq!(lp, gaussian_log_prob(c.means(), model.log_std(&p), &a));
    }

    #[test]
    fn log_std_projection() {
        let model = Model::new(spec(CriticTrunk::Shared, vec![])).unwrap();
        let mut p = model.init(&mut stream(2, Stream::Learner, 0));
        assert_eq!(model.log_std(&p), &[-0.5, -0.5]);
        model.log_std_mut(&mut p)[0] = 9.0;
        model.project(&mut p);
        assert_eq!(model.log_std(&p)[0], LOG_STD_MAX);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - libm::log(2.0)).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
