//! Parameter storage and the reusable layers every model is assembled from.
//!
//! Linear maps use the `y = x · W + b` convention with `W` stored `in × out`.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// How a parameter tensor is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform Xavier/Glorot on the first and last axes.
    Xavier,
    /// `[k·d × d]` stack of `k` identity blocks scaled by `1/k`: averages `k` feature groups.
    BlockMean(usize),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter specs; lets parameter counts be audited without
/// allocating the tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
    }

    pub fn linear(&mut self, prefix: &str, input: usize, output: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::Xavier };
        self.push(format!("{prefix}.w"), &[input, output], init);
        self.push(format!("{prefix}.b"), &[output], Init::Zeros);
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.gamma"), &[width], Init::Ones);
        self.push(format!("{prefix}.beta"), &[width], Init::Zeros);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Parameter count over names starting with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> usize {
        self.specs.iter().filter(|s| s.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }

    pub fn materialize(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            store.insert(spec.name.clone(), init_tensor(&spec.shape, &spec.init, rng));
        }
        store
    }
}

fn init_tensor(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, *std).expect("positive std");
            let n = shape.iter().product();
            Tensor::raw(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        }
        Init::Xavier => {
            let fan_out = *shape.last().unwrap_or(&1);
            let fan_in = shape.iter().product::<usize>() / fan_out.max(1);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        }
        Init::BlockMean(k) => {
            let d = shape[1];
            let mut t = Tensor::zeros(shape);
            for b in 0..*k {
                for i in 0..d {
                    t.set(&[b * d + i, i], 1.0 / *k as f64);
                }
            }
            t
        }
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Overwrites every entry of `self` that also exists in `other`.
    pub fn overlay(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(slot) = self.tensors.get_mut(name) {
                if slot.shape() != t.shape() {
                    return Err(Error::dim(format!("parameter `{name}`: {:?} vs {:?}", slot.shape(), t.shape())));
                }
                *slot = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Scale applied to attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/√(d/heads)`.
    #[default]
    PerHead,
    /// `1/√d`, as the equations are literally written.
    FullDim,
}

struct Stochastic {
    rng: ChaCha8Rng,
}

/// A graph plus the parameters bound into it.
///
/// Parameters are bound lazily by name the first time a layer asks for them;
/// names for which the trainability predicate is false enter as constants.
pub struct Session<'a, T: Real = f64> {
    pub g: Graph<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    stochastic: Option<Stochastic>,
}

impl<'a, T: Real> Session<'a, T> {
    /// Nothing trainable, no dropout.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self::training(params, |_| false)
    }

    pub fn training(params: &'a ParamStore<T>, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self { g: Graph::new(), params, bound: HashMap::new(), order: Vec::new(), trainable: Box::new(trainable), stochastic: None }
    }

    /// Enables dropout and drop-path masks drawn from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.stochastic = Some(Stochastic { rng });
        self
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Binds (once) and returns the parameter called `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = if (self.trainable)(name) { self.g.parameter(value) } else { self.g.constant(value) };
        self.bound.insert(name.to_string(), v);
        self.order.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.order
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(st) = self.stochastic.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.g.value(x).numel();
        let mask: Vec<T> = (0..n).map(|_| if st.rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let m = self.g.constant(Tensor::raw(self.g.shape(x).to_vec(), mask));
        self.g.mul(x, m)
    }

    /// Stochastic depth on a residual branch (batch of one: all or nothing).
    pub fn drop_path(&mut self, branch: Var, rate: f64) -> Result<Var> {
        let Some(st) = self.stochastic.as_mut() else {
            return Ok(branch);
        };
        if rate <= 0.0 {
            return Ok(branch);
        }
        let scale = if st.rng.gen::<f64>() < rate { T::zero() } else { T::lit(1.0 / (1.0 - rate)) };
        Ok(self.g.scale(branch, scale))
    }
}

/// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.p(&format!("{prefix}.w"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    let y = s.g.matmul(x, w)?;
    s.g.add_row(y, b)
}

/// Two linear layers with a GELU between them.
pub fn mlp<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?;
    let h = s.g.gelu(h);
    linear(s, &format!("{prefix}.fc2"), h)
}

pub fn layout_mlp(layout: &mut ParamLayout, prefix: &str, input: usize, hidden: usize, output: usize, zero_out: bool) {
    layout.linear(&format!("{prefix}.fc1"), input, hidden, false);
    layout.linear(&format!("{prefix}.fc2"), hidden, output, zero_out);
}

/// `d → ratio·d → d` feed-forward block (residual added by the caller).
pub fn feed_forward<T: Real>(s: &mut Session<T>, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?;
    let h = s.g.gelu(h);
    let h = s.dropout(h, dropout)?;
    linear(s, &format!("{prefix}.fc2"), h)
}

pub fn layout_feed_forward(layout: &mut ParamLayout, prefix: &str, dim: usize, ratio: usize) {
    layout_mlp(layout, prefix, dim, ratio * dim, dim, true);
}

pub fn layer_norm<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    ops::layer_norm(&mut s.g, x, gamma, beta)
}

/// Layer norm without an affine part.
pub fn plain_layer_norm<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let d = g.value(x).last_dim();
    let ones = g.constant(Tensor::ones(&[d]));
    let zeros = g.constant(Tensor::zeros(&[d]));
    ops::layer_norm(g, x, ones, zeros)
}

/// Shape of one attention site. Queries have width `q_dim`, keys/values
/// `kv_dim`; the inner width is `dim`, split over `heads`, and the output
/// projection maps back to `out_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub q_dim: usize,
    pub kv_dim: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn square(dim: usize, heads: usize) -> Self {
        Self { q_dim: dim, kv_dim: dim, dim, out_dim: dim, heads }
    }
}

/// Projections `{prefix}.wq/wk/wv/wo` (with `.b` biases); the output
/// projection is zero-initialised so the residual branch starts as identity.
pub fn layout_attention(layout: &mut ParamLayout, prefix: &str, shape: AttentionShape) {
    layout.linear(&format!("{prefix}.q"), shape.q_dim, shape.dim, false);
    layout.linear(&format!("{prefix}.k"), shape.kv_dim, shape.dim, false);
    layout.linear(&format!("{prefix}.v"), shape.kv_dim, shape.dim, false);
    layout.linear(&format!("{prefix}.o"), shape.dim, shape.out_dim, true);
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `n_q × n_k` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
pub fn multi_head_attention<T: Real>(
    s: &mut Session<T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    scale: AttnScale,
) -> Result<AttentionOutput> {
    if s.g.shape(kv_in)[0] == 0 {
        return Err(Error::contract("attention over zero keys"));
    }
    let q = linear(s, &format!("{prefix}.q"), q_in)?;
    let k = linear(s, &format!("{prefix}.k"), kv_in)?;
    let v = linear(s, &format!("{prefix}.v"), kv_in)?;
    let dim = s.g.value(q).last_dim();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config("heads", format!("{dim} is not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let factor = match scale {
        AttnScale::PerHead => 1.0 / (dh as f64).sqrt(),
        AttnScale::FullDim => 1.0 / (dim as f64).sqrt(),
    };
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (s.g.slice_cols(q, h * dh, dh)?, s.g.slice_cols(k, h * dh, dh)?, s.g.slice_cols(v, h * dh, dh)?)
        };
        let logits = s.g.matmul_nt(qh, kh)?;
        let logits = s.g.scale(logits, T::lit(factor));
        let attn = s.g.softmax(logits)?;
        outs.push(s.g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { s.g.concat_cols(&outs)? };
    let out = linear(s, &format!("{prefix}.o"), merged)?;
    Ok(AttentionOutput { out, weights })
}

/// `[cos(2π a_i Δt + b_i) …, sin(2π a_i Δt + b_i) …]` as a `1 × 2·len(a)` row,
/// cosines first.
pub fn fourier_embed<T: Real>(g: &mut Graph<T>, dt: f64, freqs: Var, phases: Var) -> Result<Var> {
    let half = g.value(freqs).numel();
    if g.value(phases).numel() != half {
        return Err(Error::dim("fourier frequencies and phases differ in length"));
    }
    let a = g.reshape(freqs, &[1, half])?;
    let b = g.reshape(phases, &[1, half])?;
    let scaled = g.scale(a, T::lit(2.0 * std::f64::consts::PI * dt));
    let angle = g.add(scaled, b)?;
    let c = g.cos(angle);
    let sn = g.sin(angle);
    g.concat_cols(&[c, sn])
}

pub fn layout_fourier(layout: &mut ParamLayout, prefix: &str, dim: usize) {
    layout.push(format!("{prefix}.freq"), &[dim / 2], Init::Normal(0.1));
    layout.push(format!("{prefix}.phase"), &[dim / 2], Init::Normal(0.1));
}

/// Lead-time conditioned layer norm: `(1 + γ) ⊙ LN(x) + β` where
/// `[γ | β] = MLP(FourierEmbed(Δt))`, γ taking the first half.
pub fn ada_layer_norm<T: Real>(s: &mut Session<T>, x: Var, dt: f64, fourier_prefix: &str, mlp_prefix: &str) -> Result<Var> {
    let width = s.g.value(x).last_dim();
    let freq = s.p(&format!("{fourier_prefix}.freq"))?;
    let phase = s.p(&format!("{fourier_prefix}.phase"))?;
    let emb = fourier_embed(&mut s.g, dt, freq, phase)?;
    let cond = mlp(s, mlp_prefix, emb)?;
    if s.g.value(cond).last_dim() != 2 * width {
        return Err(Error::dim(format!("AdaLN conditioning width {} for a {width}-wide input", s.g.value(cond).last_dim())));
    }
    let gamma = s.g.slice_cols(cond, 0, width)?;
    let beta = s.g.slice_cols(cond, width, width)?;
    let ones = s.g.constant(Tensor::ones(&[1, width]));
    let scale = s.g.add(gamma, ones)?;
    let xn = plain_layer_norm(&mut s.g, x)?;
    let y = s.g.mul_row(xn, scale)?;
    s.g.add_row(y, beta)
}

pub fn layout_ada_mlp(layout: &mut ParamLayout, prefix: &str, fourier_dim: usize, hidden: usize, width: usize) {
    layout_mlp(layout, prefix, fourier_dim, hidden, 2 * width, true);
}

/// Pre-norm Transformer encoder layer hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub heads: usize,
    pub scale: AttnScale,
    pub dropout: f64,
    pub drop_path: f64,
}

/// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn encoder_layer<T: Real>(s: &mut Session<T>, prefix: &str, x: Var, spec: EncoderSpec) -> Result<Var> {
    let h = layer_norm(s, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(s, &format!("{prefix}.attn"), h, h, spec.heads, spec.scale)?;
    let a = s.dropout(a.out, spec.dropout)?;
    let a = s.drop_path(a, spec.drop_path)?;
    let x = s.g.add(x, a)?;
    let h = layer_norm(s, &format!("{prefix}.ln2"), x)?;
    let f = feed_forward(s, &format!("{prefix}.ffn"), h, spec.dropout)?;
    let f = s.dropout(f, spec.dropout)?;
    let f = s.drop_path(f, spec.drop_path)?;
    s.g.add(x, f)
}

pub fn layout_encoder_layer(layout: &mut ParamLayout, prefix: &str, dim: usize, mlp_ratio: usize, heads: usize) {
    layout.norm(&format!("{prefix}.ln1"), dim);
    layout_attention(layout, &format!("{prefix}.attn"), AttentionShape::square(dim, heads));
    layout.norm(&format!("{prefix}.ln2"), dim);
    layout_feed_forward(layout, &format!("{prefix}.ffn"), dim, mlp_ratio);
}
