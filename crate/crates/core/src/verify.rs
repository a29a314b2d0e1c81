//! Finite-difference verification of every differentiable site: primitive
//! graph ops, parameterized layers, ScaleMixer stages and the coupled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::config::{Coupling, ModelConfig, HISTORY_FRAMES};
use crate::error::Result;
use crate::field::{Timestamp, TokenSequence};
use crate::forecaster::{self, RolloutStart, StepInputs};
use crate::gradcheck::{check_site, finite_diff_at, relative_error, SiteReport};
use crate::mixer::{self, RegionGeometry, RegionalInputs};
use crate::nn::{self, AttentionShape, ParamLayout, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{global, ops};

/// Settings of a verification run.
#[derive(Clone, Copy, Debug)]
pub struct GradcheckSettings {
    /// Random seeds per primitive op.
    pub op_seeds: usize,
    /// Random seeds per layer and model site.
    pub layer_seeds: usize,
    pub eps: f64,
    /// Perturbed entries per parameter tensor in layer and model checks.
    pub samples_per_param: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { op_seeds: 100, layer_seeds: 3, eps: crate::gradcheck::FD_EPS, samples_per_param: 4 }
    }
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Sample coordinates whose fractional parts stay clear of the bilinear kinks.
fn off_grid_coords(m: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(2 * m);
    for _ in 0..m {
        for extent in [h, w] {
            let v = match rng.gen_range(0..6) {
                0 => -rng.gen_range(0.5..2.0),
                1 => (extent - 1) as f64 + rng.gen_range(0.5..2.0),
                _ => rng.gen_range(0..extent.max(2) - 1) as f64 + rng.gen_range(0.05..0.95),
            };
            data.push(v);
        }
    }
    Tensor::raw(vec![m, 2], data)
}

type OpBuild = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A primitive-op case: inputs and graph builder drawn from `rng`.
type OpCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, OpBuild);

fn op_cases() -> Vec<(&'static str, OpCase)> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
    }
    vec![
        ("op.matmul", |rng| {
            let (r, k, c) = dims(rng);
            (vec![normal(&[r, k], 1.0, rng), normal(&[k, c], 1.0, rng)], Box::new(|g, v| g.matmul(v[0], v[1])))
        }),
        ("op.matmul_nt", |rng| {
            let (r, k, c) = dims(rng);
            (vec![normal(&[r, k], 1.0, rng), normal(&[c, k], 1.0, rng)], Box::new(|g, v| g.matmul_nt(v[0], v[1])))
        }),
        ("op.transpose", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(|g, v| g.transpose(v[0])))
        }),
        ("op.add", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[r, c], 1.0, rng)], Box::new(|g, v| g.add(v[0], v[1])))
        }),
        ("op.sub", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[r, c], 1.0, rng)], Box::new(|g, v| g.sub(v[0], v[1])))
        }),
        ("op.mul", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[r, c], 1.0, rng)], Box::new(|g, v| g.mul(v[0], v[1])))
        }),
        ("op.add_row", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[c], 1.0, rng)], Box::new(|g, v| g.add_row(v[0], v[1])))
        }),
        ("op.mul_row", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[c], 1.0, rng)], Box::new(|g, v| g.mul_row(v[0], v[1])))
        }),
        ("op.mul_col", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng), normal(&[r, 1], 1.0, rng)], Box::new(|g, v| g.mul_col(v[0], v[1])))
        }),
        ("op.scale", |rng| {
            let (r, c, _) = dims(rng);
            let k = rng.gen_range(-2.0..2.0);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(move |g, v| Ok(g.scale(v[0], k))))
        }),
        ("op.gelu", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 2.0, rng)], Box::new(|g, v| Ok(g.gelu(v[0]))))
        }),
        ("op.abs", |rng| {
            let (r, c, _) = dims(rng);
            (vec![away_from_zero(&[r, c], rng)], Box::new(|g, v| Ok(g.abs(v[0]))))
        }),
        ("op.square", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(|g, v| Ok(g.square(v[0]))))
        }),
        ("op.cos", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 2.0, rng)], Box::new(|g, v| Ok(g.cos(v[0]))))
        }),
        ("op.sin", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 2.0, rng)], Box::new(|g, v| Ok(g.sin(v[0]))))
        }),
        ("op.sum", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(|g, v| Ok(g.sum(v[0]))))
        }),
        ("op.mean", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(|g, v| Ok(g.mean(v[0]))))
        }),
        ("op.softmax", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c + 1], 2.0, rng)], Box::new(|g, v| g.softmax(v[0])))
        }),
        ("op.layer_norm", |rng| {
            let (r, c, _) = dims(rng);
            let c = c + 1;
            (
                vec![normal(&[r, c], 1.0, rng), normal(&[c], 1.0, rng), normal(&[c], 1.0, rng)],
                Box::new(|g, v| ops::layer_norm(g, v[0], v[1], v[2])),
            )
        }),
        ("op.reshape", |rng| {
            let (r, c, _) = dims(rng);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(move |g, v| g.reshape(v[0], &[c, r])))
        }),
        ("op.slice_cols", |rng| {
            let (r, c, _) = dims(rng);
            let c = c + 2;
            let start = rng.gen_range(0..c - 1);
            let len = rng.gen_range(1..=c - start);
            (vec![normal(&[r, c], 1.0, rng)], Box::new(move |g, v| g.slice_cols(v[0], start, len)))
        }),
        ("op.concat_cols", |rng| {
            let (r, a, b) = dims(rng);
            (vec![normal(&[r, a], 1.0, rng), normal(&[r, b], 1.0, rng)], Box::new(|g, v| g.concat_cols(&[v[0], v[1]])))
        }),
        ("op.gather_rows", |rng| {
            let (r, c, k) = dims(rng);
            let idx: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..r)).collect();
            (vec![normal(&[r, c], 1.0, rng)], Box::new(move |g, v| g.gather_rows(v[0], &idx)))
        }),
        ("op.scatter_rows", |rng| {
            let (r, c, _) = dims(rng);
            let r = r + 2;
            let mut idx: Vec<usize> = (0..r).collect();
            rand::seq::SliceRandom::shuffle(&mut idx[..], rng);
            idx.truncate(rng.gen_range(1..=r));
            let k = idx.len();
            (vec![normal(&[r, c], 1.0, rng), normal(&[k, c], 1.0, rng)], Box::new(move |g, v| g.scatter_rows(v[0], v[1], &idx)))
        }),
        ("op.patchify", |rng| {
            let p = rng.gen_range(1..4);
            let (a, b, c) = dims(rng);
            (vec![normal(&[a * p, b * p, c], 1.0, rng)], Box::new(move |g, v| g.patchify(v[0], p)))
        }),
        ("op.unpatchify", |rng| {
            let p = rng.gen_range(1..4);
            let (a, b, c) = dims(rng);
            (vec![normal(&[a * b, p * p * c], 1.0, rng)], Box::new(move |g, v| g.unpatchify(v[0], (a, b), p, c)))
        }),
        ("op.unfold3x3", |rng| {
            let (a, b, d) = dims(rng);
            (vec![normal(&[a * b, d], 1.0, rng)], Box::new(move |g, v| g.unfold3x3(v[0], (a, b))))
        }),
        ("op.bilinear_sample", |rng| {
            let (h, w, d) = dims(rng);
            let (h, w) = (h + 1, w + 1);
            let m = rng.gen_range(1..6);
            (vec![normal(&[h, w, d], 1.0, rng), off_grid_coords(m, h, w, rng)], Box::new(|g, v| g.bilinear_sample(v[0], v[1])))
        }),
        ("op.conv2d_patchify", |rng| {
            let p = rng.gen_range(1..4);
            let (a, b, c) = dims(rng);
            let d = rng.gen_range(1..5);
            (
                vec![normal(&[a * p, b * p, c], 1.0, rng), normal(&[p, p, c, d], 1.0, rng), normal(&[d], 1.0, rng)],
                Box::new(move |g, v| ops::conv2d_patchify(g, v[0], v[1], v[2], p)),
            )
        }),
        ("op.deconv2d_unpatchify", |rng| {
            let p = rng.gen_range(1..4);
            let (a, b, c) = dims(rng);
            let d = rng.gen_range(1..5);
            let k = p * p * c;
            (
                vec![normal(&[a * b, d], 1.0, rng), normal(&[d, k], 1.0, rng), normal(&[k], 1.0, rng)],
                Box::new(move |g, v| ops::deconv2d_unpatchify(g, v[0], v[1], v[2], (a, b), p, c)),
            )
        }),
    ]
}

fn site_seed(base: u64, name: &str, k: usize) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3));
    base ^ h ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn merge(name: &str, reports: impl IntoIterator<Item = SiteReport>) -> SiteReport {
    reports.into_iter().fold(SiteReport { name: name.to_string(), worst_rel_err: 0.0, checked: 0 }, |acc, r| SiteReport {
        name: acc.name,
        worst_rel_err: acc.worst_rel_err.max(r.worst_rel_err),
        checked: acc.checked + r.checked,
    })
}

/// Every primitive op over `settings.op_seeds` random draws.
pub fn check_ops(seed: u64, settings: &GradcheckSettings) -> Result<Vec<SiteReport>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        let mut reports = Vec::with_capacity(settings.op_seeds);
        for k in 0..settings.op_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(site_seed(seed, name, k));
            let (inputs, build) = case(&mut rng);
            reports.push(check_site(name, &inputs, |g, v| build(g, v), settings.eps, None, &mut rng)?);
        }
        out.push(merge(name, reports));
    }
    Ok(out)
}

/// Checks gradients with respect to every parameter bound by `build` and to
/// every input, on the probe `Σ out ⊙ R`.
pub fn check_layer<F>(
    name: &str,
    params: &ParamStore,
    inputs: &[Tensor],
    build: F,
    settings: &GradcheckSettings,
    rng: &mut ChaCha8Rng,
) -> Result<SiteReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let (weights, param_grads, input_grads) = {
        let mut s = Session::training(params, |_| true);
        let vars: Vec<Var> = inputs.iter().map(|t| s.g.parameter(t.clone())).collect();
        let out = build(&mut s, &vars)?;
        let weights = normal(s.g.shape(out), 1.0, rng);
        let w = s.g.constant(weights.clone());
        let prod = s.g.mul(out, w)?;
        let loss = s.g.sum(prod);
        let grads = s.g.backward(loss)?;
        let pg: Vec<(String, Tensor)> = s.bound().iter().map(|(n, v)| (n.clone(), grads.wrt_or_zeros(*v))).collect();
        let ig: Vec<Tensor> = vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect();
        (weights, pg, ig)
    };
    let probe = |p: &ParamStore, x: &[Tensor]| -> f64 {
        let mut s = Session::inference(p);
        let vars: Vec<Var> = x.iter().map(|t| s.constant(t.clone())).collect();
        let out = build(&mut s, &vars).expect("forward succeeded once already");
        s.g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= settings.samples_per_param {
            (0..n).collect()
        } else {
            (0..settings.samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        }
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = params.clone();
    for (pname, analytic) in &param_grads {
        let original = params.get(pname)?.clone();
        for i in pick(original.numel(), rng) {
            let eval = |delta: f64, work: &mut ParamStore| -> Result<f64> {
                work.get_mut(pname)?.data_mut()[i] = original.data()[i] + delta;
                Ok(probe(work, inputs))
            };
            let up = eval(settings.eps, &mut work)?;
            let down = eval(-settings.eps, &mut work)?;
            work.get_mut(pname)?.data_mut()[i] = original.data()[i];
            let numeric = (up - down) / (2.0 * settings.eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    for (k, (input, analytic)) in inputs.iter().zip(&input_grads).enumerate() {
        let idx = pick(input.numel(), rng);
        let f = |x: &Tensor| {
            let mut vals = inputs.to_vec();
            vals[k] = x.clone();
            probe(params, &vals)
        };
        let numeric = finite_diff_at(&f, input, settings.eps, &idx);
        for &i in &idx {
            worst = worst.max(relative_error(analytic.data()[i], numeric.data()[i]));
            checked += 1;
        }
    }
    Ok(SiteReport { name: name.to_string(), worst_rel_err: worst, checked })
}

/// Materializes `layout` and jitters every entry so zero-initialized
/// projections carry gradient signal too.
fn random_params(layout: &ParamLayout, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = layout.materialize(rng);
    jitter(&mut p, 0.1, rng);
    p
}

fn jitter(p: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Tiny coupled configuration used for layer-level checks.
pub fn toy_config() -> ModelConfig {
    crate::config::RunConfig::toy().model
}

type LayerCase = fn(&ModelConfig, &mut ChaCha8Rng) -> Result<(ParamStore, Vec<Tensor>, LayerBuild)>;
type LayerBuild = Box<dyn Fn(&mut Session, &[Var]) -> Result<Var>>;

fn regional_inputs_from(vars: &[Var]) -> RegionalInputs {
    RegionalInputs { history: vars[..HISTORY_FRAMES].to_vec(), statics: vars[HISTORY_FRAMES], time: vars[HISTORY_FRAMES + 1] }
}

fn regional_input_tensors(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let frame = [cfg.regional_height, cfg.regional_width, cfg.regional_vars];
    let mut v: Vec<Tensor> = (0..HISTORY_FRAMES).map(|_| normal(&frame, 1.0, rng)).collect();
    v.push(normal(&[cfg.regional_height, cfg.regional_width, 2], 1.0, rng));
    v.push(Tensor::raw(vec![1, 4], Timestamp::from_hours(rng.gen_range(1..365), rng.gen_range(0..24)).encoding().to_vec()));
    v
}

fn mixer_layout(cfg: &ModelConfig) -> ParamLayout {
    let mut l = ParamLayout::new();
    mixer::layout_mixer(cfg, &mut l, "mix");
    l
}

fn token_seq(v: Var, grid: (usize, usize)) -> TokenSequence {
    TokenSequence { tokens: v, grid }
}

fn layer_cases() -> Vec<(&'static str, LayerCase)> {
    vec![
        ("layer.linear", |cfg, rng| {
            let mut l = ParamLayout::new();
            l.linear("lin", cfg.dim, 5, false);
            Ok((random_params(&l, rng), vec![normal(&[4, cfg.dim], 1.0, rng)], Box::new(|s, v| nn::linear(s, "lin", v[0]))))
        }),
        ("layer.mlp", |cfg, rng| {
            let mut l = ParamLayout::new();
            nn::layout_mlp(&mut l, "mlp", cfg.dim, 7, 3, true);
            Ok((random_params(&l, rng), vec![normal(&[4, cfg.dim], 1.0, rng)], Box::new(|s, v| nn::mlp(s, "mlp", v[0]))))
        }),
        ("layer.feed_forward", |cfg, rng| {
            let mut l = ParamLayout::new();
            nn::layout_feed_forward(&mut l, "ffn", cfg.dim, cfg.mlp_ratio);
            Ok((random_params(&l, rng), vec![normal(&[4, cfg.dim], 1.0, rng)], Box::new(|s, v| nn::feed_forward(s, "ffn", v[0], 0.0))))
        }),
        ("layer.layer_norm", |cfg, rng| {
            let mut l = ParamLayout::new();
            l.norm("ln", cfg.dim);
            Ok((random_params(&l, rng), vec![normal(&[5, cfg.dim], 1.0, rng)], Box::new(|s, v| nn::layer_norm(s, "ln", v[0]))))
        }),
        ("attention.self", |cfg, rng| {
            let mut l = ParamLayout::new();
            nn::layout_attention(&mut l, "attn", AttentionShape::square(cfg.dim, cfg.heads));
            let (heads, scale) = (cfg.heads, cfg.attn_scale);
            Ok((
                random_params(&l, rng),
                vec![normal(&[5, cfg.dim], 1.0, rng)],
                Box::new(move |s, v| Ok(nn::multi_head_attention(s, "attn", v[0], v[0], heads, scale)?.out)),
            ))
        }),
        ("attention.cross", |cfg, rng| {
            let mut l = ParamLayout::new();
            let shape = AttentionShape { q_dim: cfg.dim + 2, kv_dim: cfg.dim, dim: cfg.dim, out_dim: cfg.dim + 2, heads: cfg.heads };
            nn::layout_attention(&mut l, "attn", shape);
            let (heads, scale) = (cfg.heads, cfg.attn_scale);
            Ok((
                random_params(&l, rng),
                vec![normal(&[3, cfg.dim + 2], 1.0, rng), normal(&[6, cfg.dim], 1.0, rng)],
                Box::new(move |s, v| Ok(nn::multi_head_attention(s, "attn", v[0], v[1], heads, scale)?.out)),
            ))
        }),
        ("layer.fourier_embed", |cfg, rng| {
            let dt = rng.gen_range(1..=6) as f64;
            let half = cfg.fourier_dim / 2;
            Ok((
                ParamStore::new(),
                vec![normal(&[half], 0.2, rng), normal(&[half], 1.0, rng)],
                Box::new(move |s, v| nn::fourier_embed(&mut s.g, dt, v[0], v[1])),
            ))
        }),
        ("adaln", |cfg, rng| {
            let mut l = ParamLayout::new();
            nn::layout_fourier(&mut l, "four", cfg.fourier_dim);
            nn::layout_ada_mlp(&mut l, "ada", cfg.fourier_dim, cfg.dim, 2 * cfg.dim);
            let dt = rng.gen_range(1..=6) as f64;
            Ok((
                random_params(&l, rng),
                vec![normal(&[4, 2 * cfg.dim], 1.0, rng)],
                Box::new(move |s, v| nn::ada_layer_norm(s, v[0], dt, "four", "ada")),
            ))
        }),
        ("layer.encoder", |cfg, rng| {
            let mut l = ParamLayout::new();
            nn::layout_encoder_layer(&mut l, "enc", cfg.dim, cfg.mlp_ratio, cfg.heads);
            let spec = global::encoder_spec(cfg);
            Ok((
                random_params(&l, rng),
                vec![normal(&[5, cfg.dim], 1.0, rng)],
                Box::new(move |s, v| nn::encoder_layer(s, "enc", v[0], spec)),
            ))
        }),
        ("global.patch_embed", |cfg, rng| {
            let mut l = ParamLayout::new();
            global::layout_global(cfg, &mut l);
            let c = cfg.clone();
            Ok((
                random_params(&l, rng),
                vec![normal(&[cfg.global_height, cfg.global_width, cfg.global_channels()], 1.0, rng)],
                Box::new(move |s, v| Ok(global::global_patch_embed(s, &c, v[0])?.tokens)),
            ))
        }),
        ("global.forward", |cfg, rng| {
            let mut l = ParamLayout::new();
            global::layout_global(cfg, &mut l);
            let c = cfg.clone();
            Ok((
                random_params(&l, rng),
                vec![normal(&[cfg.global_height, cfg.global_width, cfg.global_channels()], 1.0, rng)],
                Box::new(move |s, v| global::global_forward(s, &c, v[0])),
            ))
        }),
        ("regional.patch_embed", |cfg, rng| {
            let mut l = ParamLayout::new();
            mixer::layout_regional_embed(cfg, &mut l);
            let c = cfg.clone();
            Ok((
                random_params(&l, rng),
                regional_input_tensors(cfg, rng),
                Box::new(move |s, v| Ok(mixer::regional_patch_embed(s, &c, &regional_inputs_from(v))?.tokens)),
            ))
        }),
        ("regional.head", |cfg, rng| {
            let mut l = ParamLayout::new();
            mixer::layout_heads(cfg, &mut l);
            let c = cfg.clone();
            let dt = rng.gen_range(1..=6);
            let n = cfg.regional_tokens();
            Ok((
                random_params(&l, rng),
                vec![
                    normal(&[n, cfg.dim], 1.0, rng),
                    normal(&[n, cfg.dim], 1.0, rng),
                    normal(&[cfg.regional_height, cfg.regional_width, cfg.regional_vars], 1.0, rng),
                ],
                Box::new(move |s, v| mixer::regional_prediction_head(s, &c, token_seq(v[0], c.regional_grid()), v[1], dt, v[2])),
            ))
        }),
        ("scalemixer.importance", |cfg, rng| {
            let c = cfg.clone();
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.global_tokens(), cfg.dim], 1.0, rng)],
                Box::new(move |s, v| mixer::importance_scores(s, "mix", token_seq(v[0], c.global_grid()))),
            ))
        }),
        ("scalemixer.key_embeddings", |cfg, rng| {
            let c = cfg.clone();
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.global_tokens(), cfg.dim], 1.0, rng)],
                Box::new(move |s, v| {
                    let geom = RegionGeometry::from_config(&c)?;
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let keys = mixer::identify_key_positions(
                        s,
                        "mix",
                        token_seq(v[0], c.global_grid()),
                        &geom,
                        c.key_positions,
                        c.sampling,
                        &mut r,
                    )?;
                    Ok(keys.embeddings)
                }),
            ))
        }),
        ("scalemixer.glo_to_pos", |cfg, rng| {
            let c = cfg.clone();
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.global_tokens(), cfg.dim], 1.0, rng)],
                Box::new(move |s, v| {
                    let geom = RegionGeometry::from_config(&c)?;
                    let seq = token_seq(v[0], c.global_grid());
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let keys = mixer::identify_key_positions(s, "mix", seq, &geom, c.key_positions, c.sampling, &mut r)?;
                    let (h, coords, _) = mixer::global_to_position(s, &c, "mix", &keys, seq)?;
                    s.g.concat_cols(&[h, coords])
                }),
            ))
        }),
        ("scalemixer.refine", |cfg, rng| {
            let c = cfg.clone();
            let (rh, rw) = cfg.regional_grid();
            let geom = RegionGeometry::from_config(cfg)?;
            // Normalized coordinates whose regional images sit off the bilinear kinks.
            let local = off_grid_coords(cfg.key_positions, rh, rw, rng);
            let (sr, sc) = geom.span();
            let coords = Tensor::raw(
                vec![cfg.key_positions, 2],
                local.data().chunks(2).flat_map(|p| [(p[0] + geom.row0 as f64) / sr, (p[1] + geom.col0 as f64) / sc]).collect(),
            );
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.key_positions, cfg.dim], 1.0, rng), coords, normal(&[cfg.regional_tokens(), cfg.dim], 1.0, rng)],
                Box::new(move |s, v| {
                    let geom = RegionGeometry::from_config(&c)?;
                    mixer::refine_with_regional(s, "mix", v[0], v[1], token_seq(v[2], c.regional_grid()), &geom)
                }),
            ))
        }),
        ("scalemixer.pos_to_reg", |cfg, rng| {
            let c = cfg.clone();
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![
                    normal(&[cfg.regional_tokens(), cfg.dim], 1.0, rng),
                    normal(&[cfg.key_positions, cfg.dim], 1.0, rng),
                    normal(&[cfg.key_positions, 2], 1.0, rng),
                ],
                Box::new(move |s, v| {
                    Ok(mixer::position_to_regional(s, &c, "mix", token_seq(v[0], c.regional_grid()), v[1], v[2])?.0.tokens)
                }),
            ))
        }),
        ("scalemixer.adapter", |cfg, rng| {
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.regional_tokens(), cfg.dim], 1.0, rng), normal(&[cfg.regional_tokens(), cfg.dim], 1.0, rng)],
                Box::new(|s, v| mixer::adapt_global(s, "mix", v[0], v[1])),
            ))
        }),
        ("scalemixer.full", |cfg, rng| {
            let c = cfg.clone();
            Ok((
                random_params(&mixer_layout(cfg), rng),
                vec![normal(&[cfg.global_tokens(), cfg.dim], 1.0, rng), normal(&[cfg.regional_tokens(), cfg.dim], 1.0, rng)],
                Box::new(move |s, v| {
                    let geom = RegionGeometry::from_config(&c)?;
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let (g, reg, _) = mixer::scalemixer_forward(
                        s,
                        &c,
                        "mix",
                        token_seq(v[0], c.global_grid()),
                        token_seq(v[1], c.regional_grid()),
                        &geom,
                        &mut r,
                    )?;
                    stack_outputs(s, &[g.tokens, reg.tokens])
                }),
            ))
        }),
    ]
}

/// Every parameterized layer and ScaleMixer stage on `cfg`.
pub fn check_layers(cfg: &ModelConfig, seed: u64, settings: &GradcheckSettings) -> Result<Vec<SiteReport>> {
    let mut out = Vec::new();
    for (name, case) in layer_cases() {
        let mut reports = Vec::new();
        for k in 0..settings.layer_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(site_seed(seed, name, k));
            let (params, inputs, build) = case(cfg, &mut rng)?;
            reports.push(check_layer(name, &params, &inputs, |s, v| build(s, v), settings, &mut rng)?);
        }
        out.push(merge(name, reports));
    }
    Ok(out)
}

fn model_inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut v = vec![normal(&[cfg.global_height, cfg.global_width, cfg.global_channels()], 1.0, rng)];
    v.extend(regional_input_tensors(cfg, rng));
    v
}

fn step_inputs(vars: &[Var]) -> StepInputs {
    StepInputs { global: vars[0], regional: regional_inputs_from(&vars[1..]) }
}

fn stack_outputs(s: &mut Session, nodes: &[Var]) -> Result<Var> {
    let rows = nodes
        .iter()
        .map(|&n| {
            let len = s.g.value(n).numel();
            s.g.reshape(n, &[1, len])
        })
        .collect::<Result<Vec<_>>>()?;
    s.g.concat_cols(&rows)
}

/// End-to-end checks of the coupled model on `cfg`: one step and a two-step
/// chained rollout, gradients to every parameter tensor and every input.
pub fn check_model(cfg: &ModelConfig, label: &str, seed: u64, settings: &GradcheckSettings) -> Result<Vec<SiteReport>> {
    let mut out = Vec::new();
    for (site, steps) in [("step", 1usize), ("rollout2", 2)] {
        let name = format!("model.{label}.{site}");
        let mut reports = Vec::new();
        for k in 0..settings.layer_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(site_seed(seed, &name, k));
            let mut params = forecaster::build_model(cfg, rng.gen())?;
            jitter(&mut params, 0.05, &mut rng);
            let inputs = model_inputs(cfg, &mut rng);
            let geom = RegionGeometry::from_config(cfg)?;
            let sampler_seed: u64 = rng.gen();
            let build = |s: &mut Session, v: &[Var]| -> Result<Var> {
                let mut r = ChaCha8Rng::seed_from_u64(sampler_seed);
                let mut outs = Vec::new();
                if steps == 1 {
                    let nodes = forecaster::forward_graph(s, cfg, &geom, &step_inputs(v), true, &mut r)?;
                    outs.extend(nodes.global);
                    outs.extend(nodes.regional);
                } else {
                    let (h, w, c) = (cfg.global_height, cfg.global_width, cfg.global_channels());
                    let flat = s.g.reshape(v[0], &[h * w, c])?;
                    let statics = s.g.slice_cols(flat, cfg.predicted_channels(), cfg.static_channels)?;
                    let statics = s.g.reshape(statics, &[h, w, cfg.static_channels])?;
                    let start = RolloutStart {
                        global: v[0],
                        global_statics: statics,
                        regional: regional_inputs_from(&v[1..]),
                        timestamp: Timestamp::from_hours(10, 6),
                    };
                    for nodes in forecaster::rollout_graph(s, cfg, &geom, start, steps, &mut r)? {
                        outs.extend(nodes.global);
                        outs.extend(nodes.regional);
                    }
                }
                stack_outputs(s, &outs)
            };
            reports.push(check_layer(&name, &params, &inputs, build, settings, &mut rng)?);
        }
        out.push(merge(&name, reports));
    }
    Ok(out)
}

/// The complete suite: primitive ops, layers on the toy configuration, the
/// coupled toy model in every coupling mode, and the coupled model on `cfg`.
pub fn gradcheck_suite(cfg: &ModelConfig, seed: u64, settings: &GradcheckSettings) -> Result<Vec<SiteReport>> {
    let toy = toy_config();
    let mut out = check_ops(seed, settings)?;
    out.extend(check_layers(&toy, seed, settings)?);
    for (label, coupling) in
        [("toy", Coupling::Bidirectional), ("toy_unidirectional", Coupling::Unidirectional), ("toy_standalone", Coupling::None)]
    {
        let c = ModelConfig { coupling, ..toy.clone() };
        out.extend(check_model(&c, label, seed, settings)?);
    }
    let light = GradcheckSettings { layer_seeds: 1, samples_per_param: 2, ..*settings };
    out.extend(check_model(cfg, "config", seed, &light)?);
    Ok(out)
}
