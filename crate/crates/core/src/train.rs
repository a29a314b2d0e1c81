//! AdamW, the learning-rate schedule and the three training stages:
//! global pretraining, regional one-step training and rollout fine-tuning.

use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{ModelConfig, RunConfig, TrainConfig, LEAD_HOURS, REGIONAL_VARIABLES};
use crate::data::dataset::{Dataset, NormStats, Sample, Split};
use crate::error::{Error, Result};
use crate::forecaster::{self, RolloutStart, StepInputs};
use crate::global;
use crate::mixer::RegionGeometry;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update. Weight decay only touches matrices and kernels.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.ndim() >= 2 { lr * self.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= decay * *pi + lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base`, then cosine decay to `min` at `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, base: f64, min: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).fold(0.0, |acc, v| acc + v * v).sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Gradients of every trainable parameter bound in `s`, in binding order.
fn collect_grads(s: &Session, loss: Var, trainable: &dyn Fn(&str) -> bool) -> Result<Vec<(String, Tensor)>> {
    let grads = s.g.backward(loss)?;
    Ok(s.bound().iter().filter(|(name, _)| trainable(name)).map(|(name, v)| (name.clone(), grads.wrt_or_zeros(*v))).collect())
}

/// Loss and gradients summed over a batch in sample order.
#[derive(Default)]
struct Batch {
    loss: f64,
    grads: Vec<(String, Tensor)>,
    n: usize,
}

impl Batch {
    fn add(&mut self, loss: f64, grads: Vec<(String, Tensor)>) -> Result<()> {
        self.loss += loss;
        if self.n == 0 {
            self.grads = grads;
        } else {
            for ((name, acc), (other, g)) in self.grads.iter_mut().zip(grads) {
                debug_assert_eq!(*name, other);
                *acc = acc.zip_map(&g, |a, b| a + b)?;
            }
        }
        self.n += 1;
        Ok(())
    }

    fn mean(self) -> (f64, Vec<(String, Tensor)>) {
        let k = 1.0 / self.n as f64;
        let grads = self.grads.into_iter().map(|(name, g)| (name, g.map(|x| x * k))).collect();
        (self.loss * k, grads)
    }
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Vec<f64>,
}

pub fn write_log_csv(path: &Path, value_columns: &[String], rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "lr".into(), "train_loss".into()];
    header.extend_from_slice(value_columns);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), format!("{:e}", r.lr), format!("{:.12e}", r.train_loss)];
        rec.extend(r.val.iter().map(|v| format!("{v:.12e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Column names of the regional training log.
pub fn regional_log_columns() -> Vec<String> {
    REGIONAL_VARIABLES.iter().map(|v| format!("val_mae_{v}")).collect()
}

/// Cycles through shuffled epochs of training origins.
struct SampleStream {
    origins: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl SampleStream {
    fn new(origins: Vec<usize>, seed: u64) -> Result<Self> {
        if origins.is_empty() {
            return Err(Error::Pipeline("the training split has no usable samples".into()));
        }
        Ok(Self { order: Vec::new(), origins, cursor: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = self.origins.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Seeds derived from the run seed for independent streams.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Sampler stream used by every evaluation pass, so forecasts made outside
/// training reproduce the validation numbers.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, 3))
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Context shared by every stage.
pub struct TrainContext<'a> {
    pub run: &'a RunConfig,
    pub data: &'a Dataset,
    pub stats: &'a NormStats,
    pub seed: u64,
}

impl TrainContext<'_> {
    fn model(&self) -> &ModelConfig {
        &self.run.model
    }

    fn sample(&self, t0: usize, steps: usize) -> Result<Sample> {
        self.data.sample(t0, steps, self.stats, self.model())
    }
}

/// Output of a training stage.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
    pub final_loss: f64,
}

/// Parameters of the global model only.
pub fn global_subset(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with(global::PREFIX)) {
        out.insert(name, t.clone());
    }
    out
}

fn global_loss_on(s: &mut Session, cfg: &ModelConfig, train: &TrainConfig, sample: &Sample) -> Result<Var> {
    let u = s.constant(sample.global.field.clone());
    let pred = global::global_forward(s, cfg, u)?;
    let truth = s.constant(sample.global_targets[0].clone());
    forecaster::global_weighted_mae(&mut s.g, cfg, pred, truth, &train.surface_weights(cfg), &train.upper_air_weights(cfg))
}

/// Mean global weighted MAE (normalized units) over a split.
pub fn evaluate_global(ctx: &TrainContext, params: &ParamStore, split: Split) -> Result<f64> {
    let origins = ctx.data.sample_origins(split, 1);
    if origins.is_empty() {
        return Err(Error::Pipeline(format!("the {} split has no usable samples", split.name())));
    }
    let mut total = 0.0;
    for &t0 in &origins {
        let sample = ctx.sample(t0, 1)?;
        let mut s = Session::inference(params);
        let l = global_loss_on(&mut s, ctx.model(), &ctx.run.train, &sample)?;
        total += s.g.value(l).data()[0];
    }
    Ok(total / origins.len() as f64)
}

/// Stage 1: trains the global model alone on 6-hour transitions.
pub fn pretrain_global(ctx: &TrainContext) -> Result<StageResult> {
    let cfg = ctx.model();
    let tc = &ctx.run.train;
    let full = forecaster::build_model(cfg, ctx.seed)?;
    let mut params = global_subset(&full);
    let mut opt = AdamW::new(tc);
    let mut stream = SampleStream::new(ctx.data.sample_origins(Split::Train, 1), sub_seed(ctx.seed, 1))?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.seed, 2));
    let trainable = |_: &str| true;
    let mut log = Vec::new();
    let (mut acc, mut acc_n, mut last) = (0.0, 0usize, f64::NAN);
    for step in 0..tc.pretrain_steps {
        let lr = learning_rate(step, tc.pretrain_steps, tc.warmup_steps, tc.pretrain_lr, tc.min_lr);
        let mut batch = Batch::default();
        for _ in 0..tc.batch_size {
            let sample = ctx.sample(stream.next(), 1)?;
            let mut s = Session::training(&params, trainable);
            if cfg.dropout > 0.0 || cfg.drop_path > 0.0 {
                s = s.with_dropout(ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut dropout_rng)));
            }
            let loss = global_loss_on(&mut s, cfg, tc, &sample)?;
            let value = s.g.value(loss).data()[0];
            check_finite(step, value)?;
            batch.add(value, collect_grads(&s, loss, &trainable)?)?;
        }
        let (value, mut grads) = batch.mean();
        last = value;
        clip_global_norm(&mut grads, tc.grad_clip);
        opt.update(&mut params, &grads, lr)?;
        acc += last;
        acc_n += 1;
        if is_eval_step(step, tc.pretrain_steps, tc.eval_every) {
            let val = evaluate_global(ctx, &params, Split::Val)?;
            log.push(LogRow { step: step + 1, lr, train_loss: acc / acc_n as f64, val: vec![val] });
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok(StageResult { params, log, final_loss: last })
}

fn is_eval_step(step: usize, total: usize, every: usize) -> bool {
    step + 1 == total || (every > 0 && (step + 1) % every == 0)
}

/// Graph inputs for a sample in session `s`.
fn step_inputs(s: &mut Session, sample: &Sample) -> StepInputs {
    StepInputs { global: s.constant(sample.global.field.clone()), regional: forecaster::regional_inputs(&mut s.g, &sample.regional) }
}

/// `Σ_dt regional_mae` for one coupled step.
fn one_step_loss(s: &mut Session, cfg: &ModelConfig, geom: &RegionGeometry, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Var> {
    let inputs = step_inputs(s, sample);
    let nodes = forecaster::forward_graph(s, cfg, geom, &inputs, false, rng)?;
    let mut total: Option<Var> = None;
    for (dt, &pred) in nodes.regional.iter().enumerate() {
        let truth = s.constant(sample.regional_targets[dt].clone());
        let l = forecaster::regional_mae(&mut s.g, pred, truth)?;
        total = Some(match total {
            None => l,
            Some(t) => s.g.add(t, l)?,
        });
    }
    Ok(total.expect("six lead times"))
}

/// Full model parameters: fresh regional/mixer weights around pretrained global ones.
pub fn init_coupled(cfg: &ModelConfig, seed: u64, global_params: &ParamStore) -> Result<ParamStore> {
    let mut params = forecaster::build_model(cfg, seed)?;
    let n = params.overlay(global_params)?;
    let expected = params.iter().filter(|(k, _)| k.starts_with(global::PREFIX)).count();
    if n != expected {
        return Err(Error::Pipeline(format!("global checkpoint provides {n} of {expected} global parameters")));
    }
    Ok(params)
}

/// Validation metrics of one-step forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStepScores {
    /// Physical-unit MAE per regional variable, averaged over samples and lead times 1..6.
    pub mae_physical: Vec<f64>,
    /// Mean over variables of the normalized MAE (the training objective's metric).
    pub mae_normalized: f64,
}

/// One-step regional scores over a split.
pub fn evaluate_one_step(ctx: &TrainContext, params: &ParamStore, split: Split) -> Result<OneStepScores> {
    let cfg = ctx.model();
    let geom = RegionGeometry::from_config(cfg)?;
    let origins = ctx.data.sample_origins(split, 1);
    if origins.is_empty() {
        return Err(Error::Pipeline(format!("the {} split has no usable samples", split.name())));
    }
    let mut rng = eval_rng(ctx.seed);
    let v = cfg.regional_vars;
    let mut phys = vec![0.0; v];
    let mut norm = 0.0;
    let mut count = 0usize;
    for &t0 in &origins {
        let sample = ctx.sample(t0, 1)?;
        let mut s = Session::inference(params);
        let inputs = step_inputs(&mut s, &sample);
        let nodes = forecaster::forward_graph(&mut s, cfg, &geom, &inputs, false, &mut rng)?;
        for (dt, &pred) in nodes.regional.iter().enumerate() {
            let p = s.g.value(pred);
            let truth = ctx.data.regional_at(t0 + dt + 1)?.cast();
            let pm = forecaster::mae_per_variable(&ctx.stats.regional.inverse(p)?, &truth)?;
            let nm = forecaster::mae_per_variable(p, &sample.regional_targets[dt])?;
            for k in 0..v {
                phys[k] += pm[k];
            }
            norm += nm.iter().sum::<f64>() / v as f64;
            count += 1;
        }
    }
    Ok(OneStepScores { mae_physical: phys.into_iter().map(|x| x / count as f64).collect(), mae_normalized: norm / count as f64 })
}

/// Per-lead scores of autoregressive forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutScores {
    /// `[lead − 1][variable]` physical-unit MAE.
    pub mae_physical: Vec<Vec<f64>>,
    /// `[lead − 1]` mean normalized MAE over variables.
    pub mae_normalized: Vec<f64>,
    /// `[lead − 1][variable]` RMSE (physical units, latitude-weighted).
    pub rmse: Vec<Vec<f64>>,
    pub samples: usize,
    /// Mean wall-clock seconds per coupled step.
    pub seconds_per_step: f64,
}

/// Rollout forecasts of `steps` coupled steps from every usable origin of `split`.
pub fn evaluate_rollout(ctx: &TrainContext, params: &ParamStore, split: Split, steps: usize) -> Result<RolloutScores> {
    let cfg = ctx.model();
    let origins = ctx.data.sample_origins(split, steps);
    if origins.is_empty() {
        return Err(Error::Pipeline(format!("the {} split is too short for {steps}-step rollouts", split.name())));
    }
    let mut rng = eval_rng(ctx.seed);
    let leads = steps * LEAD_HOURS;
    let v = cfg.regional_vars;
    let mut phys = vec![vec![0.0; v]; leads];
    let mut norm = vec![0.0; leads];
    let mut rmse = vec![vec![0.0; v]; leads];
    let mut seconds = 0.0;
    for &t0 in &origins {
        let sample = ctx.sample(t0, steps)?;
        let start = std::time::Instant::now();
        let bundles = forecaster::rollout(params, cfg, &sample.global, &sample.regional, steps, &mut rng)?;
        seconds += start.elapsed().as_secs_f64();
        for (lead, pred) in bundles.iter().flat_map(|b| b.regional.iter()).enumerate() {
            let truth = ctx.data.regional_at(t0 + lead + 1)?.cast();
            let phys_pred = ctx.stats.regional.inverse(pred)?;
            let pm = forecaster::mae_per_variable(&phys_pred, &truth)?;
            let nm = forecaster::mae_per_variable(pred, &sample.regional_targets[lead])?;
            let rm = crate::data::metrics::lat_weighted_rmse(&phys_pred, &truth, &ctx.data.regional_lat)?;
            for k in 0..v {
                phys[lead][k] += pm[k];
                rmse[lead][k] += rm[k];
            }
            norm[lead] += nm.iter().sum::<f64>() / v as f64;
        }
    }
    let n = origins.len() as f64;
    Ok(RolloutScores {
        mae_physical: phys.into_iter().map(|r| r.into_iter().map(|x| x / n).collect()).collect(),
        mae_normalized: norm.into_iter().map(|x| x / n).collect(),
        rmse: rmse.into_iter().map(|r| r.into_iter().map(|x| x / n).collect()).collect(),
        samples: origins.len(),
        seconds_per_step: seconds / (n * steps as f64),
    })
}

/// Stage 2: one-step regional training with the global model frozen.
pub fn train_one_step(ctx: &TrainContext, global_params: &ParamStore) -> Result<StageResult> {
    let params = init_coupled(ctx.model(), ctx.seed, global_params)?;
    let tc = &ctx.run.train;
    let schedule = |step: usize| learning_rate(step, tc.steps, tc.warmup_steps, tc.lr, tc.min_lr);
    regional_training(ctx, params, tc.steps, &schedule, 1, 4)
}

/// Stage 3: fine-tunes through `horizon_steps` chained steps at a fixed rate.
pub fn train_rollout_finetune(ctx: &TrainContext, params: ParamStore) -> Result<StageResult> {
    let tc = &ctx.run.train;
    let schedule = |_: usize| tc.rollout_lr;
    regional_training(ctx, params, tc.rollout_steps, &schedule, tc.horizon_steps, 5)
}

fn regional_training(
    ctx: &TrainContext,
    mut params: ParamStore,
    steps: usize,
    schedule: &dyn Fn(usize) -> f64,
    horizon: usize,
    stream: u64,
) -> Result<StageResult> {
    let cfg = ctx.model();
    let tc = &ctx.run.train;
    let geom = RegionGeometry::from_config(cfg)?;
    let mut opt = AdamW::new(tc);
    let mut samples = SampleStream::new(ctx.data.sample_origins(Split::Train, horizon), sub_seed(ctx.seed, stream))?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.seed, stream + 100));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.seed, stream + 200));
    let trainable = |name: &str| forecaster::is_regional_param(name);
    let (w_s, w_a) = (tc.surface_weights(cfg), tc.upper_air_weights(cfg));
    let mut log = Vec::new();
    let (mut acc, mut acc_n, mut last) = (0.0, 0usize, f64::NAN);
    for step in 0..steps {
        let lr = schedule(step);
        let mut batch = Batch::default();
        for _ in 0..tc.batch_size {
            let sample = ctx.sample(samples.next(), horizon)?;
            let mut s = Session::training(&params, trainable);
            if cfg.dropout > 0.0 || cfg.drop_path > 0.0 {
                s = s.with_dropout(ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut dropout_rng)));
            }
            let loss = if horizon == 1 {
                one_step_loss(&mut s, cfg, &geom, &sample, &mut sampler_rng)?
            } else {
                rollout_loss(&mut s, cfg, &geom, &sample, horizon, &w_s, &w_a, &mut sampler_rng)?
            };
            let value = s.g.value(loss).data()[0];
            check_finite(step, value)?;
            batch.add(value, collect_grads(&s, loss, &trainable)?)?;
        }
        let (value, mut grads) = batch.mean();
        last = value;
        clip_global_norm(&mut grads, tc.grad_clip);
        opt.update(&mut params, &grads, lr)?;
        acc += last;
        acc_n += 1;
        if is_eval_step(step, steps, tc.eval_every) {
            let scores = evaluate_one_step(ctx, &params, Split::Val)?;
            log.push(LogRow { step: step + 1, lr, train_loss: acc / acc_n as f64, val: scores.mae_physical });
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok(StageResult { params, log, final_loss: last })
}

/// Sum of the global and regional objectives over every chained step.
#[allow(clippy::too_many_arguments)]
fn rollout_loss(
    s: &mut Session,
    cfg: &ModelConfig,
    geom: &RegionGeometry,
    sample: &Sample,
    horizon: usize,
    w_s: &[f64],
    w_a: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let statics = sample.global.static_channels(cfg);
    let start = RolloutStart {
        global: s.constant(sample.global.field.clone()),
        global_statics: s.constant(statics),
        regional: forecaster::regional_inputs(&mut s.g, &sample.regional),
        timestamp: sample.regional.timestamp,
    };
    let steps = forecaster::rollout_graph(s, cfg, geom, start, horizon, rng)?;
    let mut terms = Vec::new();
    for (n, nodes) in steps.iter().enumerate() {
        let truth = s.constant(sample.global_targets[n].clone());
        let pred = nodes.global.expect("rollout evaluates the global head");
        terms.push(forecaster::global_weighted_mae(&mut s.g, cfg, pred, truth, w_s, w_a)?);
        for (dt, &pred) in nodes.regional.iter().enumerate() {
            let truth = s.constant(sample.regional_targets[n * LEAD_HOURS + dt].clone());
            terms.push(forecaster::regional_mae(&mut s.g, pred, truth)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = s.g.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 1000, 100, 1.0, 0.0) - 0.01).abs() < 1e-15);
        assert!((learning_rate(99, 1000, 100, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((learning_rate(100, 1000, 100, 1.0, 0.1) - 1.0).abs() < 1e-15);
        assert!((learning_rate(550, 1000, 100, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!((learning_rate(1000, 1000, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![("a".to_string(), Tensor::from_vec(vec![3.0])), ("b".to_string(), Tensor::from_vec(vec![4.0]))];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15 && (g[1].1.data()[0] - 0.8).abs() < 1e-15);
        let n = clip_global_norm(&mut g, 2.0);
        assert!((n - 1.0).abs() < 1e-15);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_lr_is_a_no_op_and_first_step_is_sign_like() {
        let tc = TrainConfig::default();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let before = p.clone();
        let grads = vec![("w".to_string(), Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap())];
        let mut opt = AdamW::new(&tc);
        opt.update(&mut p, &grads, 0.0).unwrap();
        assert_eq!(p, before);
        let mut opt = AdamW::new(&TrainConfig { weight_decay: 0.0, ..tc });
        opt.update(&mut p, &grads, 0.1).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }
}
