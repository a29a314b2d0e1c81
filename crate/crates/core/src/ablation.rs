//! Sampling/coupling variants and the regional-depth sweep, trained with a
//! shared seed and budget around one pretrained global model.

use std::time::Instant;

use crate::config::{Coupling, RunConfig, Sampling, LEAD_HOURS};
use crate::data::dataset::Split;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::train::{self, TrainContext};

/// Column of the temperature analogue in the regional channel order.
pub const T_INDEX: usize = 2;
/// Column of the zonal-wind analogue.
pub const U_INDEX: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Random key positions.
    A,
    /// Fixed-grid key positions.
    B,
    /// Global-to-regional only.
    C,
    /// Standalone regional model.
    D,
    /// Full model with `k` coupling blocks.
    Depth(usize),
}

impl Variant {
    pub const SAMPLING_COUPLING: [Variant; 5] = [Variant::Full, Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn label(self) -> String {
        match self {
            Variant::Full => "ScaleMixer".into(),
            Variant::A => "A".into(),
            Variant::B => "B".into(),
            Variant::C => "C".into(),
            Variant::D => "D".into(),
            Variant::Depth(k) => format!("k={k}"),
        }
    }

    /// The run configuration this variant trains with.
    pub fn apply(self, run: &RunConfig) -> RunConfig {
        let mut r = run.clone();
        match self {
            Variant::Full => {}
            Variant::A => r.model.sampling = Sampling::Random,
            Variant::B => r.model.sampling = Sampling::FixedGrid,
            Variant::C => r.model.coupling = Coupling::Unidirectional,
            Variant::D => r.model.coupling = Coupling::None,
            Variant::Depth(k) => r.model.blocks = k,
        }
        r
    }
}

/// Deterministic scores of one trained variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantScores {
    pub variant: Variant,
    /// RMSE of the temperature analogue averaged over leads 1..=`ablation_lead_hours`.
    pub t_rmse: f64,
    /// Same for the zonal-wind analogue.
    pub u_rmse: f64,
    /// One-step validation regional MAE (normalized, mean over variables).
    pub val_mae: f64,
    pub final_train_loss: f64,
}

/// A scored variant plus its measured inference cost (not deterministic).
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub scores: VariantScores,
    pub params: ParamStore,
    pub seconds_per_step: f64,
    pub train_seconds: f64,
}

/// Trains `variant` for `run.train.steps` one-step updates and scores it on validation.
pub fn run_variant(ctx: &TrainContext, variant: Variant, global_params: &ParamStore) -> Result<VariantRun> {
    let run = variant.apply(ctx.run);
    run.validate()?;
    let vctx = TrainContext { run: &run, data: ctx.data, stats: ctx.stats, seed: ctx.seed };
    let start = Instant::now();
    let trained = train::train_one_step(&vctx, global_params)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let one = train::evaluate_one_step(&vctx, &trained.params, Split::Val)?;
    let lead = run.eval.ablation_lead_hours;
    let steps = lead.div_ceil(LEAD_HOURS);
    let roll = train::evaluate_rollout(&vctx, &trained.params, Split::Val, steps)?;
    let avg = |k: usize| roll.rmse[..lead].iter().map(|r| r[k]).sum::<f64>() / lead as f64;
    Ok(VariantRun {
        scores: VariantScores {
            variant,
            t_rmse: avg(T_INDEX),
            u_rmse: avg(U_INDEX),
            val_mae: one.mae_normalized,
            final_train_loss: trained.final_loss,
        },
        params: trained.params,
        seconds_per_step: roll.seconds_per_step,
        train_seconds,
    })
}

/// `(variant − full) / full`.
pub fn relative_delta(variant: f64, full: f64) -> f64 {
    (variant - full) / full
}

/// Every sampling/coupling variant, then each depth of the sweep. The depth
/// equal to the configured `blocks` reuses the full model's run.
pub fn run_ablation(
    ctx: &TrainContext,
    global_params: &ParamStore,
    mut progress: impl FnMut(&VariantRun),
) -> Result<(Vec<VariantRun>, Vec<VariantRun>)> {
    let mut main = Vec::new();
    for v in Variant::SAMPLING_COUPLING {
        let r = run_variant(ctx, v, global_params)?;
        progress(&r);
        main.push(r);
    }
    let full = main.first().ok_or_else(|| Error::Pipeline("no full-model run".into()))?;
    let mut sweep = Vec::new();
    for &k in &ctx.run.eval.k_sweep {
        let r = if k == ctx.run.model.blocks {
            VariantRun { scores: VariantScores { variant: Variant::Depth(k), ..full.scores.clone() }, ..full.clone() }
        } else {
            run_variant(ctx, Variant::Depth(k), global_params)?
        };
        progress(&r);
        sweep.push(r);
    }
    Ok((main, sweep))
}
