//! The coupled global-regional forecaster: parameter layout, one-step forward,
//! autoregressive rollout and the two training objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{Coupling, ModelConfig, HISTORY_FRAMES, LEAD_HOURS};
use crate::error::{Error, Result};
use crate::field::{GlobalState, RegionalState, Timestamp, TokenSequence};
use crate::global;
use crate::mixer::{self, MixerTrace, RegionGeometry, RegionalInputs};
use crate::nn::{self, ParamLayout, ParamStore, Session};
use crate::tensor::Tensor;

/// Every parameter of the coupled model for `cfg`.
pub fn param_layout(cfg: &ModelConfig) -> ParamLayout {
    let mut layout = ParamLayout::new();
    global::layout_global(cfg, &mut layout);
    mixer::layout_regional_embed(cfg, &mut layout);
    for b in 0..cfg.blocks {
        nn::layout_encoder_layer(&mut layout, &format!("regional.layer{b}"), cfg.dim, cfg.mlp_ratio, cfg.heads);
        if cfg.coupling != Coupling::None {
            mixer::layout_mixer(cfg, &mut layout, &format!("mixer{b}"));
        }
    }
    mixer::layout_heads(cfg, &mut layout);
    layout
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub global: usize,
    pub regional: usize,
    pub total: usize,
}

pub fn parameter_counts(cfg: &ModelConfig) -> ParamCounts {
    let layout = param_layout(cfg);
    let total = layout.total();
    let global = layout.total_with_prefix(global::PREFIX);
    ParamCounts { global, regional: total - global, total }
}

/// Deterministically initialised parameters. Residual branches end in zero
/// projections, so a fresh model is the identity on both token streams.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(param_layout(cfg).materialize(&mut rng))
}

/// Whether a parameter is trained in the regional stages.
pub fn is_regional_param(name: &str) -> bool {
    !name.starts_with(global::PREFIX)
}

/// One coupled step's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    /// `H×W×C_pred` global state at +6 h.
    pub global: Tensor,
    /// Regional fields at +1 h … +6 h.
    pub regional: Vec<Tensor>,
}

/// Graph nodes produced by one coupled step.
#[derive(Clone, Debug)]
pub struct StepNodes {
    pub global: Option<Var>,
    pub regional: Vec<Var>,
    pub traces: Vec<MixerTrace>,
}

/// Graph inputs for one coupled step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// Full `H×W×C` global state.
    pub global: Var,
    pub regional: RegionalInputs,
}

/// Builds one coupled step. `with_global` controls whether the global head
/// is evaluated; regional-only training does not need it, and without coupling
/// the global stream is then skipped entirely.
pub fn forward_graph(
    s: &mut Session,
    cfg: &ModelConfig,
    geom: &RegionGeometry,
    inputs: &StepInputs,
    with_global: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepNodes> {
    let coupled = cfg.coupling != Coupling::None;
    let need_global = coupled || with_global;
    let spec = global::encoder_spec(cfg);
    let lpb = cfg.layers_per_block();
    let last_frame = *inputs.regional.history.last().expect("six frames");

    let mut gseq = if need_global { Some(global::global_patch_embed(s, cfg, inputs.global)?) } else { None };
    let mut rseq = mixer::regional_patch_embed(s, cfg, &inputs.regional)?;
    let mut traces = Vec::new();
    for b in 0..cfg.blocks {
        if let Some(g) = gseq {
            gseq = Some(global::encode_range(s, cfg, g, b * lpb, (b + 1) * lpb)?);
        }
        let tokens = nn::encoder_layer(s, &format!("regional.layer{b}"), rseq.tokens, spec)?;
        rseq = TokenSequence { tokens, ..rseq };
        if coupled {
            let g = gseq.expect("coupled models run the global stream");
            let (g2, r2, trace) = mixer::scalemixer_forward(s, cfg, &format!("mixer{b}"), g, rseq, geom, rng)?;
            gseq = Some(g2);
            rseq = r2;
            traces.push(trace);
        }
    }
    let aligned = match (coupled, gseq) {
        (true, Some(g)) => mixer::aligned_tokens(s, g, geom)?,
        _ => s.constant(Tensor::zeros(&[geom.regional_tokens(), cfg.dim])),
    };
    let mut regional = Vec::with_capacity(LEAD_HOURS);
    for dt in 1..=LEAD_HOURS {
        regional.push(mixer::regional_prediction_head(s, cfg, rseq, aligned, dt, last_frame)?);
    }
    let global = match (with_global, gseq) {
        (true, Some(g)) => Some(global::global_prediction_head(s, cfg, g, inputs.global)?),
        _ => None,
    };
    Ok(StepNodes { global, regional, traces })
}

/// `1×4` time encoding constant.
pub fn time_node(g: &mut Graph, ts: Timestamp) -> Var {
    g.constant(Tensor::raw(vec![1, 4], ts.encoding().to_vec()))
}

/// `h×w×2` topography and land-sea mask stack.
pub fn regional_statics(state: &RegionalState) -> Tensor {
    crate::field::join_channels(&state.topography, &state.land_sea_mask)
}

/// Binds a regional state as graph constants.
pub fn regional_inputs(g: &mut Graph, state: &RegionalState) -> RegionalInputs {
    RegionalInputs {
        history: state.history.iter().map(|f| g.constant(f.clone())).collect(),
        statics: g.constant(regional_statics(state)),
        time: time_node(g, state.timestamp),
    }
}

/// Concatenates two `H×W×·` nodes along channels.
pub fn join_channels_node(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (h, w, ca) = shape3(g, a)?;
    let (h2, w2, cb) = shape3(g, b)?;
    if (h, w) != (h2, w2) {
        return Err(Error::geometry(format!("cannot join {h}x{w} and {h2}x{w2} fields")));
    }
    let a2 = g.reshape(a, &[h * w, ca])?;
    let b2 = g.reshape(b, &[h * w, cb])?;
    let joined = g.concat_cols(&[a2, b2])?;
    g.reshape(joined, &[h, w, ca + cb])
}

fn shape3(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::dim(format!("expected a 3-d field, got {s:?}"))),
    }
}

/// Everything needed to chain steps inside one graph.
#[derive(Clone, Debug)]
pub struct RolloutStart {
    pub global: Var,
    /// `H×W×static` channels carried through unchanged.
    pub global_statics: Var,
    pub regional: RegionalInputs,
    pub timestamp: Timestamp,
}

/// `n_steps` chained coupled steps inside one graph (gradients flow through
/// the whole chain).
pub fn rollout_graph(
    s: &mut Session,
    cfg: &ModelConfig,
    geom: &RegionGeometry,
    start: RolloutStart,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepNodes>> {
    if n_steps == 0 {
        return Err(Error::contract("rollout needs at least one step"));
    }
    let mut inputs = StepInputs { global: start.global, regional: start.regional };
    let mut ts = start.timestamp;
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let nodes = forward_graph(s, cfg, geom, &inputs, true, rng)?;
        if step + 1 < n_steps {
            let pred = nodes.global.expect("global head requested");
            ts = ts.advanced(LEAD_HOURS);
            inputs = StepInputs {
                global: join_channels_node(&mut s.g, pred, start.global_statics)?,
                regional: RegionalInputs {
                    history: nodes.regional.clone(),
                    statics: inputs.regional.statics,
                    time: time_node(&mut s.g, ts),
                },
            };
        }
        out.push(nodes);
    }
    Ok(out)
}

fn check_inputs(cfg: &ModelConfig, u: &GlobalState, r: &RegionalState) -> Result<RegionGeometry> {
    let want = [cfg.global_height, cfg.global_width, cfg.global_channels()];
    if u.field.shape() != want {
        return Err(Error::geometry(format!("global state {:?}, model expects {want:?}", u.field.shape())));
    }
    let frame = [cfg.regional_height, cfg.regional_width, cfg.regional_vars];
    if r.history.len() != HISTORY_FRAMES || r.history.iter().any(|f| f.shape() != frame) {
        return Err(Error::geometry(format!("regional history must be {HISTORY_FRAMES} frames of {frame:?}")));
    }
    RegionGeometry::from_config(cfg)
}

/// One coupled forecast from analysis inputs.
pub fn forward_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    u: &GlobalState,
    r: &RegionalState,
    rng: &mut ChaCha8Rng,
) -> Result<ForecastBundle> {
    let geom = check_inputs(cfg, u, r)?;
    let mut s = Session::inference(params);
    let global = s.constant(u.field.clone());
    let regional = regional_inputs(&mut s.g, r);
    let nodes = forward_graph(&mut s, cfg, &geom, &StepInputs { global, regional }, true, rng)?;
    let bundle = ForecastBundle {
        global: s.g.value(nodes.global.expect("requested")).clone(),
        regional: nodes.regional.iter().map(|&v| s.g.value(v).clone()).collect(),
    };
    if !bundle.global.is_finite() || bundle.regional.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("forecast produced non-finite values".into()));
    }
    Ok(bundle)
}

/// Autoregressive forecast: each step consumes the previous step's global
/// prediction and its six hourly regional predictions.
pub fn rollout(
    params: &ParamStore,
    cfg: &ModelConfig,
    u: &GlobalState,
    r: &RegionalState,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ForecastBundle>> {
    if n_steps == 0 {
        return Err(Error::contract("rollout needs at least one step"));
    }
    let statics = u.static_channels(cfg);
    let mut u = u.clone();
    let mut r = r.clone();
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let bundle = forward_step(params, cfg, &u, &r, rng)?;
        if step + 1 < n_steps {
            u = GlobalState::from_prediction(&bundle.global, &statics);
            r = RegionalState { history: bundle.regional.clone(), timestamp: r.timestamp.advanced(LEAD_HOURS), ..r };
        }
        out.push(bundle);
    }
    Ok(out)
}

/// Per-channel weights such that `Σ w_c · Σ_cells |Δ_c|` is the weighted MAE:
/// upper-air channel `(k, p)` gets `w^A_{k,p} / (HW·P·V)`, surface channel `k`
/// gets `w^S_k / (HW·V)`, with `V = V_S + V_A`.
pub fn global_loss_weights(cfg: &ModelConfig, w_s: &[f64], w_a: &[f64]) -> Result<Vec<f64>> {
    if w_s.len() != cfg.surface_vars || w_a.len() != cfg.upper_air_channels() {
        return Err(Error::dim(format!(
            "{} surface and {} upper-air weights for {} and {} channels",
            w_s.len(),
            w_a.len(),
            cfg.surface_vars,
            cfg.upper_air_channels()
        )));
    }
    let cells = (cfg.global_height * cfg.global_width) as f64;
    let vars = (cfg.surface_vars + cfg.upper_air_vars) as f64;
    let levels = cfg.pressure_levels as f64;
    let mut w: Vec<f64> = w_a.iter().map(|&x| x / (cells * levels * vars)).collect();
    w.extend(w_s.iter().map(|&x| x / (cells * vars)));
    Ok(w)
}

/// Weighted MAE between two `H×W×C_pred` nodes.
pub fn global_weighted_mae(g: &mut Graph, cfg: &ModelConfig, pred: Var, truth: Var, w_s: &[f64], w_a: &[f64]) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) {
        return Err(Error::dim(format!("{:?} vs {:?}", g.shape(pred), g.shape(truth))));
    }
    let (h, w, c) = shape3(g, pred)?;
    if c != cfg.predicted_channels() {
        return Err(Error::dim(format!("{c} channels, expected {}", cfg.predicted_channels())));
    }
    let weights = global_loss_weights(cfg, w_s, w_a)?;
    let wv = g.constant(Tensor::from_vec(weights));
    let d = g.sub(pred, truth)?;
    let d = g.abs(d);
    let d = g.reshape(d, &[h * w, c])?;
    let d = g.mul_row(d, wv)?;
    Ok(g.sum(d))
}

/// Mean absolute error over cells and variables of two `h×w×V` nodes.
pub fn regional_mae(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) {
        return Err(Error::dim(format!("{:?} vs {:?}", g.shape(pred), g.shape(truth))));
    }
    let d = g.sub(pred, truth)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Per-variable MAE of `h×w×V` tensors (last axis is the variable).
pub fn mae_per_variable(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let v = pred.last_dim();
    let mut acc = vec![0.0; v];
    for (a, b) in pred.data().chunks(v).zip(truth.data().chunks(v)) {
        for k in 0..v {
            acc[k] += (a[k] - b[k]).abs();
        }
    }
    let cells = (pred.numel() / v) as f64;
    Ok(acc.into_iter().map(|x| x / cells).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_error_gives_unit_global_loss() {
        let mut cfg = ModelConfig::desk();
        cfg.global_height = 4;
        cfg.global_width = 4;
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 4, 6]));
        let b = g.constant(Tensor::ones(&[4, 4, 6]));
        let l = global_weighted_mae(&mut g, &cfg, a, b, &[1.0, 1.0], &[1.0; 4]).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-15);
        let z = global_weighted_mae(&mut g, &cfg, a, a, &[1.0, 1.0], &[1.0; 4]).unwrap();
        assert_eq!(g.value(z).data()[0], 0.0);
        assert!(global_weighted_mae(&mut g, &cfg, a, b, &[1.0], &[1.0; 4]).is_err());
    }

    #[test]
    fn global_loss_is_linear_in_weights() {
        let mut cfg = ModelConfig::desk();
        cfg.global_height = 4;
        cfg.global_width = 4;
        let truth = Tensor::zeros(&[4, 4, 6]);
        let pred = Tensor::new(vec![4, 4, 6], (0..96).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap();
        let eval = |ws: &[f64]| {
            let mut g = Graph::new();
            let a = g.constant(pred.clone());
            let b = g.constant(truth.clone());
            let l = global_weighted_mae(&mut g, &cfg, a, b, ws, &[1.0; 4]).unwrap();
            g.value(l).data()[0]
        };
        let base = eval(&[1.0, 1.0]);
        let doubled = eval(&[2.0, 1.0]);
        let zeroed = eval(&[0.0, 1.0]);
        assert!(((doubled - base) - (base - zeroed)).abs() < 1e-14);
    }

    #[test]
    fn regional_mae_structure() {
        let a = Tensor::zeros(&[2, 3, 7]);
        let mut b = Tensor::zeros(&[2, 3, 7]);
        for cell in b.data_mut().chunks_mut(7) {
            cell[2] = 0.7;
        }
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let l1 = regional_mae(&mut g, x, y).unwrap();
        let l2 = regional_mae(&mut g, y, x).unwrap();
        assert!((g.value(l1).data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(g.value(l1), g.value(l2));
        let per = mae_per_variable(&b, &a).unwrap();
        assert!((per[2] - 0.7).abs() < 1e-15 && per[0] == 0.0);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::desk();
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_model(&cfg, 8).unwrap());
        let mut bad = cfg.clone();
        bad.blocks = 3;
        assert!(matches!(build_model(&bad, 7), Err(Error::Config { .. })));
    }

    #[test]
    fn variant_d_has_no_mixer_parameters() {
        let mut cfg = ModelConfig::desk();
        cfg.coupling = Coupling::None;
        assert!(param_layout(&cfg).specs().iter().all(|s| !s.name.starts_with("mixer")));
    }
}
