//! Regional encoder inputs, the ScaleMixer coupling module and the lead-time
//! specific regional prediction heads.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{Coupling, ModelConfig, Sampling, HISTORY_FRAMES, LEAD_HOURS};
use crate::error::{Error, Result};
use crate::field::TokenSequence;
use crate::nn::{self, AttentionShape, Init, ParamLayout, Session};
use crate::ops;
use crate::tensor::Tensor;

/// Correspondence between the regional token grid and the global token grid.
///
/// Global key-position coordinates are normalized to `[0, 1]²` over the global
/// token grid; regional token `(i, j)` sits exactly on global token
/// `(row0 + i, col0 + j)` because `p = 5·P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGeometry {
    pub global_grid: (usize, usize),
    pub regional_grid: (usize, usize),
    pub row0: usize,
    pub col0: usize,
}

impl RegionGeometry {
    pub fn new(global_grid: (usize, usize), regional_grid: (usize, usize), row0: usize, col0: usize) -> Result<Self> {
        if row0 + regional_grid.0 > global_grid.0 || col0 + regional_grid.1 > global_grid.1 {
            return Err(Error::geometry(format!(
                "{regional_grid:?} regional tokens at ({row0}, {col0}) exceed the {global_grid:?} global token grid"
            )));
        }
        Ok(Self { global_grid, regional_grid, row0, col0 })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.region_patch != crate::config::REFINEMENT * cfg.patch {
            return Err(Error::geometry(format!("regional patch {} is not 5× the global patch {}", cfg.region_patch, cfg.patch)));
        }
        Self::new(cfg.global_grid(), cfg.regional_grid(), cfg.region_token_row, cfg.region_token_col)
    }

    pub fn regional_tokens(&self) -> usize {
        self.regional_grid.0 * self.regional_grid.1
    }

    /// Row-major global token indices covering the region, in regional token order.
    pub fn aligned_indices(&self) -> Vec<usize> {
        let (rh, rw) = self.regional_grid;
        let gw = self.global_grid.1;
        (0..rh).flat_map(|i| (0..rw).map(move |j| (self.row0 + i) * gw + self.col0 + j)).collect()
    }

    /// Multipliers taking normalized coordinates to token indices.
    pub fn span(&self) -> (f64, f64) {
        (self.global_grid.0.saturating_sub(1).max(1) as f64, self.global_grid.1.saturating_sub(1).max(1) as f64)
    }

    /// Normalized coordinates of global token `index`.
    pub fn normalized_coord(&self, index: usize) -> [f64; 2] {
        let gw = self.global_grid.1;
        let (sr, sc) = self.span();
        [(index / gw) as f64 / sr, (index % gw) as f64 / sc]
    }

    /// Maps normalized global coordinates to (unclamped) regional token coordinates.
    pub fn to_regional(&self, c: [f64; 2]) -> [f64; 2] {
        let (sr, sc) = self.span();
        [c[0] * sr - self.row0 as f64, c[1] * sc - self.col0 as f64]
    }
}

/// Selected key positions inside a graph.
#[derive(Clone, Debug)]
pub struct KeyPositionSet {
    /// Selected global token indices, in selection order.
    pub indices: Vec<usize>,
    /// `m × 2` normalized coordinates (constant).
    pub coords: Var,
    /// `m` importance values `Pr[c]`.
    pub scores: Var,
    /// `m × d` embeddings `Pr[c] ⊙ S[c]`.
    pub embeddings: Var,
    /// `1 × N` importance distribution (adaptive mode only).
    pub distribution: Option<Var>,
}

/// Indices of the `m` largest values, descending, ties to the smaller index.
pub fn top_m(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// `m` positions on an evenly strided lattice whose aspect follows the grid.
pub fn fixed_grid_positions(grid: (usize, usize), m: usize) -> Vec<usize> {
    let (gh, gw) = grid;
    // Factor m = mr·mc with mr/mc closest to gh/gw; fall back to filling rows.
    let target = gh as f64 / gw as f64;
    let mut best: Option<(usize, usize)> = None;
    for mr in 1..=m {
        if m % mr != 0 {
            continue;
        }
        let mc = m / mr;
        if mr > gh || mc > gw {
            continue;
        }
        let err = ((mr as f64 / mc as f64).ln() - target.ln()).abs();
        if best.map_or(true, |(br, bc)| err < ((br as f64 / bc as f64).ln() - target.ln()).abs()) {
            best = Some((mr, mc));
        }
    }
    match best {
        Some((mr, mc)) => {
            let mut out = Vec::with_capacity(m);
            for a in 0..mr {
                let r = ((2 * a + 1) * gh) / (2 * mr);
                for b in 0..mc {
                    let c = ((2 * b + 1) * gw) / (2 * mc);
                    out.push(r * gw + c);
                }
            }
            out
        }
        None => {
            let n = gh * gw;
            (0..m).map(|i| (2 * i + 1) * n / (2 * m)).collect()
        }
    }
}

pub fn layout_regional_embed(cfg: &ModelConfig, layout: &mut ParamLayout) {
    let (p, v, d) = (cfg.region_patch, cfg.regional_vars, cfg.dim);
    layout.push("regional.patch.kernel", &[p, p, v, d], Init::Xavier);
    layout.push("regional.patch.bias", &[d], Init::Zeros);
    layout.push("regional.fuse.w", &[HISTORY_FRAMES * d, d], Init::BlockMean(HISTORY_FRAMES));
    layout.push("regional.fuse.b", &[d], Init::Zeros);
    layout.push("regional.static.kernel", &[p, p, 2, d], Init::Xavier);
    layout.push("regional.static.bias", &[d], Init::Zeros);
    nn::layout_mlp(layout, "regional.time", 4, d, d, false);
    layout.push("regional.pos", &[cfg.regional_tokens(), d], Init::Normal(0.02));
}

pub fn layout_mixer(cfg: &ModelConfig, layout: &mut ParamLayout, prefix: &str) {
    let d = cfg.dim;
    layout.linear(&format!("{prefix}.conv"), 9 * d, cfg.position_conv_channels, false);
    layout.linear(&format!("{prefix}.score"), cfg.position_conv_channels, 1, false);
    nn::layout_attention(
        layout,
        &format!("{prefix}.g2p"),
        AttentionShape { q_dim: d + 2, kv_dim: d, dim: d, out_dim: d + 2, heads: cfg.heads },
    );
    layout.linear(&format!("{prefix}.proj"), 2 * d, d, false);
    nn::layout_attention(
        layout,
        &format!("{prefix}.p2r"),
        AttentionShape { q_dim: d, kv_dim: d + 2, dim: d, out_dim: d, heads: cfg.heads },
    );
    nn::layout_mlp(layout, &format!("{prefix}.adapter"), 2 * d, d, d, true);
}

pub fn layout_heads(cfg: &ModelConfig, layout: &mut ParamLayout) {
    let width = 2 * cfg.dim;
    nn::layout_fourier(layout, "head.fourier", cfg.fourier_dim);
    nn::layout_ada_mlp(layout, "head.ada", cfg.fourier_dim, cfg.dim, width);
    let out = cfg.region_patch * cfg.region_patch * cfg.regional_vars;
    for dt in 1..=LEAD_HOURS {
        layout.linear(&format!("head{dt}.fc1"), width, cfg.head_hidden, false);
        layout.linear(&format!("head{dt}.fc2"), cfg.head_hidden, out, true);
    }
}

/// Graph inputs of a regional state.
#[derive(Clone, Debug)]
pub struct RegionalInputs {
    /// Six `h×w×V` frames, oldest first.
    pub history: Vec<Var>,
    /// `h×w×2`: topography then land-sea mask.
    pub statics: Var,
    /// `1×4` time encoding.
    pub time: Var,
}

/// Shared per-frame patchify, temporal fusion, static and time conditioning.
pub fn regional_patch_embed(s: &mut Session, cfg: &ModelConfig, inputs: &RegionalInputs) -> Result<TokenSequence> {
    if inputs.history.len() != HISTORY_FRAMES {
        return Err(Error::contract(format!("regional embedding needs {HISTORY_FRAMES} frames, got {}", inputs.history.len())));
    }
    let kernel = s.p("regional.patch.kernel")?;
    let bias = s.p("regional.patch.bias")?;
    let mut per_frame = Vec::with_capacity(HISTORY_FRAMES);
    for &frame in &inputs.history {
        per_frame.push(ops::conv2d_patchify(&mut s.g, frame, kernel, bias, cfg.region_patch)?);
    }
    let stacked = s.g.concat_cols(&per_frame)?;
    let fused = nn::linear(s, "regional.fuse", stacked)?;
    let sk = s.p("regional.static.kernel")?;
    let sb = s.p("regional.static.bias")?;
    let stat = ops::conv2d_patchify(&mut s.g, inputs.statics, sk, sb, cfg.region_patch)?;
    let x = s.g.add(fused, stat)?;
    let t = nn::mlp(s, "regional.time", inputs.time)?;
    let x = s.g.add_row(x, t)?;
    let pos = s.p("regional.pos")?;
    let tokens = s.g.add(x, pos)?;
    Ok(TokenSequence { tokens, grid: cfg.regional_grid() })
}

/// Adaptive importance distribution `Softmax(Linear(GELU(Conv3×3(S))))` as a `1×N` row.
pub fn importance_scores(s: &mut Session, prefix: &str, seq: TokenSequence) -> Result<Var> {
    let cols = s.g.unfold3x3(seq.tokens, seq.grid)?;
    let h = nn::linear(s, &format!("{prefix}.conv"), cols)?;
    let h = s.g.gelu(h);
    let logits = nn::linear(s, &format!("{prefix}.score"), h)?;
    let row = s.g.reshape(logits, &[1, seq.len()])?;
    s.g.softmax(row)
}

pub fn identify_key_positions(
    s: &mut Session,
    prefix: &str,
    seq: TokenSequence,
    geom: &RegionGeometry,
    m: usize,
    mode: Sampling,
    rng: &mut ChaCha8Rng,
) -> Result<KeyPositionSet> {
    let n = seq.len();
    if m > n {
        return Err(Error::config("key_positions", format!("{m} key positions requested from {n} tokens")));
    }
    let (indices, scores, distribution) = match mode {
        Sampling::Adaptive => {
            let pr = importance_scores(s, prefix, seq)?;
            let indices = top_m(s.g.value(pr).data(), m);
            let col = s.g.reshape(pr, &[n, 1])?;
            let picked = s.g.gather_rows(col, &indices)?;
            (indices, picked, Some(pr))
        }
        Sampling::Random | Sampling::FixedGrid => {
            let indices = if mode == Sampling::Random { sample(rng, n, m).into_vec() } else { fixed_grid_positions(seq.grid, m) };
            let uniform = s.constant(Tensor::full(&[m, 1], 1.0 / n as f64));
            (indices, uniform, None)
        }
    };
    let gathered = s.g.gather_rows(seq.tokens, &indices)?;
    let embeddings = s.g.mul_col(gathered, scores)?;
    let coords: Vec<f64> = indices.iter().flat_map(|&i| geom.normalized_coord(i)).collect();
    let coords = s.constant(Tensor::new(vec![m, 2], coords)?);
    Ok(KeyPositionSet { indices, coords, scores, embeddings, distribution })
}

/// Everything observable inside one ScaleMixer application.
#[derive(Clone, Debug)]
pub struct MixerTrace {
    pub keys: KeyPositionSet,
    /// Per-head weights of the global-to-position attention.
    pub g2p_weights: Vec<Var>,
    /// Per-head weights of the position-to-regional attention.
    pub p2r_weights: Vec<Var>,
    pub h_global: Var,
    pub coords_updated: Var,
    pub h_refined: Var,
}

/// `h_global ‖ c′ = h‖c + Glo-to-Pos(h‖c, S, S)`.
pub fn global_to_position(
    s: &mut Session,
    cfg: &ModelConfig,
    prefix: &str,
    keys: &KeyPositionSet,
    seq: TokenSequence,
) -> Result<(Var, Var, Vec<Var>)> {
    let d = s.g.value(keys.embeddings).last_dim();
    let q = s.g.concat_cols(&[keys.embeddings, keys.coords])?;
    let att = nn::multi_head_attention(s, &format!("{prefix}.g2p"), q, seq.tokens, cfg.heads, cfg.attn_scale)?;
    let updated = s.g.add(q, att.out)?;
    let h_global = s.g.slice_cols(updated, 0, d)?;
    let coords = s.g.slice_cols(updated, d, 2)?;
    Ok((h_global, coords, att.weights))
}

/// Maps normalized global coordinates (`m×2` node) to regional token coordinates.
fn regional_coords(s: &mut Session, geom: &RegionGeometry, coords: Var) -> Result<Var> {
    let (sr, sc) = geom.span();
    let scale = s.constant(Tensor::from_vec(vec![sr, sc]));
    let shift = s.constant(Tensor::from_vec(vec![-(geom.row0 as f64), -(geom.col0 as f64)]));
    let scaled = s.g.mul_row(coords, scale)?;
    s.g.add_row(scaled, shift)
}

/// `h′ = Proj(Bilinear(s, c′) ‖ h_global)`; out-of-region coordinates clamp to the boundary.
pub fn refine_with_regional(
    s: &mut Session,
    prefix: &str,
    h_global: Var,
    coords: Var,
    regional: TokenSequence,
    geom: &RegionGeometry,
) -> Result<Var> {
    let d = s.g.value(regional.tokens).last_dim();
    let (rh, rw) = regional.grid;
    let field = s.g.reshape(regional.tokens, &[rh, rw, d])?;
    let local = regional_coords(s, geom, coords)?;
    let sampled = s.g.bilinear_sample(field, local)?;
    let joined = s.g.concat_cols(&[sampled, h_global])?;
    nn::linear(s, &format!("{prefix}.proj"), joined)
}

/// `s′ = s + Pos-to-Reg(s, h′‖c′, h′‖c′)`.
pub fn position_to_regional(
    s: &mut Session,
    cfg: &ModelConfig,
    prefix: &str,
    regional: TokenSequence,
    h_refined: Var,
    coords: Var,
) -> Result<(TokenSequence, Vec<Var>)> {
    let kv = s.g.concat_cols(&[h_refined, coords])?;
    let att = nn::multi_head_attention(s, &format!("{prefix}.p2r"), regional.tokens, kv, cfg.heads, cfg.attn_scale)?;
    let tokens = s.g.add(regional.tokens, att.out)?;
    Ok((TokenSequence { tokens, ..regional }, att.weights))
}

/// `S″_aligned = S_aligned + Adapter(S_aligned ‖ s′)`.
pub fn adapt_global(s: &mut Session, prefix: &str, aligned: Var, regional: Var) -> Result<Var> {
    let (a, b) = (s.g.shape(aligned)[0], s.g.shape(regional)[0]);
    if a != b {
        return Err(Error::geometry(format!("{a} aligned global tokens for {b} regional tokens")));
    }
    let joined = s.g.concat_cols(&[aligned, regional])?;
    let delta = nn::mlp(s, &format!("{prefix}.adapter"), joined)?;
    s.g.add(aligned, delta)
}

/// The global tokens coextensive with the region, `n×d`.
pub fn aligned_tokens(s: &mut Session, global: TokenSequence, geom: &RegionGeometry) -> Result<Var> {
    s.g.gather_rows(global.tokens, &geom.aligned_indices())
}

/// One ScaleMixer: identify → Glo-to-Pos → refine → Pos-to-Reg → (bidirectional) adapt.
#[allow(clippy::too_many_arguments)]
pub fn scalemixer_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    prefix: &str,
    global: TokenSequence,
    regional: TokenSequence,
    geom: &RegionGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenSequence, TokenSequence, MixerTrace)> {
    let keys = identify_key_positions(s, prefix, global, geom, cfg.key_positions, cfg.sampling, rng)?;
    let (h_global, coords, g2p_weights) = global_to_position(s, cfg, prefix, &keys, global)?;
    let h_refined = refine_with_regional(s, prefix, h_global, coords, regional, geom)?;
    let (regional_out, p2r_weights) = position_to_regional(s, cfg, prefix, regional, h_refined, coords)?;
    let global_out = match cfg.coupling {
        Coupling::Bidirectional => {
            let idx = geom.aligned_indices();
            let aligned = s.g.gather_rows(global.tokens, &idx)?;
            let adapted = adapt_global(s, prefix, aligned, regional_out.tokens)?;
            let tokens = s.g.scatter_rows(global.tokens, adapted, &idx)?;
            TokenSequence { tokens, ..global }
        }
        Coupling::Unidirectional | Coupling::None => global,
    };
    let trace = MixerTrace { keys, g2p_weights, p2r_weights, h_global, coords_updated: coords, h_refined };
    Ok((global_out, regional_out, trace))
}

/// Lead-time head: AdaLN over `s ‖ S_aligned`, hidden layer, deconvolution to
/// `h×w×V`, added to the most recent input frame.
pub fn regional_prediction_head(
    s: &mut Session,
    cfg: &ModelConfig,
    regional: TokenSequence,
    aligned: Var,
    dt: usize,
    last_frame: Var,
) -> Result<Var> {
    if !(1..=LEAD_HOURS).contains(&dt) {
        return Err(Error::contract(format!("lead time {dt} h outside 1..={LEAD_HOURS}")));
    }
    let x = s.g.concat_cols(&[regional.tokens, aligned])?;
    let x = nn::ada_layer_norm(s, x, dt as f64, "head.fourier", "head.ada")?;
    let x = nn::linear(s, &format!("head{dt}.fc1"), x)?;
    let x = s.g.gelu(x);
    let w = s.p(&format!("head{dt}.fc2.w"))?;
    let b = s.p(&format!("head{dt}.fc2.b"))?;
    let inc = ops::deconv2d_unpatchify(&mut s.g, x, w, b, regional.grid, cfg.region_patch, cfg.regional_vars)?;
    s.g.add(last_frame, inc)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::nn::ParamStore;

    fn toy_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.global_height = 16;
        cfg.global_width = 16;
        cfg.patch = 4;
        cfg.region_patch = 20;
        cfg.regional_height = 40;
        cfg.regional_width = 40;
        cfg.region_token_row = 1;
        cfg.region_token_col = 1;
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.global_layers = 2;
        cfg.blocks = 1;
        cfg.key_positions = 3;
        cfg.position_conv_channels = 4;
        cfg.head_hidden = 6;
        cfg.fourier_dim = 4;
        cfg
    }

    fn mixer_params(cfg: &ModelConfig, seed: u64, activate: bool) -> ParamStore {
        let mut layout = ParamLayout::new();
        layout_mixer(cfg, &mut layout, "mixer0");
        let mut store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(seed));
        if activate {
            for (_, t) in store.iter_mut() {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    if *v == 0.0 {
                        *v = 0.05 * (((i * 31) % 11) as f64 - 5.0);
                    }
                }
            }
        }
        store
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn geometry_alignment() {
        let cfg = ModelConfig::desk();
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        assert_eq!(cfg.regional_tokens(), 6);
        let idx = geom.aligned_indices();
        assert_eq!(idx, vec![3 * 16 + 7, 3 * 16 + 8, 3 * 16 + 9, 4 * 16 + 7, 4 * 16 + 8, 4 * 16 + 9]);
        for (k, &i) in idx.iter().enumerate() {
            let r = geom.to_regional(geom.normalized_coord(i));
            assert!((r[0] - (k / 3) as f64).abs() < 1e-12 && (r[1] - (k % 3) as f64).abs() < 1e-12);
        }
        assert!(RegionGeometry::new((4, 4), (2, 2), 3, 0).is_err());
    }

    #[test]
    fn top_m_examples() {
        assert_eq!(top_m(&[0.4, 0.1, 0.3, 0.2], 2), vec![0, 2]);
        assert_eq!(top_m(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(top_m(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn fixed_grid_is_strided_and_distinct() {
        let pos = fixed_grid_positions((8, 16), 8);
        assert_eq!(pos.len(), 8);
        let mut sorted = pos.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        // 2 rows × 4 columns of an 8×16 grid.
        assert_eq!(pos, vec![2 * 16 + 2, 2 * 16 + 6, 2 * 16 + 10, 2 * 16 + 14, 6 * 16 + 2, 6 * 16 + 6, 6 * 16 + 10, 6 * 16 + 14]);
        let odd = fixed_grid_positions((3, 3), 7);
        let mut o = odd.clone();
        o.sort();
        o.dedup();
        assert_eq!(o.len(), 7);
    }

    #[test]
    fn identical_tokens_give_uniform_scores_and_lattice_selection() {
        let cfg = toy_cfg();
        let store = mixer_params(&cfg, 1, true);
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        let mut s = Session::inference(&store);
        let n = cfg.global_tokens();
        // Zero tokens keep the 3×3 neighbourhood identical even at borders.
        let t = s.constant(Tensor::zeros(&[n, cfg.dim]));
        let seq = TokenSequence { tokens: t, grid: cfg.global_grid() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = identify_key_positions(&mut s, "mixer0", seq, &geom, 3, Sampling::Adaptive, &mut rng).unwrap();
        let pr = s.g.value(k.distribution.unwrap()).clone();
        for &v in pr.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-15);
        }
        assert_eq!(k.indices, vec![0, 1, 2]);
    }

    #[test]
    fn embeddings_are_score_scaled_tokens() {
        let cfg = toy_cfg();
        let store = mixer_params(&cfg, 2, true);
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        let mut s = Session::inference(&store);
        let n = cfg.global_tokens();
        let t = s.constant(tokens(n, cfg.dim, 3));
        let seq = TokenSequence { tokens: t, grid: cfg.global_grid() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = identify_key_positions(&mut s, "mixer0", seq, &geom, 3, Sampling::Adaptive, &mut rng).unwrap();
        let pr = s.g.value(k.distribution.unwrap()).clone();
        assert!((pr.sum() - 1.0).abs() < 1e-12);
        assert_eq!(k.indices, top_m(pr.data(), 3));
        let h = s.g.value(k.embeddings);
        let tv = s.g.value(t);
        for (r, &i) in k.indices.iter().enumerate() {
            for j in 0..cfg.dim {
                assert_eq!(h.at(&[r, j]), pr.data()[i] * tv.at(&[i, j]));
            }
        }
        assert!(identify_key_positions(&mut s, "mixer0", seq, &geom, n + 1, Sampling::Adaptive, &mut rng).is_err());
    }

    #[test]
    fn random_and_fixed_modes() {
        let cfg = toy_cfg();
        let store = mixer_params(&cfg, 2, true);
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        let mut s = Session::inference(&store);
        let n = cfg.global_tokens();
        let t = s.constant(tokens(n, cfg.dim, 3));
        let seq = TokenSequence { tokens: t, grid: cfg.global_grid() };
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ka = identify_key_positions(&mut s, "mixer0", seq, &geom, 5, Sampling::Random, &mut a).unwrap();
        let kb = identify_key_positions(&mut s, "mixer0", seq, &geom, 5, Sampling::Random, &mut b).unwrap();
        assert_eq!(ka.indices, kb.indices);
        let mut u = ka.indices.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 5);
        assert!(s.g.value(ka.scores).data().iter().all(|&v| v == 1.0 / n as f64));
        let kf = identify_key_positions(&mut s, "mixer0", seq, &geom, 4, Sampling::FixedGrid, &mut a).unwrap();
        assert_eq!(kf.indices, fixed_grid_positions(cfg.global_grid(), 4));
    }

    fn run_mixer(cfg: &ModelConfig, store: &ParamStore) -> (Tensor, Tensor, Tensor, Tensor) {
        let geom = RegionGeometry::from_config(cfg).unwrap();
        let mut s = Session::inference(store);
        let gt = tokens(cfg.global_tokens(), cfg.dim, 5);
        let rt = tokens(cfg.regional_tokens(), cfg.dim, 6);
        let g = s.constant(gt.clone());
        let r = s.constant(rt.clone());
        let global = TokenSequence { tokens: g, grid: cfg.global_grid() };
        let regional = TokenSequence { tokens: r, grid: cfg.regional_grid() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (go, ro, _) = scalemixer_forward(&mut s, cfg, "mixer0", global, regional, &geom, &mut rng).unwrap();
        (gt, rt, s.g.value(go.tokens).clone(), s.g.value(ro.tokens).clone())
    }

    #[test]
    fn mixer_is_identity_at_init() {
        let cfg = toy_cfg();
        let store = mixer_params(&cfg, 4, false);
        let (gt, rt, go, ro) = run_mixer(&cfg, &store);
        assert_eq!(gt, go);
        assert_eq!(rt, ro);
    }

    #[test]
    fn unidirectional_leaves_global_untouched_and_locality_of_write_back() {
        let mut cfg = toy_cfg();
        let store = mixer_params(&cfg, 4, true);
        let (gt, rt, go, ro) = run_mixer(&cfg, &store);
        assert_ne!(rt, ro);
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        let aligned = geom.aligned_indices();
        for i in 0..cfg.global_tokens() {
            let changed = (0..cfg.dim).any(|j| gt.at(&[i, j]) != go.at(&[i, j]));
            assert_eq!(changed, aligned.contains(&i), "token {i}");
        }
        cfg.coupling = Coupling::Unidirectional;
        let (gt, _, go, ro2) = run_mixer(&cfg, &store);
        assert_eq!(gt, go);
        assert_eq!(ro, ro2);
    }

    #[test]
    fn refine_samples_token_centres_and_clamps() {
        let cfg = toy_cfg();
        let geom = RegionGeometry::from_config(&cfg).unwrap();
        let d = cfg.dim;
        let mut store = ParamStore::new();
        // Projection selecting the sampled half.
        let mut w = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w.set(&[i, i], 1.0);
        }
        store.insert("mixer0.proj.w", w);
        store.insert("mixer0.proj.b", Tensor::zeros(&[d]));
        let mut s = Session::inference(&store);
        let rt = tokens(cfg.regional_tokens(), d, 7);
        let r = s.constant(rt.clone());
        let regional = TokenSequence { tokens: r, grid: cfg.regional_grid() };
        let hg = s.constant(tokens(3, d, 8));
        // Regional token (1, 0), then far outside (clamps to (1, 1)), then outside to the top-left.
        let c0 = geom.normalized_coord(2 * 4 + 1);
        let coords = s.constant(Tensor::new(vec![3, 2], vec![c0[0], c0[1], 2.0, 2.0, -1.0, -1.0]).unwrap());
        let out = refine_with_regional(&mut s, "mixer0", hg, coords, regional, &geom).unwrap();
        let v = s.g.value(out);
        for j in 0..d {
            assert!((v.at(&[0, j]) - rt.at(&[2, j])).abs() < 1e-12);
            assert!((v.at(&[1, j]) - rt.at(&[3, j])).abs() < 1e-12);
            assert!((v.at(&[2, j]) - rt.at(&[0, j])).abs() < 1e-12);
        }
    }

    #[test]
    fn head_shapes_residual_and_lead_conditioning() {
        let cfg = ModelConfig::desk();
        let mut layout = ParamLayout::new();
        layout_heads(&cfg, &mut layout);
        let mut store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(1));
        let last = Tensor::new(vec![40, 60, 7], (0..16800).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        {
            let mut s = Session::inference(&store);
            let reg = s.constant(tokens(6, cfg.dim, 1));
            let al = s.constant(tokens(6, cfg.dim, 2));
            let lf = s.constant(last.clone());
            let seq = TokenSequence { tokens: reg, grid: (2, 3) };
            let out = regional_prediction_head(&mut s, &cfg, seq, al, 3, lf).unwrap();
            assert_eq!(s.g.value(out), &last);
            assert!(regional_prediction_head(&mut s, &cfg, seq, al, 0, lf).is_err());
            assert!(regional_prediction_head(&mut s, &cfg, seq, al, 7, lf).is_err());
        }

        for (name, t) in store.iter_mut() {
            if name.starts_with("head.ada.fc2") || name.ends_with("fc2.w") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * (((i * 13) % 7) as f64 - 3.0);
                }
            }
        }
        // Identical head weights for two lead times: only the AdaLN condition differs.
        let h1: Vec<(String, Tensor)> =
            store.iter().filter(|(n, _)| n.starts_with("head1.")).map(|(n, t)| (n.replacen("head1.", "head2.", 1), t.clone())).collect();
        for (n, t) in h1 {
            store.insert(n, t);
        }
        let mut s = Session::inference(&store);
        let reg = s.constant(tokens(6, cfg.dim, 1));
        let al = s.constant(tokens(6, cfg.dim, 2));
        let lf = s.constant(last.clone());
        let seq = TokenSequence { tokens: reg, grid: (2, 3) };
        let a = regional_prediction_head(&mut s, &cfg, seq, al, 1, lf).unwrap();
        let b = regional_prediction_head(&mut s, &cfg, seq, al, 2, lf).unwrap();
        assert_eq!(s.g.shape(a), &[40, 60, 7]);
        assert_ne!(s.g.value(a), s.g.value(b));
    }

    #[test]
    fn patch_embed_fusion_averages_identical_frames() {
        let mut cfg = ModelConfig::desk();
        cfg.dim = 8;
        let mut layout = ParamLayout::new();
        layout_regional_embed(&cfg, &mut layout);
        let mut store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(2));
        for name in ["regional.static.kernel", "regional.time.fc1.w", "regional.time.fc2.w", "regional.pos"] {
            let z = Tensor::zeros(store.get(name).unwrap().shape());
            store.insert(name, z);
        }
        let frame = Tensor::new(vec![40, 60, 7], (0..16800).map(|i| (i as f64 * 0.003).cos()).collect()).unwrap();
        let mut s = Session::inference(&store);
        let f = s.constant(frame.clone());
        let statics = s.constant(Tensor::ones(&[40, 60, 2]));
        let time = s.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let inputs = RegionalInputs { history: vec![f; 6], statics, time };
        let seq = regional_patch_embed(&mut s, &cfg, &inputs).unwrap();
        assert_eq!(s.g.shape(seq.tokens), &[6, 8]);
        let k = s.p("regional.patch.kernel").unwrap();
        let b = s.p("regional.patch.bias").unwrap();
        let single = ops::conv2d_patchify(&mut s.g, f, k, b, 20).unwrap();
        let diff = s.g.value(seq.tokens).max_abs_diff(s.g.value(single));
        assert!(diff < 1e-12, "{diff}");
        let short = RegionalInputs { history: vec![f; 5], statics, time };
        assert!(regional_patch_embed(&mut s, &cfg, &short).is_err());
    }
}
