//! The ViT global forecaster: patch embedding, an `M`-layer encoder exposed
//! as composable layer ranges, and a residual 6-hour prediction head.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::field::TokenSequence;
use crate::nn::{self, EncoderSpec, Init, ParamLayout, Session};
use crate::ops;

pub const PREFIX: &str = "global.";

pub fn layout_global(cfg: &ModelConfig, layout: &mut ParamLayout) {
    let (p, c, d) = (cfg.patch, cfg.global_channels(), cfg.dim);
    layout.push("global.patch.kernel", &[p, p, c, d], Init::Xavier);
    layout.push("global.patch.bias", &[d], Init::Zeros);
    layout.push("global.pos", &[cfg.global_tokens(), d], Init::Normal(0.02));
    for i in 0..cfg.global_layers {
        nn::layout_encoder_layer(layout, &format!("global.layer{i}"), d, cfg.mlp_ratio, cfg.heads);
    }
    layout.norm("global.norm", d);
    layout.linear("global.head.fc1", d, cfg.global_head_hidden, false);
    layout.linear("global.head.fc2", cfg.global_head_hidden, p * p * cfg.predicted_channels(), true);
}

pub fn encoder_spec(cfg: &ModelConfig) -> EncoderSpec {
    EncoderSpec { heads: cfg.heads, scale: cfg.attn_scale, dropout: cfg.dropout, drop_path: cfg.drop_path }
}

/// Patchify the `H×W×C` state and add the learned position embedding.
pub fn global_patch_embed(s: &mut Session, cfg: &ModelConfig, state: Var) -> Result<TokenSequence> {
    let kernel = s.p("global.patch.kernel")?;
    let bias = s.p("global.patch.bias")?;
    let tokens = ops::conv2d_patchify(&mut s.g, state, kernel, bias, cfg.patch)?;
    let pos = s.p("global.pos")?;
    let tokens = s.g.add(tokens, pos)?;
    Ok(TokenSequence { tokens, grid: cfg.global_grid() })
}

/// Applies encoder layers `[from, to)`.
pub fn encode_range(s: &mut Session, cfg: &ModelConfig, seq: TokenSequence, from: usize, to: usize) -> Result<TokenSequence> {
    if from > to || to > cfg.global_layers {
        return Err(Error::contract(format!("layer range [{from}, {to}) outside [0, {}]", cfg.global_layers)));
    }
    let spec = encoder_spec(cfg);
    let mut x = seq.tokens;
    for i in from..to {
        x = nn::encoder_layer(s, &format!("global.layer{i}"), x, spec)?;
    }
    Ok(TokenSequence { tokens: x, ..seq })
}

/// Decodes tokens back to `H×W×C_pred` and adds the predicted channels of
/// the input state, so the head learns the 6-hour increment.
pub fn global_prediction_head(s: &mut Session, cfg: &ModelConfig, seq: TokenSequence, state: Var) -> Result<Var> {
    if seq.grid != cfg.global_grid() || s.g.shape(seq.tokens)[0] != seq.len() {
        return Err(Error::geometry(format!(
            "{} tokens on grid {:?}, expected grid {:?}",
            s.g.shape(seq.tokens)[0],
            seq.grid,
            cfg.global_grid()
        )));
    }
    let x = nn::layer_norm(s, "global.norm", seq.tokens)?;
    let x = nn::linear(s, "global.head.fc1", x)?;
    let x = s.g.gelu(x);
    let w = s.p("global.head.fc2.w")?;
    let b = s.p("global.head.fc2.b")?;
    let c_pred = cfg.predicted_channels();
    let inc = ops::deconv2d_unpatchify(&mut s.g, x, w, b, seq.grid, cfg.patch, c_pred)?;
    let base = dynamic_channels(s, cfg, state)?;
    s.g.add(base, inc)
}

/// Predicted channels of an `H×W×C` state node.
pub fn dynamic_channels(s: &mut Session, cfg: &ModelConfig, state: Var) -> Result<Var> {
    let (h, w, c) = (cfg.global_height, cfg.global_width, cfg.global_channels());
    let c_pred = cfg.predicted_channels();
    if c_pred == c {
        return Ok(state);
    }
    let flat = s.g.reshape(state, &[h * w, c])?;
    let dynamic = s.g.slice_cols(flat, 0, c_pred)?;
    s.g.reshape(dynamic, &[h, w, c_pred])
}

/// `Û = head(encode(patch_embed(U)))` over the full layer range.
pub fn global_forward(s: &mut Session, cfg: &ModelConfig, state: Var) -> Result<Var> {
    let seq = global_patch_embed(s, cfg, state)?;
    let seq = encode_range(s, cfg, seq, 0, cfg.global_layers)?;
    global_prediction_head(s, cfg, seq, state)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.global_height = 8;
        cfg.global_width = 12;
        cfg.patch = 2;
        cfg.region_patch = 10;
        cfg.regional_height = 10;
        cfg.regional_width = 10;
        cfg.region_token_row = 0;
        cfg.region_token_col = 0;
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.global_layers = 4;
        cfg.blocks = 2;
        cfg.key_positions = 4;
        cfg
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut layout = ParamLayout::new();
        layout_global(cfg, &mut layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = layout.materialize(&mut rng);
        // Make every residual branch active.
        for (_, t) in store.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.01 * ((i * 7919 % 13) as f64 - 6.0);
                }
            }
        }
        store
    }

    fn state(cfg: &ModelConfig) -> Tensor {
        let n = cfg.global_height * cfg.global_width * cfg.global_channels();
        Tensor::new(vec![cfg.global_height, cfg.global_width, cfg.global_channels()], (0..n).map(|i| ((i as f64) * 0.37).sin()).collect())
            .unwrap()
    }

    #[test]
    fn desk_and_paper_token_counts() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.global_tokens(), 128);
        let paper = ModelConfig::paper_scale();
        assert_eq!(paper.global_tokens(), 28_800);
        assert_eq!(cfg.predicted_channels(), 6);
    }

    #[test]
    fn patch_embed_shapes_and_zero_case() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        store.insert("global.patch.kernel", Tensor::zeros(&[4, 4, 8, 32]));
        store.insert("global.patch.bias", Tensor::zeros(&[32]));
        store.insert("global.pos", Tensor::zeros(&[128, 32]));
        let mut s = Session::inference(&store);
        let u = s.constant(Tensor::ones(&[32, 64, 8]));
        let seq = global_patch_embed(&mut s, &cfg, u).unwrap();
        assert_eq!(s.g.shape(seq.tokens), &[128, 32]);
        assert!(s.g.value(seq.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_range_composes_exactly() {
        let cfg = small_cfg();
        let store = params(&cfg, 1);
        let mut s = Session::inference(&store);
        let u = s.constant(state(&cfg));
        let seq = global_patch_embed(&mut s, &cfg, u).unwrap();
        let empty = encode_range(&mut s, &cfg, seq, 0, 0).unwrap();
        assert_eq!(empty.tokens, seq.tokens);
        let a = encode_range(&mut s, &cfg, seq, 0, 2).unwrap();
        let ab = encode_range(&mut s, &cfg, a, 2, 4).unwrap();
        let full = encode_range(&mut s, &cfg, seq, 0, 4).unwrap();
        assert_eq!(s.g.value(ab.tokens), s.g.value(full.tokens));
        assert!(encode_range(&mut s, &cfg, seq, 3, 5).is_err());
        assert!(encode_range(&mut s, &cfg, seq, 3, 2).is_err());
    }

    #[test]
    fn zero_residual_layers_are_identity() {
        let cfg = small_cfg();
        let mut layout = ParamLayout::new();
        layout_global(&cfg, &mut layout);
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(3));
        let mut s = Session::inference(&store);
        let u = s.constant(state(&cfg));
        let seq = global_patch_embed(&mut s, &cfg, u).unwrap();
        let out = encode_range(&mut s, &cfg, seq, 0, cfg.global_layers).unwrap();
        assert_eq!(s.g.value(out.tokens), s.g.value(seq.tokens));

        // Zero head: the forecast is the input's dynamic channels.
        let pred = global_forward(&mut s, &cfg, u).unwrap();
        assert_eq!(s.g.shape(pred), &[8, 12, cfg.predicted_channels()]);
        let expected = crate::field::split_channels(&state(&cfg), cfg.predicted_channels()).0;
        assert_eq!(s.g.value(pred), &expected);
    }

    #[test]
    fn forward_is_deterministic_and_matches_manual_pipeline() {
        let cfg = small_cfg();
        let store = params(&cfg, 2);
        let run = || {
            let mut s = Session::inference(&store);
            let u = s.constant(state(&cfg));
            let out = global_forward(&mut s, &cfg, u).unwrap();
            s.g.value(out).clone()
        };
        let a = run();
        assert_eq!(a, run());

        let mut s = Session::inference(&store);
        let u = s.constant(state(&cfg));
        let seq = global_patch_embed(&mut s, &cfg, u).unwrap();
        let mut seq = seq;
        for b in 0..cfg.blocks {
            let l = cfg.layers_per_block();
            seq = encode_range(&mut s, &cfg, seq, b * l, (b + 1) * l).unwrap();
        }
        let manual = global_prediction_head(&mut s, &cfg, seq, u).unwrap();
        assert_eq!(s.g.value(manual), &a);
    }

    #[test]
    fn head_rejects_wrong_geometry() {
        let cfg = small_cfg();
        let store = params(&cfg, 4);
        let mut s = Session::inference(&store);
        let u = s.constant(state(&cfg));
        let bad = s.constant(Tensor::zeros(&[5, cfg.dim]));
        let seq = TokenSequence { tokens: bad, grid: (1, 5) };
        assert!(matches!(global_prediction_head(&mut s, &cfg, seq, u), Err(Error::Geometry(_))));
    }

    #[test]
    fn loss_gradient_reaches_patch_kernel() {
        let cfg = small_cfg();
        let store = params(&cfg, 5);
        let target = state(&cfg).map(|v| 0.5 * v);
        let loss_of = |store: &ParamStore| -> f64 {
            let mut s = Session::inference(store);
            let u = s.constant(state(&cfg));
            let out = global_forward(&mut s, &cfg, u).unwrap();
            let t = s.constant(crate::field::split_channels(&target, cfg.predicted_channels()).0);
            let d = s.g.sub(out, t).unwrap();
            let d = s.g.square(d);
            let l = s.g.mean(d);
            s.g.value(l).data()[0]
        };
        let mut s = Session::training(&store, |n| n == "global.patch.kernel");
        let u = s.constant(state(&cfg));
        let out = global_forward(&mut s, &cfg, u).unwrap();
        let t = s.constant(crate::field::split_channels(&target, cfg.predicted_channels()).0);
        let d = s.g.sub(out, t).unwrap();
        let d = s.g.square(d);
        let l = s.g.mean(d);
        let grads = s.g.backward(l).unwrap();
        let kv = s.bound().iter().find(|(n, _)| n == "global.patch.kernel").unwrap().1;
        let analytic = grads.wrt(kv).unwrap();
        assert!(analytic.data().iter().any(|&v| v != 0.0));
        for idx in [0usize, 17, 101, 250] {
            let h = 1e-5;
            let mut up = store.clone();
            up.get_mut("global.patch.kernel").unwrap().data_mut()[idx] += h;
            let mut dn = store.clone();
            dn.get_mut("global.patch.kernel").unwrap().data_mut()[idx] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
            let rel = crate::gradcheck::relative_error(analytic.data()[idx], fd);
            assert!(rel < 1e-4, "idx {idx}: {} vs {fd}", analytic.data()[idx]);
        }
    }
}
