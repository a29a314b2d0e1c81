use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scalemixer_core::config::{Coupling, ModelConfig, RunConfig, Sampling, HISTORY_FRAMES};
use scalemixer_core::data::dataset::generate_synthetic;
use scalemixer_core::field::{GlobalState, RegionalState, Timestamp};
use scalemixer_core::forecaster::{self, StepInputs};
use scalemixer_core::mixer::{self, top_m, RegionGeometry};
use scalemixer_core::nn::{self, ParamStore, Session};
use scalemixer_core::train::{self, TrainContext};
use scalemixer_core::{global, Tensor};

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (GlobalState, RegionalState) {
    let u = GlobalState::new(normal(&[cfg.global_height, cfg.global_width, cfg.global_channels()], rng), cfg).unwrap();
    let frame = [cfg.regional_height, cfg.regional_width, cfg.regional_vars];
    let history = (0..HISTORY_FRAMES).map(|_| normal(&frame, rng)).collect();
    let topo = normal(&[cfg.regional_height, cfg.regional_width, 1], rng);
    let lsm = Tensor::full(&[cfg.regional_height, cfg.regional_width, 1], 1.0);
    let r = RegionalState::new(history, topo, lsm, Timestamp::from_hours(40, 18), cfg).unwrap();
    (u, r)
}

fn jittered(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut p = forecaster::build_model(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

#[test]
fn identity_at_init_for_step_and_eight_step_rollout() {
    for cfg in [ModelConfig::desk(), RunConfig::toy().model] {
        let params = forecaster::build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (u, r) = inputs(&cfg, &mut rng);
        let want_global = u.dynamic_channels(&cfg);
        let want_regional = r.last_frame().clone();

        let step = forecaster::forward_step(&params, &cfg, &u, &r, &mut rng).unwrap();
        assert_eq!(step.global, want_global);
        assert!(step.regional.iter().all(|f| *f == want_regional));

        let bundles = forecaster::rollout(&params, &cfg, &u, &r, 8, &mut rng).unwrap();
        assert_eq!(bundles.len(), 8);
        for b in &bundles {
            assert_eq!(b.global, want_global);
            assert_eq!(b.regional.len(), 6);
            assert!(b.regional.iter().all(|f| *f == want_regional));
        }
    }
}

#[test]
fn one_step_rollout_equals_forward_step() {
    let cfg = RunConfig::toy().model;
    let params = jittered(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (u, r) = inputs(&cfg, &mut rng);
    let a = forecaster::forward_step(&params, &cfg, &u, &r, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forecaster::rollout(&params, &cfg, &u, &r, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(vec![a.clone()], b);
    assert_ne!(a.regional[0], *r.last_frame());
}

#[test]
fn unidirectional_coupling_leaves_global_stream_untouched() {
    let base = RunConfig::toy().model;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (u, r) = inputs(&base, &mut rng);
    let standalone = |cfg: &ModelConfig, params: &ParamStore| {
        let mut s = Session::inference(params);
        let x = s.constant(u.field.clone());
        let y = global::global_forward(&mut s, cfg, x).unwrap();
        s.g.value(y).clone()
    };
    for sampling in [Sampling::Adaptive, Sampling::Random, Sampling::FixedGrid] {
        let cfg = ModelConfig { coupling: Coupling::Unidirectional, sampling, ..base.clone() };
        let params = jittered(&cfg, 8);
        let step = forecaster::forward_step(&params, &cfg, &u, &r, &mut rng).unwrap();
        assert_eq!(step.global, standalone(&cfg, &params));
    }
    let params = jittered(&base, 8);
    let step = forecaster::forward_step(&params, &base, &u, &r, &mut rng).unwrap();
    assert_ne!(step.global, standalone(&base, &params));
}

#[test]
fn attention_rows_sum_to_one_at_every_site() {
    let cfg = ModelConfig::desk();
    let params = jittered(&cfg, 12);
    let geom = RegionGeometry::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (u, r) = inputs(&cfg, &mut rng);
    let mut s = Session::inference(&params);
    let g = s.constant(u.field.clone());
    let regional = forecaster::regional_inputs(&mut s.g, &r);

    let check = |s: &Session, weights: &[scalemixer_core::Var], site: &str| {
        assert!(!weights.is_empty());
        for &w in weights {
            let t = s.g.value(w);
            for row in t.data().chunks(t.last_dim()) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "{site}: row sums to {sum}");
            }
        }
    };

    let gseq = global::global_patch_embed(&mut s, &cfg, g).unwrap();
    let h = nn::layer_norm(&mut s, "global.layer0.ln1", gseq.tokens).unwrap();
    let att = nn::multi_head_attention(&mut s, "global.layer0.attn", h, h, cfg.heads, cfg.attn_scale).unwrap();
    check(&s, &att.weights, "global self-attention");

    let rseq = mixer::regional_patch_embed(&mut s, &cfg, &regional).unwrap();
    let h = nn::layer_norm(&mut s, "regional.layer0.ln1", rseq.tokens).unwrap();
    let att = nn::multi_head_attention(&mut s, "regional.layer0.attn", h, h, cfg.heads, cfg.attn_scale).unwrap();
    check(&s, &att.weights, "regional self-attention");

    let nodes = forecaster::forward_graph(&mut s, &cfg, &geom, &StepInputs { global: g, regional }, true, &mut rng).unwrap();
    assert_eq!(nodes.traces.len(), cfg.blocks);
    for t in &nodes.traces {
        check(&s, &t.g2p_weights, "global-to-position");
        check(&s, &t.p2r_weights, "position-to-regional");
        let pr = s.g.value(t.keys.distribution.unwrap());
        assert!((pr.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn regional_training_leaves_global_parameters_frozen() {
    let run = RunConfig::toy();
    let data = generate_synthetic(&run.data, 1).unwrap();
    let stats = data.compute_stats().unwrap();
    let ctx = TrainContext { run: &run, data: &data, stats: &stats, seed: 1 };
    let pre = train::pretrain_global(&ctx).unwrap();
    let one = train::train_one_step(&ctx, &pre.params).unwrap();
    let ft = train::train_rollout_finetune(&ctx, one.params.clone()).unwrap();
    for stage in [&one.params, &ft.params] {
        for (name, t) in pre.params.iter() {
            assert_eq!(stage.get(name).unwrap(), t, "{name} changed");
        }
    }
    let moved = one
        .params
        .iter()
        .filter(|(n, _)| forecaster::is_regional_param(n))
        .any(|(n, t)| forecaster::build_model(&run.model, 1).unwrap().get(n).unwrap() != t);
    assert!(moved, "regional parameters never updated");
}

fn sort_oracle(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

proptest! {
    #[test]
    fn top_m_matches_full_sort(values in prop::collection::vec(0u8..6, 1..1024), frac in 0.0f64..=1.0) {
        let values: Vec<f64> = values.into_iter().map(|v| v as f64 * 0.25).collect();
        let m = ((values.len() as f64 * frac) as usize).max(1).min(values.len());
        prop_assert_eq!(top_m(&values, m), sort_oracle(&values, m));
    }

    #[test]
    fn top_m_matches_full_sort_on_continuous_values(values in prop::collection::vec(-1e3f64..1e3, 1..1024), m in 1usize..64) {
        let m = m.min(values.len());
        prop_assert_eq!(top_m(&values, m), sort_oracle(&values, m));
    }

    #[test]
    fn top_m_selection_follows_a_permutation(values in prop::collection::vec(-1e3f64..1e3, 2..256), seed in any::<u64>(), m in 1usize..32) {
        let m = m.min(values.len());
        let mut perm: Vec<usize> = (0..values.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let mut a: Vec<usize> = top_m(&permuted, m).into_iter().map(|i| perm[i]).collect();
        let mut b = top_m(&values, m);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
