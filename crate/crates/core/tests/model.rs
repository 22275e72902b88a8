mod common;

use mamba_desk::model::{
    init_params, mamba_block_forward, mamba_block_probe, model_forward, BlockCache, ModelCache, ModelConfig,
};
use mamba_desk::{Array, Error};
use rand::Rng;

fn small(seed: u64) -> mamba_desk::model::Params {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_state: 8,
        dt_rank: 4,
        vocab_size: 40,
        ..ModelConfig::desk()
    };
    init_params(&cfg, seed).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_out_proj_is_residual_identity() {
    let mut p = small(1);
    let cfg = p.config.clone();
    p.layers[0].out_proj.fill(0.0);
    let x = Array::randn(&[5, cfg.d_model], 1.0, &mut common::rng(2));
    let (y, _) = mamba_block_forward(&cfg, &p.layers[0], &x, None).unwrap();
    assert_eq!(y, x);
}

#[test]
fn block_incremental_matches_full_sequence() {
    let p = small(3);
    let cfg = p.config.clone();
    let x = Array::randn(&[9, cfg.d_model], 1.0, &mut common::rng(4));
    let (full, full_cache) = mamba_block_forward(&cfg, &p.layers[1], &x, None).unwrap();
    let mut cache = BlockCache::zeros(&cfg);
    for t in 0..9 {
        let xt = Array::new(vec![1, cfg.d_model], x.row(t).to_vec()).unwrap();
        let (yt, next) = mamba_block_forward(&cfg, &p.layers[1], &xt, Some(&cache)).unwrap();
        assert!(max_diff(yt.data(), full.row(t)) < 1e-10);
        cache = next;
    }
    assert!(cache.ssm.h.max_abs_diff(&full_cache.ssm.h) < 1e-12);
    assert!(cache.conv.window.max_abs_diff(&full_cache.conv.window) < 1e-12);
}

#[test]
fn stabilisation_toggle_changes_block_output() {
    let p = small(5);
    let mut cfg = p.config.clone();
    let x = Array::randn(&[6, cfg.d_model], 1.0, &mut common::rng(6));
    let (on, _) = mamba_block_forward(&cfg, &p.layers[0], &x, None).unwrap();
    cfg.stabilization_norms = false;
    let (off, _) = mamba_block_forward(&cfg, &p.layers[0], &x, None).unwrap();
    assert!(on.max_abs_diff(&off) > 1e-6);
}

#[test]
fn stabilised_projections_have_gain_rms() {
    let mut p = small(7);
    let cfg = p.config.clone();
    let mut rng = common::rng(8);
    let l0 = &mut p.layers[0];
    // unit-scale projections keep mean squares far above eps
    l0.in_proj = Array::randn(l0.in_proj.shape(), 1.0, &mut rng);
    l0.x_proj = Array::randn(l0.x_proj.shape(), 1.0, &mut rng);
    for g in [&mut l0.dt_norm, &mut l0.b_norm, &mut l0.c_norm] {
        g.fill(rng.gen_range(0.3..2.0));
    }
    let x = Array::randn(&[7, cfg.d_model], 1.0, &mut rng);
    let probe = mamba_block_probe(&cfg, &p.layers[0], &x).unwrap();
    let l = &p.layers[0];
    for (a, gain) in [(&probe.dt, &l.dt_norm), (&probe.b, &l.b_norm), (&probe.c, &l.c_norm)] {
        let g = gain.data()[0];
        for r in 0..a.rows() {
            let row = a.row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
            assert!((rms - g).abs() < 1e-6, "rms {rms} vs gain {g}");
        }
    }
    assert!(probe.delta.data().iter().all(|&d| d > 0.0));
}

#[test]
fn incremental_model_matches_parallel() {
    let p = small(9);
    let mut rng = common::rng(10);
    let tokens: Vec<usize> = (0..33).map(|_| rng.gen_range(0..40)).collect();
    let (full, _) = model_forward(&p, &tokens, None).unwrap();
    let mut cache = ModelCache::zeros(&p.config);
    for (t, &tok) in tokens.iter().enumerate() {
        let (l, next) = model_forward(&p, &[tok], Some(&cache)).unwrap();
        assert!(max_diff(l.row(0), full.row(t)) < 1e-8);
        cache = next;
    }
    // two positions at once continue the same state
    let (a, c1) = model_forward(&p, &tokens[..1], None).unwrap();
    let (b, _) = model_forward(&p, &tokens[1..2], Some(&c1)).unwrap();
    assert!(max_diff(a.row(0), full.row(0)) < 1e-8);
    assert!(max_diff(b.row(0), full.row(1)) < 1e-8);
}

#[test]
fn logits_shape_for_any_length() {
    let p = small(11);
    for t in [1usize, 7, 300] {
        let tokens: Vec<usize> = (0..t).map(|i| i % 40).collect();
        let (l, _) = model_forward(&p, &tokens, None).unwrap();
        assert_eq!(l.shape(), [t, 40]);
        let (again, _) = model_forward(&p, &tokens, None).unwrap();
        assert_eq!(l, again);
    }
}

#[test]
fn causality() {
    let p = small(12);
    let tokens: Vec<usize> = (0..12).map(|i| (i * 7) % 40).collect();
    let (base, _) = model_forward(&p, &tokens, None).unwrap();
    for t in [0usize, 5, 11] {
        let mut changed = tokens.clone();
        changed[t] = (changed[t] + 1) % 40;
        let (l, _) = model_forward(&p, &changed, None).unwrap();
        for s in 0..tokens.len() {
            let d = max_diff(l.row(s), base.row(s));
            if s < t {
                assert_eq!(d, 0.0, "position {s} changed after perturbing {t}");
            } else if s == t {
                assert!(d > 0.0);
            }
        }
    }
}

#[test]
fn rejects_bad_tokens_and_caches() {
    let p = small(13);
    assert!(matches!(model_forward(&p, &[40], None), Err(Error::TokenOutOfRange { id: 40, vocab: 40 })));
    assert!(model_forward(&p, &[], None).is_err());
    let other = ModelCache::zeros(&ModelConfig::desk());
    assert!(model_forward(&p, &[1], Some(&other)).is_err());
}

#[test]
fn paper_preset_matches_table_values() {
    let c = ModelConfig::paper();
    assert_eq!(
        (c.n_layers, c.d_model, c.expand, c.vocab_size, c.tied_embedding, c.d_conv, c.dt_rank, c.d_state),
        (64, 4096, 2, 65024, false, 4, 16, 16)
    );
}
