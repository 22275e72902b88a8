//! Invariants checked over generated inputs.

mod common;

use mamba_desk::inference::{prefill_parallel, prefill_sequential, PaddedBatch};
use mamba_desk::kernels::{rmsnorm, selective_scan_seq, ScanParams, SsmState};
use mamba_desk::model::{init_params, ModelConfig};
use mamba_desk::optim::{adamw_update, OptimizerConfig};
use mamba_desk::schedule::{batch_size_at, lr_at, noise_temperature, ScheduleConfig};
use mamba_desk::trainer::{detokenize_bytes, pack_tokens, tokenize_bytes};
use mamba_desk::Array;
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_state: 4,
        dt_rank: 2,
        vocab_size: 32,
        ..ModelConfig::desk()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_is_continuous_at_phase_boundaries(ratio in 0.01f64..0.5, frac in 0.05f64..0.5) {
        let cfg = ScheduleConfig { eta_min_ratio: ratio, decay_fraction: frac, ..ScheduleConfig::desk() };
        prop_assume!(cfg.validate().is_ok());
        let w = cfg.t_warmup;
        let s = cfg.stable_end();
        let step = (cfg.eta_max / w as f64) * 1.0001;
        prop_assert!((lr_at(w, &cfg).unwrap() - lr_at(w - 1, &cfg).unwrap()).abs() <= step);
        let jump = (lr_at(s + 1, &cfg).unwrap() - lr_at(s, &cfg).unwrap()).abs();
        prop_assert!(jump < cfg.eta_max * 1e-3);
        let end = lr_at(cfg.t_total, &cfg).unwrap();
        prop_assert!((end - cfg.eta_max * ratio).abs() <= 1e-12 * cfg.eta_max);
    }

    #[test]
    fn lr_never_increases_after_warmup(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let cfg = ScheduleConfig::desk();
        let at = |f: f64| ((cfg.t_total as f64 * f) as u64).max(cfg.t_warmup);
        let (lo, hi) = (at(a.min(b)), at(a.max(b)));
        prop_assert!(lr_at(hi, &cfg).unwrap() <= lr_at(lo, &cfg).unwrap());
    }

    #[test]
    fn batch_is_nondecreasing_and_granular(a in 0u64..200_000_000_000, b in 0u64..200_000_000_000) {
        let cfg = ScheduleConfig { batch_granularity: 64, ..ScheduleConfig::paper() };
        let (lo, hi) = (a.min(b), a.max(b));
        let (bl, bh) = (batch_size_at(lo, &cfg), batch_size_at(hi, &cfg));
        prop_assert!(bl <= bh);
        prop_assert!(bh % 64 == 0 && (cfg.b_min..=cfg.b_max).contains(&bh));
    }

    #[test]
    fn noise_is_constant_through_scaled_rampup(t in 1_000_000_000u64..50_000_000_000) {
        let cfg = ScheduleConfig { batch_scaling: true, ..ScheduleConfig::paper() };
        let reference = noise_temperature(cfg.eta_max, cfg.b_max).unwrap();
        let got = noise_temperature(lr_at(t, &cfg).unwrap(), batch_size_at(t, &cfg)).unwrap();
        prop_assert!((got - reference).abs() <= 1e-12 * reference);
    }

    #[test]
    fn adamw_with_zero_lr_is_identity(p in prop::collection::vec(-5.0f64..5.0, 1..20), step in 1u64..100) {
        let g: Vec<f64> = p.iter().map(|x| x.sin()).collect();
        let mut q = p.clone();
        let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
        adamw_update(&mut q, &g, &mut m, &mut v, step, 0.0, &OptimizerConfig::default(), true);
        prop_assert_eq!(q, p);
    }

    #[test]
    fn packing_covers_stream_without_gaps(
        docs in prop::collection::vec(prop::collection::vec(1usize..256, 0..40), 1..6),
        seq_len in 2usize..16,
    ) {
        let windows = pack_tokens(&docs, seq_len, 0).unwrap();
        let mut stream = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if i > 0 {
                stream.push(0);
            }
            stream.extend_from_slice(d);
        }
        let expected = if stream.len() > seq_len { (stream.len() - 1) / seq_len } else { 0 };
        prop_assert_eq!(windows.len(), expected);
        for (i, w) in windows.iter().enumerate() {
            prop_assert_eq!(&w.tokens[..], &stream[i * seq_len..(i + 1) * seq_len]);
            prop_assert_eq!(&w.targets[..], &stream[i * seq_len + 1..=(i + 1) * seq_len]);
        }
    }

    #[test]
    fn byte_tokenizer_roundtrips(s in ".{0,64}") {
        let ids = tokenize_bytes(&s);
        prop_assert!(ids.iter().all(|&i| i < 256));
        prop_assert_eq!(detokenize_bytes(&ids).unwrap(), s.as_bytes().to_vec());
    }

    #[test]
    fn rmsnorm_output_has_gain_rms(x in prop::collection::vec(-10.0f64..10.0, 2..32), g in 0.1f64..3.0) {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        prop_assume!(ms > 1e-2);
        let n = x.len();
        let y = rmsnorm(&Array::from_vec(x), &Array::filled(&[n], g), 0.0).unwrap();
        let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        prop_assert!((rms - g).abs() < 1e-12 * g.max(1.0));
    }

    #[test]
    fn scan_state_stays_bounded(seed in 0u64..1000, t in 1usize..200) {
        // |h_t| <= |h_0| + sum of |delta * B * x| since every decay factor is in (0, 1).
        let mut r = common::rng(seed);
        let (c, n) = (3, 4);
        let sp = ScanParams::new(common::uniform(&[c, n], -3.0, -0.01, &mut r), Array::zeros(&[c])).unwrap();
        let x = common::uniform(&[t, c], -1.0, 1.0, &mut r);
        let delta = common::uniform(&[t, c], 0.001, 2.0, &mut r);
        let b = common::uniform(&[t, n], -1.0, 1.0, &mut r);
        let cm = common::uniform(&[t, n], -1.0, 1.0, &mut r);
        let (_, h) = selective_scan_seq(&sp, &SsmState::zeros(c, n), &x, &delta, &b, &cm).unwrap();
        let bound = 2.0 * t as f64;
        prop_assert!(h.h.all_finite());
        prop_assert!(h.h.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sequential_prefill_is_chunk_invariant(
        seed in 0u64..500,
        prompt in prop::collection::vec(0usize..32, 1..40),
        chunk in 1usize..17,
    ) {
        let params = init_params(&tiny_model(), seed).unwrap();
        let batch = PaddedBatch::left_pad(&[prompt], 0).unwrap();
        let par = prefill_parallel(&params, &batch).unwrap();
        let seq = prefill_sequential(&params, &batch, chunk).unwrap();
        prop_assert!(par.state.max_abs_diff(&seq.state) < 1e-10);
        prop_assert!(par.logits.max_abs_diff(&seq.logits) < 1e-10);
    }
}
