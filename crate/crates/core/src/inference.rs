//! Generation: parallel and chunked prefill, constant-memory decoding, and
//! batched generation over left-padded prompts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::memory::TransientMeter;
use crate::model::{check_tokens, forward_with_meter, LogitRows, ModelCache, ModelConfig, Params};

/// Prompts aligned to the right. Row `r` holds its real tokens in the
/// suffix where `mask[r]` is true.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    tokens: Vec<Vec<usize>>,
    mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn new(tokens: Vec<Vec<usize>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("a batch needs at least one row".into()));
        }
        let t_max = tokens[0].len();
        if t_max == 0 {
            return Err(Error::InvalidArgument("a batch needs at least one position".into()));
        }
        if tokens.len() != mask.len() || tokens.iter().any(|r| r.len() != t_max) || mask.iter().any(|m| m.len() != t_max) {
            return Err(Error::shape("padded_batch", "tokens and mask must both be [batch, T_max]"));
        }
        for (row, m) in mask.iter().enumerate() {
            let first = m.iter().position(|&b| b).unwrap_or(t_max);
            if m[first..].iter().any(|&b| !b) {
                return Err(Error::NotLeftPadded { row });
            }
        }
        Ok(Self { tokens, mask })
    }

    /// Left-pads `prompts` with `pad_id` to the longest prompt. Empty prompts
    /// become all-padding rows.
    pub fn left_pad(prompts: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let t_max = prompts.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let (tokens, mask) = prompts
            .iter()
            .map(|p| {
                let pad = t_max - p.len();
                let mut row = vec![pad_id; pad];
                row.extend_from_slice(p);
                let mut m = vec![false; pad];
                m.resize(t_max, true);
                (row, m)
            })
            .unzip();
        Self::new(tokens, mask)
    }

    pub fn batch(&self) -> usize {
        self.tokens.len()
    }

    pub fn t_max(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn tokens(&self) -> &[Vec<usize>] {
        &self.tokens
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    /// Index of the first real token of `row`, or `t_max` for an all-padding row.
    pub fn pad_len(&self, row: usize) -> usize {
        self.mask[row].iter().position(|&b| b).unwrap_or(self.t_max())
    }
}

/// Recurrent state of a batch of sequences. Its size depends only on the
/// model config and batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub caches: Vec<ModelCache>,
    pub alive: Vec<bool>,
    /// Real tokens consumed per row.
    pub positions: Vec<u64>,
}

impl DecodeState {
    /// Fresh zero state with every row alive.
    pub fn zeros(cfg: &ModelConfig, batch: usize) -> Self {
        Self {
            caches: (0..batch).map(|_| ModelCache::zeros(cfg)).collect(),
            alive: vec![true; batch],
            positions: vec![0; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.caches.len()
    }

    /// Exact bytes of the conv windows, SSM states, alive flags and position
    /// counters.
    pub fn size_bytes(&self) -> usize {
        self.caches.iter().map(ModelCache::size_bytes).sum::<usize>()
            + self.alive.len() * std::mem::size_of::<bool>()
            + self.positions.len() * std::mem::size_of::<u64>()
    }

    /// Largest elementwise difference over all conv and SSM state arrays.
    pub fn max_abs_diff(&self, other: &DecodeState) -> f64 {
        assert_eq!(self.batch(), other.batch(), "batch sizes differ");
        let mut m = 0.0f64;
        for (a, b) in self.caches.iter().zip(&other.caches) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                m = m.max(la.conv.window.max_abs_diff(&lb.conv.window));
                m = m.max(la.ssm.h.max_abs_diff(&lb.ssm.h));
            }
        }
        m
    }
}

/// State and next-token logits after a prompt.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub state: DecodeState,
    /// `[batch, vocab]`; all-padding rows are zero.
    pub logits: Array,
    /// Peak transient bytes drawn while prefilling.
    pub peak_transient_bytes: usize,
}

fn finish(params: &Params, state: DecodeState, rows: Vec<Vec<f64>>, meter: &TransientMeter) -> Result<Prefill> {
    let v = params.config.vocab_size;
    let mut data = Vec::with_capacity(rows.len() * v);
    for r in rows {
        if r.is_empty() {
            data.resize(data.len() + v, 0.0);
        } else {
            data.extend_from_slice(&r);
        }
    }
    Ok(Prefill {
        logits: Array::new(vec![state.batch(), v], data)?,
        state,
        peak_transient_bytes: meter.peak_bytes(),
    })
}

fn check_batch(params: &Params, prompts: &PaddedBatch) -> Result<()> {
    // padded positions are embedded too, so the pad id must be in range
    for row in &prompts.tokens {
        check_tokens(row, params.config.vocab_size)?;
    }
    Ok(())
}

/// Whole-prompt forward pass per row. Padded positions are masked: their
/// conv input and output are zeroed and the SSM state skips them.
pub fn prefill_parallel(params: &Params, prompts: &PaddedBatch) -> Result<Prefill> {
    prefill_parallel_metered(params, prompts, &mut TransientMeter::unbounded())
}

pub fn prefill_parallel_metered(params: &Params, prompts: &PaddedBatch, meter: &mut TransientMeter) -> Result<Prefill> {
    check_batch(params, prompts)?;
    let cfg = &params.config;
    let mut state = DecodeState::zeros(cfg, prompts.batch());
    let mut rows = Vec::with_capacity(prompts.batch());
    for r in 0..prompts.batch() {
        let pad = prompts.pad_len(r);
        if pad == prompts.t_max() {
            state.alive[r] = false;
            rows.push(Vec::new());
            continue;
        }
        let mask = (pad > 0).then_some(&prompts.mask[r][..]);
        let logits = forward_with_meter(params, &prompts.tokens[r], &mut state.caches[r], mask, LogitRows::Last, meter)?;
        meter.release_values(logits.len());
        state.positions[r] = (prompts.t_max() - pad) as u64;
        rows.push(logits);
    }
    finish(params, state, rows, meter)
}

/// Chunked prefill: real tokens are fed `chunk` at a time, so transient
/// memory is bounded by the chunk size rather than the prompt length.
pub fn prefill_sequential(params: &Params, prompts: &PaddedBatch, chunk: usize) -> Result<Prefill> {
    prefill_sequential_metered(params, prompts, chunk, &mut TransientMeter::unbounded())
}

pub fn prefill_sequential_metered(
    params: &Params,
    prompts: &PaddedBatch,
    chunk: usize,
    meter: &mut TransientMeter,
) -> Result<Prefill> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be >= 1".into()));
    }
    check_batch(params, prompts)?;
    let cfg = &params.config;
    let mut state = DecodeState::zeros(cfg, prompts.batch());
    let mut rows = Vec::with_capacity(prompts.batch());
    for r in 0..prompts.batch() {
        let real = &prompts.tokens[r][prompts.pad_len(r)..];
        if real.is_empty() {
            state.alive[r] = false;
            rows.push(Vec::new());
            continue;
        }
        let n_chunks = real.len().div_ceil(chunk);
        let mut last = Vec::new();
        for (i, piece) in real.chunks(chunk).enumerate() {
            let which = if i + 1 == n_chunks { LogitRows::Last } else { LogitRows::None };
            last = forward_with_meter(params, piece, &mut state.caches[r], None, which, meter)?;
            meter.release_values(last.len());
        }
        state.positions[r] = real.len() as u64;
        rows.push(last);
    }
    finish(params, state, rows, meter)
}

/// One incremental step per alive row. Dead rows keep their state and get
/// zero logits.
pub fn decode_step(params: &Params, state: &mut DecodeState, tokens: &[usize]) -> Result<Array> {
    decode_step_metered(params, state, tokens, &mut TransientMeter::unbounded())
}

pub fn decode_step_metered(
    params: &Params,
    state: &mut DecodeState,
    tokens: &[usize],
    meter: &mut TransientMeter,
) -> Result<Array> {
    if tokens.len() != state.batch() {
        return Err(Error::BatchMismatch {
            expected: state.batch(),
            got: tokens.len(),
        });
    }
    let v = params.config.vocab_size;
    let mut out = vec![0.0; tokens.len() * v];
    for (r, &tok) in tokens.iter().enumerate() {
        if !state.alive[r] {
            continue;
        }
        check_tokens(&[tok], v)?;
        let logits = forward_with_meter(params, &[tok], &mut state.caches[r], None, LogitRows::Last, meter)?;
        meter.release_values(logits.len());
        out[r * v..(r + 1) * v].copy_from_slice(&logits);
        state.positions[r] += 1;
    }
    Array::new(vec![tokens.len(), v], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Sampling {
    Greedy,
    /// Softmax sampling at temperature `tau`; row `r` draws from stream `r`
    /// of a generator seeded with `seed`.
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub prefill: PrefillMode,
    /// Chunk size of sequential prefill.
    pub chunk: usize,
    pub max_new_tokens: usize,
    /// Generation of a row stops after emitting one of these. The stop token
    /// is not included in the output.
    pub stop_ids: Vec<usize>,
    pub pad_id: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            prefill: PrefillMode::Parallel,
            chunk: 64,
            max_new_tokens: 64,
            stop_ids: Vec::new(),
            pad_id: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config("inference: chunk and max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax<R: Rng>(row: &[f64], tau: f64, rng: &mut R) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

/// Generates up to `cfg.max_new_tokens` tokens per prompt. Returns only the
/// new tokens of each row.
pub fn generate(params: &Params, prompts: &[Vec<usize>], sampling: Sampling, cfg: &InferenceConfig) -> Result<Vec<Vec<usize>>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("generate needs at least one prompt".into()));
    }
    cfg.validate()?;
    if let Sampling::Temperature { tau, .. } = sampling {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
    }
    let batch = PaddedBatch::left_pad(prompts, cfg.pad_id)?;
    let pre = match cfg.prefill {
        PrefillMode::Parallel => prefill_parallel(params, &batch)?,
        PrefillMode::Sequential => prefill_sequential(params, &batch, cfg.chunk)?,
    };
    let mut state = pre.state;
    let mut logits = pre.logits;
    let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len())
        .map(|r| {
            let mut g = ChaCha8Rng::seed_from_u64(match sampling {
                Sampling::Temperature { seed, .. } => seed,
                Sampling::Greedy => 0,
            });
            g.set_stream(r as u64);
            g
        })
        .collect();
    let mut out = vec![Vec::new(); prompts.len()];
    let v = params.config.vocab_size;
    for step in 0..cfg.max_new_tokens {
        let mut next = vec![cfg.pad_id; prompts.len()];
        for r in 0..prompts.len() {
            if !state.alive[r] {
                continue;
            }
            let row = &logits.data()[r * v..(r + 1) * v];
            let tok = match sampling {
                Sampling::Greedy => argmax(row),
                Sampling::Temperature { tau, .. } => sample_softmax(row, tau, &mut rngs[r]),
            };
            if cfg.stop_ids.contains(&tok) {
                state.alive[r] = false;
            } else {
                out[r].push(tok);
                next[r] = tok;
            }
        }
        if step + 1 == cfg.max_new_tokens || !state.alive.iter().any(|&a| a) {
            break;
        }
        logits = decode_step(params, &mut state, &next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, model_forward};

    fn small() -> Params {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_state: 4,
            dt_rank: 2,
            vocab_size: 32,
            ..ModelConfig::desk()
        };
        init_params(&cfg, 9).unwrap()
    }

    #[test]
    fn left_padding_is_validated() {
        let ok = PaddedBatch::left_pad(&[vec![1, 2, 3], vec![4]], 0).unwrap();
        assert_eq!(ok.tokens()[1], vec![0, 0, 4]);
        assert_eq!(ok.mask()[1], vec![false, false, true]);
        assert_eq!(ok.pad_len(1), 2);
        let bad = PaddedBatch::new(vec![vec![1, 2, 3]], vec![vec![true, false, true]]);
        assert!(matches!(bad, Err(Error::NotLeftPadded { row: 0 })));
        assert!(PaddedBatch::new(vec![vec![1, 2]], vec![vec![true]]).is_err());
    }

    #[test]
    fn padded_row_matches_unpadded_run() {
        let p = small();
        let both = PaddedBatch::left_pad(&[vec![1, 2, 3], vec![2, 3]], 7).unwrap();
        let solo = PaddedBatch::left_pad(&[vec![2, 3]], 0).unwrap();
        let a = prefill_parallel(&p, &both).unwrap();
        let b = prefill_parallel(&p, &solo).unwrap();
        for (la, lb) in a.state.caches[1].layers.iter().zip(&b.state.caches[0].layers) {
            assert!(la.ssm.h.max_abs_diff(&lb.ssm.h) < 1e-8);
            assert!(la.conv.window.max_abs_diff(&lb.conv.window) < 1e-8);
        }
        let v = p.config.vocab_size;
        let diff = a.logits.data()[v..].iter().zip(b.logits.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
    }

    #[test]
    fn all_padding_row_is_dead_and_zero() {
        let p = small();
        let batch = PaddedBatch::left_pad(&[vec![1, 2], vec![]], 0).unwrap();
        let pre = prefill_parallel(&p, &batch).unwrap();
        assert!(!pre.state.alive[1]);
        let fresh = ModelCache::zeros(&p.config);
        assert_eq!(pre.state.caches[1], fresh);
        assert!(pre.logits.row(1).iter().all(|&x| x == 0.0));
        let out = generate(&p, &[vec![1, 2], vec![]], Sampling::Greedy, &InferenceConfig::default()).unwrap();
        assert!(out[1].is_empty());
    }

    #[test]
    fn decode_matches_parallel_forward() {
        let p = small();
        let prompt = vec![3, 1, 4, 1, 5];
        let pre = prefill_parallel(&p, &PaddedBatch::left_pad(std::slice::from_ref(&prompt), 0).unwrap()).unwrap();
        let mut st = pre.state;
        let before = st.size_bytes();
        let logits = decode_step(&p, &mut st, &[9]).unwrap();
        assert_eq!(st.size_bytes(), before);
        let mut full = prompt;
        full.push(9);
        let (ref_logits, _) = model_forward(&p, &full, None).unwrap();
        let diff = logits.row(0).iter().zip(ref_logits.row(5)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
        assert!(matches!(decode_step(&p, &mut st, &[1, 2]), Err(Error::BatchMismatch { .. })));
    }

    #[test]
    fn stop_ids_and_budget() {
        let p = small();
        let cfg = InferenceConfig {
            max_new_tokens: 5,
            ..InferenceConfig::default()
        };
        let greedy = generate(&p, &[vec![1, 2]], Sampling::Greedy, &cfg).unwrap();
        assert_eq!(greedy[0].len(), 5);
        let stop = InferenceConfig {
            stop_ids: vec![greedy[0][2]],
            ..cfg.clone()
        };
        let cut = generate(&p, &[vec![1, 2]], Sampling::Greedy, &stop).unwrap();
        let first_stop = greedy[0].iter().position(|t| *t == greedy[0][2]).unwrap();
        assert_eq!(cut[0], greedy[0][..first_stop].to_vec());
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let p = small();
        let cfg = InferenceConfig {
            max_new_tokens: 6,
            ..InferenceConfig::default()
        };
        let g = generate(&p, &[vec![5, 6, 7]], Sampling::Greedy, &cfg).unwrap();
        let t = generate(&p, &[vec![5, 6, 7]], Sampling::Temperature { tau: 1e-12, seed: 4 }, &cfg).unwrap();
        assert_eq!(g, t);
        assert!(generate(&p, &[vec![1]], Sampling::Temperature { tau: 0.0, seed: 0 }, &cfg).is_err());
        assert!(generate(&p, &[], Sampling::Greedy, &cfg).is_err());
    }
}
