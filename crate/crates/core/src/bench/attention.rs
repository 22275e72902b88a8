//! Minimal decoder-only transformer with a key/value cache, used as the
//! scaling contrast for recurrent decoding. Pre-norm blocks with causal
//! multi-head attention and a SiLU MLP; no positional encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::{gemm, rmsnorm_raw, silu};
use crate::memory::TransientMeter;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionBaselineConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub d_ff: usize,
}

impl AttentionBaselineConfig {
    /// Same width, depth and vocabulary as `cfg`, 4 heads, 4x MLP.
    pub fn matched(cfg: &ModelConfig) -> Self {
        let n_heads = if cfg.d_model.is_multiple_of(4) { 4 } else { 1 };
        Self {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads,
            head_dim: cfg.d_model / n_heads,
            vocab: cfg.vocab_size,
            d_ff: 4 * cfg.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.vocab == 0 || self.d_ff == 0 {
            return Err(Error::Config("attention baseline: dimensions must be positive".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "attention baseline: d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// `2 * n_layers * T * n_heads * head_dim * 8` bytes.
    pub fn kv_bytes(&self, t: usize) -> usize {
        2 * self.n_layers * t * self.n_heads * self.head_dim * std::mem::size_of::<f64>()
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: Array,
    wq: Array,
    wk: Array,
    wv: Array,
    wo: Array,
    norm2: Array,
    w1: Array,
    w2: Array,
}

#[derive(Debug, Clone)]
pub struct AttentionModel {
    pub config: AttentionBaselineConfig,
    embedding: Array,
    layers: Vec<Layer>,
    final_norm: Array,
    head: Array,
}

/// Keys and values of every past position, per layer, `[T, d_model]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &AttentionBaselineConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes of stored keys and values.
    pub fn size_bytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Vec::len).sum::<usize>() * std::mem::size_of::<f64>()
    }
}

const EPS: f64 = 1e-6;

impl AttentionModel {
    pub fn new(config: &AttentionBaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                norm1: Array::filled(&[d], 1.0),
                wq: Array::randn(&[d, d], std, &mut rng),
                wk: Array::randn(&[d, d], std, &mut rng),
                wv: Array::randn(&[d, d], std, &mut rng),
                wo: Array::randn(&[d, d], out_std, &mut rng),
                norm2: Array::filled(&[d], 1.0),
                w1: Array::randn(&[d, f], std, &mut rng),
                w2: Array::randn(&[f, d], out_std, &mut rng),
            })
            .collect();
        Ok(Self {
            embedding: Array::randn(&[config.vocab, d], std, &mut rng),
            layers,
            final_norm: Array::filled(&[d], 1.0),
            head: Array::randn(&[d, config.vocab], std, &mut rng),
            config: config.clone(),
        })
    }

    /// Appends `tokens` to `cache` and returns logits for every new position
    /// (`all`) or only the last one.
    pub fn run(&self, tokens: &[usize], cache: &mut KvCache, all: bool, meter: &mut TransientMeter) -> Result<Vec<f64>> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("attention forward needs at least one token".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= c.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: c.vocab });
        }
        let (d, f, nh, hd) = (c.d_model, c.d_ff, c.n_heads, c.head_dim);
        let t = tokens.len();
        let off = cache.len;
        let total = off + t;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = meter.alloc(t * d)?;
        for (row, &id) in x.chunks_exact_mut(d).zip(tokens) {
            row.copy_from_slice(self.embedding.row(id));
        }
        let bufs = 5 * t * d + t + t * f + total;
        let mut u = meter.alloc(t * d)?;
        let mut rstd = meter.alloc(t)?;
        let mut q = meter.alloc(t * d)?;
        let mut kn = meter.alloc(t * d)?;
        let mut vn = meter.alloc(t * d)?;
        let mut att = meter.alloc(t * d)?;
        let mut hid = meter.alloc(t * f)?;
        let mut scores = meter.alloc(total)?;
        for (li, l) in self.layers.iter().enumerate() {
            rmsnorm_raw(&x, d, l.norm1.data(), EPS, &mut u, &mut rstd);
            gemm(t, d, d, &u, false, l.wq.data(), false, 0.0, &mut q);
            gemm(t, d, d, &u, false, l.wk.data(), false, 0.0, &mut kn);
            gemm(t, d, d, &u, false, l.wv.data(), false, 0.0, &mut vn);
            cache.keys[li].extend_from_slice(&kn);
            cache.values[li].extend_from_slice(&vn);
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            for i in 0..t {
                let p = off + i;
                for h in 0..nh {
                    let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores[..=p].iter_mut().enumerate() {
                        let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                        *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..=p] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let out = &mut att[i * d + h * hd..i * d + (h + 1) * hd];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (j, &w) in scores[..=p].iter().enumerate() {
                        let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        for (o, &v) in out.iter_mut().zip(vh) {
                            *o += w / z * v;
                        }
                    }
                }
            }
            gemm(t, d, d, &att, false, l.wo.data(), false, 1.0, &mut x);
            rmsnorm_raw(&x, d, l.norm2.data(), EPS, &mut u, &mut rstd);
            gemm(t, d, f, &u, false, l.w1.data(), false, 0.0, &mut hid);
            hid.iter_mut().for_each(|v| *v = silu(*v));
            gemm(t, f, d, &hid, false, l.w2.data(), false, 1.0, &mut x);
        }
        cache.len = total;
        let rows = if all { t } else { 1 };
        let xs = &x[(t - rows) * d..];
        let mut hf = meter.alloc(rows * d)?;
        let mut rs = meter.alloc(rows)?;
        rmsnorm_raw(xs, d, self.final_norm.data(), EPS, &mut hf, &mut rs);
        let mut logits = meter.alloc(rows * c.vocab)?;
        gemm(rows, d, c.vocab, &hf, false, self.head.data(), false, 0.0, &mut logits);
        meter.release_values(t * d + bufs + rows * d + rows);
        Ok(logits)
    }

    /// Parallel forward from an empty cache, `[T, vocab]` logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Array, KvCache)> {
        let mut cache = KvCache::new(&self.config);
        let logits = self.run(tokens, &mut cache, true, &mut TransientMeter::unbounded())?;
        Ok((Array::new(vec![tokens.len(), self.config.vocab], logits)?, cache))
    }

    /// One incremental step; returns `[vocab]` logits for the next token.
    pub fn decode_step(&self, token: usize, cache: &mut KvCache, meter: &mut TransientMeter) -> Result<Vec<f64>> {
        let logits = self.run(&[token], cache, false, meter)?;
        meter.release_values(logits.len());
        Ok(logits)
    }
}
