use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::{cross_entropy_sum_raw, gemm, rmsnorm_backward_raw, rmsnorm_raw};
use crate::memory::TransientMeter;

use super::block::{block_backward, block_forward, BlockCache, BlockTape};
use super::{ModelConfig, Params};

/// Per-layer recurrent state for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCache {
    pub layers: Vec<BlockCache>,
}

impl ModelCache {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| BlockCache::zeros(cfg)).collect(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(BlockCache::size_bytes).sum()
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(BlockCache::reset);
    }

    fn matches(&self, cfg: &ModelConfig) -> bool {
        self.layers.len() == cfg.n_layers
            && self.layers.iter().all(|l| {
                l.conv.window.shape() == [cfg.d_inner(), cfg.d_conv - 1]
                    && l.ssm.h.shape() == [cfg.d_inner(), cfg.d_state]
            })
    }
}

/// Which rows of the output to project to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LogitRows {
    All,
    Last,
    None,
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Projects residual-stream rows through the final norm and output head.
pub(crate) fn project_logits(
    params: &Params,
    hidden: &[f64],
    rows: usize,
    meter: &mut TransientMeter,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut hf = meter.alloc(rows * d)?;
    let mut rstd = meter.alloc(rows)?;
    rmsnorm_raw(hidden, d, params.final_norm.data(), cfg.rmsnorm_eps, &mut hf, &mut rstd);
    let mut logits = meter.alloc(rows * v)?;
    match &params.output_head {
        Some(head) => gemm(rows, d, v, &hf, false, head.data(), false, 0.0, &mut logits),
        None => gemm(rows, d, v, &hf, false, params.embedding.data(), true, 0.0, &mut logits),
    }
    meter.release_values(rows * d + rows);
    Ok(logits)
}

/// Runs `tokens` through every block, advancing `cache`. Returns the
/// residual stream after the last block (`[T, d_model]`), which stays
/// accounted in `meter` until the caller releases it.
pub(crate) fn run_blocks(
    params: &Params,
    tokens: &[usize],
    cache: &mut ModelCache,
    mask: Option<&[bool]>,
    meter: &mut TransientMeter,
    mut tapes: Option<&mut Vec<BlockTape>>,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let t = tokens.len();
    let mut x = meter.alloc(t * d)?;
    for (row, &id) in x.chunks_exact_mut(d).zip(tokens) {
        row.copy_from_slice(params.embedding.row(id));
    }
    if let Some(tp) = tapes.as_deref_mut() {
        tp.clear();
        tp.resize_with(cfg.n_layers, BlockTape::default);
    }
    for (i, (lp, lc)) in params.layers.iter().zip(cache.layers.iter_mut()).enumerate() {
        let tape = tapes.as_deref_mut().map(|tp| &mut tp[i]);
        let next = block_forward(
            cfg,
            lp,
            &x,
            t,
            lc.conv.window.data_mut(),
            lc.ssm.h.data_mut(),
            mask,
            meter,
            tape,
        )?;
        meter.release_values(x.len());
        x = next;
    }
    Ok(x)
}

pub(crate) fn forward_with_meter(
    params: &Params,
    tokens: &[usize],
    cache: &mut ModelCache,
    mask: Option<&[bool]>,
    rows: LogitRows,
    meter: &mut TransientMeter,
) -> Result<Vec<f64>> {
    let d = params.config.d_model;
    let hidden = run_blocks(params, tokens, cache, mask, meter, None)?;
    let t = tokens.len();
    let logits = match rows {
        LogitRows::All => project_logits(params, &hidden, t, meter)?,
        LogitRows::Last => project_logits(params, &hidden[(t - 1) * d..], 1, meter)?,
        LogitRows::None => Vec::new(),
    };
    meter.release_values(hidden.len());
    Ok(logits)
}

/// Full forward pass: embedding, blocks, final norm, output head.
///
/// With `cache = None` the sequence starts from a fresh state. Returns
/// `[T, vocab]` logits and the state after the last token. No positional
/// encoding is used, so any `T >= 1` is accepted.
pub fn model_forward(
    params: &Params,
    tokens: &[usize],
    cache: Option<&ModelCache>,
) -> Result<(Array, ModelCache)> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("model_forward needs at least one token".into()));
    }
    check_tokens(tokens, cfg.vocab_size)?;
    let mut cache = match cache {
        Some(c) if c.matches(cfg) => c.clone(),
        Some(_) => return Err(Error::shape("model_forward", "cache does not match config")),
        None => ModelCache::zeros(cfg),
    };
    let mut meter = TransientMeter::unbounded();
    let logits = forward_with_meter(params, tokens, &mut cache, None, LogitRows::All, &mut meter)?;
    Ok((Array::new(vec![tokens.len(), cfg.vocab_size], logits)?, cache))
}

/// One supervised training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainWindow {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// `false` excludes a position from the loss.
    pub mask: Vec<bool>,
}

/// Mean loss over a batch together with its parameter gradient.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub cross_entropy: f64,
    pub z_term: f64,
    pub count: usize,
    pub grads: Params,
}

/// Forward and backward over one window, accumulating `scale`-weighted
/// gradients of the summed loss into `grads`. Returns `(ce_sum, z_sum)`.
fn window_grad(
    params: &Params,
    w: &TrainWindow,
    z_coeff: f64,
    scale: f64,
    grads: &mut Params,
    tapes: &mut Vec<BlockTape>,
) -> Result<(f64, f64)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let t = w.tokens.len();
    let mut cache = ModelCache::zeros(cfg);
    let mut meter = TransientMeter::unbounded();
    let hidden = run_blocks(params, &w.tokens, &mut cache, None, &mut meter, Some(tapes))?;

    let mut hf = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    rmsnorm_raw(&hidden, d, params.final_norm.data(), cfg.rmsnorm_eps, &mut hf, &mut rstd);
    let mut logits = vec![0.0; t * v];
    match &params.output_head {
        Some(head) => gemm(t, d, v, &hf, false, head.data(), false, 0.0, &mut logits),
        None => gemm(t, d, v, &hf, false, params.embedding.data(), true, 0.0, &mut logits),
    }
    let mut dlogits = vec![0.0; t * v];
    let (ce, z) = cross_entropy_sum_raw(&logits, v, &w.targets, &w.mask, z_coeff, scale, &mut dlogits);

    let mut dhf = vec![0.0; t * d];
    match (&params.output_head, grads.output_head.as_mut()) {
        (Some(head), Some(ghead)) => {
            gemm(d, t, v, &hf, true, &dlogits, false, 1.0, ghead.data_mut());
            gemm(t, v, d, &dlogits, false, head.data(), true, 0.0, &mut dhf);
        }
        _ => {
            gemm(v, t, d, &dlogits, true, &hf, false, 1.0, grads.embedding.data_mut());
            gemm(t, v, d, &dlogits, false, params.embedding.data(), false, 0.0, &mut dhf);
        }
    }
    let mut dx = vec![0.0; t * d];
    rmsnorm_backward_raw(&hidden, d, params.final_norm.data(), &rstd, &dhf, &mut dx, grads.final_norm.data_mut());

    for (i, lp) in params.layers.iter().enumerate().rev() {
        dx = block_backward(cfg, lp, &tapes[i], &dx, &mut grads.layers[i]);
    }
    let gemb = grads.embedding.data_mut();
    for (row, &id) in dx.chunks_exact(d).zip(&w.tokens) {
        for (g, &v) in gemb[id * d..(id + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((ce, z))
}

/// Mean masked cross-entropy plus `z_coeff * mean(logsumexp^2)` over every
/// supervised position of the batch, and its gradient w.r.t. all parameters.
pub fn loss_and_grad(params: &Params, batch: &[TrainWindow], z_coeff: f64) -> Result<BatchLoss> {
    let cfg = &params.config;
    if !(z_coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!("z_coeff must be >= 0, got {z_coeff}")));
    }
    for w in batch {
        if w.tokens.is_empty() || w.targets.len() != w.tokens.len() || w.mask.len() != w.tokens.len() {
            return Err(Error::shape("loss", "tokens, targets and mask must have equal nonzero length"));
        }
        check_tokens(&w.tokens, cfg.vocab_size)?;
        check_tokens(&w.targets, cfg.vocab_size)?;
    }
    let count: usize = batch.iter().map(|w| w.mask.iter().filter(|&&m| m).count()).sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut grads = params.zeros_like();
    let mut tapes = Vec::new();
    let (mut ce, mut z) = (0.0, 0.0);
    for w in batch {
        let (c, zz) = window_grad(params, w, z_coeff, scale, &mut grads, &mut tapes)?;
        ce += c;
        z += zz;
    }
    let ce = ce * scale;
    let z = z * scale;
    Ok(BatchLoss {
        loss: ce + z_coeff * z,
        cross_entropy: ce,
        z_term: z,
        count,
        grads,
    })
}

/// Loss only (no gradient) over a batch.
pub fn batch_loss(params: &Params, batch: &[TrainWindow], z_coeff: f64) -> Result<f64> {
    let cfg = &params.config;
    let mut total = 0.0;
    let mut count = 0usize;
    for w in batch {
        check_tokens(&w.tokens, cfg.vocab_size)?;
        let (logits, _) = model_forward(params, &w.tokens, None)?;
        let mut scratch = vec![0.0; logits.len()];
        let (ce, z) = cross_entropy_sum_raw(
            logits.data(),
            cfg.vocab_size,
            &w.targets,
            &w.mask,
            z_coeff,
            1.0,
            &mut scratch,
        );
        total += ce + z_coeff * z;
        count += w.mask.iter().filter(|&&m| m).count();
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}
