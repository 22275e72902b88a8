//! The stabilised Mamba block: forward pass (optionally recording a tape) and
//! its hand-derived backward pass.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::{
    conv_backward_raw, conv_forward_raw, gemm, rmsnorm_backward_raw, rmsnorm_raw,
    scan_backward_raw, scan_forward_raw, sigmoid, silu, silu_grad, softplus, ConvCache,
    ScanBuffers, ScanDims, ScanGradBuffers, SsmState,
};
use crate::memory::TransientMeter;

use super::{LayerParams, ModelConfig};

/// Recurrent inference state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub conv: ConvCache,
    pub ssm: SsmState,
}

impl BlockCache {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            conv: ConvCache::zeros(cfg.d_inner(), cfg.d_conv),
            ssm: SsmState::zeros(cfg.d_inner(), cfg.d_state),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.conv.window.size_bytes() + self.ssm.h.size_bytes()
    }

    pub fn reset(&mut self) {
        self.conv.window.fill(0.0);
        self.ssm.h.fill(0.0);
    }
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockTape {
    t: usize,
    x: Vec<f64>,
    rstd: Vec<f64>,
    u: Vec<f64>,
    a_in: Vec<f64>,
    z: Vec<f64>,
    conv0: Vec<f64>,
    conv_out: Vec<f64>,
    v: Vec<f64>,
    dt_raw: Vec<f64>,
    b_raw: Vec<f64>,
    c_raw: Vec<f64>,
    rstd_dt: Vec<f64>,
    rstd_b: Vec<f64>,
    rstd_c: Vec<f64>,
    dt_n: Vec<f64>,
    b_n: Vec<f64>,
    c_n: Vec<f64>,
    dpre: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    h0: Vec<f64>,
    hist: Vec<f64>,
    s: Vec<f64>,
    zs: Vec<f64>,
    g: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl BlockTape {
    /// Step sizes entering discretisation, `[t, d_inner]`.
    pub(crate) fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// The (normalised, when enabled) step-size, B and C projections.
    pub(crate) fn dt_b_c(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.dt_n, &self.b_n, &self.c_n)
    }
}

fn zero_masked_rows(buf: &mut [f64], width: usize, mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (row, &live) in buf.chunks_exact_mut(width).zip(m) {
            if !live {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

fn split_columns(src: &[f64], width: usize, start: usize, len: usize, dst: &mut [f64]) {
    for (row, out) in src.chunks_exact(width).zip(dst.chunks_exact_mut(len)) {
        out.copy_from_slice(&row[start..start + len]);
    }
}

/// Forward pass of one block over `t` positions of the residual stream `x`.
///
/// `conv_cache` and `h` are advanced in place. Positions with
/// `mask[t] == false` (left padding) have their conv input and conv output
/// zeroed and leave the SSM state untouched. Every intermediate buffer is
/// drawn from `meter`; all but the returned output are released before
/// returning.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward(
    cfg: &ModelConfig,
    lp: &LayerParams,
    x: &[f64],
    t: usize,
    conv_cache: &mut [f64],
    h: &mut [f64],
    mask: Option<&[bool]>,
    meter: &mut TransientMeter,
    tape: Option<&mut BlockTape>,
) -> Result<Vec<f64>> {
    let d = cfg.d_model;
    let di = cfg.d_inner();
    let n = cfg.d_state;
    let r = cfg.dt_rank;
    let k = cfg.d_conv;
    let w = cfg.x_proj_width();
    let eps = cfg.rmsnorm_eps;
    let taping = tape.is_some();
    debug_assert_eq!(x.len(), t * d);

    let mut used = 0usize;
    let mut alloc = |meter: &mut TransientMeter, len: usize| -> Result<Vec<f64>> {
        used += len;
        meter.alloc(len)
    };

    let mut u = alloc(meter, t * d)?;
    let mut rstd = alloc(meter, t)?;
    rmsnorm_raw(x, d, lp.norm.data(), eps, &mut u, &mut rstd);

    let mut xz = alloc(meter, t * 2 * di)?;
    gemm(t, d, 2 * di, &u, false, lp.in_proj.data(), false, 0.0, &mut xz);
    let mut a_in = alloc(meter, t * di)?;
    let mut z = alloc(meter, t * di)?;
    split_columns(&xz, 2 * di, 0, di, &mut a_in);
    split_columns(&xz, 2 * di, di, di, &mut z);
    zero_masked_rows(&mut a_in, di, mask);

    let mut conv0 = if taping { alloc(meter, conv_cache.len())? } else { Vec::new() };
    if taping {
        conv0.copy_from_slice(conv_cache);
    }
    let mut conv_out = alloc(meter, t * di)?;
    conv_forward_raw(
        &a_in,
        t,
        di,
        k,
        lp.conv_weight.data(),
        lp.conv_bias.data(),
        conv_cache,
        &mut conv_out,
    );
    zero_masked_rows(&mut conv_out, di, mask);

    let mut v = alloc(meter, t * di)?;
    for (o, &c) in v.iter_mut().zip(&conv_out) {
        *o = silu(c);
    }

    let mut raw = alloc(meter, t * w)?;
    gemm(t, di, w, &v, false, lp.x_proj.data(), false, 0.0, &mut raw);
    let mut dt_raw = alloc(meter, t * r)?;
    let mut b_raw = alloc(meter, t * n)?;
    let mut c_raw = alloc(meter, t * n)?;
    split_columns(&raw, w, 0, r, &mut dt_raw);
    split_columns(&raw, w, r, n, &mut b_raw);
    split_columns(&raw, w, r + n, n, &mut c_raw);

    let (dt_n, b_n, c_n, rstd_dt, rstd_b, rstd_c) = if cfg.stabilization_norms {
        let mut dt_n = alloc(meter, t * r)?;
        let mut b_n = alloc(meter, t * n)?;
        let mut c_n = alloc(meter, t * n)?;
        let mut rs_dt = alloc(meter, t)?;
        let mut rs_b = alloc(meter, t)?;
        let mut rs_c = alloc(meter, t)?;
        rmsnorm_raw(&dt_raw, r, lp.dt_norm.data(), eps, &mut dt_n, &mut rs_dt);
        rmsnorm_raw(&b_raw, n, lp.b_norm.data(), eps, &mut b_n, &mut rs_b);
        rmsnorm_raw(&c_raw, n, lp.c_norm.data(), eps, &mut c_n, &mut rs_c);
        (dt_n, b_n, c_n, rs_dt, rs_b, rs_c)
    } else {
        (
            std::mem::take(&mut dt_raw),
            std::mem::take(&mut b_raw),
            std::mem::take(&mut c_raw),
            Vec::new(),
            Vec::new(),
            Vec::new(),
        )
    };

    let mut dpre = alloc(meter, t * di)?;
    for row in dpre.chunks_exact_mut(di) {
        row.copy_from_slice(lp.dt_bias.data());
    }
    gemm(t, r, di, &dt_n, false, lp.dt_proj.data(), false, 1.0, &mut dpre);
    let mut delta = alloc(meter, t * di)?;
    for (o, &p) in delta.iter_mut().zip(&dpre) {
        *o = softplus(p);
    }

    let mut a = alloc(meter, di * n)?;
    for (o, &l) in a.iter_mut().zip(lp.a_log.data()) {
        *o = -l.exp();
    }
    let mut h0 = if taping { alloc(meter, h.len())? } else { Vec::new() };
    if taping {
        h0.copy_from_slice(h);
    }
    let mut hist = if taping { alloc(meter, t * di * n)? } else { Vec::new() };
    let mut s = alloc(meter, t * di)?;
    scan_forward_raw(
        ScanDims { t, c: di, n },
        &a,
        lp.d_skip.data(),
        &ScanBuffers {
            x: &v,
            delta: &delta,
            b: &b_n,
            cm: &c_n,
        },
        mask,
        h,
        &mut s,
        if taping { Some(&mut hist) } else { None },
    );

    let mut zs = alloc(meter, t * di)?;
    let mut g = alloc(meter, t * di)?;
    for i in 0..t * di {
        zs[i] = silu(z[i]);
        g[i] = s[i] * zs[i];
    }

    let mut out = meter.alloc_copy(x)?;
    gemm(t, di, d, &g, false, lp.out_proj.data(), false, 1.0, &mut out);

    meter.release_values(used);
    if let Some(tape) = tape {
        *tape = BlockTape {
            t,
            x: x.to_vec(),
            rstd,
            u,
            a_in,
            z,
            conv0,
            conv_out,
            v,
            dt_raw,
            b_raw,
            c_raw,
            rstd_dt,
            rstd_b,
            rstd_c,
            dt_n,
            b_n,
            c_n,
            dpre,
            delta,
            a,
            h0,
            hist,
            s,
            zs,
            g,
            mask: mask.map(|m| m.to_vec()),
        };
    }
    Ok(out)
}

/// Backward pass of one block. Accumulates parameter gradients into `grads`
/// and returns the gradient w.r.t. the block input.
pub(crate) fn block_backward(
    cfg: &ModelConfig,
    lp: &LayerParams,
    tape: &BlockTape,
    dout: &[f64],
    grads: &mut LayerParams,
) -> Vec<f64> {
    let d = cfg.d_model;
    let di = cfg.d_inner();
    let n = cfg.d_state;
    let r = cfg.dt_rank;
    let k = cfg.d_conv;
    let w = cfg.x_proj_width();
    let t = tape.t;
    let mask = tape.mask.as_deref();

    let mut dx = dout.to_vec();

    gemm(di, t, d, &tape.g, true, dout, false, 1.0, grads.out_proj.data_mut());
    let mut dg = vec![0.0; t * di];
    gemm(t, d, di, dout, false, lp.out_proj.data(), true, 0.0, &mut dg);

    let mut ds = vec![0.0; t * di];
    let mut dz = vec![0.0; t * di];
    for i in 0..t * di {
        ds[i] = dg[i] * tape.zs[i];
        dz[i] = dg[i] * tape.s[i] * silu_grad(tape.z[i]);
    }

    let mut da = vec![0.0; di * n];
    let mut ddelta = vec![0.0; t * di];
    let mut db_n = vec![0.0; t * n];
    let mut dc_n = vec![0.0; t * n];
    let mut dv = vec![0.0; t * di];
    let mut dh0 = vec![0.0; di * n];
    scan_backward_raw(
        ScanDims { t, c: di, n },
        &tape.a,
        lp.d_skip.data(),
        &ScanBuffers {
            x: &tape.v,
            delta: &tape.delta,
            b: &tape.b_n,
            cm: &tape.c_n,
        },
        mask,
        &tape.h0,
        &tape.hist,
        &ds,
        None,
        ScanGradBuffers {
            da: &mut da,
            dd: grads.d_skip.data_mut(),
            ddelta: &mut ddelta,
            db: &mut db_n,
            dc: &mut dc_n,
            dx: &mut dv,
            dh0: &mut dh0,
        },
    );
    for ((g, &dav), &av) in grads.a_log.data_mut().iter_mut().zip(&da).zip(&tape.a) {
        *g += dav * av;
    }

    let mut ddpre = ddelta;
    for (g, &p) in ddpre.iter_mut().zip(&tape.dpre) {
        *g *= sigmoid(p);
    }
    for row in ddpre.chunks_exact(di) {
        for (acc, &v) in grads.dt_bias.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    gemm(r, t, di, &tape.dt_n, true, &ddpre, false, 1.0, grads.dt_proj.data_mut());
    let mut ddt_n = vec![0.0; t * r];
    gemm(t, di, r, &ddpre, false, lp.dt_proj.data(), true, 0.0, &mut ddt_n);

    let (ddt_raw, db_raw, dc_raw) = if cfg.stabilization_norms {
        let mut ddt = vec![0.0; t * r];
        let mut dbr = vec![0.0; t * n];
        let mut dcr = vec![0.0; t * n];
        rmsnorm_backward_raw(&tape.dt_raw, r, lp.dt_norm.data(), &tape.rstd_dt, &ddt_n, &mut ddt, grads.dt_norm.data_mut());
        rmsnorm_backward_raw(&tape.b_raw, n, lp.b_norm.data(), &tape.rstd_b, &db_n, &mut dbr, grads.b_norm.data_mut());
        rmsnorm_backward_raw(&tape.c_raw, n, lp.c_norm.data(), &tape.rstd_c, &dc_n, &mut dcr, grads.c_norm.data_mut());
        (ddt, dbr, dcr)
    } else {
        (ddt_n, db_n, dc_n)
    };

    let mut draw = vec![0.0; t * w];
    for (i, row) in draw.chunks_exact_mut(w).enumerate() {
        row[..r].copy_from_slice(&ddt_raw[i * r..(i + 1) * r]);
        row[r..r + n].copy_from_slice(&db_raw[i * n..(i + 1) * n]);
        row[r + n..].copy_from_slice(&dc_raw[i * n..(i + 1) * n]);
    }
    gemm(di, t, w, &tape.v, true, &draw, false, 1.0, grads.x_proj.data_mut());
    gemm(t, w, di, &draw, false, lp.x_proj.data(), true, 1.0, &mut dv);

    let mut dconv = dv;
    for (g, &c) in dconv.iter_mut().zip(&tape.conv_out) {
        *g *= silu_grad(c);
    }
    zero_masked_rows(&mut dconv, di, mask);

    let mut da_in = vec![0.0; t * di];
    let mut dcache = vec![0.0; di * (k - 1)];
    conv_backward_raw(
        &tape.a_in,
        t,
        di,
        k,
        lp.conv_weight.data(),
        &tape.conv0,
        &dconv,
        &mut da_in,
        grads.conv_weight.data_mut(),
        grads.conv_bias.data_mut(),
        &mut dcache,
    );
    zero_masked_rows(&mut da_in, di, mask);

    let mut dxz = vec![0.0; t * 2 * di];
    for (i, row) in dxz.chunks_exact_mut(2 * di).enumerate() {
        row[..di].copy_from_slice(&da_in[i * di..(i + 1) * di]);
        row[di..].copy_from_slice(&dz[i * di..(i + 1) * di]);
    }
    gemm(d, t, 2 * di, &tape.u, true, &dxz, false, 1.0, grads.in_proj.data_mut());
    let mut du = vec![0.0; t * d];
    gemm(t, 2 * di, d, &dxz, false, lp.in_proj.data(), true, 0.0, &mut du);

    let mut dxn = vec![0.0; t * d];
    rmsnorm_backward_raw(&tape.x, d, lp.norm.data(), &tape.rstd, &du, &mut dxn, grads.norm.data_mut());
    for (a, b) in dx.iter_mut().zip(&dxn) {
        *a += b;
    }
    dx
}

/// Runs one block over `x_seq` (`[T, d_model]`).
///
/// Without a cache the block starts from a zero conv window and zero SSM
/// state (full-sequence mode); with one it continues from that state
/// (incremental mode). Returns the block output and the advanced cache.
pub fn mamba_block_forward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    x_seq: &Array,
    cache: Option<&BlockCache>,
) -> Result<(Array, BlockCache)> {
    cfg.validate()?;
    if x_seq.ndim() != 2 || x_seq.shape()[1] != cfg.d_model {
        return Err(Error::shape(
            "mamba_block",
            format!("x {:?} must be [T, {}]", x_seq.shape(), cfg.d_model),
        ));
    }
    x_seq.check_finite("mamba_block")?;
    let mut next = match cache {
        Some(c) => {
            if c.conv.window.shape() != [cfg.d_inner(), cfg.d_conv - 1]
                || c.ssm.h.shape() != [cfg.d_inner(), cfg.d_state]
            {
                return Err(Error::shape("mamba_block", "cache does not match config"));
            }
            c.clone()
        }
        None => BlockCache::zeros(cfg),
    };
    let t = x_seq.shape()[0];
    let mut meter = TransientMeter::unbounded();
    let BlockCache { conv, ssm } = &mut next;
    let out = block_forward(
        cfg,
        layer,
        x_seq.data(),
        t,
        conv.window.data_mut(),
        ssm.h.data_mut(),
        None,
        &mut meter,
        None,
    )?;
    Ok((Array::new(vec![t, cfg.d_model], out)?, next))
}

/// Like [`mamba_block_forward`] from a fresh state, also returning the
/// step sizes and the B/C/step-size projections exactly as they enter the
/// discretisation. Used to inspect the stabilisation norms.
pub fn mamba_block_probe(
    cfg: &ModelConfig,
    layer: &LayerParams,
    x_seq: &Array,
) -> Result<BlockProbe> {
    if x_seq.ndim() != 2 || x_seq.shape()[1] != cfg.d_model {
        return Err(Error::shape("mamba_block", "x must be [T, d_model]"));
    }
    let t = x_seq.shape()[0];
    let mut cache = BlockCache::zeros(cfg);
    let mut tape = BlockTape::default();
    let mut meter = TransientMeter::unbounded();
    let out = block_forward(
        cfg,
        layer,
        x_seq.data(),
        t,
        cache.conv.window.data_mut(),
        cache.ssm.h.data_mut(),
        None,
        &mut meter,
        Some(&mut tape),
    )?;
    let (dt, b, c) = tape.dt_b_c();
    Ok(BlockProbe {
        output: Array::new(vec![t, cfg.d_model], out)?,
        dt: Array::new(vec![t, cfg.dt_rank], dt.to_vec())?,
        b: Array::new(vec![t, cfg.d_state], b.to_vec())?,
        c: Array::new(vec![t, cfg.d_state], c.to_vec())?,
        delta: Array::new(vec![t, cfg.d_inner()], tape.delta().to_vec())?,
    })
}

/// Intermediate activations of a block forward pass.
#[derive(Debug, Clone)]
pub struct BlockProbe {
    pub output: Array,
    /// Low-rank step-size projection after its norm, `[T, dt_rank]`.
    pub dt: Array,
    pub b: Array,
    pub c: Array,
    /// Positive step sizes, `[T, d_inner]`.
    pub delta: Array,
}
