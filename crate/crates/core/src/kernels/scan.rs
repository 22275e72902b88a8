//! Selective SSM recurrence.
//!
//! Discretisation: `Abar = exp(delta * A)` (zero-order hold) for the state
//! transition and Euler `delta * B` for the input coupling:
//!
//! ```text
//! h[c, n] <- exp(delta[c] * A[c, n]) * h[c, n] + delta[c] * B[n] * x[c]
//! y[c]     = sum_n C[n] * h[c, n] + D[c] * x[c]
//! ```
//!
//! The sequence form is a plain sequential fold of the single step.

use crate::array::Array;
use crate::error::{Error, Result};

/// Learned SSM parameters for one block: `a` is `[d_inner, n]` and strictly
/// negative, `d` is the `[d_inner]` skip coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    pub a: Array,
    pub d: Array,
}

impl ScanParams {
    pub fn new(a: Array, d: Array) -> Result<Self> {
        if a.ndim() != 2 || d.shape() != [a.shape()[0]] {
            return Err(Error::shape(
                "scan_params",
                format!("A {:?}, D {:?}", a.shape(), d.shape()),
            ));
        }
        if let Some(v) = a.data().iter().find(|&&v| !(v < 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "A must be strictly negative, found {v}"
            )));
        }
        d.check_finite("scan_params")?;
        Ok(Self { a, d })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Recurrent hidden state `h: [d_inner, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub h: Array,
}

impl SsmState {
    pub fn zeros(channels: usize, n: usize) -> Self {
        Self {
            h: Array::zeros(&[channels, n]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub t: usize,
    pub c: usize,
    pub n: usize,
}

/// Per-step inputs: `x`, `delta` are `[t, c]`; `b`, `cm` are `[t, n]`.
pub(crate) struct ScanBuffers<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub b: &'a [f64],
    pub cm: &'a [f64],
}

/// Folds the recurrence over `dims.t` steps. Steps with `mask[t] == false`
/// leave `h` untouched. When `hist` is given it receives `h` after every step
/// (`[t, c, n]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward_raw(
    dims: ScanDims,
    a: &[f64],
    dskip: &[f64],
    inp: &ScanBuffers<'_>,
    mask: Option<&[bool]>,
    h: &mut [f64],
    y: &mut [f64],
    mut hist: Option<&mut [f64]>,
) {
    let ScanDims { t: t_len, c, n } = dims;
    for t in 0..t_len {
        let live = mask.is_none_or(|m| m[t]);
        let bt = &inp.b[t * n..(t + 1) * n];
        let ct = &inp.cm[t * n..(t + 1) * n];
        for ch in 0..c {
            let xc = inp.x[t * c + ch];
            let hr = &mut h[ch * n..(ch + 1) * n];
            if live {
                let dt = inp.delta[t * c + ch];
                let ar = &a[ch * n..(ch + 1) * n];
                let coupling = dt * xc;
                for s in 0..n {
                    hr[s] = (dt * ar[s]).exp() * hr[s] + coupling * bt[s];
                }
            }
            let mut acc = 0.0;
            for s in 0..n {
                acc += ct[s] * hr[s];
            }
            y[t * c + ch] = acc + dskip[ch] * xc;
        }
        if let Some(hs) = hist.as_deref_mut() {
            hs[t * c * n..(t + 1) * c * n].copy_from_slice(h);
        }
    }
}

/// Gradient outputs of the scan. `da` and `dd` are accumulated into; all
/// other buffers are overwritten.
pub(crate) struct ScanGradBuffers<'a> {
    pub da: &'a mut [f64],
    pub dd: &'a mut [f64],
    pub ddelta: &'a mut [f64],
    pub db: &'a mut [f64],
    pub dc: &'a mut [f64],
    pub dx: &'a mut [f64],
    pub dh0: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward_raw(
    dims: ScanDims,
    a: &[f64],
    dskip: &[f64],
    inp: &ScanBuffers<'_>,
    mask: Option<&[bool]>,
    h0: &[f64],
    hist: &[f64],
    dy: &[f64],
    dh_final: Option<&[f64]>,
    out: ScanGradBuffers<'_>,
) {
    let ScanDims { t: t_len, c, n } = dims;
    let cn = c * n;
    let mut g = match dh_final {
        Some(d) => d.to_vec(),
        None => vec![0.0; cn],
    };
    out.db.iter_mut().for_each(|v| *v = 0.0);
    out.dc.iter_mut().for_each(|v| *v = 0.0);
    for t in (0..t_len).rev() {
        let live = mask.is_none_or(|m| m[t]);
        let h_t = &hist[t * cn..(t + 1) * cn];
        let h_prev = if t == 0 { h0 } else { &hist[(t - 1) * cn..t * cn] };
        let bt = &inp.b[t * n..(t + 1) * n];
        let ct = &inp.cm[t * n..(t + 1) * n];
        let dbt = &mut out.db[t * n..(t + 1) * n];
        let dct = &mut out.dc[t * n..(t + 1) * n];
        for ch in 0..c {
            let idx = t * c + ch;
            let gy = dy[idx];
            let xc = inp.x[idx];
            out.dd[ch] += gy * xc;
            let mut dxc = gy * dskip[ch];
            let gr = &mut g[ch * n..(ch + 1) * n];
            let hr = &h_t[ch * n..(ch + 1) * n];
            for s in 0..n {
                gr[s] += ct[s] * gy;
                dct[s] += gy * hr[s];
            }
            if live {
                let dt = inp.delta[idx];
                let ar = &a[ch * n..(ch + 1) * n];
                let dar = &mut out.da[ch * n..(ch + 1) * n];
                let hp = &h_prev[ch * n..(ch + 1) * n];
                let mut ddt = 0.0;
                for s in 0..n {
                    let abar = (dt * ar[s]).exp();
                    let dabar = gr[s] * hp[s] * abar;
                    dar[s] += dabar * dt;
                    ddt += dabar * ar[s] + gr[s] * bt[s] * xc;
                    dbt[s] += gr[s] * dt * xc;
                    dxc += gr[s] * dt * bt[s];
                    gr[s] *= abar;
                }
                out.ddelta[idx] = ddt;
            } else {
                out.ddelta[idx] = 0.0;
            }
            out.dx[idx] = dxc;
        }
    }
    out.dh0.copy_from_slice(&g);
}

struct Checked {
    dims: ScanDims,
}

fn check_seq(
    sp: &ScanParams,
    h: &SsmState,
    xs: &Array,
    deltas: &Array,
    bs: &Array,
    cs: &Array,
) -> Result<Checked> {
    let c = sp.channels();
    let n = sp.state_dim();
    if h.h.shape() != [c, n] {
        return Err(Error::shape("selective_scan", format!("state {:?} vs A [{c}, {n}]", h.h.shape())));
    }
    if xs.ndim() != 2 || xs.shape()[1] != c {
        return Err(Error::shape("selective_scan", format!("x {:?} must be [T, {c}]", xs.shape())));
    }
    let t = xs.shape()[0];
    if deltas.shape() != [t, c] || bs.shape() != [t, n] || cs.shape() != [t, n] {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "delta {:?}, B {:?}, C {:?} for T={t}, d_inner={c}, N={n}",
                deltas.shape(),
                bs.shape(),
                cs.shape()
            ),
        ));
    }
    for a in [xs, deltas, bs, cs, &h.h, &sp.a] {
        a.check_finite("selective_scan")?;
    }
    if let Some((index, &value)) = deltas.data().iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(Error::NonPositiveDelta { index, value });
    }
    Ok(Checked {
        dims: ScanDims { t, c, n },
    })
}

/// Runs the recurrence over `T` steps starting from `h0`; returns `(ys, h_T)`.
pub fn selective_scan_seq(
    sp: &ScanParams,
    h0: &SsmState,
    xs: &Array,
    deltas: &Array,
    bs: &Array,
    cs: &Array,
) -> Result<(Array, SsmState)> {
    let Checked { dims } = check_seq(sp, h0, xs, deltas, bs, cs)?;
    let mut h = h0.h.clone();
    let mut y = vec![0.0; dims.t * dims.c];
    let inp = ScanBuffers {
        x: xs.data(),
        delta: deltas.data(),
        b: bs.data(),
        cm: cs.data(),
    };
    scan_forward_raw(dims, sp.a.data(), sp.d.data(), &inp, None, h.data_mut(), &mut y, None);
    Ok((Array::new(vec![dims.t, dims.c], y)?, SsmState { h }))
}

/// One recurrence step for a single token.
pub fn selective_scan_step(
    sp: &ScanParams,
    h: &SsmState,
    x_t: &Array,
    delta_t: &Array,
    b_t: &Array,
    c_t: &Array,
) -> Result<(Array, SsmState)> {
    let c = sp.channels();
    let n = sp.state_dim();
    if x_t.len() != c || delta_t.len() != c || b_t.len() != n || c_t.len() != n {
        return Err(Error::shape(
            "selective_scan_step",
            format!(
                "x {:?}, delta {:?}, B {:?}, C {:?} for d_inner={c}, N={n}",
                x_t.shape(),
                delta_t.shape(),
                b_t.shape(),
                c_t.shape()
            ),
        ));
    }
    let as_row = |a: &Array, w: usize| Array::new(vec![1, w], a.data().to_vec());
    let (y, h) = selective_scan_seq(
        sp,
        h,
        &as_row(x_t, c)?,
        &as_row(delta_t, c)?,
        &as_row(b_t, n)?,
        &as_row(c_t, n)?,
    )?;
    Ok((y.reshape(&[c])?, h))
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub da: Array,
    pub dd: Array,
    pub ddelta: Array,
    pub db: Array,
    pub dc: Array,
    pub dx: Array,
    pub dh0: Array,
}

/// Reverse-mode gradient of the sequence scan given `dys` (`[T, d_inner]`)
/// and optionally the gradient flowing into the final state.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_seq_backward(
    sp: &ScanParams,
    h0: &SsmState,
    xs: &Array,
    deltas: &Array,
    bs: &Array,
    cs: &Array,
    dys: &Array,
    dh_final: Option<&Array>,
) -> Result<ScanGrads> {
    let Checked { dims } = check_seq(sp, h0, xs, deltas, bs, cs)?;
    let ScanDims { t, c, n } = dims;
    if dys.shape() != [t, c] {
        return Err(Error::shape("selective_scan", "upstream gradient must be [T, d_inner]"));
    }
    if let Some(dh) = dh_final {
        if dh.shape() != [c, n] {
            return Err(Error::shape("selective_scan", "final-state gradient must be [d_inner, N]"));
        }
    }
    let inp = ScanBuffers {
        x: xs.data(),
        delta: deltas.data(),
        b: bs.data(),
        cm: cs.data(),
    };
    let mut h = h0.h.clone();
    let mut y = vec![0.0; t * c];
    let mut hist = vec![0.0; t * c * n];
    scan_forward_raw(dims, sp.a.data(), sp.d.data(), &inp, None, h.data_mut(), &mut y, Some(&mut hist));

    let mut da = vec![0.0; c * n];
    let mut dd = vec![0.0; c];
    let mut ddelta = vec![0.0; t * c];
    let mut db = vec![0.0; t * n];
    let mut dc = vec![0.0; t * n];
    let mut dx = vec![0.0; t * c];
    let mut dh0 = vec![0.0; c * n];
    scan_backward_raw(
        dims,
        sp.a.data(),
        sp.d.data(),
        &inp,
        None,
        h0.h.data(),
        &hist,
        dys.data(),
        dh_final.map(|a| a.data()),
        ScanGradBuffers {
            da: &mut da,
            dd: &mut dd,
            ddelta: &mut ddelta,
            db: &mut db,
            dc: &mut dc,
            dx: &mut dx,
            dh0: &mut dh0,
        },
    );
    Ok(ScanGrads {
        da: Array::new(vec![c, n], da)?,
        dd: Array::from_vec(dd),
        ddelta: Array::new(vec![t, c], ddelta)?,
        db: Array::new(vec![t, n], db)?,
        dc: Array::new(vec![t, n], dc)?,
        dx: Array::new(vec![t, c], dx)?,
        dh0: Array::new(vec![c, n], dh0)?,
    })
}
