use crate::array::Array;
use crate::error::{Error, Result};

/// Row-wise RMSNorm over the last axis of a `[rows, d]` buffer.
/// Writes the reciprocal RMS of each row into `rstd` for the backward pass.
pub(crate) fn rmsnorm_raw(
    x: &[f64],
    d: usize,
    gain: &[f64],
    eps: f64,
    out: &mut [f64],
    rstd: &mut [f64],
) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert_eq!(gain.len(), d);
    for ((xr, yr), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = if ms + eps > 0.0 { 1.0 / (ms + eps).sqrt() } else { 0.0 };
        *r = inv;
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * inv * g;
        }
    }
}

/// Accumulates `dgain` and overwrites `dx`.
pub(crate) fn rmsnorm_backward_raw(
    x: &[f64],
    d: usize,
    gain: &[f64],
    rstd: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
) {
    let rows = x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d));
    for (((xr, dyr), dxr), &r) in rows.zip(rstd) {
        let mut dot = 0.0;
        for i in 0..d {
            dot += gain[i] * dyr[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * r;
        }
        let k = r * r * r * dot / d as f64;
        for i in 0..d {
            dxr[i] = r * gain[i] * dyr[i] - k * xr[i];
        }
    }
}

fn check(x: &Array, gain: &Array, eps: f64) -> Result<()> {
    if gain.ndim() != 1 || gain.len() != x.last_dim() {
        return Err(Error::shape(
            "rmsnorm",
            format!("gain {:?} does not match input {:?}", gain.shape(), x.shape()),
        ));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("rmsnorm eps must be >= 0, got {eps}")));
    }
    x.check_finite("rmsnorm")?;
    gain.check_finite("rmsnorm")
}

/// `y = x / sqrt(mean(x^2) + eps) * gain`, normalising over the last axis.
pub fn rmsnorm(x: &Array, gain: &Array, eps: f64) -> Result<Array> {
    check(x, gain, eps)?;
    let d = x.last_dim();
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; x.rows()];
    rmsnorm_raw(x.data(), d, gain.data(), eps, &mut out, &mut rstd);
    Array::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dgain)` for upstream gradient `dy`.
pub fn rmsnorm_backward(x: &Array, gain: &Array, eps: f64, dy: &Array) -> Result<(Array, Array)> {
    check(x, gain, eps)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("rmsnorm", "upstream gradient shape differs from input"));
    }
    let d = x.last_dim();
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; x.rows()];
    rmsnorm_raw(x.data(), d, gain.data(), eps, &mut out, &mut rstd);
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    rmsnorm_backward_raw(x.data(), d, gain.data(), &rstd, dy.data(), &mut dx, &mut dgain);
    Ok((Array::new(x.shape().to_vec(), dx)?, Array::from_vec(dgain)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(d: usize) -> Array {
        Array::filled(&[d], 1.0)
    }

    #[test]
    fn unit_rms_input_is_fixed_point() {
        let x = Array::from_vec(vec![1.0; 4]);
        let y = rmsnorm(&x, &ones(4), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn three_four_example() {
        let x = Array::from_vec(vec![3.0, 4.0]);
        let y = rmsnorm(&x, &ones(2), 0.0).unwrap();
        // rms = sqrt(12.5)
        assert!((y.data()[0] - 0.84853).abs() < 1e-5);
        assert!((y.data()[1] - 1.13137).abs() < 1e-5);
    }

    #[test]
    fn zero_maps_to_zero() {
        let x = Array::from_vec(vec![0.0, 0.0]);
        let y = rmsnorm(&x, &ones(2), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn normalises_each_row_independently() {
        let x = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, -10.0, 0.5, 7.0]).unwrap();
        let y = rmsnorm(&x, &ones(3), 0.0).unwrap();
        for r in 0..2 {
            let ms: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((ms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let x = Array::from_vec(vec![1.0, 2.0]);
        assert!(matches!(rmsnorm(&x, &ones(3), 0.0), Err(Error::Shape { .. })));
        let bad = Array::from_vec(vec![1.0, f64::INFINITY]);
        assert!(matches!(rmsnorm(&bad, &ones(2), 0.0), Err(Error::NonFinite { .. })));
    }
}
