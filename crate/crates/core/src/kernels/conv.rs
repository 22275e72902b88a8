use crate::array::Array;
use crate::error::{Error, Result};

/// The last `d_conv - 1` pre-convolution inputs of every channel, stored
/// channel-major as `[channels, d_conv - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCache {
    pub window: Array,
}

impl ConvCache {
    pub fn zeros(channels: usize, d_conv: usize) -> Self {
        assert!(d_conv >= 2, "d_conv must be at least 2");
        Self {
            window: Array::zeros(&[channels, d_conv - 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.window.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.window.shape()[1]
    }
}

/// Depthwise causal convolution over `x: [t, c]` with kernel `w: [c, k]`.
///
/// `cache` (`[c, k-1]`) holds the inputs preceding `x` and is advanced in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_raw(
    x: &[f64],
    t_len: usize,
    c: usize,
    k: usize,
    w: &[f64],
    bias: &[f64],
    cache: &mut [f64],
    y: &mut [f64],
) {
    let hist = k - 1;
    let ext = |t: usize, ch: usize| -> f64 {
        if t < hist {
            cache[ch * hist + t]
        } else {
            x[(t - hist) * c + ch]
        }
    };
    for t in 0..t_len {
        let yr = &mut y[t * c..(t + 1) * c];
        for ch in 0..c {
            let wr = &w[ch * k..(ch + 1) * k];
            let mut acc = bias[ch];
            for (j, &wj) in wr.iter().enumerate() {
                acc += wj * ext(t + j, ch);
            }
            yr[ch] = acc;
        }
    }
    let mut next = vec![0.0; c * hist];
    for ch in 0..c {
        for j in 0..hist {
            next[ch * hist + j] = ext(t_len + j, ch);
        }
    }
    cache.copy_from_slice(&next);
}

/// Overwrites `dx` and `dcache`, accumulates `dw` and `dbias`.
/// `cache0` is the cache as it was before the forward call.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_raw(
    x: &[f64],
    t_len: usize,
    c: usize,
    k: usize,
    w: &[f64],
    cache0: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    dbias: &mut [f64],
    dcache: &mut [f64],
) {
    let hist = k - 1;
    dx.iter_mut().for_each(|v| *v = 0.0);
    dcache.iter_mut().for_each(|v| *v = 0.0);
    for t in 0..t_len {
        for ch in 0..c {
            let g = dy[t * c + ch];
            if g == 0.0 {
                continue;
            }
            dbias[ch] += g;
            for j in 0..k {
                let te = t + j;
                let (val, slot) = if te < hist {
                    (cache0[ch * hist + te], &mut dcache[ch * hist + te])
                } else {
                    (x[(te - hist) * c + ch], &mut dx[(te - hist) * c + ch])
                };
                dw[ch * k + j] += g * val;
                *slot += g * w[ch * k + j];
            }
        }
    }
}

fn check(x: &Array, weights: &Array, bias: &Array, cache: &ConvCache) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || weights.ndim() != 2 {
        return Err(Error::shape("causal_conv1d", "x and weights must be 2-D"));
    }
    let (t_len, c) = (x.shape()[0], x.shape()[1]);
    let k = weights.shape()[1];
    if weights.shape()[0] != c || bias.shape() != [c] {
        return Err(Error::shape(
            "causal_conv1d",
            format!(
                "x {:?}, weights {:?}, bias {:?}",
                x.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    if k < 2 || cache.window.shape() != [c, k - 1] {
        return Err(Error::shape(
            "causal_conv1d",
            format!("cache {:?} must be [{c}, {}]", cache.window.shape(), k.saturating_sub(1)),
        ));
    }
    for a in [x, weights, bias, &cache.window] {
        a.check_finite("causal_conv1d")?;
    }
    Ok((t_len, c, k))
}

/// Runs the depthwise causal convolution and returns the output together with
/// the advanced cache. Splitting a sequence into chunks and threading the cache
/// gives the same result as one call over the whole sequence.
pub fn causal_conv1d(
    x: &Array,
    weights: &Array,
    bias: &Array,
    cache: &ConvCache,
) -> Result<(Array, ConvCache)> {
    let (t_len, c, k) = check(x, weights, bias, cache)?;
    let mut y = vec![0.0; t_len * c];
    let mut window = cache.window.clone();
    conv_forward_raw(
        x.data(),
        t_len,
        c,
        k,
        weights.data(),
        bias.data(),
        window.data_mut(),
        &mut y,
    );
    Ok((Array::new(vec![t_len, c], y)?, ConvCache { window }))
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Array,
    pub dweights: Array,
    pub dbias: Array,
    pub dcache: Array,
}

pub fn causal_conv1d_backward(
    x: &Array,
    weights: &Array,
    bias: &Array,
    cache: &ConvCache,
    dy: &Array,
) -> Result<ConvGrads> {
    let (t_len, c, k) = check(x, weights, bias, cache)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("causal_conv1d", "upstream gradient shape differs from output"));
    }
    let mut dx = vec![0.0; t_len * c];
    let mut dw = vec![0.0; c * k];
    let mut db = vec![0.0; c];
    let mut dcache = vec![0.0; c * (k - 1)];
    conv_backward_raw(
        x.data(),
        t_len,
        c,
        k,
        weights.data(),
        cache.window.data(),
        dy.data(),
        &mut dx,
        &mut dw,
        &mut db,
        &mut dcache,
    );
    Ok(ConvGrads {
        dx: Array::new(vec![t_len, c], dx)?,
        dweights: Array::new(vec![c, k], dw)?,
        dbias: Array::from_vec(db),
        dcache: Array::new(vec![c, k - 1], dcache)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Array {
        Array::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn running_sum_example() {
        let w = Array::new(vec![1, 4], vec![1.0; 4]).unwrap();
        let b = Array::zeros(&[1]);
        let (y, cache) = causal_conv1d(&col(&[1.0, 2.0, 3.0]), &w, &b, &ConvCache::zeros(1, 4)).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
        assert_eq!(cache.window.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let w = Array::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Array::zeros(&[1]);
        let cache = ConvCache {
            window: Array::new(vec![1, 3], vec![9.0, -4.0, 2.5]).unwrap(),
        };
        let x = col(&[0.5, -1.0, 7.0, 3.0]);
        let (y, _) = causal_conv1d(&x, &w, &b, &cache).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn chunked_equals_whole() {
        let w = Array::new(vec![1, 4], vec![1.0; 4]).unwrap();
        let b = Array::zeros(&[1]);
        let fresh = ConvCache::zeros(1, 4);
        let (whole, whole_cache) = causal_conv1d(&col(&[1.0, 2.0, 3.0]), &w, &b, &fresh).unwrap();
        let (y1, c1) = causal_conv1d(&col(&[1.0, 2.0]), &w, &b, &fresh).unwrap();
        let (y2, c2) = causal_conv1d(&col(&[3.0]), &w, &b, &c1).unwrap();
        assert_eq!([y1.data(), y2.data()].concat(), whole.data());
        assert_eq!(c2, whole_cache);
    }

    #[test]
    fn rejects_bad_cache_width() {
        let w = Array::new(vec![1, 4], vec![1.0; 4]).unwrap();
        let b = Array::zeros(&[1]);
        let cache = ConvCache {
            window: Array::zeros(&[1, 2]),
        };
        assert!(matches!(
            causal_conv1d(&col(&[1.0]), &w, &b, &cache),
            Err(Error::Shape { .. })
        ));
    }
}
