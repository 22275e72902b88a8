use crate::array::Array;
use crate::error::Result;

use super::SOFTPLUS_THRESHOLD;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn map(x: &Array, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Array> {
    x.check_finite(op)?;
    let data = x.data().iter().map(|&v| f(v)).collect();
    Array::new(x.shape().to_vec(), data)
}

fn map_backward(
    x: &Array,
    dy: &Array,
    op: &'static str,
    f: impl Fn(f64) -> f64,
) -> Result<Array> {
    if x.shape() != dy.shape() {
        return Err(crate::error::Error::shape(
            op,
            format!("input {:?} vs upstream {:?}", x.shape(), dy.shape()),
        ));
    }
    x.check_finite(op)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * f(v))
        .collect();
    Array::new(x.shape().to_vec(), data)
}

pub fn softplus_array(x: &Array) -> Result<Array> {
    map(x, "softplus", softplus)
}

pub fn softplus_backward(x: &Array, dy: &Array) -> Result<Array> {
    map_backward(x, dy, "softplus", softplus_grad)
}

pub fn silu_array(x: &Array) -> Result<Array> {
    map(x, "silu", silu)
}

pub fn silu_backward(x: &Array, dy: &Array) -> Result<Array> {
    map_backward(x, dy, "silu", silu_grad)
}
