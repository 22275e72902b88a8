use crate::array::Array;
use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// With `a_t` set, `a` is stored as `[k, m]`; with `b_t` set, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers of exactly m*k, k*n and m*n elements,
    // checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims(a: &Array, b: &Array) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    a.check_finite("matmul")?;
    b.check_finite("matmul")?;
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k, n) = dims(a, b)?;
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
    Array::new(vec![m, n], c)
}

/// Returns `(da, db)` for `c = a * b` and upstream `dc`.
pub fn matmul_backward(a: &Array, b: &Array, dc: &Array) -> Result<(Array, Array)> {
    let (m, k, n) = dims(a, b)?;
    if dc.shape() != [m, n] {
        return Err(Error::shape("matmul", "upstream gradient must match output shape"));
    }
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, dc.data(), false, b.data(), true, 0.0, &mut da);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, dc.data(), false, 0.0, &mut db);
    Ok((Array::new(vec![m, k], da)?, Array::new(vec![k, n], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_with_transposes() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Array::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }
}
