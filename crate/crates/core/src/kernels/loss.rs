use crate::array::Array;
use crate::error::{Error, Result};

/// Sum over supervised rows of `CE + z_coeff * lse^2`; writes the gradient of
/// that sum, scaled by `scale`, into `dlogits`. Returns `(ce_sum, z_sum)`.
pub(crate) fn cross_entropy_sum_raw(
    logits: &[f64],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
    z_coeff: f64,
    scale: f64,
    dlogits: &mut [f64],
) -> (f64, f64) {
    let mut ce = 0.0;
    let mut zsum = 0.0;
    for (r, (row, drow)) in logits
        .chunks_exact(vocab)
        .zip(dlogits.chunks_exact_mut(vocab))
        .enumerate()
    {
        if !mask[r] {
            drow.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let tgt = targets[r];
        ce += lse - row[tgt];
        zsum += lse * lse;
        let zk = 1.0 + 2.0 * z_coeff * lse;
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = scale * zk * (v - lse).exp();
        }
        drow[tgt] -= scale;
    }
    (ce, zsum)
}

/// Loss value and the gradient of the loss w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean cross-entropy over supervised positions.
    pub cross_entropy: f64,
    /// Mean squared log-partition over supervised positions.
    pub z_term: f64,
    pub count: usize,
    pub dlogits: Array,
}

/// Mean masked cross-entropy plus `z_coeff * mean(logsumexp^2)`.
/// `mask[t] == false` excludes position `t`.
pub fn cross_entropy(
    logits: &Array,
    targets: &[usize],
    mask: &[bool],
    z_coeff: f64,
) -> Result<LossOutput> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() || mask.len() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!(
                "logits {:?}, {} targets, {} mask entries",
                logits.shape(),
                targets.len(),
                mask.len()
            ),
        ));
    }
    if !(z_coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!("z_coeff must be >= 0, got {z_coeff}")));
    }
    logits.check_finite("cross_entropy")?;
    let vocab = logits.shape()[1];
    if let Some(&id) = targets
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t)
        .find(|&&t| t >= vocab)
    {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut dlogits = vec![0.0; logits.len()];
    let scale = 1.0 / count as f64;
    let (ce, z) = cross_entropy_sum_raw(logits.data(), vocab, targets, mask, z_coeff, scale, &mut dlogits);
    let ce = ce / count as f64;
    let z = z / count as f64;
    Ok(LossOutput {
        loss: ce + z_coeff * z,
        cross_entropy: ce,
        z_term: z,
        count,
        dlogits: Array::new(logits.shape().to_vec(), dlogits)?,
    })
}

/// Gathers rows of `table` (`[vocab, d]`).
pub fn embedding(table: &Array, ids: &[usize]) -> Result<Array> {
    if table.ndim() != 2 {
        return Err(Error::shape("embedding", "table must be 2-D"));
    }
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    if ids.is_empty() {
        return Err(Error::shape("embedding", "no ids"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        out.extend_from_slice(table.row(id));
    }
    Array::new(vec![ids.len(), d], out)
}

/// Scatter-adds upstream rows into a zero table of the given shape.
pub fn embedding_backward(table_shape: &[usize], ids: &[usize], dy: &Array) -> Result<Array> {
    if table_shape.len() != 2 || dy.shape() != [ids.len(), table_shape[1]] {
        return Err(Error::shape("embedding", "upstream gradient must be [len(ids), d]"));
    }
    let (vocab, d) = (table_shape[0], table_shape[1]);
    let mut g = Array::zeros(table_shape);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let dst = &mut g.data_mut()[id * d..(id + 1) * d];
        for (a, b) in dst.iter_mut().zip(dy.row(r)) {
            *a += b;
        }
    }
    Ok(g)
}
