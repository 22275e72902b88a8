//! Name-dispatched reverse-mode gradients over `Array` inputs.

use std::str::FromStr;

use crate::array::Array;
use crate::error::{Error, Result};

use super::{
    causal_conv1d_backward, cross_entropy, embedding_backward, matmul_backward, rmsnorm_backward,
    selective_scan_seq_backward, silu_backward, softplus_backward, ConvCache, ScanParams, SsmState,
};

/// A differentiable kernel, with any non-tensor hyperparameters it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradOp {
    RmsNorm { eps: f64 },
    Softplus,
    Silu,
    CausalConv1d,
    SelectiveScanSeq,
    Matmul,
    Embedding,
    CrossEntropy { z_coeff: f64 },
}

impl FromStr for GradOp {
    type Err = Error;

    /// Parses an op name; hyperparameters take their defaults
    /// (`eps = 1e-6`, `z_coeff = 0`).
    fn from_str(name: &str) -> Result<Self> {
        Ok(match name {
            "rmsnorm" => GradOp::RmsNorm { eps: 1e-6 },
            "softplus" => GradOp::Softplus,
            "silu" => GradOp::Silu,
            "causal_conv1d" => GradOp::CausalConv1d,
            "selective_scan_seq" => GradOp::SelectiveScanSeq,
            "matmul" => GradOp::Matmul,
            "embedding" => GradOp::Embedding,
            "cross_entropy" => GradOp::CrossEntropy { z_coeff: 0.0 },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

fn arity(op: &str, inputs: &[&Array], n: usize, upstream: &[&Array], m: usize) -> Result<()> {
    if inputs.len() != n || upstream.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{op} takes {n} inputs and {m} upstream gradient(s), got {} and {}",
            inputs.len(),
            upstream.len()
        )));
    }
    Ok(())
}

fn as_ids(a: &Array) -> Result<Vec<usize>> {
    a.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!("{v} is not a token id")))
            }
        })
        .collect()
}

/// Gradients of `op` with respect to every differentiable input.
///
/// Input and output orders:
///
/// | op | inputs | upstream | returns |
/// |----|--------|----------|---------|
/// | rmsnorm | x, gain | dy | dx, dgain |
/// | softplus, silu | x | dy | dx |
/// | causal_conv1d | x, weights, bias, cache | dy | dx, dweights, dbias, dcache |
/// | selective_scan_seq | x, delta, B, C, A, D, h0 | dy \[, dh_T\] | dx, ddelta, dB, dC, dA, dD, dh0 |
/// | matmul | a, b | dc | da, db |
/// | embedding | ids, table | dy | dtable |
/// | cross_entropy | logits, targets, mask (0/1) | dloss (scalar) | dlogits |
pub fn grad(op: GradOp, inputs: &[&Array], upstream: &[&Array]) -> Result<Vec<Array>> {
    match op {
        GradOp::RmsNorm { eps } => {
            arity("rmsnorm", inputs, 2, upstream, 1)?;
            let (dx, dg) = rmsnorm_backward(inputs[0], inputs[1], eps, upstream[0])?;
            Ok(vec![dx, dg])
        }
        GradOp::Softplus => {
            arity("softplus", inputs, 1, upstream, 1)?;
            Ok(vec![softplus_backward(inputs[0], upstream[0])?])
        }
        GradOp::Silu => {
            arity("silu", inputs, 1, upstream, 1)?;
            Ok(vec![silu_backward(inputs[0], upstream[0])?])
        }
        GradOp::CausalConv1d => {
            arity("causal_conv1d", inputs, 4, upstream, 1)?;
            let cache = ConvCache {
                window: inputs[3].clone(),
            };
            let g = causal_conv1d_backward(inputs[0], inputs[1], inputs[2], &cache, upstream[0])?;
            Ok(vec![g.dx, g.dweights, g.dbias, g.dcache])
        }
        GradOp::SelectiveScanSeq => {
            arity("selective_scan_seq", inputs, 7, upstream, 1)?;
            let sp = ScanParams::new(inputs[4].clone(), inputs[5].clone())?;
            let h0 = SsmState {
                h: inputs[6].clone(),
            };
            let g = selective_scan_seq_backward(
                &sp,
                &h0,
                inputs[0],
                inputs[1],
                inputs[2],
                inputs[3],
                upstream[0],
                upstream.get(1).copied(),
            )?;
            Ok(vec![g.dx, g.ddelta, g.db, g.dc, g.da, g.dd, g.dh0])
        }
        GradOp::Matmul => {
            arity("matmul", inputs, 2, upstream, 1)?;
            let (da, db) = matmul_backward(inputs[0], inputs[1], upstream[0])?;
            Ok(vec![da, db])
        }
        GradOp::Embedding => {
            arity("embedding", inputs, 2, upstream, 1)?;
            let ids = as_ids(inputs[0])?;
            Ok(vec![embedding_backward(inputs[1].shape(), &ids, upstream[0])?])
        }
        GradOp::CrossEntropy { z_coeff } => {
            arity("cross_entropy", inputs, 3, upstream, 1)?;
            let targets = as_ids(inputs[1])?;
            let mask: Vec<bool> = inputs[2].data().iter().map(|&m| m != 0.0).collect();
            let out = cross_entropy(inputs[0], &targets, &mask, z_coeff)?;
            let mut d = out.dlogits;
            d.scale(upstream[0].data()[0]);
            Ok(vec![d])
        }
    }
}
