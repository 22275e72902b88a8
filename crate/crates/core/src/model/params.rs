use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::ScanParams;

use super::ModelConfig;

/// Weights of one Mamba block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Pre-norm gain, `[d_model]`.
    pub norm: Array,
    /// `[d_model, 2 * d_inner]`: the conv branch followed by the gate branch.
    pub in_proj: Array,
    /// `[d_inner, d_conv]`.
    pub conv_weight: Array,
    pub conv_bias: Array,
    /// `[d_inner, dt_rank + 2 * d_state]`.
    pub x_proj: Array,
    pub dt_norm: Array,
    pub b_norm: Array,
    pub c_norm: Array,
    /// `[dt_rank, d_inner]`.
    pub dt_proj: Array,
    pub dt_bias: Array,
    /// `A = -exp(a_log)`, `[d_inner, d_state]`.
    pub a_log: Array,
    pub d_skip: Array,
    /// `[d_inner, d_model]`.
    pub out_proj: Array,
}

impl LayerParams {
    fn tensors(&self) -> [(&'static str, &Array); 13] {
        [
            ("norm", &self.norm),
            ("in_proj", &self.in_proj),
            ("conv_weight", &self.conv_weight),
            ("conv_bias", &self.conv_bias),
            ("x_proj", &self.x_proj),
            ("dt_norm", &self.dt_norm),
            ("b_norm", &self.b_norm),
            ("c_norm", &self.c_norm),
            ("dt_proj", &self.dt_proj),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("out_proj", &self.out_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Array); 13] {
        [
            ("norm", &mut self.norm),
            ("in_proj", &mut self.in_proj),
            ("conv_weight", &mut self.conv_weight),
            ("conv_bias", &mut self.conv_bias),
            ("x_proj", &mut self.x_proj),
            ("dt_norm", &mut self.dt_norm),
            ("b_norm", &mut self.b_norm),
            ("c_norm", &mut self.c_norm),
            ("dt_proj", &mut self.dt_proj),
            ("dt_bias", &mut self.dt_bias),
            ("a_log", &mut self.a_log),
            ("d_skip", &mut self.d_skip),
            ("out_proj", &mut self.out_proj),
        ]
    }

    /// `A = -exp(a_log)`.
    pub fn a(&self) -> Array {
        let data = self.a_log.data().iter().map(|v| -v.exp()).collect();
        Array::new(self.a_log.shape().to_vec(), data).expect("same shape")
    }

    pub fn scan_params(&self) -> Result<ScanParams> {
        ScanParams::new(self.a(), self.d_skip.clone())
    }
}

/// All model weights. The output head has its own storage unless the
/// configuration ties it to the input embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    /// `[vocab, d_model]`.
    pub embedding: Array,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array,
    /// `[d_model, vocab]`; `None` when tied.
    pub output_head: Option<Array>,
}

impl Params {
    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, a)| (format!("layers.{i}.{n}"), a)));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(head) = &self.output_head {
            out.push(("output_head".to_string(), head));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, a)| (format!("layers.{i}.{n}"), a)),
            );
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(head) = &mut self.output_head {
            out.push(("output_head".to_string(), head));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    /// Same structure, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, a) in z.tensors_mut() {
            a.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, a) in self.tensors_mut() {
            a.scale(k);
        }
    }

    /// Rebuilds parameters from named arrays, checking every expected tensor is
    /// present with the right shape.
    pub fn from_named(config: ModelConfig, mut named: std::collections::HashMap<String, Array>) -> Result<Self> {
        let mut params = init_params(&config, 0)?;
        for (name, slot) in params.tensors_mut() {
            let a = named
                .remove(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if a.shape() != slot.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    slot.shape()
                )));
            }
            *slot = a;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }
}

const PROJ_STD: f64 = 0.02;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Inverse of softplus: returns `b` with `softplus(b) == dt`.
fn inverse_softplus(dt: f64) -> f64 {
    dt + (-(-dt).exp_m1()).ln()
}

/// Deterministic initialisation for a given seed.
///
/// Projections are `Normal(0, 0.02^2)`, with `out_proj` further scaled by
/// `1 / sqrt(2 * n_layers)`. Conv taps are uniform in `±1/sqrt(d_conv)`.
/// `A` spans `-1..-N` per channel, and the step-size bias is set so that
/// `softplus(dt_bias)` is log-uniform in `[1e-3, 1e-1]`. Gains start at 1,
/// `D` at 1, biases at 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let di = config.d_inner();
    let n = config.d_state;
    let r = config.dt_rank;
    let k = config.d_conv;
    let out_std = PROJ_STD / (2.0 * config.n_layers as f64).sqrt();

    let embedding = Array::randn(&[config.vocab_size, d], PROJ_STD, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let in_proj = Array::randn(&[d, 2 * di], PROJ_STD, &mut rng);
        let bound = 1.0 / (k as f64).sqrt();
        let conv_weight = Array::new(
            vec![di, k],
            (0..di * k).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        let x_proj = Array::randn(&[di, r + 2 * n], PROJ_STD, &mut rng);
        let dt_proj = Array::randn(&[r, di], PROJ_STD, &mut rng);
        let dt_bias = Array::from_vec(
            (0..di)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let dt = (u * (DT_MAX.ln() - DT_MIN.ln()) + DT_MIN.ln()).exp();
                    inverse_softplus(dt)
                })
                .collect(),
        );
        let a_log = Array::new(
            vec![di, n],
            (0..di * n).map(|i| ((i % n + 1) as f64).ln()).collect(),
        )?;
        let out_proj = Array::randn(&[di, d], out_std, &mut rng);
        layers.push(LayerParams {
            norm: Array::filled(&[d], 1.0),
            in_proj,
            conv_weight,
            conv_bias: Array::zeros(&[di]),
            x_proj,
            dt_norm: Array::filled(&[r], 1.0),
            b_norm: Array::filled(&[n], 1.0),
            c_norm: Array::filled(&[n], 1.0),
            dt_proj,
            dt_bias,
            a_log,
            d_skip: Array::filled(&[di], 1.0),
            out_proj,
        });
    }
    let output_head = if config.tied_embedding {
        None
    } else {
        Some(Array::randn(&[d, config.vocab_size], PROJ_STD, &mut rng))
    };
    Ok(Params {
        config: config.clone(),
        embedding,
        layers,
        final_norm: Array::filled(&[d], 1.0),
        output_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::softplus;

    #[test]
    fn deterministic_for_seed() {
        let c = ModelConfig::desk();
        assert_eq!(init_params(&c, 7).unwrap(), init_params(&c, 7).unwrap());
        assert_ne!(init_params(&c, 7).unwrap(), init_params(&c, 8).unwrap());
    }

    #[test]
    fn count_matches_shape_arithmetic() {
        // Desk config by hand: d=64, di=128, N=16, R=4, K=4, V=256.
        // per layer: 64 + 64*256 + 128*4 + 128 + 128*36 + 36 + 4*128 + 128
        //          + 128*16 + 128 + 128*64 = 32_740
        // total: 256*64 + 2*32_740 + 64 + 64*256 = 98_312
        let c = ModelConfig::desk();
        let p = init_params(&c, 0).unwrap();
        assert_eq!(p.count(), 98_312);
        assert_eq!(c.param_count(), 98_312);

        let mut tied = c.clone();
        tied.tied_embedding = true;
        assert_eq!(init_params(&tied, 0).unwrap().count(), 98_312 - 64 * 256);
    }

    #[test]
    fn a_is_negative_and_spans_state_indices() {
        let p = init_params(&ModelConfig::desk(), 3).unwrap();
        for layer in &p.layers {
            let a = layer.a();
            assert!(a.data().iter().all(|&v| v < 0.0));
            assert!((a.get(&[5, 0]) + 1.0).abs() < 1e-12);
            assert!((a.get(&[5, 15]) + 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dt_bias_range() {
        let p = init_params(&ModelConfig::desk(), 3).unwrap();
        for &b in p.layers[0].dt_bias.data() {
            let dt = softplus(b);
            assert!((DT_MIN * (1.0 - 1e-9)..=DT_MAX * (1.0 + 1e-9)).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn untied_head_is_separate_storage() {
        let mut p = init_params(&ModelConfig::desk(), 1).unwrap();
        let before = p.embedding.clone();
        p.output_head.as_mut().unwrap().fill(3.0);
        assert_eq!(p.embedding, before);
    }
}
