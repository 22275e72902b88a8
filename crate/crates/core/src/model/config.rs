use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the pure-Mamba language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Expansion factor; `d_inner = expand * d_model`.
    pub expand: usize,
    pub vocab_size: usize,
    pub tied_embedding: bool,
    pub d_conv: usize,
    /// Width of the low-rank bottleneck that produces the step size.
    pub dt_rank: usize,
    /// SSM state dimension `N`.
    pub d_state: usize,
    pub rmsnorm_eps: f64,
    /// RMSNorm on the step-size, B and C projections.
    pub stabilization_norms: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The 7B-scale configuration: 64 layers, width 4096, 65024-token vocab.
    pub fn paper() -> Self {
        Self {
            n_layers: 64,
            d_model: 4096,
            expand: 2,
            vocab_size: 65024,
            tied_embedding: false,
            d_conv: 4,
            dt_rank: 16,
            d_state: 16,
            rmsnorm_eps: 1e-6,
            stabilization_norms: true,
        }
    }

    /// Small byte-level configuration that trains on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            expand: 2,
            vocab_size: 256,
            tied_embedding: false,
            d_conv: 4,
            dt_rank: 4,
            d_state: 16,
            rmsnorm_eps: 1e-6,
            stabilization_norms: true,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Width of the `x_proj` output: step-size rank plus B and C.
    pub fn x_proj_width(&self) -> usize {
        self.dt_rank + 2 * self.d_state
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("expand", self.expand),
            ("vocab_size", self.vocab_size),
            ("dt_rank", self.dt_rank),
            ("d_state", self.d_state),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_conv < 2 {
            return Err(Error::Config("model.d_conv must be at least 2".into()));
        }
        if !(self.rmsnorm_eps > 0.0) || !self.rmsnorm_eps.is_finite() {
            return Err(Error::Config("model.rmsnorm_eps must be a small positive number".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let di = self.d_inner();
        let n = self.d_state;
        let r = self.dt_rank;
        let per_layer = d // block norm
            + d * 2 * di // in_proj
            + di * self.d_conv + di // conv weight + bias
            + di * (r + 2 * n) // x_proj
            + r + 2 * n // stabilisation gains
            + r * di + di // dt_proj + dt_bias
            + di * n + di // A_log + D
            + di * d; // out_proj
        let head = if self.tied_embedding { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.n_layers * per_layer + d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = ModelConfig::paper();
        assert_eq!(
            (p.n_layers, p.d_model, p.expand, p.vocab_size, p.tied_embedding, p.d_conv, p.dt_rank, p.d_state),
            (64, 4096, 2, 65024, false, 4, 16, 16)
        );
        let d = ModelConfig::desk();
        assert_eq!(
            (d.n_layers, d.d_model, d.expand, d.vocab_size, d.tied_embedding, d.d_conv, d.dt_rank, d.d_state),
            (2, 64, 2, 256, false, 4, 4, 16)
        );
        p.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn paper_scale_count_is_about_seven_billion() {
        let n = ModelConfig::paper().param_count() as f64;
        assert!((7.0e9..7.5e9).contains(&n), "{n}");
    }

    #[test]
    fn rejects_zero_dims() {
        let mut c = ModelConfig::desk();
        c.d_model = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.d_conv = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"d_model": 8, "heads": 2}"#);
        assert!(r.unwrap_err().to_string().contains("heads"));
    }
}
