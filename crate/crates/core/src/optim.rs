//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "optimizer: betas must lie in (0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer: need eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Norm gains, biases, `a_log` and the skip coefficient are not decayed.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.ends_with("norm") || leaf.ends_with("bias") || leaf == "a_log" || leaf == "d_skip")
}

/// One AdamW update of a flat buffer. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &OptimizerConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * p[i]);
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Params,
    pub v: Params,
}

impl Moments {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Applies one AdamW step to every parameter tensor.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("AdamW step index starts at 1".into()));
    }
    let gs = grads.tensors();
    let ms = moments.m.tensors_mut();
    let vs = moments.v.tensors_mut();
    let ps = params.tensors_mut();
    if gs.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::shape("adamw", "parameter, gradient and moment sets differ"));
    }
    for (((name, p), (_, g)), ((_, m), (_, v))) in ps.into_iter().zip(gs).zip(ms.into_iter().zip(vs)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("adamw", format!("tensor {name}")));
        }
        adamw_update(
            p.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            step,
            lr,
            cfg,
            decays(&name),
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = OptimizerConfig::default();
        let (mut p, mut m, mut v) = (vec![2.0], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.01, &cfg, true);
        assert!((p[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn first_step_from_zero() {
        let cfg = OptimizerConfig::default();
        let (mut p, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        let lr = 1e-3;
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, lr, &cfg, true);
        assert!((p[0] + lr / (1.0 + cfg.eps)).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (mut p, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        let lr = 1e-2;
        let mut last = 0.0;
        for step in 1..=200 {
            let before = p[0];
            adamw_update(&mut p, &[0.37], &mut m, &mut v, step, lr, &cfg, true);
            last = before - p[0];
        }
        assert!((last - lr).abs() < 1e-8);
    }

    #[test]
    fn exemptions() {
        assert!(decays("layers.0.in_proj"));
        assert!(decays("embedding"));
        assert!(decays("output_head"));
        for name in ["layers.1.norm", "layers.1.b_norm", "final_norm", "layers.0.conv_bias", "layers.0.dt_bias", "layers.0.a_log", "layers.0.d_skip"] {
            assert!(!decays(name), "{name}");
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let p0 = init_params(&ModelConfig::desk(), 0).unwrap();
        let mut p = p0.clone();
        let mut g = p0.zeros_like();
        for (_, a) in g.tensors_mut() {
            a.fill(0.5);
        }
        let mut mo = Moments::zeros_like(&p);
        adamw_step(&mut p, &g, &mut mo, 1, 0.0, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn head_step_leaves_embedding_untouched() {
        let p0 = init_params(&ModelConfig::desk(), 0).unwrap();
        let mut p = p0.clone();
        let mut g = p0.zeros_like();
        g.output_head.as_mut().unwrap().fill(1.0);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        adamw_step(&mut p, &g, &mut Moments::zeros_like(&p0), 1, 1e-2, &cfg).unwrap();
        assert_eq!(p.embedding, p0.embedding);
        assert_ne!(p.output_head, p0.output_head);
    }
}
