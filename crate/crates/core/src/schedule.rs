//! Token-indexed training schedules: warmup-stable-decay learning rate with
//! an exponential decay stage, linear batch-size rampup, and batch scaling
//! that holds the Adam noise temperature `lr / sqrt(batch)` fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Learning rate of the stable stage.
    pub eta_max: f64,
    /// `eta_min / eta_max` reached at the end of decay.
    pub eta_min_ratio: f64,
    pub t_warmup: u64,
    /// Start of the decay stage. Derived from `decay_fraction` when absent.
    pub t_stable_end: Option<u64>,
    pub t_total: u64,
    pub decay_fraction: f64,
    pub b_min: u64,
    pub b_max: u64,
    pub t_rampup: u64,
    /// Batch sizes are rounded down to a multiple of this.
    pub batch_granularity: u64,
    /// Rescale the learning rate with the batch size so that
    /// `lr / sqrt(batch)` stays constant.
    pub batch_scaling: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

const GT: u64 = 1_000_000_000;

impl ScheduleConfig {
    /// 5.8T tokens, 1GT warmup, 10% decay, batch 128 -> 2048 over 50GT.
    pub fn paper() -> Self {
        Self {
            eta_max: 6.4e-4,
            eta_min_ratio: 1.0 / 256.0,
            t_warmup: GT,
            t_stable_end: None,
            t_total: 5_800 * GT,
            decay_fraction: 0.10,
            b_min: 128,
            b_max: 2048,
            t_rampup: 50 * GT,
            batch_granularity: 1,
            batch_scaling: false,
        }
    }

    /// A few hundred thousand tokens with batches of 4 to 8 sequences.
    pub fn desk() -> Self {
        Self {
            eta_max: 3e-3,
            eta_min_ratio: 1.0 / 256.0,
            t_warmup: 10_000,
            t_stable_end: None,
            t_total: 500_000,
            decay_fraction: 0.10,
            b_min: 4,
            b_max: 8,
            t_rampup: 100_000,
            batch_granularity: 1,
            batch_scaling: false,
        }
    }

    pub fn stable_end(&self) -> u64 {
        self.t_stable_end.unwrap_or_else(|| {
            let decay = (self.t_total as f64 * self.decay_fraction).round() as u64;
            self.t_total - decay.min(self.t_total)
        })
    }

    pub fn t_decay(&self) -> u64 {
        self.t_total - self.stable_end()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("schedule: {msg}")));
        if !(self.eta_max >= 0.0) || !self.eta_max.is_finite() {
            return bad(format!("eta_max must be finite and >= 0, got {}", self.eta_max));
        }
        if !(self.eta_min_ratio > 0.0 && self.eta_min_ratio <= 1.0) {
            return bad(format!("eta_min_ratio must be in (0, 1], got {}", self.eta_min_ratio));
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return bad(format!("decay_fraction must be in [0, 1), got {}", self.decay_fraction));
        }
        let stable_end = self.stable_end();
        if !(self.t_warmup < stable_end && stable_end < self.t_total) {
            return bad(format!(
                "need t_warmup < t_stable_end < t_total, got {} / {} / {}",
                self.t_warmup, stable_end, self.t_total
            ));
        }
        if self.b_min == 0 || self.b_min > self.b_max {
            return bad(format!("need 1 <= b_min <= b_max, got {} / {}", self.b_min, self.b_max));
        }
        let g = self.batch_granularity;
        if g == 0 || !self.b_min.is_multiple_of(g) || !self.b_max.is_multiple_of(g) {
            return bad(format!("b_min and b_max must be multiples of batch_granularity {g}"));
        }
        Ok(())
    }
}

/// Adam gradient-noise temperature `eta / sqrt(b)`.
pub fn noise_temperature(eta: f64, b: u64) -> Result<f64> {
    if b == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {eta}")));
    }
    Ok(eta / (b as f64).sqrt())
}

/// Linear rampup from `b_min` to `b_max` over `[0, t_rampup]`, then constant.
pub fn batch_size_at(t: u64, cfg: &ScheduleConfig) -> u64 {
    let b = if t >= cfg.t_rampup {
        cfg.b_max
    } else {
        let span = (cfg.b_max - cfg.b_min) as u128;
        cfg.b_min + (span * t as u128 / cfg.t_rampup as u128) as u64
    };
    let g = cfg.batch_granularity.max(1);
    (b / g) * g
}

/// Stable-stage learning rate at `t`, after batch scaling.
fn base_lr(t: u64, cfg: &ScheduleConfig) -> f64 {
    if cfg.batch_scaling {
        cfg.eta_max * (batch_size_at(t, cfg) as f64 / cfg.b_max as f64).sqrt()
    } else {
        cfg.eta_max
    }
}

/// Warmup-stable-decay learning rate at token `t`.
///
/// Warmup is linear from 0. The decay stage is
/// `base * exp(-(tau / t_decay) * ln(eta_max / eta_min))`, anchored at the
/// learning rate in effect at the end of the stable stage.
pub fn lr_at(t: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if t > cfg.t_total {
        return Err(Error::InvalidArgument(format!(
            "t={t} is past the end of the schedule ({})",
            cfg.t_total
        )));
    }
    let stable_end = cfg.stable_end();
    Ok(if t < cfg.t_warmup {
        base_lr(t, cfg) * (t as f64 / cfg.t_warmup as f64)
    } else if t <= stable_end {
        base_lr(t, cfg)
    } else {
        let tau = (t - stable_end) as f64;
        let t_decay = cfg.t_decay() as f64;
        let log_ratio = (1.0 / cfg.eta_min_ratio).ln();
        base_lr(stable_end, cfg) * (-(tau / t_decay) * log_ratio).exp()
    })
}

/// Schedule values at a point in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// Tokens consumed so far.
    pub t: u64,
    pub lr: f64,
    pub batch: u64,
    pub noise_temp: f64,
}

impl ScheduleState {
    pub fn at(t: u64, cfg: &ScheduleConfig) -> Result<Self> {
        let lr = lr_at(t, cfg)?;
        let batch = batch_size_at(t, cfg);
        Ok(Self {
            t,
            lr,
            batch,
            noise_temp: noise_temperature(lr, batch)?,
        })
    }
}

/// `points + 1` evenly spaced samples over `[0, t_total]`, both ends included.
pub fn trace(cfg: &ScheduleConfig, points: u64) -> Result<Vec<ScheduleState>> {
    cfg.validate()?;
    let points = points.max(1);
    (0..=points)
        .map(|i| {
            let t = (cfg.t_total as u128 * i as u128 / points as u128) as u64;
            ScheduleState::at(t, cfg)
        })
        .collect()
}
