//! Sequence-length curriculum: constant-LR stages followed by a decay stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    /// Token budget of this stage.
    pub tokens: u64,
    pub seq_len: usize,
    /// Sampling weights over corpus shards. Empty means uniform over shards.
    #[serde(default)]
    pub mixture: BTreeMap<String, f64>,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageConfig {
    pub stages: Vec<Stage>,
}

impl StageConfig {
    /// A single stage spanning the whole schedule.
    pub fn single(t_total: u64, seq_len: usize) -> Self {
        Self {
            stages: vec![Stage {
                name: "main".into(),
                tokens: t_total,
                seq_len,
                mixture: BTreeMap::new(),
                decay: false,
            }],
        }
    }

    /// Stable stages share `t_stable_end` evenly with the given sequence
    /// lengths; the remainder is one decay stage at the last length.
    pub fn curriculum(schedule: &ScheduleConfig, seq_lens: &[usize]) -> Self {
        let stable = schedule.stable_end();
        let n = seq_lens.len().max(1) as u64;
        let mut stages: Vec<Stage> = seq_lens
            .iter()
            .enumerate()
            .map(|(i, &seq_len)| {
                let start = stable * i as u64 / n;
                let end = stable * (i as u64 + 1) / n;
                Stage {
                    name: format!("stage{}", i + 1),
                    tokens: end - start,
                    seq_len,
                    mixture: BTreeMap::new(),
                    decay: false,
                }
            })
            .collect();
        stages.push(Stage {
            name: "decay".into(),
            tokens: schedule.t_total - stable,
            seq_len: seq_lens.last().copied().unwrap_or(2),
            mixture: BTreeMap::new(),
            decay: true,
        });
        Self { stages }
    }

    /// Cumulative token count at the end of each stage.
    pub fn boundaries(&self) -> Vec<u64> {
        self.stages
            .iter()
            .scan(0u64, |acc, s| {
                *acc += s.tokens;
                Some(*acc)
            })
            .collect()
    }

    pub fn validate(&self, schedule: &ScheduleConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stages: {msg}")));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let total: u64 = self.stages.iter().map(|s| s.tokens).sum();
        if total != schedule.t_total {
            return bad(format!("budgets sum to {total}, schedule t_total is {}", schedule.t_total));
        }
        let mut prev = 0;
        let mut start = 0u64;
        for (i, s) in self.stages.iter().enumerate() {
            if s.tokens == 0 || s.seq_len < 2 {
                return bad(format!("stage '{}' needs tokens > 0 and seq_len >= 2", s.name));
            }
            if s.decay {
                if i + 1 != self.stages.len() {
                    return bad(format!("decay stage '{}' must be last", s.name));
                }
                if start != schedule.stable_end() {
                    return bad(format!(
                        "decay stage starts at {start}, schedule decay starts at {}",
                        schedule.stable_end()
                    ));
                }
            } else {
                if s.seq_len < prev {
                    return bad(format!("seq_len decreases at stage '{}'", s.name));
                }
                prev = s.seq_len;
            }
            if s.mixture.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return bad(format!("stage '{}' has a negative mixture weight", s.name));
            }
            if !s.mixture.is_empty() && s.mixture.values().sum::<f64>() <= 0.0 {
                return bad(format!("stage '{}' mixture weights sum to zero", s.name));
            }
            start += s.tokens;
        }
        Ok(())
    }
}
