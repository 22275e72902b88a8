//! Byte accounting for transient activation buffers.

use crate::error::{Error, Result};

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// Tracks live and peak bytes of scratch buffers handed out during a forward
/// pass, optionally refusing allocations beyond a fixed budget.
#[derive(Debug, Clone, Default)]
pub struct TransientMeter {
    budget: Option<usize>,
    current: usize,
    peak: usize,
}

impl TransientMeter {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn with_budget(bytes: usize) -> Self {
        Self {
            budget: Some(bytes),
            ..Self::default()
        }
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    /// Hands out a zeroed buffer of `len` values and records its bytes.
    pub fn alloc(&mut self, len: usize) -> Result<Vec<f64>> {
        self.reserve(len * F64_BYTES)?;
        Ok(vec![0.0; len])
    }

    /// Same as [`alloc`](Self::alloc) but initialised from `src`.
    pub fn alloc_copy(&mut self, src: &[f64]) -> Result<Vec<f64>> {
        self.reserve(std::mem::size_of_val(src))?;
        Ok(src.to_vec())
    }

    pub fn reserve(&mut self, bytes: usize) -> Result<()> {
        let next = self.current + bytes;
        if let Some(budget) = self.budget {
            if next > budget {
                return Err(Error::BudgetExceeded {
                    requested: next,
                    budget,
                });
            }
        }
        self.current = next;
        self.peak = self.peak.max(next);
        Ok(())
    }

    pub fn release_values(&mut self, len: usize) {
        self.release(len * F64_BYTES);
    }

    pub fn release(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.current, "released more than was reserved");
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn current_bytes(&self) -> usize {
        self.current
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }
}
