//! Decreasing step sizes `a0 / (n + n0 + 1)^a` for the parameter recursion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomially decaying step sizes. The exponent is restricted to `(1/2, 1]`
/// so that the steps sum to infinity while their squares stay summable.
/// A zero scale is allowed and yields a frozen parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    scale: f64,
    exponent: f64,
    offset: u64,
}

impl StepSchedule {
    pub fn new(scale: f64, exponent: f64, offset: u64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "scale must be finite and non-negative, got {scale}"
            )));
        }
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "exponent must lie in (1/2, 1], got {exponent}"
            )));
        }
        Ok(Self {
            scale,
            exponent,
            offset,
        })
    }

    /// Schedule with all steps equal to zero.
    pub fn frozen() -> Self {
        Self {
            scale: 0.0,
            exponent: 1.0,
            offset: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Step size used at iteration `n` (0-based).
    pub fn step_size(&self, n: u64) -> f64 {
        let base = (n + self.offset + 1) as f64;
        if self.exponent == 1.0 {
            self.scale / base
        } else {
            self.scale * base.powf(-self.exponent)
        }
    }
}
