//! Noise schedules: the per-step noise levels and their cumulative
//! signal-retention products.
//!
//! Timestep indexing: the public API is 1-based (`t` in `1..=T`, matching the
//! x_1..x_T convention); storage is 0-based. This is the single place where
//! the mapping lives — every accessor here subtracts 1, and no other module
//! indexes the raw vectors.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Default diffusion horizon.
pub const DEFAULT_NUM_STEPS: usize = 1000;
/// Default linear-schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Schedule parameters as they appear in run configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// A diffusion noise schedule: strictly increasing betas in (0,1) and the
/// strictly decreasing cumulative products of (1 - beta).
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule: betas evenly spaced on [beta_start, beta_end]
    /// inclusive. With `num_steps == 1` the single beta is `beta_start`
    /// (one-point linspace convention).
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 1 {
            return Err(CoreError::schedule("num_steps must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(CoreError::schedule(format!(
                "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            (0..num_steps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Build from explicit betas; validates ordering and range and computes
    /// the running products in f64.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CoreError::schedule("empty beta sequence"));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0 && *b < 1.0) {
                return Err(CoreError::schedule(format!("beta[{i}] = {b} outside (0,1)")));
            }
            if i > 0 && betas[i - 1] >= *b {
                return Err(CoreError::schedule(format!(
                    "betas must be strictly increasing; beta[{}] = {} >= beta[{}] = {}",
                    i - 1,
                    betas[i - 1],
                    i,
                    b
                )));
            }
        }
        let mut alphas_cum = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for b in &betas {
            prod *= 1.0 - b;
            alphas_cum.push(prod);
        }
        Ok(Self { betas, alphas_cum })
    }

    /// Diffusion horizon T.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// beta_t for t in 1..=T.
    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product alpha_t = prod_{i<=t} (1 - beta_i), t in 1..=T.
    pub fn alpha_cum_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas_cum[t - 1])
    }

    /// alpha_{t-1} with the t = 1 boundary pinned to 1 (no noise before the
    /// first step).
    pub fn alpha_cum_prev(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 1 { 1.0 } else { self.alphas_cum[t - 2] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.betas.len() {
            Ok(())
        } else {
            Err(CoreError::TimestepRange {
                t,
                horizon: self.betas.len(),
            })
        }
    }
}
