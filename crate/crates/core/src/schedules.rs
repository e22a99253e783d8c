//! Pressure and temperature schedules.
//!
//! Training is split at `T_comp = floor(rho * T)`. During the compress stage
//! the pressure ramps linearly to 1 while the temperature is held at
//! `tau_init`; afterwards the base temperature follows a cosine decay to 0 at
//! `t = T`. Each quantized tensor scales the base temperature by
//! `exp(alpha * s_i)`.
//!
//! Everything here is a pure function of `(t, config, score)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    /// Fraction of training spent in the compress stage.
    pub rho: f64,
    pub tau_init: f64,
    /// Temperature scaling strength.
    pub alpha: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            rho: 0.2,
            tau_init: 0.3,
            alpha: 0.4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(invalid("schedule needs total_steps >= 1"));
        }
        // rho = 1 would leave no annealing window
        if !(0.0..1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.tau_init > 0.0) {
            return Err(invalid(format!("tau_init must be > 0, got {}", self.tau_init)));
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Last step of the compress stage, `floor(rho * T)`.
    pub fn compress_steps(&self) -> usize {
        (self.rho * self.total_steps as f64).floor() as usize
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(invalid(format!(
                "step {t} beyond total_steps {}",
                self.total_steps
            )));
        }
        Ok(())
    }
}

/// Mixing coefficient `p_t`.
pub fn pressure(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.check_step(t)?;
    if cfg.rho == 0.0 {
        return Ok(1.0);
    }
    Ok((t as f64 / (cfg.rho * cfg.total_steps as f64)).min(1.0))
}

/// Shared temperature before per-tensor scaling.
pub fn base_temperature(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.check_step(t)?;
    let t_comp = cfg.compress_steps();
    if t < t_comp {
        return Ok(cfg.tau_init);
    }
    if t == cfg.total_steps {
        return Ok(0.0);
    }
    let span = (cfg.total_steps - t_comp) as f64;
    let phase = PI * (t - t_comp) as f64 / span;
    Ok(0.5 * cfg.tau_init * (1.0 + phase.cos()))
}

/// Per-tensor temperature `base(t) * exp(alpha * s)`.
pub fn scaled_temperature(t: usize, score: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) {
        return Err(invalid(format!("sensitivity score must lie in [0, 1], got {score}")));
    }
    Ok(base_temperature(t, cfg)? * (cfg.alpha * score).exp())
}

/// Snapshot of every schedule value at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub pressure: f64,
    pub temperatures: Vec<f64>,
}

impl ScheduleState {
    pub fn at(t: usize, scores: &[f64], cfg: &ScheduleConfig) -> Result<Self> {
        Ok(Self {
            step: t,
            pressure: pressure(t, cfg)?,
            temperatures: scores
                .iter()
                .map(|&s| scaled_temperature(t, s, cfg))
                .collect::<Result<_>>()?,
        })
    }
}
