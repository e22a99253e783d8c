//! AdamW with decoupled weight decay and a warmup-stable-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub warmup_frac: f64,
    /// Fraction of training after which the linear decay starts.
    pub stable_until: f64,
    /// Learning rate at the last step, relative to the peak.
    pub final_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            warmup_frac: 0.05,
            stable_until: 0.8,
            final_lr_frac: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("eps must be > 0 and weight_decay >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if !(0.0 <= self.warmup_frac
            && self.warmup_frac <= self.stable_until
            && self.stable_until <= 1.0)
        {
            return Err(invalid("need 0 <= warmup_frac <= stable_until <= 1"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(invalid("final_lr_frac must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for step `t` of `total` (warmup, plateau, linear decay).
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).floor() as usize;
        let stable = ((self.stable_until * total as f64).floor() as usize).max(warm);
        if t < warm {
            return self.lr * (t + 1) as f64 / warm as f64;
        }
        if t < stable || total <= stable {
            return self.lr;
        }
        let frac = ((t - stable) as f64 / (total - stable) as f64).min(1.0);
        self.lr * (1.0 - (1.0 - self.final_lr_frac) * frac)
    }
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let k = c / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
    }
    norm
}

/// One AdamW update at (0-based) step `t` with learning rate `lr`. Weight
/// decay applies only where `decay[i]` is set. Returns the realized step
/// `w_new - w_old` per tensor.
pub fn adamw_step(
    cfg: &OptimConfig,
    state: &mut AdamState,
    weights: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    decay: &[bool],
    t: usize,
    lr: f64,
) -> Vec<Vec<f64>> {
    let k = (t + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let mut deltas = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v, w) = (&mut state.m[i], &mut state.v[i], &mut weights[i]);
        let mut delta = Vec::with_capacity(w.len());
        for j in 0..w.len() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps) + wd * w[j];
            let old = w[j];
            w[j] = old - lr * update;
            delta.push(w[j] - old);
        }
        deltas.push(delta);
    }
    deltas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wsd_phases() {
        let c = OptimConfig::default();
        assert!((c.lr_at(0, 1000) - 3e-4 / 50.0).abs() < 1e-18);
        assert_eq!(c.lr_at(49, 1000), 3e-4);
        assert_eq!(c.lr_at(500, 1000), 3e-4);
        assert_eq!(c.lr_at(800, 1000), 3e-4);
        assert!((c.lr_at(900, 1000) - 3e-4 * 0.55).abs() < 1e-18);
        assert!(c.lr_at(999, 1000) > 3e-5);
        // tiny runs have no warmup
        assert_eq!(c.lr_at(0, 10), 3e-4);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let c = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![vec![1.0, -2.0, 0.5]];
        let mut s = AdamState::zeros(&[3]);
        let d = adamw_step(&c, &mut s, &mut w, &[vec![0.3, -4.0, 0.0]], &[true], 0, 0.1);
        assert!((d[0][0] + 0.1).abs() < 1e-6);
        assert!((d[0][1] - 0.1).abs() < 1e-6);
        assert_eq!(d[0][2], 0.0);
    }

    #[test]
    fn decay_only_where_flagged() {
        let c = OptimConfig::default();
        let mut w = vec![vec![1.0], vec![1.0]];
        let mut s = AdamState::zeros(&[1, 1]);
        adamw_step(&c, &mut s, &mut w, &[vec![0.0], vec![0.0]], &[true, false], 0, 0.1);
        assert!((w[0][0] - 0.99).abs() < 1e-15);
        assert_eq!(w[1][0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, Some(1.0));
        assert_eq!(g[0][0], 0.3);
    }
}
