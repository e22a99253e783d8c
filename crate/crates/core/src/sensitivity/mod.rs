//! Offline sensitivity calibration.
//!
//! For every quantized tensor the Hessian trace of the calibration loss
//! (restricted to that tensor) is estimated with Hutch++, log-standardized
//! across tensors and squashed through a sigmoid to give a score in (0, 1).
//! Scores are computed once on the full-precision model and persisted; the
//! trainer only ever reads them back.

mod hutchpp;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp, Tensor};
use crate::error::{invalid, Result};
use crate::models::data::Batch;
use crate::models::Model;
use crate::quantizer::{soft_value, GroupScales};
use crate::rng;

pub use hutchpp::{hutchpp_trace, orthonormal_basis, rademacher};

/// Floor applied to raw traces before taking logs.
pub const TRACE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeNoise {
    Rademacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HutchConfig {
    pub sketch_rank: usize,
    pub samples: usize,
    pub noise: ProbeNoise,
    pub seed: u64,
}

impl Default for HutchConfig {
    fn default() -> Self {
        Self {
            sketch_rank: 10,
            samples: 20,
            noise: ProbeNoise::Rademacher,
            seed: 0,
        }
    }
}

impl HutchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sketch_rank < 1 || self.samples < 1 {
            return Err(invalid("Hutch++ needs sketch_rank >= 1 and samples >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    pub hutch: HutchConfig,
    /// Sigmoid gain.
    pub kappa: f64,
    /// Added to the log-trace standard deviation.
    pub epsilon: f64,
    pub calib_batch_size: usize,
    pub calib_batches: usize,
    /// Search the initial temperature instead of using `tau_init`.
    pub tau_search: bool,
    pub tau_lo: f64,
    pub tau_hi: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            hutch: HutchConfig::default(),
            kappa: 1.0,
            epsilon: 1e-8,
            calib_batch_size: 50,
            calib_batches: 4,
            tau_search: false,
            tau_lo: 1e-3,
            tau_hi: 10.0,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        self.hutch.validate()?;
        if !(self.kappa > 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid("kappa and epsilon must be > 0"));
        }
        if self.calib_batch_size == 0 || self.calib_batches == 0 {
            return Err(invalid("calibration needs at least one non-empty batch"));
        }
        if !(self.tau_lo > 0.0 && self.tau_lo < self.tau_hi) {
            return Err(invalid("temperature search range must satisfy 0 < lo < hi"));
        }
        Ok(())
    }
}

/// `v -> H_i v` for the mean calibration loss restricted to parameter
/// `tensor_index`. Other parameters are held fixed.
pub fn hvp_oracle<'a>(
    model: &'a Model,
    batches: &'a [Batch],
    tensor_index: usize,
) -> Result<impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a> {
    if tensor_index >= model.params().len() {
        return Err(invalid(format!(
            "tensor index {tensor_index} out of range ({} parameters)",
            model.params().len()
        )));
    }
    if batches.is_empty() {
        return Err(invalid("no calibration batches"));
    }
    Ok(move |v: &[f64]| {
        let mut leaves = model.leaves(false);
        leaves[tensor_index] = leaves[tensor_index].requires_grad();
        let mut total: Option<Tensor> = None;
        for b in batches {
            let l = model.loss(&leaves, b)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = total.expect("non-empty batches").scale(1.0 / batches.len() as f64);
        Ok(hvp(&loss, &leaves[tensor_index], v)?.to_vec())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScores {
    pub scores: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Which raw traces were raised to [`TRACE_FLOOR`].
    pub clamped: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `s_i = sigmoid(kappa * (log h_i - mu) / (sigma + eps))` with `mu`, `sigma`
/// the mean and sample standard deviation of the log-traces.
pub fn normalize_scores(h: &[f64], kappa: f64, eps: f64) -> Result<NormalizedScores> {
    if h.is_empty() {
        return Err(invalid("no traces to normalize"));
    }
    let clamped: Vec<bool> = h.iter().map(|&x| !(x >= TRACE_FLOOR)).collect();
    let logs: Vec<f64> = h.iter().map(|&x| x.max(TRACE_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let sigma = if logs.len() > 1 {
        (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let scores = logs
        .iter()
        .map(|l| sigmoid(kappa * (l - mu) / (sigma + eps)))
        .collect();
    Ok(NormalizedScores {
        scores,
        mu,
        sigma,
        clamped,
    })
}

/// Total squared gap between weights and their soft-quantized values.
pub fn relaxation_error(weights: &[&[f64]], scales: &[GroupScales], tau: f64) -> f64 {
    weights
        .iter()
        .zip(scales)
        .map(|(w, s)| {
            w.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let g = s.gamma_at(i);
                    let d = x - g * soft_value(x / g, tau);
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

const TAU_GRID_POINTS: usize = 100;
const GOLDEN_ITERS: usize = 60;

/// Initial temperature minimizing [`relaxation_error`] over `[lo, hi]`.
///
/// A 100-point log grid brackets the best region, golden-section search on
/// `log tau` refines it; the refined point replaces the grid winner only if
/// strictly better, so ties resolve toward the smaller temperature.
pub fn init_temperature(
    weights: &[&[f64]],
    scales: &[GroupScales],
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if weights.is_empty() || weights.iter().all(|w| w.is_empty()) {
        return Err(invalid("no weights to fit a temperature to"));
    }
    if weights.len() != scales.len() {
        return Err(invalid("one scale set per weight tensor required"));
    }
    if !(lo > 0.0 && lo < hi) {
        return Err(invalid(format!("invalid search range [{lo}, {hi}]")));
    }
    let f = |log_tau: f64| relaxation_error(weights, scales, log_tau.exp());
    let grid: Vec<f64> = (0..TAU_GRID_POINTS)
        .map(|i| match i {
            0 => lo,
            i if i == TAU_GRID_POINTS - 1 => hi,
            i => lo * (hi / lo).powf(i as f64 / (TAU_GRID_POINTS - 1) as f64),
        })
        .collect();
    let mut best_idx = 0;
    let mut best = (lo, relaxation_error(weights, scales, lo));
    for (i, &tau) in grid.iter().enumerate().skip(1) {
        let v = relaxation_error(weights, scales, tau);
        if v < best.1 {
            best = (tau, v);
            best_idx = i;
        }
    }
    let mut left = grid[best_idx.saturating_sub(1)].ln();
    let mut right = grid[(best_idx + 1).min(TAU_GRID_POINTS - 1)].ln();
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = right - ratio * (right - left);
    let mut x2 = left + ratio * (right - left);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - ratio * (right - left);
            f1 = f(x1);
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + ratio * (right - left);
            f2 = f(x2);
        }
    }
    let (x, v) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    if v < best.1 {
        best = (x.exp(), v);
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSensitivity {
    /// Raw Hutch++ estimate.
    pub h: f64,
    pub s: f64,
    /// Raw trace was below the log floor.
    pub clamped: bool,
    pub dim: usize,
    /// `h / dim`, reported only.
    pub per_param_trace: f64,
}

/// Calibration output, persisted as JSON and consumed by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityReport {
    pub tensors: BTreeMap<String, TensorSensitivity>,
    pub tensor_count: usize,
    pub mu_h: f64,
    pub sigma_h: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub clamp_count: usize,
    pub hutch: HutchConfig,
    pub dataset_fingerprint: String,
    /// Searched initial temperature, when the search ran.
    pub init_temperature: Option<f64>,
}

impl SensitivityReport {
    /// Scores in the order of `names`; every name must be present.
    pub fn scores_for(&self, names: &[String]) -> Result<Vec<f64>> {
        names
            .iter()
            .map(|n| {
                self.tensors.get(n).map(|t| t.s).ok_or_else(|| {
                    invalid(format!("calibration file has no entry for tensor {n:?}"))
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Calibration batches: the first `calib_batches * calib_batch_size` train
/// samples, split into contiguous batches.
pub fn calibration_batches(train: &Batch, cfg: &SensitivityConfig) -> Vec<Batch> {
    let n = (cfg.calib_batches * cfg.calib_batch_size).min(train.len());
    let head = train.select(&(0..n).collect::<Vec<_>>());
    head.chunks(cfg.calib_batch_size)
}

/// Estimates the trace of every quantized tensor and normalizes the scores.
/// Per-tensor estimates run in parallel; each tensor's probes are seeded
/// from `(hutch.seed, tensor index)`, so the result does not depend on
/// scheduling.
pub fn calibrate(model: &Model, batches: &[Batch], cfg: &SensitivityConfig) -> Result<SensitivityReport> {
    cfg.validate()?;
    let indices = model.quantized_indices();
    if indices.is_empty() {
        return Err(invalid("model has no quantized tensors"));
    }
    let traces = indices
        .par_iter()
        .map(|&i| {
            let oracle = hvp_oracle(model, batches, i)?;
            let tensor_cfg = HutchConfig {
                seed: rng::derive_seed(&[cfg.hutch.seed, i as u64]),
                ..cfg.hutch.clone()
            };
            hutchpp_trace(oracle, model.params()[i].numel(), &tensor_cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let norm = normalize_scores(&traces, cfg.kappa, cfg.epsilon)?;

    let tensors = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let p = &model.params()[i];
            (
                p.name.clone(),
                TensorSensitivity {
                    h: traces[k],
                    s: norm.scores[k],
                    clamped: norm.clamped[k],
                    dim: p.numel(),
                    per_param_trace: traces[k] / p.numel() as f64,
                },
            )
        })
        .collect();
    Ok(SensitivityReport {
        tensors,
        tensor_count: indices.len(),
        mu_h: norm.mu,
        sigma_h: norm.sigma,
        kappa: cfg.kappa,
        epsilon: cfg.epsilon,
        clamp_count: norm.clamped.iter().filter(|c| **c).count(),
        hutch: cfg.hutch.clone(),
        dataset_fingerprint: batches_fingerprint(batches),
        init_temperature: None,
    })
}

pub fn batches_fingerprint(batches: &[Batch]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for b in batches {
        h.update(b.fingerprint().as_bytes());
    }
    hex::encode(h.finalize())
}
