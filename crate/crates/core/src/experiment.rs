//! Run orchestration shared by the CLI: building models and data from a
//! [`RunConfig`], calibration, training, sweeps and report comparison.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::models::data::{generate_task, Dataset};
use crate::models::Model;
use crate::quantizer::GroupSize;
use crate::sensitivity::{calibrate, calibration_batches, init_temperature, SensitivityReport};
use crate::trainer::{Mode, TrainReport, TrainState, Trainer};
use crate::trainer::metrics::MetricsRecord;

pub fn prepare(cfg: &RunConfig) -> Result<(Model, Dataset)> {
    Ok((Model::build(&cfg.model)?, generate_task(&cfg.task)?))
}

/// Sensitivity calibration of `model` on the head of the training split.
/// With `sensitivity.tau_search` set, the initial temperature is searched
/// too and recorded in the report.
pub fn calibrate_model(cfg: &RunConfig, model: &Model, data: &Dataset) -> Result<SensitivityReport> {
    let batches = calibration_batches(&data.train, &cfg.sensitivity);
    let mut report = calibrate(model, &batches, &cfg.sensitivity)?;
    if cfg.sensitivity.tau_search {
        let quantizer = crate::quantizer::Quantizer::new(cfg.train.quantizer.clone())?;
        let idx = model.quantized_indices();
        let weights: Vec<&[f64]> = idx.iter().map(|&i| model.params()[i].values.as_slice()).collect();
        let scales = weights
            .iter()
            .map(|w| quantizer.compute_scale(w))
            .collect::<Result<Vec<_>>>()?;
        report.init_temperature = Some(init_temperature(
            &weights,
            &scales,
            cfg.sensitivity.tau_lo,
            cfg.sensitivity.tau_hi,
        )?);
    }
    Ok(report)
}

/// Short stable hash of the fully resolved flat config.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_json()?.as_bytes());
    Ok(hex::encode(digest)[..16].to_string())
}

/// Trains `model` under `cfg`, streaming records to `sink`.
pub fn run_training(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    scores: Option<Vec<f64>>,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(TrainState, TrainReport)> {
    let trainer = Trainer::new(model, data, cfg.train.clone(), scores)?;
    let mut state = trainer.initial_state();
    trainer.run_until(&mut state, cfg.train.total_steps, sink)?;
    let report = trainer.report(&state)?;
    Ok((state, report))
}

/// Parameter grid of a sweep. Every combination is one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub modes: Vec<Mode>,
    pub alphas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub group_sizes: Vec<GroupSize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Hestia],
            alphas: vec![0.4],
            rhos: vec![0.2],
            group_sizes: vec![GroupSize::Elements(128)],
            seeds: vec![0],
        }
    }
}

impl SweepGrid {
    /// Configs in a fixed order: mode, alpha, rho, group size, seed.
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &alpha in &self.alphas {
                for &rho in &self.rhos {
                    for &group in &self.group_sizes {
                        for &seed in &self.seeds {
                            let mut c = base.clone().with_seed(seed);
                            c.train.mode = mode;
                            c.train.schedule.alpha = alpha;
                            c.train.schedule.rho = rho;
                            c.train.quantizer.group_size = group;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub mode: Mode,
    pub alpha: f64,
    pub rho: f64,
    pub group_size: String,
    pub seed: u64,
    /// Held-out loss of the exported model, or of the latent model in
    /// full-precision mode.
    pub final_loss: Option<f64>,
    pub flip_fraction: Option<f64>,
    pub mean_dead_zone: Option<f64>,
    pub last_dead_zone: Option<f64>,
    pub error: Option<String>,
}

/// One sweep run. Hestia runs without a calibration file or fallback are
/// calibrated in memory on the initial model.
pub fn sweep_run(cfg: &RunConfig) -> SweepRow {
    let mut row = SweepRow {
        config_hash: config_hash(cfg).unwrap_or_default(),
        mode: cfg.train.mode,
        alpha: cfg.train.schedule.alpha,
        rho: cfg.train.schedule.rho,
        group_size: cfg.train.quantizer.group_size.to_string(),
        seed: cfg.seed,
        final_loss: None,
        flip_fraction: None,
        mean_dead_zone: None,
        last_dead_zone: None,
        error: None,
    };
    let result = (|| -> Result<(TrainReport, Option<f64>)> {
        let (model, data) = prepare(cfg)?;
        let scores = if cfg.train.mode == Mode::Hestia
            && cfg.train.calibration.is_none()
            && !cfg.train.uniform_scores
        {
            let report = calibrate_model(cfg, &model, &data)?;
            Some(report.scores_for(&model.quantized_names())?)
        } else {
            cfg.train.resolve_scores(&model)?
        };
        let mut last_dead = None;
        let (_, report) = run_training(cfg, &model, &data, scores, &mut |r| {
            if r.dead_zone_fraction.is_some() {
                last_dead = r.dead_zone_fraction;
            }
            Ok(())
        })?;
        Ok((report, last_dead))
    })();
    match result {
        Ok((report, last_dead)) => {
            row.final_loss = Some(
                report
                    .final_exported
                    .map_or(report.final_effective.loss, |e| e.loss),
            );
            if let Some(q) = &report.quantization {
                row.flip_fraction = Some(q.flip_fraction);
                row.mean_dead_zone = Some(q.mean_dead_zone);
                row.last_dead_zone = last_dead;
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every grid point (in parallel) and returns rows in grid order.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid) -> Vec<SweepRow> {
    grid.expand(base).par_iter().map(sweep_run).collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Deltas between two reports (`b - a`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub final_loss_a: f64,
    pub final_loss_b: f64,
    pub final_loss_delta: f64,
    pub flip_fraction_a: Option<f64>,
    pub flip_fraction_b: Option<f64>,
    pub flip_fraction_delta: Option<f64>,
    pub mean_dead_zone_delta: Option<f64>,
}

pub fn compare_reports(a: &TrainReport, b: &TrainReport) -> Result<Comparison> {
    if a.seed != b.seed || a.total_steps != b.total_steps {
        return Err(invalid("reports differ in seed or step count and are not comparable"));
    }
    let loss = |r: &TrainReport| r.final_exported.map_or(r.final_effective.loss, |e| e.loss);
    let flips = |r: &TrainReport| r.quantization.as_ref().map(|q| q.flip_fraction);
    let dead = |r: &TrainReport| r.quantization.as_ref().map(|q| q.mean_dead_zone);
    let delta = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| y - x);
    Ok(Comparison {
        mode_a: a.mode,
        mode_b: b.mode,
        final_loss_a: loss(a),
        final_loss_b: loss(b),
        final_loss_delta: loss(b) - loss(a),
        flip_fraction_a: flips(a),
        flip_fraction_b: flips(b),
        flip_fraction_delta: delta(flips(a), flips(b)),
        mean_dead_zone_delta: delta(dead(a), dead(b)),
    })
}
