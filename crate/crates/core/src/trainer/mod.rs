//! Quantization-aware training loop.
//!
//! Three modes share one loop:
//!
//! * `hestia`: each quantized tensor is replaced by the effective weights
//!   `(1 - p) W + p H(W; tau_i)`, where `H` is the soft quantizer and both
//!   `p` and `tau_i` follow the schedules. Gradients flow through `H`.
//! * `ste`: the hard quantizer in the forward pass, identity backward.
//! * `full_precision`: latent weights used directly.
//!
//! Latent weights, optimizer moments and the batch stream make up
//! [`TrainState`], which checkpoints losslessly.

pub mod checkpoint;
pub mod export;
pub mod metrics;
pub mod optim;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, no_grad, Tensor};
use crate::error::{invalid, HestiaError, Result};
use crate::models::data::{Batch, Dataset};
use crate::models::{accuracy, Model};
use crate::quantizer::{dead_zone_mask, effective_weights, GroupScales, Quantizer, QuantizerConfig};
use crate::rng;
use crate::schedules::{self, ScheduleConfig};
use crate::sensitivity::SensitivityReport;

pub use export::{export_quantized, CodeHistogram, ExportedTensor, ExportedValues, QuantizedArtifact};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use optim::{AdamState, OptimConfig};

const BATCH_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hestia,
    Ste,
    FullPrecision,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Hestia => "hestia",
            Mode::Ste => "ste",
            Mode::FullPrecision => "full_precision",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = HestiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hestia" => Ok(Mode::Hestia),
            "ste" => Ok(Mode::Ste),
            "full_precision" | "fp" => Ok(Mode::FullPrecision),
            _ => Err(invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    pub optim: OptimConfig,
    /// `total_steps` inside is ignored; the trainer's own value wins.
    pub schedule: ScheduleConfig,
    pub quantizer: QuantizerConfig,
    pub calibration: Option<PathBuf>,
    /// Use score 0.5 for every tensor when no calibration file is given.
    pub uniform_scores: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hestia,
            total_steps: 2000,
            batch_size: 64,
            seed: 0,
            log_every: 10,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            quantizer: QuantizerConfig::default(),
            calibration: None,
            uniform_scores: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("batch_size and log_every must be >= 1"));
        }
        self.optim.validate()?;
        self.quantizer.validate()?;
        if self.total_steps > 0 {
            self.schedule().validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.total_steps,
            ..self.schedule.clone()
        }
    }

    /// Scores in quantized-tensor order: from the calibration file, the 0.5
    /// fallback, or `None` outside hestia mode. Hestia mode without either
    /// source is an error.
    pub fn resolve_scores(&self, model: &Model) -> Result<Option<Vec<f64>>> {
        if self.mode != Mode::Hestia {
            return Ok(None);
        }
        match &self.calibration {
            Some(path) => {
                let report = SensitivityReport::load(path)?;
                Ok(Some(report.scores_for(&model.quantized_names())?))
            }
            None if self.uniform_scores => Ok(Some(vec![0.5; model.quantized_indices().len()])),
            None => Err(invalid(
                "hestia mode needs a calibration file or the uniform-scores fallback",
            )),
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    /// Latent values of every parameter, in model order.
    pub weights: Vec<Vec<f64>>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Code flips summed over quantized weights and completed steps.
    pub flips: u64,
    /// Sum of per-step dead-zone fractions.
    pub dead_zone_sum: f64,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let weights: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.clone()).collect();
        let sizes: Vec<usize> = weights.iter().map(Vec::len).collect();
        Self {
            step: 0,
            weights,
            adam: AdamState::zeros(&sizes),
            rng: batch_stream(seed),
            flips: 0,
            dead_zone_sum: 0.0,
        }
    }

    /// Cumulative fraction of (weight, step) pairs whose code changed.
    pub fn flip_fraction(&self, quantized_weights: usize) -> f64 {
        if self.step == 0 || quantized_weights == 0 {
            return 0.0;
        }
        self.flips as f64 / (quantized_weights as f64 * self.step as f64)
    }

    pub fn mean_dead_zone(&self) -> f64 {
        if self.step == 0 {
            return 0.0;
        }
        self.dead_zone_sum / self.step as f64
    }
}

pub(crate) fn batch_stream(seed: u64) -> ChaCha8Rng {
    rng::stream(rng::derive_seed(&[seed, BATCH_STREAM]), 0)
}

/// Samples `size` training rows with replacement.
pub fn draw_batch(rng: &mut ChaCha8Rng, train: &Batch, size: usize) -> Batch {
    let n = train.len();
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    train.select(&idx)
}

/// Schedule values at step `t` for the given mode. `None` pressure means
/// the latent weights are used as-is.
fn schedule_at(
    mode: Mode,
    t: usize,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<(Option<f64>, Vec<f64>)> {
    match mode {
        Mode::FullPrecision => Ok((None, Vec::new())),
        Mode::Ste => Ok((Some(1.0), Vec::new())),
        Mode::Hestia => {
            let scores = scores.ok_or_else(|| invalid("hestia mode needs sensitivity scores"))?;
            let sched = cfg.schedule();
            let p = schedules::pressure(t, &sched)?;
            let taus = scores
                .iter()
                .map(|&s| schedules::scaled_temperature(t, s, &sched))
                .collect::<Result<Vec<_>>>()?;
            Ok((Some(p), taus))
        }
    }
}

/// Tensors fed to the model at step `t`. `latent` holds one tensor per
/// parameter; non-quantized ones pass through.
pub fn assemble_effective(
    model: &Model,
    latent: &[Tensor],
    mode: Mode,
    t: usize,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<Vec<Tensor>> {
    let quantizer = Quantizer::new(cfg.quantizer.clone())?;
    let (p, taus) = schedule_at(mode, t, cfg, scores)?;
    let mut k = 0;
    model
        .params()
        .iter()
        .zip(latent)
        .map(|(param, w)| {
            if !param.quantize || mode == Mode::FullPrecision {
                return Ok(w.clone());
            }
            let scales = quantizer.compute_scale(w.data())?;
            let out = match mode {
                Mode::Ste => quantizer.ste_quantize(w, &scales)?,
                _ => {
                    // tau reaches 0 only at t = T; the kernel uses its floor there
                    let tau = taus[k].max(cfg.quantizer.tau_min);
                    let soft = quantizer.soft_quantize(w, &scales, tau)?;
                    effective_weights(w, &soft, p.unwrap_or(1.0))?
                }
            };
            k += 1;
            Ok(out)
        })
        .collect()
}

fn check_finite(values: impl IntoIterator<Item = f64>, step: usize, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(HestiaError::NonFinite {
            step,
            what: what.to_string(),
        })
    }
}

struct Forward {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn loss_and_grads(
    model: &Model,
    weights: &[Vec<f64>],
    batch: &Batch,
    t: usize,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<Forward> {
    let leaves: Vec<Tensor> = model
        .params()
        .iter()
        .zip(weights)
        .map(|(p, w)| Tensor::param(&p.shape, w.clone()))
        .collect::<Result<_>>()?;
    let eff = assemble_effective(model, &leaves, cfg.mode, t, cfg, scores)?;
    let loss = model.loss(&eff, batch)?;
    let value = loss.item()?;
    check_finite([value], t, "loss")?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads: Vec<Vec<f64>> = grad(&loss, &refs)?.iter().map(Tensor::to_vec).collect();
    check_finite(grads.iter().flatten().copied(), t, "gradient")?;
    Ok(Forward { loss: value, grads })
}

fn tensor_names(model: &Model, mode: Mode) -> Vec<String> {
    if mode == Mode::Hestia {
        model.quantized_names()
    } else {
        Vec::new()
    }
}

/// One optimizer step of the configured mode on `batch`.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<MetricsRecord> {
    let t = state.step;
    if t >= cfg.total_steps {
        return Err(invalid(format!("step {t} is past total_steps {}", cfg.total_steps)));
    }
    let quantizer = Quantizer::new(cfg.quantizer.clone())?;
    let (pressure, taus) = schedule_at(cfg.mode, t, cfg, scores)?;
    let Forward { loss, mut grads } = loss_and_grads(model, &state.weights, batch, t, cfg, scores)?;
    let grad_norm = optim::clip_global_norm(&mut grads, cfg.optim.grad_clip);

    let qidx = model.quantized_indices();
    let old_scales: Vec<GroupScales> = qidx
        .iter()
        .map(|&i| quantizer.compute_scale(&state.weights[i]))
        .collect::<Result<_>>()?;
    let old_codes: Vec<Vec<i8>> = qidx
        .iter()
        .zip(&old_scales)
        .map(|(&i, s)| quantizer.codes(&state.weights[i], s))
        .collect::<Result<_>>()?;
    let quant_error = mean_quant_error(&quantizer, &state.weights, &qidx, &old_scales)?;
    let old_weights: Vec<Vec<f64>> = qidx.iter().map(|&i| state.weights[i].clone()).collect();

    let decay: Vec<bool> = model.params().iter().map(|p| p.shape.len() == 2).collect();
    let lr = cfg.optim.lr_at(t, cfg.total_steps);
    let deltas = optim::adamw_step(
        &cfg.optim,
        &mut state.adam,
        &mut state.weights,
        &grads,
        &decay,
        t,
        lr,
    );
    check_finite(state.weights.iter().flatten().copied(), t, "weights after update")?;

    let nq: usize = qidx.iter().map(|&i| state.weights[i].len()).sum();
    let (mut dead, mut flips) = (0usize, 0u64);
    for (k, &i) in qidx.iter().enumerate() {
        dead += dead_zone_mask(&old_weights[k], &deltas[i], &old_scales[k])?
            .iter()
            .filter(|d| **d)
            .count();
        let new_scales = quantizer.compute_scale(&state.weights[i])?;
        let new_codes = quantizer.codes(&state.weights[i], &new_scales)?;
        flips += new_codes
            .iter()
            .zip(&old_codes[k])
            .filter(|(a, b)| a != b)
            .count() as u64;
    }
    let dead_frac = if nq == 0 { 0.0 } else { dead as f64 / nq as f64 };
    state.flips += flips;
    state.dead_zone_sum += dead_frac;
    state.step += 1;

    Ok(MetricsRecord {
        step: t,
        loss,
        lr: Some(lr),
        pressure,
        temperatures: tensor_names(model, cfg.mode).into_iter().zip(taus).collect(),
        dead_zone_fraction: Some(dead_frac),
        flip_fraction: state.flip_fraction(nq),
        quant_error,
        grad_norm,
    })
}

fn mean_quant_error(
    quantizer: &Quantizer,
    weights: &[Vec<f64>],
    qidx: &[usize],
    scales: &[GroupScales],
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&i, s) in qidx.iter().zip(scales) {
        let hard = quantizer.hard_quantize(&weights[i], s)?;
        sum += weights[i].iter().zip(&hard).map(|(w, q)| (w - q).abs()).sum::<f64>();
        n += hard.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Record of the state at `t = total_steps`: schedule endpoints, loss and
/// gradient norm on one more batch, no update.
fn terminal_record(
    model: &Model,
    state: &TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<MetricsRecord> {
    let t = state.step;
    let quantizer = Quantizer::new(cfg.quantizer.clone())?;
    let (pressure, taus) = schedule_at(cfg.mode, t, cfg, scores)?;
    let Forward { loss, grads } = loss_and_grads(model, &state.weights, batch, t, cfg, scores)?;
    let qidx = model.quantized_indices();
    let scales: Vec<GroupScales> = qidx
        .iter()
        .map(|&i| quantizer.compute_scale(&state.weights[i]))
        .collect::<Result<_>>()?;
    let nq: usize = qidx.iter().map(|&i| state.weights[i].len()).sum();
    Ok(MetricsRecord {
        step: t,
        loss,
        lr: None,
        pressure,
        temperatures: tensor_names(model, cfg.mode).into_iter().zip(taus).collect(),
        dead_zone_fraction: None,
        flip_fraction: state.flip_fraction(nq),
        quant_error: mean_quant_error(&quantizer, &state.weights, &qidx, &scales)?,
        grad_norm: optim::clip_global_norm(&mut grads.clone(), None),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Loss (and accuracy for classification) of `weights` on `batch`.
pub fn evaluate(model: &Model, weights: &[Vec<f64>], batch: &Batch) -> Result<EvalMetrics> {
    no_grad(|| {
        let tensors: Vec<Tensor> = model
            .params()
            .iter()
            .zip(weights)
            .map(|(p, w)| Tensor::new(&p.shape, w.clone()))
            .collect::<Result<_>>()?;
        let out = model.forward(&tensors, &batch.inputs)?;
        let loss = crate::models::loss_from_outputs(&out, &batch.targets)?.item()?;
        Ok(EvalMetrics {
            loss,
            accuracy: accuracy(&out, &batch.targets),
        })
    })
}

/// Effective weights at step `t` as plain values.
pub fn effective_values(
    model: &Model,
    weights: &[Vec<f64>],
    t: usize,
    cfg: &TrainConfig,
    scores: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let leaves: Vec<Tensor> = model
            .params()
            .iter()
            .zip(weights)
            .map(|(p, w)| Tensor::new(&p.shape, w.clone()))
            .collect::<Result<_>>()?;
        Ok(assemble_effective(model, &leaves, cfg.mode, t, cfg, scores)?
            .iter()
            .map(Tensor::to_vec)
            .collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub flip_fraction: f64,
    pub mean_dead_zone: f64,
    /// Mean `|W_eff(T) - Q(W)| / gamma` over quantized weights.
    pub end_gap_over_gamma: f64,
    pub code_histogram: CodeHistogram,
    /// Scores used for temperature scaling (hestia only).
    pub scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub total_steps: usize,
    pub steps_completed: usize,
    pub seed: u64,
    pub initial: EvalMetrics,
    pub final_effective: EvalMetrics,
    /// Held-out metrics of the exported ternary model.
    pub final_exported: Option<EvalMetrics>,
    pub quantization: Option<QuantSummary>,
    pub optimizer: OptimConfig,
}

/// Drives [`train_step`] over a dataset and assembles the report.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
    pub cfg: TrainConfig,
    pub scores: Option<Vec<f64>>,
    initial: EvalMetrics,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        data: &'a Dataset,
        cfg: TrainConfig,
        scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == Mode::Hestia {
            let n = model.quantized_indices().len();
            match &scores {
                Some(s) if s.len() == n => {}
                Some(s) => {
                    return Err(invalid(format!("{} scores for {n} quantized tensors", s.len())))
                }
                None => return Err(invalid("hestia mode needs sensitivity scores")),
            }
        }
        let weights: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.clone()).collect();
        let initial = evaluate(model, &weights, &data.heldout)?;
        Ok(Self {
            model,
            data,
            cfg,
            scores,
            initial,
        })
    }

    pub fn initial_state(&self) -> TrainState {
        TrainState::new(self.model, self.cfg.seed)
    }

    pub fn initial_eval(&self) -> EvalMetrics {
        self.initial
    }

    fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    /// Runs steps until `state.step == until` (clamped to `total_steps`),
    /// passing logged records to `sink`. The terminal record is emitted when
    /// the run completes.
    pub fn run_until(
        &self,
        state: &mut TrainState,
        until: usize,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while state.step < until {
            let batch = draw_batch(&mut state.rng, &self.data.train, self.cfg.batch_size);
            let t = state.step;
            let rec = train_step(self.model, state, &batch, &self.cfg, self.scores())?;
            if t % self.cfg.log_every == 0 {
                sink(&rec)?;
            }
        }
        if state.step == self.cfg.total_steps && until == self.cfg.total_steps && until > 0 {
            let mut rng = state.rng.clone();
            let batch = draw_batch(&mut rng, &self.data.train, self.cfg.batch_size);
            sink(&terminal_record(self.model, state, &batch, &self.cfg, self.scores())?)?;
        }
        Ok(())
    }

    pub fn export(&self, state: &TrainState) -> Result<QuantizedArtifact> {
        export_quantized(self.model, &state.weights, &Quantizer::new(self.cfg.quantizer.clone())?)
    }

    /// Final report for a completed (or stopped) run.
    pub fn report(&self, state: &TrainState) -> Result<TrainReport> {
        let base = TrainReport {
            mode: self.cfg.mode,
            total_steps: self.cfg.total_steps,
            steps_completed: state.step,
            seed: self.cfg.seed,
            initial: self.initial,
            final_effective: self.initial,
            final_exported: None,
            quantization: None,
            optimizer: self.cfg.optim.clone(),
        };
        if state.step == 0 {
            return Ok(base);
        }
        let t = state.step;
        let eff = effective_values(self.model, &state.weights, t, &self.cfg, self.scores())?;
        let final_effective = evaluate(self.model, &eff, &self.data.heldout)?;
        if self.cfg.mode == Mode::FullPrecision {
            return Ok(TrainReport {
                final_effective,
                ..base
            });
        }
        let artifact = self.export(state)?;
        let hard = artifact.reconstruct()?;
        let final_exported = evaluate(self.model, &hard, &self.data.heldout)?;
        let quantizer = Quantizer::new(self.cfg.quantizer.clone())?;
        let qidx = self.model.quantized_indices();
        let (mut gap, mut n) = (0.0, 0usize);
        for &i in &qidx {
            let scales = quantizer.compute_scale(&state.weights[i])?;
            for (j, (e, h)) in eff[i].iter().zip(&hard[i]).enumerate() {
                gap += (e - h).abs() / scales.gamma_at(j);
                n += 1;
            }
        }
        let names = tensor_names(self.model, self.cfg.mode);
        let scores = match self.scores() {
            Some(s) => names.into_iter().zip(s.iter().copied()).collect(),
            None => BTreeMap::new(),
        };
        let nq: usize = qidx.iter().map(|&i| state.weights[i].len()).sum();
        Ok(TrainReport {
            final_effective,
            final_exported: Some(final_exported),
            quantization: Some(QuantSummary {
                flip_fraction: state.flip_fraction(nq),
                mean_dead_zone: state.mean_dead_zone(),
                end_gap_over_gamma: if n == 0 { 0.0 } else { gap / n as f64 },
                code_histogram: artifact.code_histogram(),
                scores,
            }),
            ..base
        })
    }
}

/// Output of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub report: TrainReport,
}

/// Runs all `total_steps` from the model's current parameters.
pub fn train_loop(
    cfg: &TrainConfig,
    model: &Model,
    data: &Dataset,
    scores: Option<Vec<f64>>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(model, data, cfg.clone(), scores)?;
    let mut state = trainer.initial_state();
    let mut records = Vec::new();
    trainer.run_until(&mut state, cfg.total_steps, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    let report = trainer.report(&state)?;
    Ok(TrainOutcome {
        state,
        records,
        report,
    })
}
