//! Runtime invariant suite behind `hestia check`.
//!
//! Every check compares an implementation against an independent
//! computation (finite differences, quadrature, explicit matrices) and
//! reports the measured error next to its threshold.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::numeric::rel_err;
use crate::autodiff::{grad, Tensor};
use crate::error::Result;
use crate::models::data::{generate_task, SyntheticTask};
use crate::models::{MlpSpec, Model, ModelSpec, Nonlinearity};
use crate::quantizer::{code_of, jacobian_value, kernel_probs, GroupScales, Quantizer, QuantizerConfig};
use crate::rng;
use crate::schedules::{self, ScheduleConfig};
use crate::sensitivity::{hutchpp_trace, HutchConfig};
use crate::trainer::{assemble_effective, Mode, TrainConfig};

/// Temperatures of the Jacobian grid checks.
pub const GRID_TAUS: [f64; 3] = [1.0, 0.3, 0.05];
/// Temperatures of the localization checks.
pub const LOCALIZATION_TAUS: [f64; 4] = [1.0, 0.3, 0.05, 0.01];
/// Denominator floor for relative errors of quantities that vanish in the
/// tails (Jacobian, kernel derivatives).
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    /// Where the worst error occurred, or why the check failed.
    pub detail: Option<String>,
}

impl CheckResult {
    fn below(name: &str, measured: f64, threshold: f64, detail: Option<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: measured < threshold,
            measured,
            threshold,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// Jacobian mass within 0.1 gamma of the boundaries, keyed by tau.
    pub localization: BTreeMap<String, f64>,
}

/// Closed-form Jacobian used by the suite; swappable for fault injection.
pub type JacobianFn = fn(f64, f64) -> f64;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub jacobian: JacobianFn,
    /// Number of Hutch++ seeds in the random-matrix check.
    pub hutch_seeds: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            jacobian: jacobian_value,
            hutch_seeds: 50,
        }
    }
}

/// `n` evenly spaced points over `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Composite Simpson rule on `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

fn fmt_tau(tau: f64) -> String {
    format!("{tau}")
}

/// Closed-form Jacobian vs finite differences and vs the engine's gradient
/// of the soft quantizer, over `w in [-3 gamma, 3 gamma]`.
pub fn jacobian_checks(jac: JacobianFn) -> Result<Vec<CheckResult>> {
    let gamma = 0.7;
    let q = Quantizer::new(QuantizerConfig::per_tensor())?;
    let ws = linspace(-3.0 * gamma, 3.0 * gamma, 2001);
    let scales = GroupScales::uniform(gamma, ws.len())?;
    let h = 1e-5 * gamma;
    let (mut fd_worst, mut ad_worst) = ((0.0, String::new()), (0.0, String::new()));
    for tau in GRID_TAUS {
        let closed: Vec<f64> = ws.iter().map(|&w| jac(w / gamma, tau)).collect();
        let plus: Vec<f64> = ws.iter().map(|w| w + h).collect();
        let minus: Vec<f64> = ws.iter().map(|w| w - h).collect();
        let hp = q.soft_values(&plus, &scales, tau)?;
        let hm = q.soft_values(&minus, &scales, tau)?;
        let leaf = Tensor::param(&[ws.len()], ws.clone())?;
        let out = q.soft_quantize(&leaf, &scales, tau)?.sum();
        let ad = grad(&out, &[&leaf])?[0].to_vec();
        for i in 0..ws.len() {
            let fd = (hp[i] - hm[i]) / (2.0 * h);
            let e = rel_err(closed[i], fd, REL_FLOOR);
            if e > fd_worst.0 {
                fd_worst = (e, format!("w = {}, tau = {tau}", ws[i]));
            }
            let e = rel_err(closed[i], ad[i], REL_FLOOR);
            if e > ad_worst.0 {
                ad_worst = (e, format!("w = {}, tau = {tau}", ws[i]));
            }
        }
    }
    Ok(vec![
        CheckResult::below("jacobian_vs_finite_difference", fd_worst.0, 1e-6, Some(fd_worst.1)),
        CheckResult::below("jacobian_vs_autodiff", ad_worst.0, 1e-10, Some(ad_worst.1)),
    ])
}

/// `d pi(q|z) / dz = (2 / tau) pi(q|z) (q - mu)` against finite differences.
pub fn kernel_derivative_check() -> CheckResult {
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for tau in GRID_TAUS {
        for z in linspace(-3.0, 3.0, 2001) {
            let p = kernel_probs(z, tau);
            let (pp, pm) = (kernel_probs(z + h, tau), kernel_probs(z - h, tau));
            let mu = p[2] - p[0];
            for (k, qv) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
                let closed = (2.0 / tau) * p[k] * (qv - mu);
                let fd = (pp[k] - pm[k]) / (2.0 * h);
                let e = rel_err(closed, fd, REL_FLOOR);
                if e > worst.0 {
                    worst = (e, format!("z = {z}, q = {qv}, tau = {tau}"));
                }
            }
        }
    }
    CheckResult::below("kernel_derivative_identity", worst.0, 1e-6, Some(worst.1))
}

/// Fraction of the Jacobian's mass on `[-10, 10]` (normalized units) lying
/// within `0.1` of a boundary.
pub fn localization_fraction(jac: JacobianFn, tau: f64) -> f64 {
    let n = 400_000;
    let f = |z: f64| jac(z, tau);
    let total = simpson(f, -10.0, 10.0, n);
    let near = 2.0 * simpson(f, 0.4, 0.6, n / 50);
    near / total
}

/// Quadrature of the Jacobian equals `2 gamma`; boundary mass grows as the
/// temperature drops.
pub fn localization_checks(jac: JacobianFn) -> (Vec<CheckResult>, BTreeMap<String, f64>) {
    let gamma = 1.3;
    let mut checks = Vec::new();
    let mut fractions = BTreeMap::new();
    let mut worst = (0.0, String::new());
    let mut prev = 0.0;
    let mut monotone = true;
    for tau in LOCALIZATION_TAUS {
        let integral = simpson(|w| jac(w / gamma, tau), -10.0 * gamma, 10.0 * gamma, 400_000);
        let err = (integral - 2.0 * gamma).abs() / gamma;
        if err > worst.0 {
            worst = (err, format!("tau = {tau}, integral = {integral}"));
        }
        let frac = localization_fraction(jac, tau);
        monotone &= frac > prev;
        prev = frac;
        fractions.insert(fmt_tau(tau), frac);
    }
    checks.push(CheckResult::below("jacobian_integral_2gamma", worst.0, 1e-3, Some(worst.1)));
    checks.push(CheckResult {
        name: "localization_monotone".into(),
        passed: monotone,
        measured: if monotone { 1.0 } else { 0.0 },
        threshold: 1.0,
        detail: Some(format!("{fractions:?}")),
    });
    let last = fractions[&fmt_tau(0.01)];
    checks.push(CheckResult {
        name: "localization_at_0.01".into(),
        passed: last > 0.99,
        measured: last,
        threshold: 0.99,
        detail: None,
    });
    (checks, fractions)
}

/// At `tau = 1e-3` the soft quantizer matches the hard one away from the
/// boundaries.
pub fn hard_limit_check() -> Result<CheckResult> {
    let gamma = 0.9;
    let q = Quantizer::new(QuantizerConfig::per_tensor())?;
    let ws: Vec<f64> = linspace(-3.0 * gamma, 3.0 * gamma, 6001)
        .into_iter()
        .filter(|w| (w.abs() - 0.5 * gamma).abs() > 0.05 * gamma)
        .collect();
    let scales = GroupScales::uniform(gamma, ws.len())?;
    let soft = q.soft_values(&ws, &scales, 1e-3)?;
    let worst = ws
        .iter()
        .zip(&soft)
        .map(|(w, s)| (s - gamma * f64::from(code_of(w / gamma))).abs() / gamma)
        .fold(0.0, f64::max);
    Ok(CheckResult::below("hard_limit_tau_1e-3", worst, 0.01, None))
}

fn dense_matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Random `d x d` matrix `B B^T` with `B` of width `rank`.
pub fn random_psd(d: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    let b: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..rank).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

fn trace(a: &[Vec<f64>]) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

pub fn hutchpp_checks(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let cfg = HutchConfig {
        sketch_rank: 10,
        samples: 20,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let a = random_psd(60, 7, 100 + seed);
        let est = hutchpp_trace(|v| Ok(dense_matvec(&a, v)), 60, &HutchConfig { seed, ..cfg.clone() })?;
        worst = worst.max(rel_err(est, trace(&a), 0.0));
    }
    checks.push(CheckResult::below("hutchpp_low_rank_exact", worst, 1e-8, None));

    let mut errs = Vec::new();
    for seed in 0..seeds {
        let a = random_psd(200, 200, 1000 + seed);
        let est = hutchpp_trace(|v| Ok(dense_matvec(&a, v)), 200, &HutchConfig { seed, ..cfg.clone() })?;
        errs.push(rel_err(est, trace(&a), 0.0));
    }
    errs.sort_by(f64::total_cmp);
    let median = if errs.is_empty() { f64::NAN } else { errs[errs.len() / 2] };
    checks.push(CheckResult::below(
        "hutchpp_random_psd_median",
        median,
        0.05,
        Some(format!("{seeds} seeds, d = 200, r = 10, m = 20")),
    ));
    Ok(checks)
}

pub fn schedule_checks() -> Result<CheckResult> {
    let c = ScheduleConfig {
        total_steps: 1000,
        rho: 0.2,
        tau_init: 0.3,
        alpha: 0.4,
    };
    let s = 0.73;
    let errs = [
        (schedules::pressure(100, &c)? - 0.5).abs(),
        (schedules::base_temperature(c.compress_steps(), &c)? - c.tau_init).abs(),
        schedules::base_temperature(1000, &c)?.abs(),
        (schedules::scaled_temperature(500, s, &c)? / schedules::base_temperature(500, &c)?
            - (c.alpha * s).exp())
        .abs(),
    ];
    Ok(CheckResult::below(
        "schedule_unit_values",
        errs.into_iter().fold(0.0, f64::max),
        1e-12,
        None,
    ))
}

/// Gradient of the loss w.r.t. latent weights equals
/// `(1 - p) g + p g J` elementwise, `g` being the gradient w.r.t. the
/// effective weights.
pub fn gradient_path_check(jac: JacobianFn) -> Result<CheckResult> {
    let task = SyntheticTask {
        train_size: 32,
        heldout_size: 8,
        input_dim: 4,
        teacher_hidden: vec![6],
        ..SyntheticTask::teacher_student(3)
    };
    let data = generate_task(&task)?;
    let model = Model::build(&ModelSpec::Mlp(MlpSpec {
        input_dim: 4,
        hidden: vec![6],
        output_dim: 1,
        nonlinearity: Nonlinearity::Tanh,
        seed: 11,
        random_bias: true,
    }))?;
    let scores = vec![0.2, 0.9];
    let q = Quantizer::new(QuantizerConfig::default())?;
    let mut worst = (0.0, String::new());
    for (t, expect_p) in [(0, 0.0), (30, 0.3), (100, 1.0)] {
        let cfg = TrainConfig {
            mode: Mode::Hestia,
            total_steps: 500,
            ..Default::default()
        };
        let sched = cfg.schedule();
        let p = schedules::pressure(t, &sched)?;
        debug_assert!((p - expect_p).abs() < 1e-15);
        let latent = model.leaves(true);
        let eff = assemble_effective(&model, &latent, Mode::Hestia, t, &cfg, Some(&scores))?;
        let loss = model.loss(&eff, &data.train)?;
        let lat_refs: Vec<&Tensor> = latent.iter().collect();
        let eff_refs: Vec<&Tensor> = eff.iter().collect();
        let g_latent = grad(&loss, &lat_refs)?;
        let g_eff = grad(&loss, &eff_refs)?;
        for (k, &i) in model.quantized_indices().iter().enumerate() {
            let w = latent[i].data();
            let scales = q.compute_scale(w)?;
            let tau = schedules::scaled_temperature(t, scores[k], &sched)?;
            for j in 0..w.len() {
                let jv = jac(w[j] / scales.gamma_at(j), tau);
                let g = g_eff[i].data()[j];
                let chain = (1.0 - p) * g + p * g * jv;
                let e = rel_err(chain, g_latent[i].data()[j], 1e-12);
                if e > worst.0 {
                    worst = (e, format!("tensor {i}, index {j}, p = {p}"));
                }
            }
        }
    }
    Ok(CheckResult::below("gradient_path_chain", worst.0, 1e-8, Some(worst.1)))
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut checks = jacobian_checks(opts.jacobian)?;
    checks.push(kernel_derivative_check());
    let (loc, localization) = localization_checks(opts.jacobian);
    checks.extend(loc);
    checks.push(hard_limit_check()?);
    checks.extend(hutchpp_checks(opts.hutch_seeds)?);
    checks.push(schedule_checks()?);
    checks.push(gradient_path_check(opts.jacobian)?);
    Ok(CheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        localization,
    })
}

/// Writes `temperature_curves.csv` (schedule per score) and
/// `jacobian_curves.csv` (Jacobian over `w / gamma` per temperature).
pub fn emit_curves(dir: &Path, schedule: &ScheduleConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("temperature_curves.csv"))?;
    w.write_record(["step", "pressure", "score", "tau"])?;
    for t in 0..=schedule.total_steps {
        let p = schedules::pressure(t, schedule)?;
        for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let tau = schedules::scaled_temperature(t, s, schedule)?;
            w.write_record([t.to_string(), p.to_string(), s.to_string(), tau.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("jacobian_curves.csv"))?;
    w.write_record(["z", "tau", "jacobian"])?;
    for tau in LOCALIZATION_TAUS {
        for z in linspace(-2.0, 2.0, 801) {
            w.write_record([z.to_string(), tau.to_string(), jacobian_value(z, tau).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable summary, one line per check.
pub fn write_summary(report: &CheckReport, mut out: impl Write) -> std::io::Result<()> {
    for c in &report.checks {
        writeln!(
            out,
            "{} {:<32} measured {:.3e} (threshold {:.1e}){}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.threshold,
            c.detail.as_deref().map(|d| format!("  [{d}]")).unwrap_or_default()
        )?;
    }
    Ok(())
}
