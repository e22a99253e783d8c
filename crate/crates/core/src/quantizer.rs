//! Ternary weight quantization: AbsMean scales, the hard quantizer, the
//! straight-through surrogate, and the temperature-controlled soft quantizer.
//!
//! Codes are always `{-1, 0, +1}`. A weight `w` in group `g` is normalized as
//! `z = w / gamma_g`; the hard quantizer rounds `z` (ties away from zero) and
//! clips, the soft quantizer takes the expectation of the code under
//!
//! ```text
//! pi(q | z) = exp(-(z - q)^2 / tau) / sum_k exp(-(z - k)^2 / tau)
//! ```
//!
//! so `H(w; tau) = gamma * E[q]`, whose derivative is `(2 / tau) * Var[q]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Tensor;
use crate::error::{invalid, HestiaError, Result};

/// The ternary code book, in probability-vector order.
pub const CODES: [i8; 3] = [-1, 0, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSize {
    PerTensor,
    Elements(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GroupSizeRepr {
    Count(usize),
    Name(String),
}

impl Serialize for GroupSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GroupSize::PerTensor => GroupSizeRepr::Name("per-tensor".into()).serialize(s),
            GroupSize::Elements(n) => GroupSizeRepr::Count(*n).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for GroupSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match GroupSizeRepr::deserialize(d)? {
            GroupSizeRepr::Count(n) => Ok(GroupSize::Elements(n)),
            GroupSizeRepr::Name(s) if s == "per-tensor" => Ok(GroupSize::PerTensor),
            GroupSizeRepr::Name(s) => Err(serde::de::Error::custom(format!(
                "group size must be a positive count or \"per-tensor\", got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for GroupSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupSize::PerTensor => write!(f, "per-tensor"),
            GroupSize::Elements(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub group_size: GroupSize,
    pub eps_gamma: f64,
    /// Floor applied to the temperature before evaluating the kernel.
    pub tau_min: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            group_size: GroupSize::Elements(128),
            eps_gamma: 1e-8,
            tau_min: 1e-4,
        }
    }
}

impl QuantizerConfig {
    pub fn per_tensor() -> Self {
        Self {
            group_size: GroupSize::PerTensor,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_gamma > 0.0) {
            return Err(invalid(format!("eps_gamma must be > 0, got {}", self.eps_gamma)));
        }
        if !(self.tau_min > 0.0) {
            return Err(invalid(format!("tau_min must be > 0, got {}", self.tau_min)));
        }
        if self.group_size == GroupSize::Elements(0) {
            return Err(invalid("group_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-group scales over the flattened weight tensor. Groups are contiguous
/// runs of `group_len` elements; the final group may be shorter.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupScales {
    gamma: Vec<f64>,
    group_len: usize,
    numel: usize,
}

impl GroupScales {
    pub fn from_parts(gamma: Vec<f64>, group_len: usize, numel: usize) -> Result<Self> {
        if group_len == 0 || numel == 0 {
            return Err(invalid("empty grouping"));
        }
        if gamma.len() != numel.div_ceil(group_len) {
            return Err(invalid(format!(
                "{} scales for {numel} elements in groups of {group_len}",
                gamma.len()
            )));
        }
        if gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(invalid("scales must be positive"));
        }
        Ok(Self {
            gamma,
            group_len,
            numel,
        })
    }

    /// A single scale shared by `numel` weights.
    pub fn uniform(gamma: f64, numel: usize) -> Result<Self> {
        Self::from_parts(vec![gamma], numel.max(1), numel)
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }

    pub fn numel(&self) -> usize {
        self.numel
    }

    pub fn gamma_at(&self, index: usize) -> f64 {
        self.gamma[index / self.group_len]
    }

    /// One scale per element.
    pub fn expanded(&self) -> Vec<f64> {
        (0..self.numel).map(|i| self.gamma_at(i)).collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.numel {
            return Err(HestiaError::ShapeMismatch {
                op: "quantizer",
                lhs: vec![n],
                rhs: vec![self.numel],
            });
        }
        Ok(())
    }
}

/// Code probabilities `pi(q | w)` for `q = -1, 0, +1`, one triple per weight.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeAssignment {
    pub probs: Vec<[f64; 3]>,
}

/// Nearest ternary code of a normalized weight; `|z| = 0.5` rounds away
/// from zero.
pub fn code_of(z: f64) -> i8 {
    z.round().clamp(-1.0, 1.0) as i8
}

/// Kernel probabilities at normalized weight `z`, shifted by the smallest
/// squared distance before exponentiating.
pub fn kernel_probs(z: f64, tau: f64) -> [f64; 3] {
    let d = [(z + 1.0) * (z + 1.0), z * z, (z - 1.0) * (z - 1.0)];
    let m = d[0].min(d[1]).min(d[2]);
    let a = d.map(|dq| ((dq - m) * (-1.0 / tau)).exp());
    // outer codes summed first so z and -z round identically
    let total = (a[0] + a[2]) + a[1];
    a.map(|aq| aq / total)
}

/// Code mean `mu(z) = E[q]`.
pub fn kernel_mean(z: f64, tau: f64) -> f64 {
    let p = kernel_probs(z, tau);
    p[2] - p[0]
}

/// Code variance `E[q^2] - mu^2`.
pub fn kernel_variance(z: f64, tau: f64) -> f64 {
    let p = kernel_probs(z, tau);
    let mu = p[2] - p[0];
    (p[0] + p[2]) - mu * mu
}

/// `H(w; tau) / gamma` expressed in normalized units.
pub fn soft_value(z: f64, tau: f64) -> f64 {
    let d = [(z + 1.0) * (z + 1.0), z * z, (z - 1.0) * (z - 1.0)];
    let m = d[0].min(d[1]).min(d[2]);
    let a = d.map(|dq| ((dq - m) * (-1.0 / tau)).exp());
    (a[2] - a[0]) / ((a[0] + a[2]) + a[1])
}

/// Closed-form `dH/dw = (2 / tau) * Var[q]` (independent of `gamma`).
pub fn jacobian_value(z: f64, tau: f64) -> f64 {
    (2.0 / tau) * kernel_variance(z, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    cfg: QuantizerConfig,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self {
            cfg: QuantizerConfig::default(),
        }
    }
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    /// Temperature actually fed to the kernel: rejects non-positive input,
    /// then applies the `tau_min` floor.
    pub fn kernel_tau(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(invalid(format!("temperature must be > 0, got {tau}")));
        }
        Ok(tau.max(self.cfg.tau_min))
    }

    /// `gamma_g = mean(|w| in g) + eps_gamma` for every group.
    pub fn compute_scale(&self, w: &[f64]) -> Result<GroupScales> {
        if w.is_empty() {
            return Err(invalid("cannot compute scales of an empty tensor"));
        }
        let group_len = match self.cfg.group_size {
            GroupSize::PerTensor => w.len(),
            GroupSize::Elements(n) => n.min(w.len()),
        };
        let gamma = w
            .chunks(group_len)
            .map(|g| g.iter().map(|x| x.abs()).sum::<f64>() / g.len() as f64 + self.cfg.eps_gamma)
            .collect();
        Ok(GroupScales {
            gamma,
            group_len,
            numel: w.len(),
        })
    }

    pub fn codes(&self, w: &[f64], scales: &GroupScales) -> Result<Vec<i8>> {
        scales.check_len(w.len())?;
        Ok(w.iter()
            .enumerate()
            .map(|(i, &x)| code_of(x / scales.gamma_at(i)))
            .collect())
    }

    /// Dequantized weights `gamma * clip(round(w / gamma), -1, 1)`.
    pub fn hard_quantize(&self, w: &[f64], scales: &GroupScales) -> Result<Vec<f64>> {
        let codes = self.codes(w, scales)?;
        Ok(dequantize(&codes, scales))
    }

    /// Forward is the hard quantizer; backward passes gradients unchanged.
    pub fn ste_quantize(&self, w: &Tensor, scales: &GroupScales) -> Result<Tensor> {
        let hard = self.hard_quantize(w.data(), scales)?;
        w.straight_through(hard)
    }

    pub fn soft_assign(&self, w: &[f64], scales: &GroupScales, tau: f64) -> Result<CodeAssignment> {
        scales.check_len(w.len())?;
        let tau = self.kernel_tau(tau)?;
        let probs = w
            .iter()
            .enumerate()
            .map(|(i, &x)| kernel_probs(x / scales.gamma_at(i), tau))
            .collect();
        Ok(CodeAssignment { probs })
    }

    /// `W~ = gamma * sum_q q * pi(q | w)`, built from graph primitives so the
    /// engine differentiates it independently of the closed form. `gamma` is
    /// a constant.
    pub fn soft_quantize(&self, w: &Tensor, scales: &GroupScales, tau: f64) -> Result<Tensor> {
        scales.check_len(w.numel())?;
        let tau = self.kernel_tau(tau)?;
        let shape = w.shape().to_vec();
        let gamma = Tensor::new(&shape, scales.expanded())?;
        let z = w.div(&gamma)?;
        let dist: Vec<Tensor> = CODES
            .iter()
            .map(|&q| z.add_scalar(-f64::from(q)).square())
            .collect();
        let shift: Vec<f64> = (0..w.numel())
            .map(|i| dist[0].data()[i].min(dist[1].data()[i]).min(dist[2].data()[i]))
            .collect();
        let shift = Tensor::new(&shape, shift)?;
        let weights = dist
            .iter()
            .map(|d| Ok(d.sub(&shift)?.scale(-1.0 / tau).exp()))
            .collect::<Result<Vec<_>>>()?;
        let total = weights[0].add(&weights[1])?.add(&weights[2])?;
        weights[2].sub(&weights[0])?.div(&total)?.mul(&gamma)
    }

    /// Values of the soft quantizer without building a graph.
    pub fn soft_values(&self, w: &[f64], scales: &GroupScales, tau: f64) -> Result<Vec<f64>> {
        scales.check_len(w.len())?;
        let tau = self.kernel_tau(tau)?;
        Ok(w.iter()
            .enumerate()
            .map(|(i, &x)| {
                let g = scales.gamma_at(i);
                soft_value(x / g, tau) * g
            })
            .collect())
    }

    /// Per-weight `dH/dw = (2 / tau) * (E[q^2] - E[q]^2)`.
    pub fn soft_jacobian(&self, w: &[f64], scales: &GroupScales, tau: f64) -> Result<Vec<f64>> {
        scales.check_len(w.len())?;
        let tau = self.kernel_tau(tau)?;
        Ok(w.iter()
            .enumerate()
            .map(|(i, &x)| jacobian_value(x / scales.gamma_at(i), tau))
            .collect())
    }
}

/// `code * gamma` per element; the only path used to produce dequantized
/// values, so exported artifacts reconstruct bit-exactly.
pub fn dequantize(codes: &[i8], scales: &GroupScales) -> Vec<f64> {
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| f64::from(c) * scales.gamma_at(i))
        .collect()
}

/// `(1 - p) * W + p * W_soft`.
pub fn effective_weights(w: &Tensor, w_soft: &Tensor, p: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("pressure must lie in [0, 1], got {p}")));
    }
    if w.shape() != w_soft.shape() {
        return Err(HestiaError::ShapeMismatch {
            op: "effective_weights",
            lhs: w.shape().to_vec(),
            rhs: w_soft.shape().to_vec(),
        });
    }
    w.scale(1.0 - p).add(&w_soft.scale(p))
}

/// Transition points `(-gamma/2, +gamma/2)` of each group.
pub fn boundaries(scales: &GroupScales) -> Vec<(f64, f64)> {
    scales.gammas().iter().map(|g| (-0.5 * g, 0.5 * g)).collect()
}

/// `true` where the update `delta` leaves the ternary code unchanged, using
/// the same scales before and after.
pub fn dead_zone_mask(w: &[f64], delta: &[f64], scales: &GroupScales) -> Result<Vec<bool>> {
    if w.len() != delta.len() {
        return Err(HestiaError::ShapeMismatch {
            op: "dead_zone_mask",
            lhs: vec![w.len()],
            rhs: vec![delta.len()],
        });
    }
    scales.check_len(w.len())?;
    Ok(w.iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (&x, &d))| {
            let g = scales.gamma_at(i);
            code_of((x + d) / g) == code_of(x / g)
        })
        .collect())
}
