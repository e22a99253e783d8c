//! Toy model zoo: a plain MLP and a small causal transformer.
//!
//! Parameters are stored as named flat buffers. A forward pass takes one
//! [`Tensor`] per parameter (same order as [`Model::params`]), which lets the
//! trainer substitute effective or quantized weights without touching the
//! model itself.

pub mod data;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_loss, mse_loss, Tensor};
use crate::error::{invalid, HestiaError, Result};
use crate::rng;

use data::{Batch, Inputs, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Gelu,
}

impl Nonlinearity {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Nonlinearity::Relu => Ok(x.relu()),
            Nonlinearity::Tanh => Ok(x.tanh()),
            Nonlinearity::Gelu => x.gelu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Draw biases uniformly in [-0.1, 0.1] instead of zero.
    #[serde(default)]
    pub random_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyTransformerSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    /// Multipliers on the initial scale of named tensors.
    #[serde(default)]
    pub init_gains: BTreeMap<String, f64>,
}

impl TinyTransformerSpec {
    pub fn new(vocab: usize, d_model: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            vocab,
            d_model,
            heads: 1,
            layers: 1,
            seq_len,
            mlp_ratio: 4,
            seed,
            init_gains: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Transformer(TinyTransformerSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Linear-map weights are quantized; biases, embeddings and the
    /// unembedding stay in full precision.
    pub quantize: bool,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<ParamTensor>,
}

const PROJECTIONS: [&str; 6] = ["q_proj", "k_proj", "v_proj", "o_proj", "mlp_up", "mlp_down"];

fn uniform(r: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-bound..=bound)).collect()
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        let params = match spec {
            ModelSpec::Mlp(s) => build_mlp(s)?,
            ModelSpec::Transformer(s) => build_transformer(s)?,
        };
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of the quantized tensors, in parameter order.
    pub fn quantized_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].quantize)
            .collect()
    }

    pub fn quantized_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.quantize)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Current parameter values as tensors, optionally as grad leaves.
    pub fn leaves(&self, requires_grad: bool) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::new(&p.shape, p.values.clone()).expect("param shape is consistent");
                if requires_grad {
                    t.requires_grad()
                } else {
                    t
                }
            })
            .collect()
    }

    /// Replaces all parameter values (same order and sizes).
    pub fn set_values(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(invalid("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.numel() {
                return Err(invalid(format!("size mismatch for {}", p.name)));
            }
            p.values = v;
        }
        Ok(())
    }

    fn check_weights(&self, weights: &[Tensor]) -> Result<()> {
        if weights.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} weight tensors, got {}",
                self.params.len(),
                weights.len()
            )));
        }
        for (p, w) in self.params.iter().zip(weights) {
            if p.shape != w.shape() {
                return Err(HestiaError::ShapeMismatch {
                    op: "model weights",
                    lhs: p.shape.clone(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Outputs for an MLP (`(n, out)`), logits for the transformer
    /// (`(n * seq_len, vocab)`).
    pub fn forward(&self, weights: &[Tensor], inputs: &Inputs) -> Result<Tensor> {
        self.check_weights(weights)?;
        match (&self.spec, inputs) {
            (ModelSpec::Mlp(s), Inputs::Dense { values, dim }) => {
                if *dim != s.input_dim {
                    return Err(invalid(format!("input dim {dim}, model expects {}", s.input_dim)));
                }
                let x = Tensor::new(&[values.len() / dim, *dim], values.clone())?;
                mlp_forward(s, weights, &x)
            }
            (ModelSpec::Transformer(s), Inputs::Tokens { tokens, seq_len }) => {
                if *seq_len != s.seq_len {
                    return Err(invalid(format!("sequence length {seq_len}, model expects {}", s.seq_len)));
                }
                transformer_forward(s, weights, tokens)
            }
            _ => Err(invalid("inputs do not match the model architecture")),
        }
    }

    /// MSE for regression, mean cross-entropy otherwise.
    pub fn loss(&self, weights: &[Tensor], batch: &Batch) -> Result<Tensor> {
        let out = self.forward(weights, &batch.inputs)?;
        loss_from_outputs(&out, &batch.targets)
    }
}

pub fn loss_from_outputs(out: &Tensor, targets: &Targets) -> Result<Tensor> {
    match targets {
        Targets::Regression { values, dim } => {
            let t = Tensor::new(&[values.len() / dim, *dim], values.clone())?;
            mse_loss(out, &t)
        }
        Targets::Classes(labels) => cross_entropy_loss(out, labels, None),
        Targets::NextToken { targets, weights } => cross_entropy_loss(out, targets, Some(weights)),
    }
}

/// Fraction of scored rows whose argmax matches the target.
pub fn accuracy(out: &Tensor, targets: &Targets) -> Option<f64> {
    let (rows, cols) = out.dims2().ok()?;
    let argmax = |i: usize| {
        let row = &out.data()[i * cols..(i + 1) * cols];
        (0..cols).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    };
    let (labels, weights): (&[usize], Option<&[f64]>) = match targets {
        Targets::Regression { .. } => return None,
        Targets::Classes(l) => (l, None),
        Targets::NextToken { targets, weights } => (targets, Some(weights)),
    };
    let (mut hit, mut total) = (0.0, 0.0);
    for i in 0..rows {
        let w = weights.map_or(1.0, |w| w[i]);
        if w > 0.0 {
            total += w;
            if argmax(i) == labels[i] {
                hit += w;
            }
        }
    }
    (total > 0.0).then(|| hit / total)
}

fn build_mlp(s: &MlpSpec) -> Result<Vec<ParamTensor>> {
    if s.input_dim == 0 || s.output_dim == 0 || s.hidden.contains(&0) {
        return Err(invalid("MLP dims must all be >= 1"));
    }
    let mut dims = vec![s.input_dim];
    dims.extend(&s.hidden);
    dims.push(s.output_dim);
    let mut r = rng::stream(s.seed, 0);
    let mut params = Vec::new();
    let last = dims.len() - 2;
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        // uniform fan-in scaling; hidden layers carry the ReLU gain
        let gain = if i == last { 1.0 } else { 2.0 };
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        params.push(ParamTensor {
            name: format!("fc{i}.weight"),
            shape: vec![fan_out, fan_in],
            values: uniform(&mut r, fan_in * fan_out, bound),
            quantize: true,
        });
        let bias = if s.random_bias {
            uniform(&mut r, fan_out, 0.1)
        } else {
            vec![0.0; fan_out]
        };
        params.push(ParamTensor {
            name: format!("fc{i}.bias"),
            shape: vec![fan_out],
            values: bias,
            quantize: false,
        });
    }
    Ok(params)
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(&w.transpose()?)?;
    match b {
        Some(b) => {
            let (n, _) = x.dims2()?;
            let row = b.reshape(&[1, b.numel()])?;
            y.add(&Tensor::ones(&[n, 1]).matmul(&row)?)
        }
        None => Ok(y),
    }
}

fn mlp_forward(s: &MlpSpec, weights: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let layers = weights.len() / 2;
    let mut h = x.clone();
    for i in 0..layers {
        h = linear(&h, &weights[2 * i], Some(&weights[2 * i + 1]))?;
        if i + 1 < layers {
            h = s.nonlinearity.apply(&h)?;
        }
    }
    Ok(h)
}

fn layer_prefix(s: &TinyTransformerSpec, layer: usize) -> String {
    if s.layers == 1 {
        String::new()
    } else {
        format!("layer{layer}.")
    }
}

fn build_transformer(s: &TinyTransformerSpec) -> Result<Vec<ParamTensor>> {
    if s.vocab == 0 || s.d_model == 0 || s.heads == 0 || s.layers == 0 || s.mlp_ratio == 0 {
        return Err(invalid("transformer dims must all be >= 1"));
    }
    if s.d_model % s.heads != 0 {
        return Err(invalid("d_model must be divisible by heads"));
    }
    if s.seq_len < 2 {
        return Err(invalid("sequence length must be >= 2"));
    }
    let d = s.d_model;
    let ff = d * s.mlp_ratio;
    let mut r = rng::stream(s.seed, 0);
    let gain = |name: &str| s.init_gains.get(name).copied().unwrap_or(1.0);
    let mut params = vec![
        ParamTensor {
            name: "embed".into(),
            shape: vec![s.vocab, d],
            values: uniform(&mut r, s.vocab * d, gain("embed")),
            quantize: false,
        },
        ParamTensor {
            name: "pos".into(),
            shape: vec![s.seq_len, d],
            values: uniform(&mut r, s.seq_len * d, gain("pos")),
            quantize: false,
        },
    ];
    for layer in 0..s.layers {
        let prefix = layer_prefix(s, layer);
        for proj in PROJECTIONS {
            let (rows, cols) = match proj {
                "mlp_up" => (ff, d),
                "mlp_down" => (d, ff),
                _ => (d, d),
            };
            let relu_gain = if proj == "mlp_up" { 2.0 } else { 1.0 };
            let bound = (3.0 * relu_gain / cols as f64).sqrt() * gain(proj);
            params.push(ParamTensor {
                name: format!("{prefix}{proj}"),
                shape: vec![rows, cols],
                values: uniform(&mut r, rows * cols, bound),
                quantize: true,
            });
        }
    }
    params.push(ParamTensor {
        name: "unembed".into(),
        shape: vec![s.vocab, d],
        values: uniform(&mut r, s.vocab * d, (3.0 / d as f64).sqrt() * gain("unembed")),
        quantize: false,
    });
    Ok(params)
}

fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = -1e9;
        }
    }
    Tensor::new(&[len, len], m).expect("square mask")
}

/// Columns `start..start+len` of a 2-D tensor.
fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    x.transpose()?.slice_rows(start, len)?.transpose()
}

fn transformer_forward(s: &TinyTransformerSpec, w: &[Tensor], tokens: &[usize]) -> Result<Tensor> {
    let (d, len, vocab) = (s.d_model, s.seq_len, s.vocab);
    let n_seq = tokens.len() / len;
    let rows = n_seq * len;
    let mut onehot = vec![0.0; rows * vocab];
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        onehot[i * vocab + t] = 1.0;
    }
    let onehot = Tensor::new(&[rows, vocab], onehot)?;
    let pos = Tensor::concat_rows(&vec![w[1].clone(); n_seq])?;
    let mut x = onehot.matmul(&w[0])?.add(&pos)?;

    let mask = causal_mask(len);
    let head_dim = d / s.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in 0..s.layers {
        let base = 2 + layer * PROJECTIONS.len();
        let q = linear(&x, &w[base], None)?;
        let k = linear(&x, &w[base + 1], None)?;
        let v = linear(&x, &w[base + 2], None)?;
        let mut outs = Vec::with_capacity(n_seq);
        for b in 0..n_seq {
            let (qb, kb, vb) = (
                q.slice_rows(b * len, len)?,
                k.slice_rows(b * len, len)?,
                v.slice_rows(b * len, len)?,
            );
            let mut heads = Vec::with_capacity(s.heads);
            for h in 0..s.heads {
                let (qh, kh, vh) = if s.heads == 1 {
                    (qb.clone(), kb.clone(), vb.clone())
                } else {
                    (
                        slice_cols(&qb, h * head_dim, head_dim)?,
                        slice_cols(&kb, h * head_dim, head_dim)?,
                        slice_cols(&vb, h * head_dim, head_dim)?,
                    )
                };
                let scores = qh.matmul(&kh.transpose()?)?.scale(scale).add(&mask)?;
                heads.push(scores.softmax_rows()?.matmul(&vh)?);
            }
            outs.push(if s.heads == 1 {
                heads.pop().expect("one head")
            } else {
                // concatenate heads along columns
                let cols: Vec<Tensor> = heads
                    .iter()
                    .map(|h| h.transpose())
                    .collect::<Result<_>>()?;
                Tensor::concat_rows(&cols)?.transpose()?
            });
        }
        let attn = Tensor::concat_rows(&outs)?;
        x = x.add(&linear(&attn, &w[base + 3], None)?)?;
        let hidden = linear(&x, &w[base + 4], None)?.relu();
        x = x.add(&linear(&hidden, &w[base + 5], None)?)?;
    }
    linear(&x, &w[w.len() - 1], None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;

    fn mlp(seed: u64) -> ModelSpec {
        ModelSpec::Mlp(MlpSpec {
            input_dim: 4,
            hidden: vec![8],
            output_dim: 2,
            nonlinearity: Nonlinearity::Relu,
            seed,
            random_bias: false,
        })
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(Model::build(&mlp(7)).unwrap(), Model::build(&mlp(7)).unwrap());
        assert_ne!(Model::build(&mlp(7)).unwrap(), Model::build(&mlp(8)).unwrap());
    }

    #[test]
    fn quantizable_counts() {
        let m = Model::build(&mlp(0)).unwrap();
        assert_eq!(m.quantized_indices().len(), 2);
        let t = Model::build(&ModelSpec::Transformer(TinyTransformerSpec::new(32, 32, 16, 0))).unwrap();
        let names = t.quantized_names();
        assert_eq!(names, PROJECTIONS.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs() {
        let bad = ModelSpec::Mlp(MlpSpec {
            input_dim: 0,
            hidden: vec![],
            output_dim: 1,
            nonlinearity: Nonlinearity::Tanh,
            seed: 0,
            random_bias: false,
        });
        assert!(Model::build(&bad).is_err());
        let mut t = TinyTransformerSpec::new(8, 6, 4, 0);
        t.heads = 4;
        assert!(Model::build(&ModelSpec::Transformer(t)).is_err());
        assert!(Model::build(&ModelSpec::Transformer(TinyTransformerSpec::new(8, 8, 1, 0))).is_err());
    }

    #[test]
    fn transformer_is_causal() {
        let spec = TinyTransformerSpec::new(8, 8, 4, 1);
        let m = Model::build(&ModelSpec::Transformer(spec)).unwrap();
        let w = m.leaves(false);
        let a = m
            .forward(&w, &Inputs::Tokens { tokens: vec![1, 2, 3, 4], seq_len: 4 })
            .unwrap();
        let b = m
            .forward(&w, &Inputs::Tokens { tokens: vec![1, 2, 3, 7], seq_len: 4 })
            .unwrap();
        // rows 0..3 only see tokens 0..=row
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..], &b.data()[3 * 8..]);
    }

    #[test]
    fn multi_head_gradients_flow() {
        let mut spec = TinyTransformerSpec::new(6, 8, 4, 2);
        spec.heads = 2;
        spec.layers = 2;
        let m = Model::build(&ModelSpec::Transformer(spec)).unwrap();
        assert_eq!(m.quantized_indices().len(), 12);
        let w = m.leaves(true);
        let batch = Batch {
            inputs: Inputs::Tokens { tokens: vec![0, 1, 2, 3, 5, 4, 3, 2], seq_len: 4 },
            targets: Targets::NextToken {
                targets: vec![1, 2, 3, 0, 4, 3, 2, 0],
                weights: vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0],
            },
        };
        let loss = m.loss(&w, &batch).unwrap();
        let refs: Vec<&Tensor> = w.iter().collect();
        let g = grad(&loss, &refs).unwrap();
        for (p, gi) in m.params().iter().zip(&g) {
            assert!(gi.data().iter().any(|v| *v != 0.0), "no gradient for {}", p.name);
        }
    }
}
