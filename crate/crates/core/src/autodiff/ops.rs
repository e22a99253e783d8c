//! Primitive operations and their backward rules.
//!
//! Every backward rule is written in terms of other primitives, so when the
//! backward pass runs with recording enabled the gradient is itself a graph
//! and can be differentiated again (Hessian-vector products).

use crate::error::{invalid, HestiaError, Result};

use super::tensor::Tensor;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Maximum(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Square(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Tanh(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumRows(Tensor),
    ExpandCols(Tensor),
    Reshape(Tensor),
    SliceRows(Tensor, usize),
    PadRows(Tensor, usize),
    ConcatRows(Vec<Tensor>),
    StraightThrough(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | MatMul(a, b) => {
                vec![a, b]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Square(a) | Abs(a)
            | Relu(a) | Tanh(a) | Transpose(a) | Sum(a) | Mean(a) | SumRows(a)
            | ExpandCols(a) | Reshape(a) | SliceRows(a, _) | PadRows(a, _)
            | StraightThrough(a) => vec![a],
            ConcatRows(xs) => xs.iter().collect(),
        }
    }

    /// Gradient contributions `(parent, dL/dparent)` given `g = dL/dout`.
    pub(crate) fn backward(&self, out: &Tensor, g: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        use Op::*;
        let pairs = match self {
            Add(a, b) => vec![
                (a.clone(), reduce_to(g, a)?),
                (b.clone(), reduce_to(g, b)?),
            ],
            Sub(a, b) => vec![
                (a.clone(), reduce_to(g, a)?),
                (b.clone(), reduce_to(&g.neg(), b)?),
            ],
            Mul(a, b) => vec![
                (a.clone(), reduce_to(&g.mul(b)?, a)?),
                (b.clone(), reduce_to(&g.mul(a)?, b)?),
            ],
            Div(a, b) => {
                let ga = g.div(b)?;
                // d(a/b)/db = -(a/b)/b
                let gb = g.mul(out)?.div(b)?.neg();
                vec![(a.clone(), reduce_to(&ga, a)?), (b.clone(), reduce_to(&gb, b)?)]
            }
            Maximum(a, b) => {
                let shape = out.shape().to_vec();
                let n = out.numel();
                let (mut ma, mut mb) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let av = a.data()[if a.numel() == 1 { 0 } else { i }];
                    let bv = b.data()[if b.numel() == 1 { 0 } else { i }];
                    if av >= bv {
                        ma[i] = 1.0;
                    } else {
                        mb[i] = 1.0;
                    }
                }
                let ga = g.mul(&Tensor::constant(shape.clone(), ma))?;
                let gb = g.mul(&Tensor::constant(shape, mb))?;
                vec![(a.clone(), reduce_to(&ga, a)?), (b.clone(), reduce_to(&gb, b)?)]
            }
            Neg(a) => vec![(a.clone(), g.neg())],
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            AddScalar(a) => vec![(a.clone(), g.clone())],
            Exp(a) => vec![(a.clone(), g.mul(out)?)],
            Log(a) => vec![(a.clone(), g.div(a)?)],
            Square(a) => vec![(a.clone(), g.mul(&a.scale(2.0))?)],
            Abs(a) => {
                let sign: Vec<f64> = a.data().iter().map(|&x| sign(x)).collect();
                let s = Tensor::constant(a.shape().to_vec(), sign);
                vec![(a.clone(), g.mul(&s)?)]
            }
            Relu(a) => {
                let mask: Vec<f64> = a
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let m = Tensor::constant(a.shape().to_vec(), mask);
                vec![(a.clone(), g.mul(&m)?)]
            }
            Tanh(a) => {
                // 1 - tanh^2, expressed through the output node
                let d = out.square().neg().add_scalar(1.0);
                vec![(a.clone(), g.mul(&d)?)]
            }
            MatMul(a, b) => vec![
                (a.clone(), g.matmul(&b.transpose()?)?),
                (b.clone(), a.transpose()?.matmul(g)?),
            ],
            Transpose(a) => vec![(a.clone(), g.transpose()?)],
            Sum(a) => vec![(a.clone(), expand_scalar(g, a.shape())?)],
            Mean(a) => {
                let n = a.numel() as f64;
                vec![(a.clone(), expand_scalar(&g.scale(1.0 / n), a.shape())?)]
            }
            SumRows(a) => {
                let (_, cols) = a.dims2()?;
                vec![(a.clone(), g.expand_cols(cols)?)]
            }
            ExpandCols(a) => vec![(a.clone(), g.sum_rows()?)],
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape())?)],
            SliceRows(a, start) => {
                let (rows, _) = a.dims2()?;
                vec![(a.clone(), g.pad_rows(*start, rows)?)]
            }
            PadRows(a, start) => {
                let (rows, _) = a.dims2()?;
                vec![(a.clone(), g.slice_rows(*start, rows)?)]
            }
            ConcatRows(xs) => {
                let mut offset = 0;
                let mut pairs = Vec::with_capacity(xs.len());
                for x in xs {
                    let (rows, _) = x.dims2()?;
                    pairs.push((x.clone(), g.slice_rows(offset, rows)?));
                    offset += rows;
                }
                pairs
            }
            StraightThrough(a) => vec![(a.clone(), g.clone())],
        };
        Ok(pairs)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(g: &Tensor, target: &Tensor) -> Result<Tensor> {
    if g.shape() == target.shape() {
        Ok(g.clone())
    } else {
        g.sum().reshape(target.shape())
    }
}

fn expand_scalar(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::ones(shape).mul(g)
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(HestiaError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = broadcast_shape(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    };
    Ok((shape, data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_with("add", self, other, |x, y| x + y)?;
        Ok(Tensor::from_op(shape, data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_with("sub", self, other, |x, y| x - y)?;
        Ok(Tensor::from_op(shape, data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_with("mul", self, other, |x, y| x * y)?;
        Ok(Tensor::from_op(shape, data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_with("div", self, other, |x, y| x / y)?;
        Ok(Tensor::from_op(shape, data, Op::Div(self.clone(), other.clone())))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_with("maximum", self, other, f64::max)?;
        Ok(Tensor::from_op(shape, data, Op::Maximum(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| -x), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |x| x * c),
            Op::Scale(self.clone(), c),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |x| x + c),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::ln), Op::Log(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |x| x * x),
            Op::Square(self.clone()),
        )
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::abs), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |x| x.max(0.0)),
            Op::Relu(self.clone()),
        )
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::tanh), Op::Tanh(self.clone()))
    }

    /// GELU, tanh approximation, built from primitives.
    pub fn gelu(&self) -> Result<Tensor> {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let cube = self.square().mul(self)?;
        let inner = self.add(&cube.scale(0.044715))?.scale(c);
        self.mul(&inner.tanh().add_scalar(1.0))
            .map(|t| t.scale(0.5))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(HestiaError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(Tensor::from_op(vec![c, r], out, Op::Transpose(self.clone())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s / n], Op::Mean(self.clone()))
    }

    /// Row sums of a 2-D tensor, shape `(rows, 1)`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let d = self.data();
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(Tensor::from_op(vec![r, 1], out, Op::SumRows(self.clone())))
    }

    /// Repeats a `(rows, 1)` column `cols` times.
    pub fn expand_cols(&self, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if c != 1 {
            return Err(invalid(format!("expand_cols needs a column, got {:?}", self.shape())));
        }
        let d = self.data();
        let out = (0..r).flat_map(|i| std::iter::repeat_n(d[i], cols)).collect();
        Ok(Tensor::from_op(vec![r, cols], out, Op::ExpandCols(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(HestiaError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(invalid(format!("row slice {start}..{} of {r} rows", start + len)));
        }
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(vec![len, c], out, Op::SliceRows(self.clone(), start)))
    }

    /// Embeds a 2-D tensor at row `start` of a zero matrix with `total` rows.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + r > total {
            return Err(invalid(format!("cannot pad {r} rows at {start} into {total}")));
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(self.data());
        Ok(Tensor::from_op(vec![total, c], out, Op::PadRows(self.clone(), start)))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_rows of an empty list"))?;
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(HestiaError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(vec![rows, c], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Forward value `forward`, backward identity to `self`.
    pub fn straight_through(&self, forward: Vec<f64>) -> Result<Tensor> {
        if forward.len() != self.numel() {
            return Err(invalid(format!(
                "straight-through forward has {} values, input has {}",
                forward.len(),
                self.numel()
            )));
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            forward,
            Op::StraightThrough(self.clone()),
        ))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let shifted = self.sub(&row_max(self)?.expand_cols(c)?)?;
        let e = shifted.exp();
        e.div(&e.sum_rows()?.expand_cols(c)?)
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let shifted = self.sub(&row_max(self)?.expand_cols(c)?)?;
        let lse = shifted.exp().sum_rows()?.ln();
        shifted.sub(&lse.expand_cols(c)?)
    }
}

/// Detached per-row maximum, used only as a numerical shift.
fn row_max(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let d = t.data();
    let m = (0..r)
        .map(|i| {
            d[i * c..(i + 1) * c]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(Tensor::constant(vec![r, 1], m))
}

/// Mean squared error against a constant target of the same shape.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(HestiaError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(pred.sub(target)?.square().mean())
}

/// Mean cross-entropy of `logits` (rows × classes) against class indices.
///
/// `weights`, when given, scales each row's term; the result is divided by
/// the weight total so masked rows do not count.
pub fn cross_entropy_loss(
    logits: &Tensor,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if targets.len() != r {
        return Err(invalid(format!("{} targets for {r} rows", targets.len())));
    }
    let mut sel = vec![0.0; r * c];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(invalid(format!("target class {t} out of range {c}")));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        sel[i * c + t] = w;
        total += w;
    }
    if total <= 0.0 {
        return Err(invalid("cross-entropy with zero total weight"));
    }
    let sel = Tensor::constant(vec![r, c], sel);
    Ok(logits
        .log_softmax_rows()?
        .mul(&sel)?
        .sum()
        .scale(-1.0 / total))
}
