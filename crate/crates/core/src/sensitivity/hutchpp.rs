use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng;

use super::HutchConfig;

/// One Rademacher (`±1`) vector drawn from its own seed stream.
pub fn rademacher(seed: u64, probe: u64, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(rng::derive_seed(&[seed, probe]), 0);
    (0..dim)
        .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis for the span of `cols` (modified Gram-Schmidt with one
/// re-orthogonalization pass). A column whose R-diagonal falls below
/// `1e-10` times the largest R-diagonal seen so far is dropped before it
/// can be used to project later columns.
pub fn orthonormal_basis(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut max_r = 0.0f64;
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= proj * qi);
            }
        }
        let r = norm(&v);
        max_r = max_r.max(r);
        if r > 0.0 && r > 1e-10 * max_r.max(norm(c)) {
            v.iter_mut().for_each(|x| *x /= r);
            basis.push(v);
        }
    }
    basis
}

/// Hutch++ trace estimate of the symmetric operator behind `oracle`.
///
/// A Rademacher sketch `S` (dim × r) gives `Q = orth(H S)`; the estimate is
/// `tr(Q^T H Q)` plus the mean of `g^T P H P g` over `m` Rademacher probes,
/// with `P = I - Q Q^T`. Probe `k` is seeded from `(cfg.seed, k)`.
pub fn hutchpp_trace<F>(mut oracle: F, dim: usize, cfg: &HutchConfig) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(invalid("trace of a zero-dimensional operator"));
    }
    cfg.validate()?;
    let mut apply = |v: &[f64]| -> Result<Vec<f64>> {
        let out = oracle(v)?;
        if out.len() != dim {
            return Err(invalid(format!(
                "oracle returned {} values for dimension {dim}",
                out.len()
            )));
        }
        Ok(out)
    };

    let sketch = (0..cfg.sketch_rank)
        .map(|j| apply(&rademacher(cfg.seed, j as u64, dim)))
        .collect::<Result<Vec<_>>>()?;
    let q = orthonormal_basis(&sketch);

    let mut low_rank = 0.0;
    for qj in &q {
        low_rank += dot(qj, &apply(qj)?);
    }

    let mut residual = 0.0;
    for k in 0..cfg.samples {
        let mut g = rademacher(cfg.seed, (cfg.sketch_rank + k) as u64, dim);
        for qj in &q {
            let proj = dot(qj, &g);
            g.iter_mut().zip(qj).for_each(|(x, qi)| *x -= proj * qi);
        }
        residual += dot(&g, &apply(&g)?);
    }
    Ok(low_rank + residual / cfg.samples as f64)
}
