use std::collections::{HashMap, HashSet};

use crate::error::{invalid, HestiaError, Result};

use super::tensor::{GradModeGuard, Tensor};

/// Nodes reachable from `root` through grad-requiring links, parents first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for p in op.parents() {
                if p.requires_grad_flag() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn backward_pass(loss: &Tensor, create_graph: bool) -> Result<(Vec<Tensor>, HashMap<u64, Tensor>)> {
    if loss.numel() != 1 {
        return Err(invalid(format!(
            "gradient requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let _mode = GradModeGuard::set(create_graph);
    let order = topo_order(loss);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if !loss.requires_grad_flag() {
        return Ok((order, grads));
    }
    grads.insert(loss.id(), Tensor::ones(loss.shape()));
    // reverse topological order visits every node after all of its consumers
    for node in order.iter().rev() {
        let Some(op) = node.op() else { continue };
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        for (parent, pg) in op.backward(node, &g)? {
            if !parent.requires_grad_flag() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    Ok((order, grads))
}

fn collect(params: &[&Tensor], grads: &HashMap<u64, Tensor>) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            grads
                .get(&p.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect()
}

/// d`loss`/d`param` for each param as constant tensors. Params that do not
/// influence the loss receive zeros.
pub fn grad(loss: &Tensor, params: &[&Tensor]) -> Result<Vec<Tensor>> {
    let (_, grads) = backward_pass(loss, false)?;
    Ok(collect(params, &grads))
}

/// Like [`grad`], but the returned gradients are themselves graph nodes and
/// can be differentiated again.
pub fn grad_graph(loss: &Tensor, params: &[&Tensor]) -> Result<Vec<Tensor>> {
    let (_, grads) = backward_pass(loss, true)?;
    Ok(collect(params, &grads))
}

/// Hessian-vector product `H v` of `loss` restricted to `param`
/// (reverse-over-reverse).
pub fn hvp(loss: &Tensor, param: &Tensor, v: &[f64]) -> Result<Tensor> {
    if v.len() != param.numel() {
        return Err(HestiaError::ShapeMismatch {
            op: "hvp",
            lhs: param.shape().to_vec(),
            rhs: vec![v.len()],
        });
    }
    let g = grad_graph(loss, &[param])?.remove(0);
    if !g.requires_grad_flag() {
        // gradient independent of param: zero curvature
        return Ok(Tensor::zeros(param.shape()));
    }
    let v = Tensor::new(param.shape(), v.to_vec())?;
    let gv = g.mul(&v)?.sum();
    Ok(grad(&gv, &[param])?.remove(0))
}

impl Tensor {
    /// Accumulates d`self`/d`leaf` into the `grad` buffer of every
    /// grad-requiring leaf reachable from this scalar.
    pub fn backward(&self) -> Result<()> {
        let (order, grads) = backward_pass(self, false)?;
        for node in order.iter().filter(|n| n.is_leaf() && n.requires_grad_flag()) {
            if let Some(g) = grads.get(&node.id()) {
                node.accumulate_grad(g.data());
            }
        }
        Ok(())
    }
}
