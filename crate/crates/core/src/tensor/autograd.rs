use std::collections::{HashMap, HashSet};

use super::ops::backward;
use super::{set_grad_enabled, Element, Tensor};
use crate::{Error, Result};

struct ModeGuard(bool);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        set_grad_enabled(self.0);
    }
}

/// Runs `f` with graph recording switched on or off, restoring the previous
/// mode afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let _guard = ModeGuard(set_grad_enabled(enabled));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Reverse-mode gradients of a scalar `output` with respect to `inputs`.
///
/// With `build_graph` the returned tensors are recorded graph nodes that can
/// be differentiated again; otherwise they are detached constants.
pub fn grad<T: Element>(output: &Tensor<T>, inputs: &[Tensor<T>], build_graph: bool) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(Error::Shape(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    if !output.requires_grad() {
        return Err(Error::Connectivity(
            "output does not depend on any tensor that requires grad".into(),
        ));
    }

    // Everything reachable from the output through grad-requiring edges.
    let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if nodes.contains_key(&t.id()) {
            continue;
        }
        for input in t.0.op.inputs() {
            if input.requires_grad() && !nodes.contains_key(&input.id()) {
                stack.push(input.clone());
            }
        }
        nodes.insert(t.id(), t);
    }
    for (k, input) in inputs.iter().enumerate() {
        if !nodes.contains_key(&input.id()) {
            return Err(Error::Connectivity(format!(
                "input {k} is not reachable from the output"
            )));
        }
    }

    // Ids grow with creation time, so ascending id order is topological.
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable();

    // Keep only nodes that lead to a requested input.
    let wanted: HashSet<u64> = inputs.iter().map(Tensor::id).collect();
    let mut relevant: HashSet<u64> = HashSet::new();
    for id in &order {
        let t = &nodes[id];
        if wanted.contains(id) || t.0.op.inputs().iter().any(|i| relevant.contains(&i.id())) {
            relevant.insert(*id);
        }
    }

    let _guard = ModeGuard(set_grad_enabled(build_graph));
    let mut adjoints: HashMap<u64, Tensor<T>> = HashMap::new();
    adjoints.insert(output.id(), Tensor::full(output.shape(), T::one()));
    let mut results: HashMap<u64, Tensor<T>> = HashMap::new();

    for id in order.into_iter().rev() {
        let Some(g) = adjoints.remove(&id) else { continue };
        if wanted.contains(&id) {
            results.insert(id, g.clone());
        }
        let node = &nodes[&id];
        let ins = node.0.op.inputs();
        let needed: Vec<bool> = ins.iter().map(|i| relevant.contains(&i.id())).collect();
        if !needed.iter().any(|&n| n) {
            continue;
        }
        let contributions = backward(node, &g, &needed)?;
        for (input, contrib) in ins.into_iter().zip(contributions) {
            let Some(c) = contrib else { continue };
            if !relevant.contains(&input.id()) {
                continue;
            }
            let merged = match adjoints.remove(&input.id()) {
                Some(prev) => prev.add(&c)?,
                None => c,
            };
            adjoints.insert(input.id(), merged);
        }
    }

    Ok(inputs
        .iter()
        .map(|t| {
            results
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}
