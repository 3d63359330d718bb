use std::collections::{HashMap, HashSet};

use super::{no_grad, enable_grad, Tensor};
use crate::error::{Error, Result};

/// Gradients of a one-element `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the adjoint computation is itself recorded, so the
/// returned tensors can be differentiated again. Tensors in `wrt` that the
/// output does not depend on receive zeros of their own shape.
pub fn gradient(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NonScalar(output.shape().to_vec()));
    }
    let _mode = if create_graph { enable_grad() } else { no_grad() };

    let targets: HashSet<u64> = wrt.iter().map(Tensor::id).collect();
    let (order, relevant) = relevant_postorder(output, &targets);

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if relevant.contains(&output.id()) {
        grads.insert(output.id(), Tensor::ones(output.shape()));
    }
    let needed = |t: &Tensor| relevant.contains(&t.id());

    for node in order.iter().rev() {
        let g = if targets.contains(&node.id()) {
            match grads.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue,
            }
        } else {
            match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            }
        };
        let Some(op) = node.op() else { continue };
        for (parent, pg) in op.backward(node, &g, &needed)? {
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect())
}

/// Post-order (parents first) of every node between `output` and a target,
/// plus the set of those nodes. Only edges into tensors that require
/// gradients, or are themselves targets, are followed.
fn relevant_postorder(output: &Tensor, targets: &HashSet<u64>) -> (Vec<Tensor>, HashSet<u64>) {
    let mut entered: HashSet<u64> = HashSet::new();
    let mut relevant: HashSet<u64> = HashSet::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];

    let follow = |t: &Tensor| t.requires_grad_flag() || targets.contains(&t.id());

    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            let reaches = targets.contains(&node.id())
                || node
                    .op()
                    .is_some_and(|op| op.parents().iter().any(|p| relevant.contains(&p.id())));
            if reaches {
                relevant.insert(node.id());
                order.push(node);
            }
            continue;
        }
        if !entered.insert(node.id()) {
            continue;
        }
        let parents: Vec<Tensor> = node
            .op()
            .map(|op| {
                op.parents()
                    .into_iter()
                    .filter(|p| follow(p) && !entered.contains(&p.id()))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        stack.push((node, true));
        // Reverse so parents are visited in declaration order.
        for p in parents.into_iter().rev() {
            stack.push((p, false));
        }
    }
    (order, relevant)
}
