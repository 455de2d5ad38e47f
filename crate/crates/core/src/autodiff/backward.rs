use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::tensor::{Node, NodeId, Tensor};
use super::{AutodiffError, Result};

/// Gradients keyed by parameter name. A missing entry is an exact zero.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = grad,
            None => self.entries.push((name, grad)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Gradient for `name`, materializing zeros of `shape` when absent.
    pub fn get_or_zeros(&self, name: &str, shape: &[usize]) -> Tensor {
        self.get(name).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Euclidean norm over every stored gradient.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Post-order (parents first) list of every node reachable from `root`.
pub(crate) fn topo_order(root: &Arc<Node>) -> Vec<Arc<Node>> {
    let mut order = Vec::new();
    let mut visited: HashSet<NodeId> = HashSet::new();
    let mut stack: Vec<(Arc<Node>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.parents {
            if let Some(pn) = p.node() {
                if !visited.contains(&pn.id) {
                    stack.push((pn.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode gradients of the scalar `root` with respect to each tensor
/// in `wrt` (leaves or intermediate results).
///
/// With `create_graph` set the returned gradients are recorded on the graph
/// and can be differentiated again; otherwise they are constants. Entries of
/// `wrt` that `root` does not depend on get exact zeros.
pub fn grad(root: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if root.numel() != 1 {
        return Err(AutodiffError::NotScalar {
            shape: root.shape().to_vec(),
        });
    }
    let zeros = || wrt.iter().map(|w| Tensor::zeros(w.shape())).collect();
    let Some(root_node) = root.node() else {
        return Ok(zeros());
    };
    let targets: HashSet<NodeId> = wrt.iter().filter_map(|w| w.id()).collect();
    if targets.is_empty() {
        return Ok(zeros());
    }

    let order = topo_order(root_node);
    // A node matters only if some target sits at or above it.
    let mut needed: HashSet<NodeId> = HashSet::new();
    for node in &order {
        let hit = targets.contains(&node.id)
            || node
                .parents
                .iter()
                .any(|p| p.id().is_some_and(|id| needed.contains(&id)));
        if hit {
            needed.insert(node.id);
        }
    }

    let mut grads: HashMap<NodeId, Tensor> = HashMap::new();
    grads.insert(root_node.id, Tensor::ones(root.shape()));
    for node in order.iter().rev() {
        if !needed.contains(&node.id) || node.parents.is_empty() {
            continue;
        }
        let Some(g) = grads.get(&node.id).cloned() else {
            continue;
        };
        let g = if create_graph { g } else { g.detach() };
        let parents: Vec<Tensor> = if create_graph {
            node.parents.clone()
        } else {
            node.parents.iter().map(Tensor::detach).collect()
        };
        let out_shape = g.shape().to_vec();
        let need: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.id().is_some_and(|id| needed.contains(&id)))
            .collect();
        let parent_grads = node.op.backward(&g, &parents, &out_shape, &need)?;
        for (p, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pid) = p.id() else { continue };
            if !needed.contains(&pid) {
                continue;
            }
            let acc = match grads.remove(&pid) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(pid, acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            w.id()
                .and_then(|id| grads.get(&id).cloned())
                .unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect())
}
