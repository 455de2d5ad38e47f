//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every operation on a tensor that is attached to the graph records a
//! [`Node`] holding its inputs. [`grad`] walks the graph from a scalar root;
//! with `create_graph` set the backward pass is built from the same recorded
//! primitives, so the resulting gradients can be differentiated again. That
//! is what lets an outer loss see through a sequence of gradient steps.

mod backward;
pub mod functional;
mod gradcheck;
mod ops;
mod tensor;

use thiserror::Error;

pub use backward::{grad, GradMap};
pub use functional::{primitive_forward, Conv1dAttrs, PrimitiveOp};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, GradCheckRow};
pub use ops::{Conv1dGeom, Conv2dGeom};
pub use tensor::{Node, NodeId, Tensor};

use crate::params::ParamSet;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Gradients of `root` for every tensor in `wrt`, keyed by parameter name.
pub fn backward(root: &Tensor, wrt: &ParamSet, retain: bool) -> Result<GradMap> {
    let tensors = wrt.tensors();
    let grads = grad(root, &tensors, retain)?;
    let mut map = GradMap::new();
    for (entry, g) in wrt.iter().zip(grads) {
        map.insert(entry.name.clone(), g);
    }
    Ok(map)
}

/// Parents strictly precede children in creation order, for every node
/// reachable from `root`.
pub fn graph_is_acyclic(root: &Tensor) -> bool {
    let Some(node) = root.node() else { return true };
    backward::topo_order(node).iter().all(|n| {
        n.parents()
            .iter()
            .filter_map(Tensor::id)
            .all(|pid| pid < n.id())
    })
}
