use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::Op;
use super::{AutodiffError, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a node in the differentiation graph.
///
/// Ids are handed out in creation order, so a node's parents always carry
/// strictly smaller ids than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u64);

impl NodeId {
    fn fresh() -> Self {
        NodeId(NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// One recorded operation. Holds its inputs so the backward rule can be
/// replayed (and itself differentiated) later.
pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn parents(&self) -> &[Tensor] {
        &self.parents
    }
}

/// Dense row-major f64 array, optionally attached to a graph node.
///
/// A tensor without a node is a constant: it never receives gradient.
#[derive(Clone)]
pub struct Tensor {
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
    node: Option<Arc<Node>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    /// A differentiable leaf.
    pub fn var(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Self::constant(shape, data)?;
        t.node = Some(Arc::new(Node {
            id: NodeId::fresh(),
            op: Op::Leaf,
            parents: Vec::new(),
        }));
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![1.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape: shape.into(),
            data: data.into(),
            node: None,
        }
    }

    /// Builds an op output, recording a node only when some input is on a graph.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Self {
        let mut out = Self::raw(shape, data);
        if parents.iter().any(|p| p.node.is_some()) {
            out.node = Some(Arc::new(Node {
                id: NodeId::fresh(),
                op,
                parents,
            }));
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape.to_vec(),
            });
        }
        Ok(self.data[0])
    }

    pub fn node(&self) -> Option<&Arc<Node>> {
        self.node.as_ref()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Same values as a fresh leaf, cut from any previous graph.
    pub fn to_var(&self) -> Tensor {
        let mut t = self.detach();
        t.node = Some(Arc::new(Node {
            id: NodeId::fresh(),
            op: Op::Leaf,
            parents: Vec::new(),
        }));
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for the current shape.
    pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("node", &self.node.as_ref().map(|n| (n.id.0, n.op.name())))
            .finish()
    }
}
