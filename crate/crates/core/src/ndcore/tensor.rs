use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndcore::graph::{Graph, NodeId};

/// Dense row-major tensor of f64 values.
///
/// A tensor is either a plain immutable value or a handle into an autodiff
/// [`Graph`]. Values are stored and accumulated in 64-bit floats; the on-disk
/// formats (checkpoints, embedding files) round to float32 at serialization
/// time only.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    pub(crate) repr: Repr,
}

#[derive(Clone)]
pub(crate) enum Repr {
    Value(Rc<Vec<f64>>),
    Node {
        graph: Graph,
        id: NodeId,
        epoch: u64,
    },
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::contract(format!(
            "tensor shape {shape:?} contains a zero dimension"
        )));
    }
    if numel(shape) != len {
        return Err(Error::contract(format!(
            "tensor shape {shape:?} implies {} elements but {len} were given",
            numel(shape)
        )));
    }
    Ok(())
}

impl Tensor {
    /// Build a value tensor, validating shape/length agreement and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        validate_shape(&shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "tensor construction from non-finite values".to_string(),
            ));
        }
        Ok(Tensor {
            shape,
            repr: Repr::Value(Rc::new(data)),
        })
    }

    /// Scalar value tensor with shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).expect("scalar is always a valid tensor")
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros of a positive shape")
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![1.0; n]).expect("ones of a positive shape")
    }

    pub(crate) fn from_node(graph: Graph, id: NodeId, shape: Vec<usize>, epoch: u64) -> Tensor {
        Tensor {
            shape,
            repr: Repr::Node { graph, id, epoch },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have positive dims by construction
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Copy the element values out of the tensor.
    ///
    /// Panics if this tensor refers to forward nodes of a graph that has been
    /// reset since the tensor was produced.
    pub fn values(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Value(data) => data.as_ref().clone(),
            Repr::Node { graph, id, epoch } => graph.node_values(*id, *epoch),
        }
    }

    /// Scalar extraction; panics on non-scalar tensors.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.values()[0]
    }

    /// True when the tensor participates in a graph and gradients reach it.
    pub fn requires_grad(&self) -> bool {
        match &self.repr {
            Repr::Value(_) => false,
            Repr::Node { graph, id, .. } => graph.node_requires_grad(*id),
        }
    }

    /// The graph this tensor belongs to, if any.
    pub fn graph(&self) -> Option<Graph> {
        match &self.repr {
            Repr::Value(_) => None,
            Repr::Node { graph, .. } => Some(graph.clone()),
        }
    }

    pub(crate) fn node_id(&self) -> Option<NodeId> {
        match &self.repr {
            Repr::Value(_) => None,
            Repr::Node { id, .. } => Some(*id),
        }
    }

    /// Detached value copy: same numbers, no graph handle.
    pub fn to_value(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            repr: Repr::Value(Rc::new(self.values())),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.repr {
            Repr::Value(_) => "value",
            Repr::Node { .. } => "node",
        };
        write!(f, "Tensor<{kind}>{:?}", self.shape)
    }
}
