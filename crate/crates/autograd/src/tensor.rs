use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::backward::Op;
use crate::error::{invalid, Result, TensorError};
use crate::shape::numel;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A dense, row-major, immutable `f64` tensor that may be part of an
/// autodiff graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

pub(crate) struct Inner {
    pub id: usize,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Option<Op>,
}

impl Tensor {
    pub(crate) fn build(data: Arc<Vec<f64>>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = op.is_some();
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Result of an operation: records `op` only when some input tracks
    /// gradients.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, track: bool, op: impl FnOnce() -> Op) -> Tensor {
        let op = if track { Some(op()) } else { None };
        Tensor::build(Arc::new(data), shape, op)
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "from_vec",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor::build(Arc::new(data), shape.to_vec(), None))
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(data.to_vec(), shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Arc::new(vec![value]), vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(Arc::new(vec![value; numel(shape)]), shape.to_vec(), None)
    }

    /// A leaf that accumulates gradients during [`Tensor::backward`].
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(data, shape).map(|t| t.requiring_grad())
    }

    /// Shares storage with a shared buffer; used to bind parameters
    /// without copying.
    pub fn from_shared(data: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "from_shared",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            op: None,
        })))
    }

    /// A new leaf sharing this tensor's values, tracked for gradients.
    pub fn requiring_grad(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            op: None,
        }))
    }

    /// A constant sharing this tensor's values; gradients never flow
    /// through it.
    pub fn detach(&self) -> Tensor {
        Tensor::build(Arc::clone(&self.0.data), self.0.shape.clone(), None)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(invalid("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
