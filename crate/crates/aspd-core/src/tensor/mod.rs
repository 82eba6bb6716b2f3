//! Dense `f64` tensors with a recording tape for reverse-mode gradients.
//!
//! The engine is deliberately small: row-major tensors, a fixed op set,
//! define-by-run tapes that are rebuilt every forward pass, and an Adam
//! optimizer. No broadcasting beyond what the ops themselves define.

mod adam;
mod gemm;
mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use tape::{Activation, Gradients, Reduce, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// A dense row-major array of `f64` values.
///
/// Tensors are immutable once built. Cloning is cheap (shared storage).
/// A tensor optionally carries a handle to the tape node that produced it;
/// plain tensors act as constants when fed into tape operations.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the data length
    /// and every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    /// n x 3 tensor from point rows.
    pub fn from_rows3(rows: &[[f64; 3]]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), 3], data)
    }

    /// Interprets a rank-2 tensor with 3 columns as point rows.
    pub fn to_rows3(&self) -> Result<Vec<[f64; 3]>> {
        if self.shape.len() != 2 || self.shape[1] != 3 {
            return Err(Error::Dimension(format!(
                "expected an n x 3 tensor, got {:?}",
                self.shape
            )));
        }
        Ok(self
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// The same values detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Rows for a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Columns for a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub(crate) fn storage(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced non-finite values")))
    }
}
