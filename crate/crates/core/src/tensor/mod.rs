//! Dense `f64` arrays with define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Tape`]: every operation appends a node holding its output value and
//! a backward rule, and [`Tape::backward`] replays the nodes in reverse.
//! A fresh tape is built for every forward pass.
//!
//! # Broadcasting
//!
//! Binary operations broadcast their *second* operand only. Shapes are
//! aligned at the trailing axes; every axis of `b` must either equal the
//! matching axis of `a` or be 1, and missing leading axes of `b` count as 1.
//! The result always has the shape of `a`, and the gradient of `b` is summed
//! over the broadcast axes.

mod adam;
mod ops;
mod rng;
pub(crate) mod tape;

pub use adam::{AdamConfig, AdamState, Moments};
pub use rng::{normal_sample, Rng};
pub use tape::{Gradients, Tape, UnaryKind, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each axis of `target`, the stride into a tensor of shape `src` under
/// the trailing-axes broadcast rule, or `None` if `src` does not broadcast.
pub(crate) fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let offset = target.len() - src.len();
    let mut strides = vec![0; target.len()];
    let mut stride = 1;
    for k in (0..src.len()).rev() {
        let (s, t) = (src[k], target[k + offset]);
        if s == t {
            strides[k + offset] = if s == 1 { 0 } else { stride };
        } else if s != 1 {
            return None;
        }
        stride *= s;
    }
    Some(strides)
}

/// Visits `(target_index, src_index)` pairs for a broadcast.
pub(crate) fn for_each_broadcast(
    src: &[usize],
    target: &[usize],
    strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n: usize = target.iter().product();
    let src_len: usize = src.iter().product();
    // Fast path: src is exactly a suffix of target.
    let suffix = target.len() >= src.len()
        && src.iter().zip(&target[target.len() - src.len()..]).all(|(a, b)| a == b);
    if suffix {
        for i in 0..n {
            f(i, i % src_len);
        }
        return;
    }
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    let mut src_pos = 0usize;
    for i in 0..n {
        f(i, src_pos);
        for k in (0..rank).rev() {
            idx[k] += 1;
            src_pos += strides[k];
            if idx[k] < target[k] {
                break;
            }
            src_pos -= strides[k] * target[k];
            idx[k] = 0;
        }
    }
}
