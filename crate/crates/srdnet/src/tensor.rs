//! Dense f64 tensor with row-major flat storage.
//!
//! Tensors are immutable after creation; cloning shares the data buffer.
//! A tensor produced by a tape operation carries a reference to its node so
//! later operations on the same tape connect to it. Fed to a *different*
//! tape it re-enters as a constant leaf.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, SrdError};
use crate::rng::Rng;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Location of a tensor on a specific tape instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub epoch: u64,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    id: u64,
    requires_grad: bool,
    pub(crate) node: Option<TapeRef>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(SrdError::shape("rank-0 shapes are expressed as [1]"));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(SrdError::shape(format!("zero dimension in {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| SrdError::shape(format!("dimension overflow in {shape:?}")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(SrdError::shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            id: fresh_id(),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Tensor::from_vec(vec![0.0; n], shape)
    }

    pub fn constant(c: f64, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Tensor::from_vec(vec![c; n], shape)
    }

    /// Uniform fill in [lo, hi), consuming the rng deterministically in
    /// row-major order.
    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::from_vec(data, shape)
    }

    /// Kaiming-style uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        if fan_in == 0 {
            return Err(SrdError::config("kaiming fan_in must be positive"));
        }
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::uniform(rng, shape, -bound, bound)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar shape is valid")
    }

    /// Mark as a learnable leaf; backward() collects its gradient.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    /// Constant copy: drops tape linkage and gradient tracking, shares data.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            id: fresh_id(),
            requires_grad: false,
            node: None,
        }
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, node: TapeRef) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            id: fresh_id(),
            requires_grad: false,
            node: Some(node),
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero dims are rejected at construction
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise bitwise equality (shape and data).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_shape_and_fill() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::constant(1.0, &[4]).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::zeros(&[2, 0]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
    }

    #[test]
    fn uniform_is_deterministic() {
        let a = Tensor::uniform(&mut Rng::new(7), &[2, 2], 0.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut Rng::new(7), &[2, 2], 0.0, 1.0).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn kaiming_bound() {
        let fan_in = 9 * 16;
        let t = Tensor::kaiming(&mut Rng::new(1), &[32, 16, 3, 3], fan_in).unwrap();
        let bound = (6.0 / fan_in as f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn detach_shares_data_new_identity() {
        let t = Tensor::constant(2.0, &[3]).unwrap().with_grad();
        let d = t.detach();
        assert_eq!(d.data(), t.data());
        assert!(!d.requires_grad());
        assert_ne!(d.id(), t.id());
    }
}
