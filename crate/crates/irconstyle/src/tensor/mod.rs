//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! The operator set is exactly what the rest of the framework needs: conv,
//! pixel shuffle, linear, a few elementwise ops and reductions. Values are
//! immutable after construction; the graph is rebuilt every forward pass and
//! `backward` walks it once in reverse topological order.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::grad_check;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Element type of the engine. Training runs in `f32`; gradient checks run
/// in `f64` because central differences are unreliable in single precision.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// The recorded operation that produced a tensor. `Leaf` tensors carry no
/// history; everything else holds handles to its inputs so backward can walk
/// the graph.
#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    MatMul(Tensor<T>, Tensor<T>),
    Linear {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
    },
    Gram(Tensor<T>),
    RowDot(Tensor<T>, Tensor<T>),
    Dot(Tensor<T>, Tensor<T>),
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    PixelShuffle(Tensor<T>, usize),
    PixelUnshuffle(Tensor<T>, usize),
    GlobalAvgPool(Tensor<T>),
    Concat(Vec<Tensor<T>>, usize),
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    SumAxis1(Tensor<T>),
    L1Loss(Tensor<T>, Tensor<T>),
    MseLoss(Tensor<T>, Tensor<T>),
    FrobeniusNorm(Tensor<T>),
    NormalizeRows(Tensor<T>),
    Reshape(Tensor<T>),
    BroadcastSpatial(Tensor<T>),
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    variable: bool,
    /// true when a variable is reachable through this tensor's history
    tracked: bool,
    grad: Mutex<Option<Vec<T>>>,
}

/// An immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("variable", &self.inner.variable)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, op: Op<T>, variable: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let tracked = variable
            || match &op {
                Op::Leaf => false,
                _ => op_inputs(&op).iter().any(|t| t.tracked()),
            };
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                op,
                variable,
                tracked,
                grad: Mutex::new(None),
            }),
        })
    }

    /// Result of an op: checks that finite inputs produced finite values.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "operation produced non-finite value {v}"
            )));
        }
        Self::build(shape, data, op, false)
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, Op::Leaf, false)
    }

    /// A leaf that participates in gradient accumulation.
    pub fn var(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, Op::Leaf, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], Op::Leaf, false).unwrap()
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![v; n], Op::Leaf, false).unwrap()
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], Op::Leaf, false).unwrap()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn is_variable(&self) -> bool {
        self.inner.variable
    }

    pub(crate) fn tracked(&self) -> bool {
        self.inner.tracked
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient, if any. Only variables hold gradients.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut lock = self.inner.grad.lock().unwrap();
        match lock.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += *v;
                }
            }
            None => *lock = Some(g.to_vec()),
        }
    }

    /// Same values, fresh leaf, no gradient history.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.shape().to_vec(), self.data().to_vec(), Op::Leaf, false).unwrap()
    }
}

pub(crate) fn op_inputs<T: Scalar>(op: &Op<T>) -> Vec<Tensor<T>> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::RowDot(a, b)
        | Op::Dot(a, b)
        | Op::L1Loss(a, b)
        | Op::MseLoss(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::LeakyRelu(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Gram(a)
        | Op::PixelShuffle(a, _)
        | Op::PixelUnshuffle(a, _)
        | Op::GlobalAvgPool(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumAxis1(a)
        | Op::FrobeniusNorm(a)
        | Op::NormalizeRows(a)
        | Op::Reshape(a)
        | Op::BroadcastSpatial(a) => vec![a.clone()],
        Op::Linear { x, w, b } => {
            let mut v = vec![x.clone(), w.clone()];
            if let Some(b) = b {
                v.push(b.clone());
            }
            v
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![input.clone(), weight.clone()];
            if let Some(b) = bias {
                v.push(b.clone());
            }
            v
        }
        Op::Concat(xs, _) => xs.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_count_must_agree() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn detach_drops_history_and_grad() {
        let v = Tensor::<f32>::var(&[2], vec![1.0, 2.0]).unwrap();
        let d = v.detach();
        assert!(!d.is_variable());
        assert_eq!(d.data(), v.data());
    }

    #[test]
    fn grad_accumulates_until_cleared() {
        let v = Tensor::<f64>::var(&[2], vec![1.0, 2.0]).unwrap();
        v.accumulate_grad(&[1.0, 1.0]);
        v.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(v.grad().unwrap(), vec![1.5, 1.5]);
        v.clear_grad();
        assert!(v.grad().is_none());
    }
}
