//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Parameters live in a [`ParamStore`]; every forward pass records its
//! operations on a fresh [`Graph`] that borrows the store, and
//! [`Graph::backward`] accumulates parameter gradients into a [`GradStore`].
//! Everything is generic over [`Scalar`] so the same model code runs in
//! 32-bit for training and in 64-bit for finite-difference checks.

#[cfg(test)]
mod gradcheck_tests;
mod graph;

pub use graph::{Graph, Var};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type usable by the engine.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k > 0 {
                    let last_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                    let last_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                    assert!((last_a as usize) < a.len() && (last_b as usize) < b.len());
                }
                // SAFETY: bounds of every strided access were checked above and
                // `c` is a distinct, exclusively borrowed m*n row-major buffer.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A dense tensor. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: true,
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: true,
        }
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::lit(normal.sample(rng))).collect();
        Self {
            shape,
            data,
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.to_f64().expect("finite"))).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors. Insertion order is the
/// canonical parameter order (used by checkpoints and optimizers).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: Vec<Tensor<F>>,
    names: Vec<String>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; allocated on first use.
#[derive(Debug, Clone, Default)]
pub struct GradStore<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub(crate) fn slot(&mut self, id: ParamId, numel: usize) -> &mut [F] {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| vec![F::zero(); numel])
    }

    /// Global L2 norm over all allocated gradients.
    pub fn norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }

    /// Adds `other` element-wise, allocating slots as needed.
    pub fn accumulate(&mut self, other: &GradStore<F>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => m.iter_mut().zip(theirs).for_each(|(a, &b)| *a = *a + b),
                None => *mine = Some(theirs.clone()),
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
}
