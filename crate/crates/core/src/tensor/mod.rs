//! Dense row-major tensors over `f32` or `f64`, plus the recorded-graph
//! autodiff in [`tape`] and parameter storage in [`param`].

mod param;
mod tape;

pub use param::{LrGroup, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Scalar type the whole model is generic over. 32-bit is the deployment
/// arithmetic; 64-bit exists for tight gradient and equivalence oracles.
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const BITS: u32;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const BITS: u32 = 32;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. `data.len()` always equals the shape product.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::format(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation (Box-Muller in f64).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(T::from_f64(z * std));
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flat offset of a 2-D index; the tensor must be rank 2.
    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn idx3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, value: T) {
        for v in self.data.iter_mut() {
            *v = value;
        }
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .cloned()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Sum accumulated in f64 independent of the storage width.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

/// C[M,N] += A[M,K] * B[K,N]
pub(crate) fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[M,N] += A[M,K] * B[N,K]^T
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// C[K,N] += A[M,K]^T * B[M,N]
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}
