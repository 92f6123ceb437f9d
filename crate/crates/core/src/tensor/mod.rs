//! Dense row-major tensors and the reverse-mode tape built on top of them.
//!
//! [`Tensor`] is a plain value: a shape plus a flat buffer. All differentiable
//! arithmetic goes through [`Tape`] and its [`Var`] handles; the free functions
//! in [`kernels`] are the shared forward/backward numerics.

pub mod kernels;
mod tape;

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{contract, shape_err, Result};

pub use tape::{concat, Gradients, Op, Tape, Var};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    /// `eˣ − 1` for the ELU branch. `f32` trades the last ulps near zero for
    /// speed; `f64` stays exact for gradient checks.
    fn elu_exp_m1(self) -> Self;

    /// `c += a · b` for row-major `m×k` and `k×p` operands given by
    /// `(row stride, column stride)` pairs, so transposes cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, p: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]);
}

/// Checks that every index a strided `rows×cols` view touches is in bounds.
fn view_fits(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

macro_rules! real_gemm {
    ($t:ty, $f:path) => {
        fn gemm(m: usize, k: usize, p: usize, a: &[$t], sa: (usize, usize), b: &[$t], sb: (usize, usize), c: &mut [$t]) {
            assert!(view_fits(a.len(), m, k, sa) && view_fits(b.len(), k, p, sb) && c.len() >= m * p);
            if m == 0 || p == 0 {
                return;
            }
            // SAFETY: the asserts above keep every strided access in bounds,
            // and `c` is exclusively borrowed.
            unsafe {
                $f(
                    m, k, p, 1.0,
                    a.as_ptr(), sa.0 as isize, sa.1 as isize,
                    b.as_ptr(), sb.0 as isize, sb.1 as isize,
                    1.0, c.as_mut_ptr(), p as isize, 1,
                )
            }
        }
    };
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn elu_exp_m1(self) -> Self {
        self.exp() - 1.0
    }

    real_gemm!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    #[inline]
    fn elu_exp_m1(self) -> Self {
        self.exp_m1()
    }

    real_gemm!(f64, matrixmultiply::dgemm);
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from a buffer the caller guarantees matches `shape`.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_raw(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_raw(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Element at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&k, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(k < d, "index {k} out of bounds for axis {i} of size {d}");
            off = off * d + k;
        }
        self.data[off]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.rank() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m || d.is_nan() {
                    d
                } else {
                    m
                }
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        kernels::matmul(self, other)
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2);
        kernels::permute(self, &[1, 0])
    }

    /// Rows of a rank-2 (or higher, along axis 0) tensor picked by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        kernels::index_select(self, idx)
    }
}
