//! Minimal reverse-mode automatic differentiation over rank-4 tensors.
//!
//! Values are laid out row-major in `(N, C, H, W)` order. A [`Tape`] records
//! every operation executed during a forward pass; [`Tape::backward`] replays
//! it in reverse and returns the [`Gradients`] of every leaf that asked for
//! one. The tape is rebuilt for every forward pass.
//!
//! The engine is generic over the scalar type so the same kernels can be
//! exercised in `f64` when checking gradients numerically. Models use `f32`.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use gradcheck::finite_diff_grad;
pub use optim::{sgd_step, Parameter, Sgd};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("data length {found} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        found: usize,
    },
    #[error("shape {0} has a zero dimension")]
    ZeroDimension(Shape),
    #[error("{op}: spatial size {h}x{w} must be even")]
    OddSpatial { op: &'static str, h: usize, w: usize },
    #[error("conv2d: kernel {kernel} with padding {padding} does not fit input {h}x{w}")]
    KernelTooLarge {
        kernel: usize,
        padding: usize,
        h: usize,
        w: usize,
    },
    #[error("conv2d: (size + 2*padding - kernel) = {span} is not divisible by stride {stride}")]
    StrideMismatch { span: usize, stride: usize },
    #[error("conv2d: stride must be positive")]
    ZeroStride,
    #[error("backward requires a scalar (1,1,1,1) output, got {0}")]
    NotScalar(Shape),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar type the engine computes in.
pub trait Real:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + AddAssign + 'static
{
    /// `c <- a·b + beta·c` with `a` of size `m×k` and `b` of size `k×n`,
    /// each addressed through explicit (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches lies inside the spans
                // checked above, and `c` does not alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Extent of a rank-4 tensor, `(batch, channel, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(H, W)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    fn validate(self) -> Result<Self> {
        if self.numel() == 0 {
            Err(TensorError::ZeroDimension(self))
        } else {
            Ok(self)
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

/// Dense rank-4 array with an optional gradient of identical shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into().validate()?;
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Build from a function of the `(n, c, h, w)` coordinate.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Build from a slice of `f64`, converting to the engine scalar.
    pub fn from_f64(shape: impl Into<Shape>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape,
                expected: self.data.len(),
                found: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into().validate()?;
        if shape.numel() != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.numel(),
                found: self.data.len(),
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return Err(TensorError::ShapeMismatch {
                op: "narrow_channels",
                dim: "channel",
                expected: self.shape.c,
                found: start + len,
            });
        }
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.n * len * plane);
        for n in 0..self.shape.n {
            let base = (n * self.shape.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new((self.shape.n, len, self.shape.h, self.shape.w), data)
    }

    /// Sample `n` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stack same-shaped tensors along the batch dimension.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::ShapeMismatch {
            op: "stack",
            dim: "batch",
            expected: 1,
            found: 0,
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            for (dim, a, b) in [("channel", s.c, t.shape.c), ("height", s.h, t.shape.h), ("width", s.w, t.shape.w)] {
                if a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack",
                        dim,
                        expected: a,
                        found: b,
                    });
                }
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new((n, s.c, s.h, s.w), data)
    }

    /// Convert to another scalar type (drops any gradient).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}
