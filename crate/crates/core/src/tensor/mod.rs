//! Dense tensors, the recording tape, and finite-difference gradient checks.
//!
//! Image features use the `batch × channels × height × width` layout with
//! row-major storage. Values are generic over [`Real`] so the same graph can
//! run at 32-bit for training and at 64-bit for gradient verification.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt;

use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputCheck};
pub use kernels::{conv_output_extent, conv_transpose_output_extent, pool_output_extent};
pub use tape::{Activation, BatchNormMode, ConvParams, RunningStats, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("extent of zero in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: expected a rank-{expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: {dim} mismatch ({left} vs {right})")]
    Mismatch {
        op: &'static str,
        dim: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: computed output {dim} extent is {extent}, must be at least 1")]
    EmptyOutput {
        op: &'static str,
        dim: &'static str,
        extent: i64,
    },
    #[error("concat: part {index} has shape {actual:?}, expected batch/spatial extents {expected:?}")]
    ConcatMismatch {
        index: usize,
        expected: [usize; 3],
        actual: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tensor is detached from every gradient-requiring leaf")]
    Detached,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Real: Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    /// `c = beta * c + a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
    /// `trans_a`/`trans_b` read the stored matrix transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // stored matrix is rows×cols when not transposed, cols×rows otherwise
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: the slice lengths cover every index addressed by
                // the given dimensions and strides (asserted above).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array with a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(batch, channels, height, width)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op: "dims4",
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch item `index` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return Err(TensorError::InvalidArgument {
                op: "batch_item",
                msg: format!("index {index} out of range for batch {n}"),
            });
        }
        let per = c * h * w;
        Self::new(vec![1, c, h, w], self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stack `(1, C, H, W)` or `(C, H, W)` tensors into one batch.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::InvalidArgument {
            op: "stack",
            msg: "no tensors to stack".into(),
        })?;
        let inner: Vec<usize> = match first.shape.len() {
            4 if first.shape[0] == 1 => first.shape[1..].to_vec(),
            3 => first.shape.clone(),
            _ => {
                return Err(TensorError::Rank {
                    op: "stack",
                    expected: 3,
                    actual: first.shape.clone(),
                })
            }
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.numel() != first.numel() || !t.shape.ends_with(&inner) {
                return Err(TensorError::Mismatch {
                    op: "stack",
                    dim: "item shape",
                    left: first.numel(),
                    right: t.numel(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }
}
