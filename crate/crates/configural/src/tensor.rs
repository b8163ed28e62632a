//! Dense row-major tensors over `f32`/`f64` with a BLAS-style matmul kernel.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {data} does not match shape {shape:?}")]
    LengthMismatch { data: usize, shape: Vec<usize> },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar: Copy + PartialOrd + PartialEq + fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a·b + beta * c` for row-major contiguous matrices,
    /// `a` is m×k, `b` is k×n, `c` is m×n.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Strided variant; `rs*`/`cs*` are row/column strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                Self::gemm_strided(
                    m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
                )
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Index bounds are established by the callers (all internal);
                // the kernel itself needs raw pointers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// An n-dimensional value array, row-major and contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                data: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if self.data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                data: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as N×C×H×W, failing when the rank is not 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-4 tensor, got {:?}", self.shape),
            }),
        }
    }

    /// Interpret as rows×cols, failing when the rank is not 2.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got {:?}", self.shape),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn gemm_small_known_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_strides() {
        // a · bᵀ via strides: b stored row-major 2×3, used as 3×2.
        let a = [1.0f64, 2.0, 3.0]; // 1×3
        let b = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let mut c = [0.0f64; 2]; // 1×2
        f64::gemm_strided(1, 3, 2, 1.0, &a, 3, 1, &b, 1, 3, 0.0, &mut c, 2, 1);
        assert_eq!(c, [14.0, 32.0]);
    }
}
