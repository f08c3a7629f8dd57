//! Deterministic array substrate shared by every other module.

mod dump;
mod linear;
mod rng;
mod tensor;

pub use dump::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, DumpHeader};
pub use linear::Linear;
pub use rng::RngStream;
pub use tensor::{matmul, softmax_masked, Tensor};

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type. Compute paths run in `f32`; geometry and
/// gradient checks use `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn from_f64c(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Shorthand for converting literals into a generic scalar.
#[inline]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64c(x)
}

/// Dot product with a fixed left-to-right accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Sum of values in a canonical (sorted) order, so the result does not depend
/// on the order the values were produced in.
pub fn sorted_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = T::zero();
    for v in values.iter() {
        acc += *v;
    }
    acc
}
