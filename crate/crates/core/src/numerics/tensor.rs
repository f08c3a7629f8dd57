use super::{dot, Scalar};
use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                lhs: shape,
                rhs: vec![data.len()],
                context: "tensor shape vs data length",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&ix, &ext) in index.iter().zip(&self.shape) {
            if ix >= ext {
                return None;
            }
            off = off * ext + ix;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let o = self
            .offset(index)
            .ok_or_else(|| Error::OutOfRange(format!("{index:?} in {:?}", self.shape)))?;
        self.data[o] = value;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64c(x.to_f64c())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
                context: "max_abs_diff",
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Matrix product over the trailing two axes, batched over the leading axes.
///
/// A 2-D right-hand side is broadcast across the batch of the left-hand side.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
        context: "matmul",
    };
    if a.shape.len() < 2 || b.shape.len() < 2 {
        return Err(mismatch());
    }
    let (ar, ac) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
    let (br, bc) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
    if ac != br {
        return Err(mismatch());
    }
    let a_batch = &a.shape[..a.shape.len() - 2];
    let b_batch = &b.shape[..b.shape.len() - 2];
    let broadcast_b = b_batch.is_empty();
    if !broadcast_b && a_batch != b_batch {
        return Err(mismatch());
    }
    let batches: usize = a_batch.iter().product();
    let mut out = vec![T::zero(); batches * ar * bc];
    let mut col = vec![T::zero(); br];
    for batch in 0..batches {
        let am = &a.data[batch * ar * ac..(batch + 1) * ar * ac];
        let bm = if broadcast_b {
            &b.data[..]
        } else {
            &b.data[batch * br * bc..(batch + 1) * br * bc]
        };
        let om = &mut out[batch * ar * bc..(batch + 1) * ar * bc];
        for j in 0..bc {
            for (k, c) in col.iter_mut().enumerate() {
                *c = bm[k * bc + j];
            }
            for i in 0..ar {
                om[i * bc + j] = dot(&am[i * ac..(i + 1) * ac], &col);
            }
        }
    }
    let mut shape = a_batch.to_vec();
    shape.push(ar);
    shape.push(bc);
    Tensor::new(shape, out)
}

/// Softmax over the trailing axis restricted to allowed entries.
///
/// Disallowed entries get exactly zero weight. A row without any allowed entry
/// is an error naming the row index.
pub fn softmax_masked<T: Scalar>(logits: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    if allowed.len() != logits.len() || logits.shape.is_empty() {
        return Err(Error::ShapeMismatch {
            lhs: logits.shape.clone(),
            rhs: vec![allowed.len()],
            context: "softmax_masked mask length",
        });
    }
    let width = *logits.shape.last().unwrap();
    let mut out = vec![T::zero(); logits.len()];
    if width == 0 {
        return Tensor::new(logits.shape.clone(), out);
    }
    for (row, ((lrow, mrow), orow)) in logits
        .data
        .chunks(width)
        .zip(allowed.chunks(width))
        .zip(out.chunks_mut(width))
        .enumerate()
    {
        let mut max = T::neg_infinity();
        let mut any = false;
        for (l, &m) in lrow.iter().zip(mrow) {
            if m {
                any = true;
                max = max.max(*l);
            }
        }
        if !any {
            return Err(Error::EmptyMaskRow { row });
        }
        let mut sum = T::zero();
        for ((o, l), &m) in orow.iter_mut().zip(lrow).zip(mrow) {
            if m {
                *o = (*l - max).exp();
                sum += *o;
            }
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::new(logits.shape.clone(), out)
}
