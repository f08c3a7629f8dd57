use super::{axpy, dot, RngStream, Scalar};
use serde::{Deserialize, Serialize};

/// Affine map `y = x W + b` over row-major batches, with `W` stored as
/// `input x output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            weight: vec![T::zero(); input * output],
            bias: vec![T::zero(); output],
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(input)`, zero bias.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut RngStream) -> Self {
        let mut l = Self::zeros(input, output);
        rng.fill_normal(&mut l.weight, gain / (input.max(1) as f64).sqrt());
        l
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len() % self.input.max(1), 0);
        let rows = if self.input == 0 { 0 } else { x.len() / self.input };
        let mut y = Vec::with_capacity(rows * self.output);
        for row in x.chunks_exact(self.input) {
            let start = y.len();
            y.extend_from_slice(&self.bias);
            let yr = &mut y[start..];
            for (k, &xk) in row.iter().enumerate() {
                if xk != T::zero() {
                    axpy(xk, &self.weight[k * self.output..(k + 1) * self.output], yr);
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        self.accumulate_grad(x, dy, grad);
        self.input_grad(dy)
    }

    pub fn accumulate_grad(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) {
        for (xr, dyr) in x.chunks_exact(self.input).zip(dy.chunks_exact(self.output)) {
            for (b, d) in grad.bias.iter_mut().zip(dyr) {
                *b += *d;
            }
            for (k, &xk) in xr.iter().enumerate() {
                if xk != T::zero() {
                    axpy(xk, dyr, &mut grad.weight[k * self.output..(k + 1) * self.output]);
                }
            }
        }
    }

    pub fn input_grad(&self, dy: &[T]) -> Vec<T> {
        let rows = dy.len() / self.output.max(1);
        let mut dx = vec![T::zero(); rows * self.input];
        for (dyr, dxr) in dy.chunks_exact(self.output).zip(dx.chunks_exact_mut(self.input)) {
            for (k, d) in dxr.iter_mut().enumerate() {
                *d = dot(dyr, &self.weight[k * self.output..(k + 1) * self.output]);
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            input: self.input,
            output: self.output,
            weight: self.weight.iter().map(|x| U::from_f64c(x.to_f64c())).collect(),
            bias: self.bias.iter().map(|x| U::from_f64c(x.to_f64c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_manual() {
        let l = Linear {
            input: 2,
            output: 3,
            weight: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            bias: vec![0.5, 0.0, -0.5],
        };
        let y = l.forward(&[1.0f64, -1.0]);
        assert_eq!(y, vec![-2.5, -3.0, -3.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(8);
        let l = Linear::<f64>::init(3, 2, 1.0, &mut rng);
        let x: Vec<f64> = rng.normal_vec(6, 1.0);
        let dy: Vec<f64> = rng.normal_vec(4, 1.0);
        let mut g = Linear::zeros(3, 2);
        let dx = l.backward(&x, &dy, &mut g);
        let f = |l: &Linear<f64>, x: &[f64]| dot(&l.forward(x), &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            assert!(((f(&l, &xp) - f(&l, &xm)) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
        for i in 0..l.weight.len() {
            let (mut lp, mut lm) = (l.clone(), l.clone());
            lp.weight[i] += h;
            lm.weight[i] -= h;
            assert!(((f(&lp, &x) - f(&lm, &x)) / (2.0 * h) - g.weight[i]).abs() < 1e-6);
        }
    }
}
