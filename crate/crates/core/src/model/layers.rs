//! Elementwise activations, parameter-free layer norm and the sigma embedding.

use crate::numerics::Scalar;

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// `dL/dx` of `silu` at pre-activations `pre`, given `dL/dy`.
pub fn silu_backward<T: Scalar>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter()
        .zip(dy)
        .map(|(&x, &g)| {
            let s = T::one() / (T::one() + (-x).exp());
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect()
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise normalization without affine parameters. Returns the normalized
/// rows and each row's reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(x: &[T], width: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_w = T::one() / T::from_f64c(width as f64);
    let eps = T::from_f64c(LN_EPS);
    for row in x.chunks_exact(width) {
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let r = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (out, rstd)
}

pub fn layer_norm_backward<T: Scalar>(xhat: &[T], rstd: &[T], dy: &[T], width: usize) -> Vec<T> {
    let inv_w = T::one() / T::from_f64c(width as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for ((xr, gr), &r) in xhat.chunks_exact(width).zip(dy.chunks_exact(width)).zip(rstd) {
        let mg = gr.iter().copied().sum::<T>() * inv_w;
        let mgx = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
        dx.extend(xr.iter().zip(gr).map(|(&a, &g)| r * (g - mg - a * mgx)));
    }
    dx
}

/// Sinusoidal features of `sigma * 1000`, cosines then sines.
pub fn sigma_embedding<T: Scalar>(sigma: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let freq = |i: usize| (-(10_000f64).ln() * i as f64 / half as f64).exp();
    (0..half)
        .map(|i| T::from_f64c((t * freq(i)).cos()))
        .chain((0..half).map(|i| T::from_f64c((t * freq(i)).sin())))
        .collect()
}
