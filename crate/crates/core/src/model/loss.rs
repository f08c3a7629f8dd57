//! Flow-matching objective with diffusion-forcing noise levels.

use super::config::AttentionMode;
use super::forward::{ChunkInput, ForwardOptions, ToyModel};
use super::params::ModelParams;
use crate::error::{invalid, Error, Result};
use crate::numerics::{sorted_sum, RngStream, Scalar};
use crate::simplex::VertexAssignment;

/// `(1 - sigma) * z0 + sigma * eps`
pub fn flow_interpolant<T: Scalar>(z0: &[T], eps: &[T], sigma: f64) -> Result<Vec<T>> {
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            lhs: vec![z0.len()],
            rhs: vec![eps.len()],
            context: "interpolant endpoints",
        });
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::OutOfRange(format!("sigma {sigma} outside [0, 1]")));
    }
    let s = T::from_f64c(sigma);
    let a = T::from_f64c(1.0 - sigma);
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + s * e).collect())
}

/// One independent `U(0, 1)` noise level per temporal block.
pub fn diffusion_forcing_noise(rng: &mut RngStream, num_blocks: usize) -> Result<Vec<f64>> {
    if num_blocks == 0 {
        return Err(invalid("need at least one block"));
    }
    Ok((0..num_blocks).map(|_| rng.uniform()).collect())
}

/// Clean latents and actions of one multi-agent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `(P, T, H, W, C)`
    pub latents: Vec<T>,
    /// `(P, T, action fields)`
    pub actions: Vec<T>,
    pub assignment: VertexAssignment,
}

/// Noise draw for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub eps: Vec<T>,
    pub sigmas: Vec<f64>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn sample(rng: &mut RngStream, elements: usize, blocks: usize) -> Result<Self> {
        let sigmas = diffusion_forcing_noise(rng, blocks)?;
        let eps = rng.normal_vec(elements, 1.0);
        Ok(Self { eps, sigmas })
    }
}

/// Per-block interpolant over a `(P, T, H, W, C)` buffer where frame `t`
/// uses the noise level of block `t / block`.
pub fn blockwise_interpolant<T: Scalar>(
    z0: &[T],
    eps: &[T],
    sigmas: &[f64],
    frames: usize,
    frame_len: usize,
    block: usize,
) -> Result<Vec<T>> {
    if z0.len() != eps.len() || z0.len() % (frames * frame_len) != 0 || sigmas.len() * block != frames {
        return Err(Error::ShapeMismatch {
            lhs: vec![z0.len(), eps.len(), sigmas.len()],
            rhs: vec![frames, frame_len, block],
            context: "blockwise interpolant",
        });
    }
    let mut out = Vec::with_capacity(z0.len());
    for (i, (zf, ef)) in z0.chunks_exact(frame_len).zip(eps.chunks_exact(frame_len)).enumerate() {
        out.extend(flow_interpolant(zf, ef, sigmas[(i % frames) / block])?);
    }
    Ok(out)
}

/// Mean squared error over every element, reduced per agent and then across
/// agents in sorted order so relabelling agents leaves the value unchanged.
pub fn permutation_invariant_mse<T: Scalar>(pred: &[T], target: &[T], agents: usize) -> T {
    let per = pred.len() / agents.max(1);
    let mut partial: Vec<T> = pred
        .chunks_exact(per)
        .zip(target.chunks_exact(per))
        .map(|(a, b)| {
            let mut acc = T::zero();
            for (x, y) in a.iter().zip(b) {
                acc += (*x - *y) * (*x - *y);
            }
            acc
        })
        .collect();
    sorted_sum(&mut partial) / T::from_f64c(pred.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grads: Option<ModelParams<T>>,
}

/// Flow-matching loss of `model` on one sample; gradients when `with_grad`.
pub fn flow_matching_loss<T: Scalar>(
    model: &ToyModel<T>,
    sample: &Sample<T>,
    noise: &NoiseDraw<T>,
    mode: AttentionMode,
    with_grad: bool,
) -> Result<LossOutput<T>> {
    let c = &model.config;
    let agents = sample.assignment.agents();
    let frames = c.topology.frames;
    let frame_len = c.topology.spatial() * c.channels;
    if sample.latents.len() != agents * frames * frame_len {
        return Err(Error::ShapeMismatch {
            lhs: vec![sample.latents.len()],
            rhs: vec![agents, frames, c.topology.height, c.topology.width, c.channels],
            context: "sample latents",
        });
    }
    let z = blockwise_interpolant(&sample.latents, &noise.eps, &noise.sigmas, frames, frame_len, c.topology.block)?;
    let target: Vec<T> = noise.eps.iter().zip(&sample.latents).map(|(&e, &z0)| e - z0).collect();
    let input = ChunkInput {
        latents: &z,
        actions: &sample.actions,
        sigmas: &noise.sigmas,
        first_frame: 0,
        frames,
    };
    let mut opts = ForwardOptions::new(mode);
    opts.keep_tape = with_grad;
    let out = model.forward(&input, &sample.assignment, None, opts)?;
    let loss = permutation_invariant_mse(&out.velocity, &target, agents);
    let grads = match out.tape {
        Some(tape) => {
            let scale = T::from_f64c(2.0 / out.velocity.len() as f64);
            let dv: Vec<T> = out.velocity.iter().zip(&target).map(|(&v, &t)| (v - t) * scale).collect();
            Some(model.backward(&tape, &dv)?)
        }
        None => None,
    };
    Ok(LossOutput { loss, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolant_endpoints() {
        let z = [1.0, -2.0, 3.0];
        let e = [0.5, 0.5, -1.0];
        assert_eq!(flow_interpolant(&z, &e, 0.0).unwrap(), z.to_vec());
        assert_eq!(flow_interpolant(&z, &e, 1.0).unwrap(), e.to_vec());
        assert_eq!(flow_interpolant(&z, &e, 0.5).unwrap(), vec![0.75, -0.75, 1.0]);
        assert!(flow_interpolant(&z, &e[..2], 0.5).is_err());
        assert!(flow_interpolant(&z, &e, 1.5).is_err());
    }

    #[test]
    fn noise_levels_are_uniform_and_independent() {
        let mut rng = RngStream::new(11);
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| diffusion_forcing_noise(&mut rng, 2).unwrap()).collect();
        assert!(draws.iter().flatten().all(|s| (0.0..1.0).contains(s)));
        let n = draws.len() as f64;
        let mean0 = draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let mean1 = draws.iter().map(|d| d[1]).sum::<f64>() / n;
        assert!((mean0 - 0.5).abs() < 0.02);
        let cov = draws.iter().map(|d| (d[0] - mean0) * (d[1] - mean1)).sum::<f64>() / n;
        let var0 = draws.iter().map(|d| (d[0] - mean0).powi(2)).sum::<f64>() / n;
        let var1 = draws.iter().map(|d| (d[1] - mean1).powi(2)).sum::<f64>() / n;
        assert!((cov / (var0 * var1).sqrt()).abs() < 0.05);
        assert!(diffusion_forcing_noise(&mut rng, 0).is_err());
    }

    #[test]
    fn blockwise_uses_each_blocks_sigma() {
        // 1 agent, 4 frames of 1 element, blocks of 2.
        let z = [1.0, 1.0, 1.0, 1.0];
        let e = [0.0, 0.0, 0.0, 0.0];
        let out = blockwise_interpolant(&z, &e, &[0.25, 1.0], 4, 1, 2).unwrap();
        assert_eq!(out, vec![0.75, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn mse_is_label_invariant() {
        let a = [1.0f32, 2.0, 3.0, 4.5, -1.0, 0.1];
        let b = [0.0f32; 6];
        let swapped = [4.5f32, -1.0, 0.1, 1.0, 2.0, 3.0];
        assert_eq!(permutation_invariant_mse(&a, &b, 2), permutation_invariant_mse(&swapped, &b, 2));
        assert_eq!(permutation_invariant_mse(&b, &b, 2), 0.0);
    }
}
