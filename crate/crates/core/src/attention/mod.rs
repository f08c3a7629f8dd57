//! Multi-head attention over the multi-agent token sequence.
//!
//! [`masked_attention_reference`] is the dense oracle: it materializes every
//! logit and masks afterwards. The sparse path ([`attend`]) walks an
//! [`AttentionPlan`] instead, so an agent query only ever touches its own
//! stream and the hub stream, and never computes a logit it would discard.

mod cost;
mod kernel;

pub use cost::{attention_cost, block_pairs, rollout_pair_count, CostMode, CostReport};
pub use kernel::{attend, attend_backward, AttentionPlan, AttentionStats, KeySegment, QueryGroup};

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_masked, Linear, RngStream, Scalar, Tensor};
use crate::rope::{RotaryEncoder, Rotation};
use crate::topology::{causal_hub_mask, build_layout, MaskMatrix, TopologySpec, Visibility};
use serde::{Deserialize, Serialize};

/// Scaled dot-product attention for one head with an explicit boolean mask.
pub fn masked_attention_reference<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &MaskMatrix,
) -> Result<Tensor<T>> {
    let (s, d) = check_qkv(q, k, v)?;
    if mask.size() != s {
        return Err(Error::ShapeMismatch {
            lhs: vec![s, s],
            rhs: vec![mask.size(), mask.size()],
            context: "attention mask vs sequence",
        });
    }
    let kt = Tensor::from_fn(&[d, s], |i| k.data()[(i % s) * d + i / s]);
    let scale = T::one() / T::from_f64c((d as f64).sqrt());
    let logits = matmul(q, &kt)?.map(|x| x * scale);
    let probs = softmax_masked(&logits, mask.bits())?;
    matmul(&probs, v)
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
            context: "q/k/v must share a [seq, dim] shape",
        });
    }
    Ok((q.shape()[0], q.shape()[1]))
}

/// Single-head sparse hub attention under the causal hub topology of `spec`.
pub fn sparse_hub_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &TopologySpec,
) -> Result<Tensor<T>> {
    let (s, d) = check_qkv(q, k, v)?;
    if s != spec.seq_len() {
        return Err(Error::ShapeMismatch {
            lhs: vec![s],
            rhs: vec![spec.seq_len()],
            context: "sequence length vs topology",
        });
    }
    let plan = AttentionPlan::full_sequence(spec, Visibility::causal_hub(spec))?;
    let mut stats = AttentionStats::default();
    let out = attend(&plan, q.data(), k.data(), v.data(), 1, d, &mut stats, false);
    Tensor::new(vec![s, d], out)
}

/// Per-token rotations for the full sequence of `spec`.
pub fn sequence_rotations<T: Scalar>(spec: &TopologySpec, encoder: &RotaryEncoder) -> Result<Vec<Rotation<T>>> {
    build_layout(spec)?
        .iter()
        .map(|c| encoder.angles(c).map(|a| Rotation::from_angles(&a)))
        .collect()
}

/// Apply a per-row rotation to every head of a packed `[rows, heads*head_dim]` buffer.
pub fn rotate_heads<T: Scalar>(x: &mut [T], rotations: &[Rotation<T>], head_dim: usize, inverse: bool) {
    let width = x.len() / rotations.len().max(1);
    for (row, rot) in x.chunks_exact_mut(width).zip(rotations) {
        for head in row.chunks_exact_mut(head_dim) {
            if inverse {
                rot.apply_inverse(head);
            } else {
                rot.apply(head);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn init(heads: usize, head_dim: usize, rng: &mut RngStream) -> Self {
        let d = heads * head_dim;
        Self {
            heads,
            head_dim,
            query: Linear::init(d, d, 1.0, rng),
            key: Linear::init(d, d, 1.0, rng),
            value: Linear::init(d, d, 1.0, rng),
            output: Linear::init(d, d, 1.0, rng),
        }
    }

    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        let d = heads * head_dim;
        Self {
            heads,
            head_dim,
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Projection, rotary, sparse hub attention per head, output projection.
pub fn multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    spec: &TopologySpec,
    encoder: &RotaryEncoder,
) -> Result<Tensor<T>> {
    let (rows, q, k, v) = project_and_rotate(x, weights, spec, encoder)?;
    let plan = AttentionPlan::full_sequence(spec, Visibility::causal_hub(spec))?;
    let mut stats = AttentionStats::default();
    let mixed = attend(&plan, &q, &k, &v, weights.heads, weights.head_dim, &mut stats, false);
    Tensor::new(vec![rows, weights.model_dim()], weights.output.forward(&mixed))
}

/// Same computation through per-head dense masked attention.
pub fn multi_head_attention_dense<T: Scalar>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    spec: &TopologySpec,
    encoder: &RotaryEncoder,
) -> Result<Tensor<T>> {
    let (rows, q, k, v) = project_and_rotate(x, weights, spec, encoder)?;
    let mask = causal_hub_mask(spec)?;
    let (h, hd, d) = (weights.heads, weights.head_dim, weights.model_dim());
    let mut mixed = vec![T::zero(); rows * d];
    for head in 0..h {
        let slice = |buf: &[T]| {
            Tensor::from_fn(&[rows, hd], |i| buf[(i / hd) * d + head * hd + i % hd])
        };
        let o = masked_attention_reference(&slice(&q), &slice(&k), &slice(&v), &mask)?;
        for r in 0..rows {
            mixed[r * d + head * hd..r * d + (head + 1) * hd].copy_from_slice(&o.data()[r * hd..(r + 1) * hd]);
        }
    }
    Tensor::new(vec![rows, d], weights.output.forward(&mixed))
}

type Projected<T> = (usize, Vec<T>, Vec<T>, Vec<T>);

fn project_and_rotate<T: Scalar>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    spec: &TopologySpec,
    encoder: &RotaryEncoder,
) -> Result<Projected<T>> {
    let d = weights.model_dim();
    if x.shape() != [spec.seq_len(), d] {
        return Err(Error::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: vec![spec.seq_len(), d],
            context: "attention input vs [seq_len, model_dim]",
        });
    }
    if encoder.layout().d_head() != weights.head_dim {
        return Err(Error::ShapeMismatch {
            lhs: vec![encoder.layout().d_head()],
            rhs: vec![weights.head_dim],
            context: "rotary head dimension vs attention head dimension",
        });
    }
    let rotations = sequence_rotations::<T>(spec, encoder)?;
    let mut q = weights.query.forward(x.data());
    let mut k = weights.key.forward(x.data());
    let v = weights.value.forward(x.data());
    rotate_heads(&mut q, &rotations, weights.head_dim, false);
    rotate_heads(&mut k, &rotations, weights.head_dim, false);
    Ok((spec.seq_len(), q, k, v))
}

#[cfg(test)]
mod tests;
