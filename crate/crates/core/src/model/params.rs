//! Trainable parameters of the toy transformer.

use super::action::ActionEncoder;
use super::config::ToyModelConfig;
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::numerics::{Linear, RngStream, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    /// `g_l`: action feature to per-layer additive bias.
    pub action_proj: Linear<T>,
    /// Conditioning to (shift1, scale1, shift2, scale2).
    pub modulation: Linear<T>,
    pub attn: AttentionWeights<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub embed: Linear<T>,
    /// `K x D` learned hub embeddings, shared by every frame.
    pub hub_tokens: Vec<T>,
    pub sigma: Linear<T>,
    pub action: ActionEncoder<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Conditioning to (shift, scale) before the output projection.
    pub final_mod: Linear<T>,
    pub out: Linear<T>,
}

fn cast_linear<T: Scalar, U: Scalar>(l: &Linear<T>) -> Linear<U> {
    l.cast()
}

fn zeros_like<T: Scalar>(l: &Linear<T>) -> Linear<T> {
    Linear::zeros(l.input, l.output)
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ToyModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut r = rng.split("params/embed");
        let embed = Linear::init(config.channels, d, 1.0, &mut r);
        let mut r = rng.split("params/hub");
        let hub_tokens = r.normal_vec(config.topology.hubs * d, 1.0);
        let mut r = rng.split("params/sigma");
        let sigma = Linear::init(config.sigma_embed_dim, d, 1.0, &mut r);
        let mut r = rng.split("params/action");
        let action = ActionEncoder::init(config.action_kind, config.action_hidden, d, &mut r);
        let layers = (0..config.layers)
            .map(|i| {
                let mut r = rng.split_indexed("params/layer", i as u64);
                LayerParams {
                    action_proj: Linear::init(d, d, 0.5, &mut r),
                    modulation: Linear::init(d, 4 * d, 0.1, &mut r),
                    attn: AttentionWeights::init(config.heads, config.head_dim, &mut r),
                    ff_in: Linear::init(d, config.ff_dim(), 1.0, &mut r),
                    ff_out: Linear::init(config.ff_dim(), d, 0.5, &mut r),
                }
            })
            .collect();
        let mut r = rng.split("params/final");
        let final_mod = Linear::init(d, 2 * d, 0.1, &mut r);
        let out = Linear::init(d, config.channels, 1.0, &mut r);
        Ok(Self {
            embed,
            hub_tokens,
            sigma,
            action,
            layers,
            final_mod,
            out,
        })
    }

    /// Same structure, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            embed: zeros_like(&self.embed),
            hub_tokens: vec![T::zero(); self.hub_tokens.len()],
            sigma: zeros_like(&self.sigma),
            action: self.action.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    action_proj: zeros_like(&l.action_proj),
                    modulation: zeros_like(&l.modulation),
                    attn: AttentionWeights::zeros(l.attn.heads, l.attn.head_dim),
                    ff_in: zeros_like(&l.ff_in),
                    ff_out: zeros_like(&l.ff_out),
                })
                .collect(),
            final_mod: zeros_like(&self.final_mod),
            out: zeros_like(&self.out),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embed: cast_linear(&self.embed),
            hub_tokens: self.hub_tokens.iter().map(|x| U::from_f64c(x.to_f64c())).collect(),
            sigma: cast_linear(&self.sigma),
            action: ActionEncoder {
                kind: self.action.kind,
                discrete: self.action.discrete.as_ref().map(cast_linear),
                continuous: cast_linear(&self.action.continuous),
                fuse: cast_linear(&self.action.fuse),
                proj: cast_linear(&self.action.proj),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    action_proj: cast_linear(&l.action_proj),
                    modulation: cast_linear(&l.modulation),
                    attn: AttentionWeights {
                        heads: l.attn.heads,
                        head_dim: l.attn.head_dim,
                        query: cast_linear(&l.attn.query),
                        key: cast_linear(&l.attn.key),
                        value: cast_linear(&l.attn.value),
                        output: cast_linear(&l.attn.output),
                    },
                    ff_in: cast_linear(&l.ff_in),
                    ff_out: cast_linear(&l.ff_out),
                })
                .collect(),
            final_mod: cast_linear(&self.final_mod),
            out: cast_linear(&self.out),
        }
    }

    /// Every parameter group with a stable dotted name.
    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        push_linear(&mut out, "embed", &self.embed);
        out.push(("hub_tokens".into(), &self.hub_tokens));
        push_linear(&mut out, "sigma", &self.sigma);
        for (n, l) in self.action.linears() {
            push_linear(&mut out, &format!("action.{n}"), l);
        }
        for (i, l) in self.layers.iter().enumerate() {
            push_linear(&mut out, &format!("layers.{i}.action_proj"), &l.action_proj);
            push_linear(&mut out, &format!("layers.{i}.modulation"), &l.modulation);
            push_linear(&mut out, &format!("layers.{i}.attn.query"), &l.attn.query);
            push_linear(&mut out, &format!("layers.{i}.attn.key"), &l.attn.key);
            push_linear(&mut out, &format!("layers.{i}.attn.value"), &l.attn.value);
            push_linear(&mut out, &format!("layers.{i}.attn.output"), &l.attn.output);
            push_linear(&mut out, &format!("layers.{i}.ff_in"), &l.ff_in);
            push_linear(&mut out, &format!("layers.{i}.ff_out"), &l.ff_out);
        }
        push_linear(&mut out, "final_mod", &self.final_mod);
        push_linear(&mut out, "out", &self.out);
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
        push_linear_mut(&mut out, "embed", &mut self.embed);
        out.push(("hub_tokens".into(), &mut self.hub_tokens));
        push_linear_mut(&mut out, "sigma", &mut self.sigma);
        for (n, l) in self.action.linears_mut() {
            push_linear_mut(&mut out, &format!("action.{n}"), l);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("layers.{i}.action_proj"), &mut l.action_proj);
            push_linear_mut(&mut out, &format!("layers.{i}.modulation"), &mut l.modulation);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.query"), &mut l.attn.query);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.key"), &mut l.attn.key);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.value"), &mut l.attn.value);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.output"), &mut l.attn.output);
            push_linear_mut(&mut out, &format!("layers.{i}.ff_in"), &mut l.ff_in);
            push_linear_mut(&mut out, &format!("layers.{i}.ff_out"), &mut l.ff_out);
        }
        push_linear_mut(&mut out, "final_mod", &mut self.final_mod);
        push_linear_mut(&mut out, "out", &mut self.out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// Elementwise `self += alpha * other` over matching groups.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for ((_, dst), (_, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            crate::numerics::axpy(alpha, src, dst);
        }
    }

    pub fn check_shapes(&self, other: &Self) -> Result<()> {
        let a = self.groups();
        let b = other.groups();
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                lhs: vec![a.len()],
                rhs: vec![b.len()],
                context: "parameter group count",
            });
        }
        for ((_, ga), (_, gb)) in a.iter().zip(&b) {
            if ga.len() != gb.len() {
                return Err(Error::ShapeMismatch {
                    lhs: vec![ga.len()],
                    rhs: vec![gb.len()],
                    context: "parameter group size",
                });
            }
        }
        Ok(())
    }
}

fn push_linear<'a, T>(out: &mut Vec<(String, &'a [T])>, name: &str, l: &'a Linear<T>) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_linear_mut<'a, T>(out: &mut Vec<(String, &'a mut Vec<T>)>, name: &str, l: &'a mut Linear<T>) {
    out.push((format!("{name}.weight"), &mut l.weight));
    out.push((format!("{name}.bias"), &mut l.bias));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_align() {
        let c = ToyModelConfig::tiny();
        let mut p = ModelParams::<f64>::init(&c, &RngStream::new(0)).unwrap();
        let names: Vec<String> = p.groups().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.groups_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"layers.1.attn.key.weight".to_string()));
        assert!(names.contains(&"action.discrete.weight".to_string()));
        let z = p.zeros_like();
        p.check_shapes(&z).unwrap();
        assert_eq!(z.param_count(), p.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let c = ToyModelConfig::tiny();
        let a = ModelParams::<f32>::init(&c, &RngStream::new(9)).unwrap();
        let b = ModelParams::<f32>::init(&c, &RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let r = a.cast::<f64>().cast::<f32>();
        assert_eq!(a, r);
    }
}
