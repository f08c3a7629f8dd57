use crate::error::{invalid, Error, Result};
use crate::rope::RopeLayout;
use crate::simplex::{Embedding, SimplexPool};
use crate::topology::{StreamTopology, TopologySpec, Visibility};
use serde::{Deserialize, Serialize};

use super::action::ActionKind;

/// How the transformer attends across agents and blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Block-causal hub topology with hub tokens (the streaming student).
    CausalHub,
    /// Block-causal dense cross-agent attention without hubs (scaling baseline).
    CausalDense,
    /// Full bidirectional dense attention without hubs (teacher-shaped forward).
    BidirectionalDense,
}

impl AttentionMode {
    pub fn uses_hubs(&self) -> bool {
        matches!(self, AttentionMode::CausalHub)
    }

    pub fn visibility(&self, spec: &TopologySpec) -> Visibility {
        match self {
            AttentionMode::CausalHub => Visibility::causal_hub(spec),
            AttentionMode::CausalDense => Visibility {
                topology: StreamTopology::Dense,
                causal: true,
                window_blocks: spec.window_blocks(),
            },
            AttentionMode::BidirectionalDense => Visibility {
                topology: StreamTopology::Dense,
                causal: false,
                window_blocks: None,
            },
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal-hub" | "sparse-hub" => Ok(Self::CausalHub),
            "causal-dense" | "dense" => Ok(Self::CausalDense),
            "bidirectional-dense" | "bidirectional" => Ok(Self::BidirectionalDense),
            other => Err(invalid(format!("unknown attention mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub rope: RopeLayout,
    pub pool_size: usize,
    /// Agent separation scale. No published value; 1.0 keeps agent-band
    /// rotations around one radian.
    pub alpha: f64,
    pub embedding: Embedding,
    pub topology: TopologySpec,
    pub channels: usize,
    pub action_kind: ActionKind,
    /// Width of each action branch before fusion.
    pub action_hidden: usize,
    pub sigma_embed_dim: usize,
    pub timesteps: Vec<u32>,
    pub flow_shift: f64,
    /// Noise level of the clean re-forward that fills the KV cache.
    pub context_sigma: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ToyModelConfig {
    /// Desk-scale default used by training, rollout and the CLI.
    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 2,
            head_dim: 32,
            mlp_ratio: 2,
            rope: RopeLayout::desk(),
            pool_size: 4,
            alpha: 1.0,
            embedding: Embedding::Helmert,
            topology: TopologySpec::new(2, 6, 2, 2, 2, 3, Some(24)).expect("valid desk topology"),
            channels: 4,
            action_kind: ActionKind::Game,
            action_hidden: 128,
            sigma_embed_dim: 16,
            timesteps: vec![1000, 750, 500, 250],
            flow_shift: 5.0,
            context_sigma: 0.0,
        }
    }

    /// Smallest configuration used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            model_dim: 32,
            layers: 2,
            heads: 2,
            head_dim: 16,
            mlp_ratio: 2,
            rope: RopeLayout::new(4, 4, 4, 4).expect("valid tiny layout"),
            pool_size: 3,
            alpha: 1.0,
            embedding: Embedding::Helmert,
            topology: TopologySpec::new(2, 2, 2, 2, 2, 1, None).expect("valid tiny topology"),
            channels: 3,
            action_kind: ActionKind::Game,
            action_hidden: 8,
            sigma_embed_dim: 8,
            timesteps: vec![1000, 750, 500, 250],
            flow_shift: 5.0,
            context_sigma: 0.0,
        }
    }

    /// The production architecture hyperparameters.
    pub fn production() -> Self {
        Self {
            model_dim: 2048,
            layers: 28,
            heads: 16,
            head_dim: 128,
            mlp_ratio: 4,
            rope: RopeLayout::production(),
            pool_size: 4,
            alpha: 1.0,
            embedding: Embedding::Helmert,
            topology: TopologySpec::new(2, 24, 20, 30, 8, 3, Some(24)).expect("valid production topology"),
            channels: 16,
            action_kind: ActionKind::Game,
            action_hidden: 128,
            sigma_embed_dim: 256,
            timesteps: vec![1000, 750, 500, 250],
            flow_shift: 5.0,
            context_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        if self.heads * self.head_dim != self.model_dim {
            return Err(invalid(format!(
                "heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.rope.d_head() != self.head_dim {
            return Err(invalid(format!(
                "rotary layout covers {} dims but head_dim is {}",
                self.rope.d_head(),
                self.head_dim
            )));
        }
        if self.layers == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.action_hidden == 0 {
            return Err(invalid("layers, channels, mlp_ratio and action_hidden must be positive"));
        }
        if self.sigma_embed_dim == 0 || self.sigma_embed_dim % 2 != 0 {
            return Err(invalid("sigma_embed_dim must be positive and even"));
        }
        if self.topology.agents > self.pool_size {
            return Err(Error::PoolExhausted {
                agents: self.topology.agents,
                pool: self.pool_size,
            });
        }
        if !(0.0..1.0).contains(&self.context_sigma) {
            return Err(invalid(format!("context_sigma {} outside [0, 1)", self.context_sigma)));
        }
        self.pool()?;
        Ok(())
    }

    pub fn pool(&self) -> Result<SimplexPool> {
        SimplexPool::with_embedding(self.pool_size, self.rope.agent_slots(), self.alpha, self.embedding)
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    pub fn with_topology(&self, topology: TopologySpec) -> Self {
        Self {
            topology,
            ..self.clone()
        }
    }
}
