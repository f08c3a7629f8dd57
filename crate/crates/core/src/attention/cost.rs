use crate::error::{invalid, Error, Result};
use crate::topology::TopologySpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMode {
    /// Dense cross-agent attention, no hub tokens.
    Dense,
    SparseHub,
}

impl CostMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostMode::Dense => "dense",
            CostMode::SparseHub => "sparse-hub",
        }
    }
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse-hub" | "sparse" | "hub" => Ok(Self::SparseHub),
            other => Err(invalid(format!("unknown attention mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    pub agents: usize,
    pub frames: usize,
    pub spatial: usize,
    pub hubs: usize,
    pub block: usize,
    /// Attended query-key pairs within one block.
    pub pairs: u64,
    /// `pairs * 4 * head_dim * heads * blocks`.
    pub flops: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "mode,P,T,L,K,n,pairs,flops";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode, self.agents, self.frames, self.spatial, self.hubs, self.block, self.pairs, self.flops
        )
    }
}

/// Per-block pair count for a mode.
pub fn block_pairs(spec: &TopologySpec, mode: CostMode) -> u64 {
    let p = spec.agents as u64;
    let nl = (spec.block * spec.spatial()) as u64;
    let nk = (spec.block * spec.hubs) as u64;
    match mode {
        CostMode::Dense => p * p * nl * nl,
        CostMode::SparseHub => p * nl * (nl + nk) + nk * (p * nl + nk),
    }
}

/// Closed-form attention cost of one pass over `spec`.
pub fn attention_cost(spec: &TopologySpec, mode: CostMode, heads: usize, head_dim: usize) -> CostReport {
    let pairs = block_pairs(spec, mode);
    CostReport {
        mode,
        agents: spec.agents,
        frames: spec.frames,
        spatial: spec.spatial(),
        hubs: spec.hubs,
        block: spec.block,
        pairs,
        flops: pairs * 4 * head_dim as u64 * heads as u64 * spec.blocks() as u64,
    }
}

/// Pairs evaluated by one cached forward of every block in a rollout, per head
/// and layer: block `b` reads `min(b + 1, window / n)` blocks of history, each
/// contributing one closed-form block's worth of pairs.
pub fn rollout_pair_count(spec: &TopologySpec, mode: CostMode) -> u64 {
    let per_block = block_pairs(spec, mode);
    let window = spec.window_blocks().unwrap_or(usize::MAX);
    (0..spec.blocks())
        .map(|b| (b + 1).min(window) as u64 * per_block)
        .sum()
}
