//! Token layout and boolean attention masks.
//!
//! The sequence holds `P*T*L` agent tokens ordered by (agent, frame, spatial)
//! followed by `T*K` hub tokens ordered by (frame, hub slot). Dense masks are
//! only materialized for small specs; the attention kernels work from the
//! [`Visibility`] rules directly.

use crate::error::{invalid, Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rope::{Identity, TokenCoordinate};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub agents: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub hubs: usize,
    pub block: usize,
    /// Local attention window in latent frames.
    pub window: Option<usize>,
}

impl TopologySpec {
    pub fn new(
        agents: usize,
        frames: usize,
        height: usize,
        width: usize,
        hubs: usize,
        block: usize,
        window: Option<usize>,
    ) -> Result<Self> {
        let spec = Self {
            agents,
            frames,
            height,
            width,
            hubs,
            block,
            window,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(invalid("topology needs at least one agent"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid("topology needs at least one spatial token per frame"));
        }
        if self.block == 0 || self.frames == 0 || self.frames % self.block != 0 {
            return Err(invalid(format!(
                "frames ({}) must be a positive multiple of the block size ({})",
                self.frames, self.block
            )));
        }
        if let Some(w) = self.window {
            if w < self.block {
                return Err(invalid(format!(
                    "window of {w} frames is smaller than a block of {}",
                    self.block
                )));
            }
            if w % self.block != 0 {
                return Err(invalid(format!(
                    "window of {w} frames is not a whole number of {}-frame blocks",
                    self.block
                )));
            }
        }
        Ok(())
    }

    /// Spatial tokens per frame, `L = H * W`.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn blocks(&self) -> usize {
        self.frames / self.block
    }

    pub fn agent_tokens(&self) -> usize {
        self.agents * self.frames * self.spatial()
    }

    pub fn hub_tokens(&self) -> usize {
        self.frames * self.hubs
    }

    pub fn seq_len(&self) -> usize {
        self.agent_tokens() + self.hub_tokens()
    }

    /// Window measured in whole blocks, if any.
    pub fn window_blocks(&self) -> Option<usize> {
        self.window.map(|w| w / self.block)
    }

    pub fn with_agents(&self, agents: usize) -> Result<Self> {
        Self::new(agents, self.frames, self.height, self.width, self.hubs, self.block, self.window)
    }

    pub fn with_frames(&self, frames: usize) -> Result<Self> {
        Self::new(self.agents, frames, self.height, self.width, self.hubs, self.block, self.window)
    }

    pub fn with_hubs(&self, hubs: usize) -> Self {
        Self { hubs, ..*self }
    }

    pub fn with_window(&self, window: Option<usize>) -> Result<Self> {
        Self::new(self.agents, self.frames, self.height, self.width, self.hubs, self.block, window)
    }

    pub fn coordinate(&self, index: usize) -> Result<TokenCoordinate> {
        let l = self.spatial();
        if index < self.agent_tokens() {
            let p = index / (self.frames * l);
            let rem = index % (self.frames * l);
            let t = rem / l;
            let s = rem % l;
            Ok(TokenCoordinate {
                identity: Identity::Agent(p),
                t,
                h: s / self.width,
                w: s % self.width,
                block: t / self.block,
            })
        } else if index < self.seq_len() {
            let rem = index - self.agent_tokens();
            let t = rem / self.hubs;
            Ok(TokenCoordinate {
                identity: Identity::Hub,
                t,
                h: rem % self.hubs,
                w: 0,
                block: t / self.block,
            })
        } else {
            Err(Error::OutOfRange(format!("token {index} of {}", self.seq_len())))
        }
    }

    pub fn index_of(&self, c: &TokenCoordinate) -> Result<usize> {
        if c.t >= self.frames {
            return Err(Error::OutOfRange(format!("frame {} of {}", c.t, self.frames)));
        }
        match c.identity {
            Identity::Agent(p) => {
                if p >= self.agents || c.h >= self.height || c.w >= self.width {
                    return Err(Error::OutOfRange(format!("{c:?}")));
                }
                Ok((p * self.frames + c.t) * self.spatial() + c.h * self.width + c.w)
            }
            Identity::Hub => {
                if c.h >= self.hubs {
                    return Err(Error::OutOfRange(format!("hub slot {} of {}", c.h, self.hubs)));
                }
                Ok(self.agent_tokens() + c.t * self.hubs + c.h)
            }
        }
    }

    /// Token index range of agent `p`'s frames `[t0, t1)`.
    pub fn agent_range(&self, p: usize, t0: usize, t1: usize) -> std::ops::Range<usize> {
        let l = self.spatial();
        (p * self.frames + t0) * l..(p * self.frames + t1) * l
    }

    /// Token index range of the hub tokens of frames `[t0, t1)`.
    pub fn hub_range(&self, t0: usize, t1: usize) -> std::ops::Range<usize> {
        self.agent_tokens() + t0 * self.hubs..self.agent_tokens() + t1 * self.hubs
    }
}

/// Every token's coordinate, in sequence order.
pub fn build_layout(spec: &TopologySpec) -> Result<Vec<TokenCoordinate>> {
    spec.validate()?;
    (0..spec.seq_len()).map(|i| spec.coordinate(i)).collect()
}

/// Which streams may read which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamTopology {
    /// Agents read themselves and the hub; the hub reads everything.
    Hub,
    /// Every stream reads every stream.
    Dense,
}

/// Stream connectivity plus block-level causality and local window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub topology: StreamTopology,
    pub causal: bool,
    pub window_blocks: Option<usize>,
}

impl Visibility {
    pub fn causal_hub(spec: &TopologySpec) -> Self {
        Self {
            topology: StreamTopology::Hub,
            causal: true,
            window_blocks: spec.window_blocks(),
        }
    }

    pub fn streams(&self, query: Identity, key: Identity) -> bool {
        match self.topology {
            StreamTopology::Dense => true,
            StreamTopology::Hub => query == key || query == Identity::Hub || key == Identity::Hub,
        }
    }

    pub fn blocks(&self, query_block: usize, key_block: usize) -> bool {
        if self.causal && key_block > query_block {
            return false;
        }
        match self.window_blocks {
            Some(w) => query_block.abs_diff(key_block) < w,
            None => true,
        }
    }

    pub fn allows(&self, q: &TokenCoordinate, k: &TokenCoordinate) -> bool {
        self.streams(q.identity, k.identity) && self.blocks(q.block, k.block)
    }

    /// Inclusive range of key blocks visible from `query_block`, clipped to
    /// `0..num_blocks`.
    pub fn key_blocks(&self, query_block: usize, num_blocks: usize) -> std::ops::Range<usize> {
        let hi = if self.causal { query_block + 1 } else { num_blocks };
        let lo = match self.window_blocks {
            Some(w) => (query_block + 1).saturating_sub(w),
            None => 0,
        };
        let hi = match (self.window_blocks, self.causal) {
            (Some(w), false) => hi.min(query_block + w),
            _ => hi,
        };
        lo..hi.min(num_blocks)
    }
}

/// Square boolean matrix; entry `(i, j)` means query `i` may read key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    size: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                bits.push(f(i, j));
            }
        }
        Self { size, bits }
    }

    pub fn all_true(size: usize) -> Self {
        Self {
            size,
            bits: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.size).find(|&i| !self.bits[i * self.size..(i + 1) * self.size].iter().any(|&b| b))
    }

    /// `0`/`1` text grid, one row per line.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for row in self.bits.chunks(self.size.max(1)) {
            s.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.size, self.size],
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("square mask")
    }
}

fn mask_from_rule(spec: &TopologySpec, rule: impl Fn(&TokenCoordinate, &TokenCoordinate) -> bool) -> Result<MaskMatrix> {
    let layout = build_layout(spec)?;
    Ok(MaskMatrix::from_fn(layout.len(), |i, j| rule(&layout[i], &layout[j])))
}

/// Hub-and-spoke indicator: same stream, or either side is a hub token.
pub fn hub_mask(spec: &TopologySpec) -> Result<MaskMatrix> {
    mask_from_rule(spec, |a, b| {
        a.identity == b.identity || a.identity == Identity::Hub || b.identity == Identity::Hub
    })
}

/// Block-causal factor: key block not after query block.
pub fn block_causal_mask(spec: &TopologySpec) -> Result<MaskMatrix> {
    mask_from_rule(spec, |a, b| b.block <= a.block)
}

/// Hub mask restricted to same-or-earlier blocks.
pub fn causal_hub_mask(spec: &TopologySpec) -> Result<MaskMatrix> {
    compose_masks(&[&block_causal_mask(spec)?, &hub_mask(spec)?])
}

/// Causal local window at block granularity: the key's block is not later and
/// lies within the most recent `window / n` blocks.
pub fn local_window_mask(spec: &TopologySpec) -> Result<MaskMatrix> {
    let window = spec.window.unwrap_or(spec.frames.max(spec.block));
    if window < spec.block {
        return Err(invalid(format!(
            "window of {window} frames is smaller than a block of {}",
            spec.block
        )));
    }
    let wb = window / spec.block;
    mask_from_rule(spec, |a, b| b.block <= a.block && a.block - b.block < wb)
}

/// The full mask for a [`Visibility`] rule.
pub fn visibility_mask(spec: &TopologySpec, vis: &Visibility) -> Result<MaskMatrix> {
    mask_from_rule(spec, |a, b| vis.allows(a, b))
}

/// Elementwise conjunction.
pub fn compose_masks(masks: &[&MaskMatrix]) -> Result<MaskMatrix> {
    let first = masks.first().ok_or_else(|| invalid("compose_masks needs at least one mask"))?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        if m.size != out.size {
            return Err(Error::ShapeMismatch {
                lhs: vec![out.size, out.size],
                rhs: vec![m.size, m.size],
                context: "compose_masks",
            });
        }
        for (o, b) in out.bits.iter_mut().zip(&m.bits) {
            *o = *o && *b;
        }
    }
    if let Some(row) = out.first_empty_row() {
        return Err(Error::EmptyMaskRow { row });
    }
    Ok(out)
}

/// Closed-form number of true entries in [`hub_mask`].
pub fn hub_mask_count(spec: &TopologySpec) -> usize {
    let tl = spec.frames * spec.spatial();
    let tk = spec.frames * spec.hubs;
    spec.agents * tl * tl + 2 * spec.agents * tl * tk + tk * tk
}
