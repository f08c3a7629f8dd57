//! Block-autoregressive rollout with per-agent and hub key/value caches.
//!
//! Each layer keeps one buffer per agent stream and one for hub tokens. A
//! buffer holds whole temporal blocks and evicts the oldest block once the
//! local window is full. New blocks are denoised with a few Euler steps of
//! the flow, reading the caches as context, and then re-forwarded once at
//! the context noise level to produce the keys/values that get cached.

use crate::attention::{AttentionStats, KeySegment};
use crate::error::{invalid, Error, Result};
use crate::model::{ActionFrame, ActionKind, AttentionMode, ChunkInput, ForwardOptions, KvContext, LayerKv, ToyModel};
use crate::numerics::{RngStream, Scalar};
use crate::rope::Identity;
use crate::simplex::VertexAssignment;
use crate::topology::TopologySpec;
use std::collections::VecDeque;

/// Keys and values of one stream for one temporal block (`rows x D` each).
#[derive(Debug, Clone, PartialEq)]
pub struct CachedBlock<T> {
    pub block: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T> CachedBlock<T> {
    fn rows(&self, width: usize) -> usize {
        self.keys.len() / width.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub agents: Vec<VecDeque<CachedBlock<T>>>,
    pub hub: VecDeque<CachedBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheSet<T> {
    layers: Vec<LayerCache<T>>,
    /// Blocks held per buffer; `None` keeps everything.
    capacity_blocks: Option<usize>,
    cursor: usize,
    agents: usize,
    block: usize,
    spatial: usize,
    hubs: usize,
    width: usize,
    peak_tokens: usize,
}

/// Empty caches for `layers` layers of width `model_dim`.
pub fn init_caches<T: Scalar>(spec: &TopologySpec, layers: usize, model_dim: usize) -> Result<KVCacheSet<T>> {
    spec.validate()?;
    Ok(KVCacheSet {
        layers: (0..layers)
            .map(|_| LayerCache {
                agents: vec![VecDeque::new(); spec.agents],
                hub: VecDeque::new(),
            })
            .collect(),
        capacity_blocks: spec.window_blocks(),
        cursor: 0,
        agents: spec.agents,
        block: spec.block,
        spatial: spec.spatial(),
        hubs: spec.hubs,
        width: model_dim,
        peak_tokens: 0,
    })
}

impl<T: Scalar> KVCacheSet<T> {
    /// Next block index expected by [`KVCacheSet::append_block`].
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    fn buffer(&self, layer: usize, stream: Identity) -> &VecDeque<CachedBlock<T>> {
        match stream {
            Identity::Agent(p) => &self.layers[layer].agents[p],
            Identity::Hub => &self.layers[layer].hub,
        }
    }

    /// Latent frames currently held for `stream` (same for every layer).
    pub fn cached_frames(&self, stream: Identity) -> usize {
        let held = self.layers.first().map_or(0, |l| match stream {
            Identity::Agent(p) => l.agents[p].len(),
            Identity::Hub => l.hub.len(),
        });
        held * self.block
    }

    /// Block indices held for `stream` in layer `layer`, oldest first.
    pub fn blocks_held(&self, layer: usize, stream: Identity) -> Vec<usize> {
        self.buffer(layer, stream).iter().map(|b| b.block).collect()
    }

    pub fn cached_block(&self, layer: usize, stream: Identity, block: usize) -> Option<&CachedBlock<T>> {
        self.buffer(layer, stream).iter().find(|b| b.block == block)
    }

    /// Window capacity in tokens of one agent buffer; `None` when unbounded.
    pub fn agent_capacity_tokens(&self) -> Option<usize> {
        self.capacity_blocks.map(|w| w * self.block * self.spatial)
    }

    pub fn hub_capacity_tokens(&self) -> Option<usize> {
        self.capacity_blocks.map(|w| w * self.block * self.hubs)
    }

    /// Cached tokens in one layer right now.
    pub fn tokens_per_layer(&self) -> usize {
        self.layers.first().map_or(0, |l| {
            l.agents.iter().chain(std::iter::once(&l.hub)).flatten().map(|b| b.rows(self.width)).sum()
        })
    }

    /// Largest per-layer token count seen so far.
    pub fn peak_tokens_per_layer(&self) -> usize {
        self.peak_tokens
    }

    /// Append the keys/values of block `block`, laid out as a one-block chunk
    /// (agents, then hubs). Evicts the oldest block once a buffer is full.
    pub fn append_block(&mut self, block: usize, kv: &[LayerKv<T>]) -> Result<()> {
        if block != self.cursor {
            return Err(Error::OutOfOrderBlock {
                expected: self.cursor,
                got: block,
            });
        }
        if kv.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                lhs: vec![kv.len()],
                rhs: vec![self.layers.len()],
                context: "per-layer keys/values vs cache layers",
            });
        }
        let per_agent = self.block * self.spatial;
        let rows = self.agents * per_agent + self.block * self.hubs;
        for lk in kv {
            if lk.keys.len() != rows * self.width || lk.values.len() != rows * self.width {
                return Err(Error::ShapeMismatch {
                    lhs: vec![lk.keys.len(), lk.values.len()],
                    rhs: vec![rows, self.width],
                    context: "block keys/values vs (rows, model_dim)",
                });
            }
        }
        let w = self.width;
        for (layer, lk) in self.layers.iter_mut().zip(kv) {
            let slice = |r: std::ops::Range<usize>| CachedBlock {
                block,
                keys: lk.keys[r.start * w..r.end * w].to_vec(),
                values: lk.values[r.start * w..r.end * w].to_vec(),
            };
            for (p, buf) in layer.agents.iter_mut().enumerate() {
                buf.push_back(slice(p * per_agent..(p + 1) * per_agent));
            }
            if self.hubs > 0 {
                layer.hub.push_back(slice(self.agents * per_agent..rows));
            }
            if let Some(cap) = self.capacity_blocks {
                for buf in layer.agents.iter_mut().chain(std::iter::once(&mut layer.hub)) {
                    while buf.len() > cap {
                        buf.pop_front();
                    }
                }
            }
        }
        self.cursor += 1;
        self.peak_tokens = self.peak_tokens.max(self.tokens_per_layer());
        Ok(())
    }

    /// Attention context per layer: every agent buffer in agent order, then
    /// the hub buffer, each oldest block first.
    pub fn context(&self) -> Vec<KvContext<T>> {
        let w = self.width;
        self.layers
            .iter()
            .map(|layer| {
                let mut ctx = KvContext::default();
                let push = |buf: &VecDeque<CachedBlock<T>>, ctx: &mut KvContext<T>| -> Vec<KeySegment> {
                    buf.iter()
                        .map(|b| {
                            let start = ctx.keys.len() / w;
                            ctx.keys.extend_from_slice(&b.keys);
                            ctx.values.extend_from_slice(&b.values);
                            KeySegment {
                                block: b.block,
                                rows: start..start + b.rows(w),
                            }
                        })
                        .collect()
                };
                let agent_segments: Vec<Vec<KeySegment>> = layer.agents.iter().map(|b| push(b, &mut ctx)).collect();
                let hub_segments = push(&layer.hub, &mut ctx);
                ctx.agent_segments = agent_segments;
                ctx.hub_segments = hub_segments;
                ctx
            })
            .collect()
    }
}

/// Few-step denoising schedule over integer timesteps in `(0, 1000]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSchedule {
    timesteps: Vec<u32>,
    shift: f64,
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        Self {
            timesteps: vec![1000, 750, 500, 250],
            shift: 5.0,
        }
    }
}

/// `sigma = s*u / (1 + (s-1)*u)` with `u = t / 1000`.
pub fn warp_timestep(t: f64, shift: f64) -> f64 {
    let u = t / 1000.0;
    shift * u / (1.0 + (shift - 1.0) * u)
}

impl DenoiseSchedule {
    pub fn new(timesteps: Vec<u32>, shift: f64) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(format!("timesteps {timesteps:?} are not strictly decreasing")));
        }
        if timesteps.iter().any(|&t| t == 0 || t > 1000) {
            return Err(invalid("timesteps must lie in (0, 1000]"));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(invalid(format!("flow shift {shift} must be positive")));
        }
        Ok(Self { timesteps, shift })
    }

    pub fn from_config(config: &crate::model::ToyModelConfig) -> Result<Self> {
        Self::new(config.timesteps.clone(), config.flow_shift)
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }
}

pub fn schedule_sigmas(schedule: &DenoiseSchedule) -> Vec<f64> {
    schedule.timesteps.iter().map(|&t| warp_timestep(t as f64, schedule.shift)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub mode: AttentionMode,
    pub schedule: DenoiseSchedule,
    pub seed: u64,
    pub parallel: bool,
    /// Record every denoise step's input and velocity.
    pub keep_trace: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::CausalHub,
            schedule: DenoiseSchedule::default(),
            seed: 0,
            parallel: false,
            keep_trace: false,
        }
    }
}

/// One cached forward during generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseStep<T> {
    pub block: usize,
    pub step: usize,
    pub sigma: f64,
    /// Block latents `(P, n, H, W, C)` fed to the model.
    pub input: Vec<T>,
    pub velocity: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct RolloutOutput<T> {
    /// `(P, T, H, W, C)`; block 0 is the given first observation.
    pub latents: Vec<T>,
    /// What each block's cache re-forward saw, `(P, T, H, W, C)`.
    pub context_latents: Vec<T>,
    pub trace: Vec<DenoiseStep<T>>,
    pub stats: AttentionStats,
    pub attention_nanos: u64,
    pub forwards: usize,
    pub peak_cache_tokens: usize,
}

/// Copy frames `[t0, t1)` of every agent out of an agent-major buffer.
pub fn gather_frames<T: Copy>(buf: &[T], agents: usize, frames: usize, frame_len: usize, t0: usize, t1: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(agents * (t1 - t0) * frame_len);
    for p in 0..agents {
        out.extend_from_slice(&buf[(p * frames + t0) * frame_len..(p * frames + t1) * frame_len]);
    }
    out
}

/// Inverse of [`gather_frames`].
pub fn scatter_frames<T: Copy>(buf: &mut [T], src: &[T], agents: usize, frames: usize, frame_len: usize, t0: usize) {
    let per = src.len() / agents.max(1);
    for p in 0..agents {
        let dst = (p * frames + t0) * frame_len;
        buf[dst..dst + per].copy_from_slice(&src[p * per..(p + 1) * per]);
    }
}

/// Generate `(P, T, H, W, C)` latents block by block. The model's topology
/// supplies block size, spatial extent, hub count and window; `frames` and
/// the agent count come from the arguments.
pub fn rollout<T: Scalar>(
    model: &ToyModel<T>,
    first_obs: &[T],
    actions: &[T],
    assignment: &VertexAssignment,
    frames: usize,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput<T>> {
    let c = &model.config;
    let topo = c.topology;
    let agents = assignment.agents();
    let n = topo.block;
    let spec = TopologySpec {
        agents,
        frames,
        ..topo
    };
    spec.validate()?;
    let frame_len = topo.spatial() * c.channels;
    let fields = c.action_kind.fields();
    if first_obs.len() != agents * n * frame_len {
        return Err(Error::ShapeMismatch {
            lhs: vec![first_obs.len()],
            rhs: vec![agents, n, topo.height, topo.width, c.channels],
            context: "first observation vs (P, n, H, W, C)",
        });
    }
    if actions.len() < agents * frames * fields {
        return Err(invalid(format!(
            "action stream covers {} values but {agents} agents x {frames} frames x {fields} fields are needed",
            actions.len()
        )));
    }
    let actions = &actions[..agents * frames * fields];
    let cache_spec = if cfg.mode.uses_hubs() { spec } else { spec.with_hubs(0) };
    let mut caches = init_caches::<T>(&cache_spec, c.layers, c.model_dim)?;
    let sigmas = schedule_sigmas(&cfg.schedule);
    let root = RngStream::new(cfg.seed).split("rollout");
    let mut latents = vec![T::zero(); agents * frames * frame_len];
    let mut context_latents = latents.clone();
    let mut trace = Vec::new();
    let mut stats = AttentionStats::default();
    let mut nanos = 0u64;
    let mut forwards = 0;
    let opts = ForwardOptions::new(cfg.mode).parallel(cfg.parallel);
    scatter_frames(&mut latents, first_obs, agents, frames, frame_len, 0);

    for b in 0..spec.blocks() {
        let (t0, t1) = (b * n, (b + 1) * n);
        let block_actions = gather_frames(actions, agents, frames, fields, t0, t1);
        let ctx = caches.context();
        let mut rng = root.split_indexed("block", b as u64);
        if b > 0 {
            let mut x: Vec<T> = rng.normal_vec(agents * n * frame_len, 1.0);
            for (i, &s) in sigmas.iter().enumerate() {
                let input = ChunkInput {
                    latents: &x,
                    actions: &block_actions,
                    sigmas: &[s],
                    first_frame: t0,
                    frames: n,
                };
                let out = model.forward(&input, assignment, Some(&ctx), opts)?;
                stats += out.stats;
                nanos += out.attention_nanos;
                forwards += 1;
                let next = sigmas.get(i + 1).copied().unwrap_or(0.0);
                let dt = T::from_f64c(next - s);
                if cfg.keep_trace {
                    trace.push(DenoiseStep {
                        block: b,
                        step: i,
                        sigma: s,
                        input: x.clone(),
                        velocity: out.velocity.clone(),
                    });
                }
                x.iter_mut().zip(&out.velocity).for_each(|(a, v)| *a += dt * *v);
            }
            scatter_frames(&mut latents, &x, agents, frames, frame_len, t0);
        }
        // Re-forward the finished block at the context noise level to fill the caches.
        let clean = gather_frames(&latents, agents, frames, frame_len, t0, t1);
        let ctx_in = if c.context_sigma > 0.0 {
            let eps: Vec<T> = rng.split("context").normal_vec(clean.len(), 1.0);
            crate::model::flow_interpolant(&clean, &eps, c.context_sigma)?
        } else {
            clean
        };
        scatter_frames(&mut context_latents, &ctx_in, agents, frames, frame_len, t0);
        let input = ChunkInput {
            latents: &ctx_in,
            actions: &block_actions,
            sigmas: &[c.context_sigma],
            first_frame: t0,
            frames: n,
        };
        let out = model.forward(&input, assignment, Some(&ctx), opts)?;
        stats += out.stats;
        nanos += out.attention_nanos;
        forwards += 1;
        caches.append_block(b, &out.layer_kv)?;
    }
    Ok(RolloutOutput {
        latents,
        context_latents,
        trace,
        stats,
        attention_nanos: nanos,
        forwards,
        peak_cache_tokens: caches.peak_tokens_per_layer(),
    })
}

/// Velocity of block `step.block` from one monolithic forward over the whole
/// sequence: earlier blocks hold their cache-time inputs, later blocks pure
/// noise placeholders. Reference for the cached rollout.
pub fn monolithic_step<T: Scalar>(
    model: &ToyModel<T>,
    output: &RolloutOutput<T>,
    step: &DenoiseStep<T>,
    actions: &[T],
    assignment: &VertexAssignment,
    frames: usize,
    mode: AttentionMode,
) -> Result<Vec<T>> {
    let c = &model.config;
    let agents = assignment.agents();
    let n = c.topology.block;
    let frame_len = c.topology.spatial() * c.channels;
    let fields = c.action_kind.fields();
    let blocks = frames / n;
    let mut lat = output.context_latents.clone();
    for p in 0..agents {
        let start = (p * frames + (step.block + 1) * n) * frame_len;
        let end = (p + 1) * frames * frame_len;
        lat[start..end].iter_mut().for_each(|x| *x = T::zero());
    }
    scatter_frames(&mut lat, &step.input, agents, frames, frame_len, step.block * n);
    let mut sig = vec![c.context_sigma; blocks];
    sig[step.block] = step.sigma;
    sig[step.block + 1..].iter_mut().for_each(|s| *s = 1.0);
    let input = ChunkInput {
        latents: &lat,
        actions: &actions[..agents * frames * fields],
        sigmas: &sig,
        first_frame: 0,
        frames,
    };
    let m = model.with_topology(TopologySpec {
        agents,
        frames,
        ..c.topology
    })?;
    let out = m.forward(&input, assignment, None, ForwardOptions::new(mode))?;
    Ok(gather_frames(&out.velocity, agents, frames, frame_len, step.block * n, (step.block + 1) * n))
}

/// Parse `agent,frame,field_0,...` rows into a `(P, T, fields)` buffer. A
/// header line is skipped; every (agent, frame) pair must appear exactly once.
pub fn parse_action_csv(text: &str, kind: ActionKind, agents: usize, frames: usize) -> Result<Vec<f64>> {
    let fields = kind.fields();
    let mut out = vec![0.0; agents * frames * fields];
    let mut seen = vec![false; agents * frames];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if ln == 0 && cols[0].parse::<usize>().is_err() {
            continue;
        }
        if cols.len() != fields + 2 {
            return Err(invalid(format!("line {}: expected {} columns, got {}", ln + 1, fields + 2, cols.len())));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|e| invalid(format!("line {}: {e}", ln + 1)));
        let (p, t) = (idx(cols[0])?, idx(cols[1])?);
        if p >= agents || t >= frames {
            // Rows beyond the requested rollout are ignored.
            continue;
        }
        let values = cols[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| invalid(format!("line {}: {e}", ln + 1))))
            .collect::<Result<Vec<_>>>()?;
        let frame = ActionFrame::new(kind, values)?;
        let slot = p * frames + t;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(invalid(format!("line {}: duplicate row for agent {p} frame {t}", ln + 1)));
        }
        out[slot * fields..(slot + 1) * fields].copy_from_slice(frame.values());
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(invalid(format!(
            "action stream is missing agent {} frame {}",
            missing / frames,
            missing % frames
        )));
    }
    Ok(out)
}

/// Check that a chunk forward over the caches never indexed another agent's
/// buffer (hub topology only).
pub fn assert_stream_isolation(stats: &AttentionStats, mode: AttentionMode) -> bool {
    !mode.uses_hubs() || stats.cross_agent_reads == 0
}
