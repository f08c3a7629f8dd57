//! Forward and backward passes over a chunk of consecutive temporal blocks.
//!
//! A chunk may carry per-layer key/value context for earlier blocks; that is
//! how the streaming rollout reads its caches. Training runs the whole
//! sequence as one chunk without context and keeps a tape for the backward
//! pass.

use super::config::AttentionMode;
use super::layers::{layer_norm, layer_norm_backward, sigma_embedding, silu, silu_backward};
use super::params::ModelParams;
use super::action::ActionTape;
use super::config::ToyModelConfig;
use crate::attention::{attend, attend_backward, rotate_heads, AttentionPlan, AttentionStats, KeySegment, QueryGroup};
use crate::error::{invalid, Error, Result};
use crate::numerics::{RngStream, Scalar};
use crate::rope::{Identity, RotaryEncoder, Rotation, TokenCoordinate};
use crate::simplex::VertexAssignment;
use crate::topology::TopologySpec;
use std::time::Instant;

/// Inputs for frames `[first_frame, first_frame + frames)` of every agent.
#[derive(Debug, Clone, Copy)]
pub struct ChunkInput<'a, T> {
    /// `(P, frames, H, W, C)`
    pub latents: &'a [T],
    /// `(P, frames, action fields)`
    pub actions: &'a [T],
    /// One noise level per block of the chunk.
    pub sigmas: &'a [f64],
    pub first_frame: usize,
    pub frames: usize,
}

/// Rotated keys and values of earlier blocks for one layer, with the row
/// segments each stream owns. Segments must be in ascending block order.
#[derive(Debug, Clone, Default)]
pub struct KvContext<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub agent_segments: Vec<Vec<KeySegment>>,
    pub hub_segments: Vec<KeySegment>,
}

/// Keys and values produced for the chunk's own tokens by one layer, laid out
/// like the chunk (agents by frame and spatial index, then hubs).
#[derive(Debug, Clone)]
pub struct LayerKv<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: AttentionMode,
    /// Run attention query groups on the rayon pool.
    pub parallel: bool,
    pub keep_tape: bool,
}

impl ForwardOptions {
    pub fn new(mode: AttentionMode) -> Self {
        Self {
            mode,
            parallel: false,
            keep_tape: false,
        }
    }

    pub fn with_tape(mut self) -> Self {
        self.keep_tape = true;
        self
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `(P, frames, H, W, C)`; hub tokens are not part of the output.
    pub velocity: Vec<T>,
    pub layer_kv: Vec<LayerKv<T>>,
    pub stats: AttentionStats,
    /// Wall-clock time spent inside the attention kernel.
    pub attention_nanos: u64,
    pub tape: Option<Tape<T>>,
}

/// Token geometry of one chunk.
#[derive(Debug, Clone)]
pub struct ChunkGeometry {
    /// Local layout of the chunk (frames counted from zero).
    pub spec: TopologySpec,
    pub first_frame: usize,
    pub first_block: usize,
    /// Absolute coordinates of every chunk token in local order.
    pub coords: Vec<TokenCoordinate>,
}

impl ChunkGeometry {
    pub fn new(config: &ToyModelConfig, agents: usize, first_frame: usize, frames: usize, mode: AttentionMode) -> Result<Self> {
        let t = &config.topology;
        let n = t.block;
        if first_frame % n != 0 {
            return Err(invalid(format!("chunk starts at frame {first_frame}, not a block boundary")));
        }
        let hubs = if mode.uses_hubs() { t.hubs } else { 0 };
        let spec = TopologySpec::new(agents, frames, t.height, t.width, hubs, n, None)?;
        let coords = (0..spec.seq_len())
            .map(|i| {
                spec.coordinate(i).map(|mut c| {
                    c.t += first_frame;
                    c.block += first_frame / n;
                    c
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            first_frame,
            first_block: first_frame / n,
            coords,
        })
    }

    pub fn blocks(&self) -> usize {
        self.spec.blocks()
    }

    pub fn rows(&self) -> usize {
        self.spec.seq_len()
    }

    pub fn agent_rows(&self) -> usize {
        self.spec.agent_tokens()
    }

    /// Local block of every row.
    pub fn row_blocks(&self) -> Vec<usize> {
        self.coords.iter().map(|c| c.block - self.first_block).collect()
    }

    /// Plan where chunk queries read `context` rows followed by chunk rows.
    pub fn plan<T>(&self, mode: AttentionMode, config: &ToyModelConfig, context: Option<&KvContext<T>>) -> Result<AttentionPlan> {
        let s = &self.spec;
        let n = s.block;
        let offset = context.map(|c| c.agent_segments.iter().flatten().chain(&c.hub_segments).map(|k| k.rows.end).max().unwrap_or(0)).unwrap_or(0);
        let mut agent_keys: Vec<Vec<KeySegment>> = match context {
            Some(c) => {
                if c.agent_segments.len() != s.agents {
                    return Err(Error::ShapeMismatch {
                        lhs: vec![c.agent_segments.len()],
                        rhs: vec![s.agents],
                        context: "context streams vs agents",
                    });
                }
                c.agent_segments.clone()
            }
            None => vec![Vec::new(); s.agents],
        };
        let mut hub_keys = context.map(|c| c.hub_segments.clone()).unwrap_or_default();
        let mut queries = Vec::new();
        for lb in 0..s.blocks() {
            let block = self.first_block + lb;
            for (p, keys) in agent_keys.iter_mut().enumerate() {
                let rows = s.agent_range(p, lb * n, (lb + 1) * n);
                keys.push(KeySegment {
                    block,
                    rows: rows.start + offset..rows.end + offset,
                });
                queries.push(QueryGroup {
                    stream: Identity::Agent(p),
                    block,
                    rows,
                });
            }
            if s.hubs > 0 {
                let rows = s.hub_range(lb * n, (lb + 1) * n);
                hub_keys.push(KeySegment {
                    block,
                    rows: rows.start + offset..rows.end + offset,
                });
                queries.push(QueryGroup {
                    stream: Identity::Hub,
                    block,
                    rows,
                });
            }
        }
        for segs in agent_keys.iter().chain(std::iter::once(&hub_keys)) {
            if segs.windows(2).any(|w| w[0].block >= w[1].block) {
                return Err(invalid("context segments must precede the chunk in ascending block order"));
            }
        }
        Ok(AttentionPlan {
            visibility: mode.visibility(&config.topology),
            num_blocks: self.first_block + s.blocks(),
            queries,
            agent_keys,
            hub_keys,
        })
    }
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    mods: Vec<T>,
    n1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    mixed: Vec<T>,
    n2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
}

/// Everything the backward pass needs from a forward.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    geometry: ChunkGeometry,
    plan: AttentionPlan,
    rotations: Vec<Rotation<T>>,
    latents: Vec<T>,
    emb: Vec<T>,
    c_pre: Vec<T>,
    c: Vec<T>,
    u: Vec<T>,
    action: ActionTape<T>,
    layers: Vec<LayerTape<T>>,
    final_mods: Vec<T>,
    nf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
}

/// Toy multi-agent diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    pub params: ModelParams<T>,
}

fn modulate<T: Scalar>(xhat: &[T], mods: &[T], row_blocks: &[usize], d: usize, stride: usize, shift: usize, scale: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(xhat.len());
    for (row, &b) in xhat.chunks_exact(d).zip(row_blocks) {
        let m = &mods[b * stride..(b + 1) * stride];
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, &x)| x * (T::one() + m[scale + i]) + m[shift + i]),
        );
    }
    out
}

/// Accumulates shift/scale gradients into `dmods` and returns `dL/dxhat`.
#[allow(clippy::too_many_arguments)]
fn modulate_backward<T: Scalar>(
    xhat: &[T],
    dh: &[T],
    mods: &[T],
    dmods: &mut [T],
    row_blocks: &[usize],
    d: usize,
    stride: usize,
    shift: usize,
    scale: usize,
) -> Vec<T> {
    let mut dx = Vec::with_capacity(dh.len());
    for ((xr, gr), &b) in xhat.chunks_exact(d).zip(dh.chunks_exact(d)).zip(row_blocks) {
        let m = &mods[b * stride..(b + 1) * stride];
        let dm = &mut dmods[b * stride..(b + 1) * stride];
        for i in 0..d {
            dm[shift + i] += gr[i];
            dm[scale + i] += gr[i] * xr[i];
            dx.push(gr[i] * (T::one() + m[scale + i]));
        }
    }
    dx
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(config: ToyModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &RngStream::new(seed).split("model"))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ToyModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::<T>::init(&config, &RngStream::new(0))?;
        reference.check_shapes(&params)?;
        Ok(Self { config, params })
    }

    /// Same weights over a different topology (agent count, frames, window).
    /// Spatial extent and hub count must stay the same.
    pub fn with_topology(&self, topology: TopologySpec) -> Result<Self> {
        let t = &self.config.topology;
        if (topology.height, topology.width, topology.hubs) != (t.height, t.width, t.hubs) {
            return Err(Error::ShapeMismatch {
                lhs: vec![topology.height, topology.width, topology.hubs],
                rhs: vec![t.height, t.width, t.hubs],
                context: "spatial extent and hub count are baked into the weights",
            });
        }
        let config = self.config.with_topology(topology);
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encoder(&self, assignment: &VertexAssignment, frames: usize) -> Result<RotaryEncoder> {
        let t = &self.config.topology;
        RotaryEncoder::new(&self.config.rope, &self.config.pool()?, assignment, (frames, t.height, t.width))
    }

    fn check_input(&self, input: &ChunkInput<'_, T>, geo: &ChunkGeometry) -> Result<()> {
        let s = &geo.spec;
        let c = &self.config;
        let want = s.agent_tokens() * c.channels;
        if input.latents.len() != want {
            return Err(Error::ShapeMismatch {
                lhs: vec![input.latents.len()],
                rhs: vec![s.agents, s.frames, s.height, s.width, c.channels],
                context: "chunk latents vs (P, F, H, W, C)",
            });
        }
        let want = s.agents * s.frames * c.action_kind.fields();
        if input.actions.len() != want {
            return Err(Error::ShapeMismatch {
                lhs: vec![input.actions.len()],
                rhs: vec![s.agents, s.frames, c.action_kind.fields()],
                context: "chunk actions vs (P, F, fields)",
            });
        }
        if input.sigmas.len() != s.blocks() {
            return Err(Error::ShapeMismatch {
                lhs: vec![input.sigmas.len()],
                rhs: vec![s.blocks()],
                context: "noise levels vs blocks",
            });
        }
        if let Some(bad) = input.sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::OutOfRange(format!("sigma {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Velocity prediction for one chunk. `context` holds one entry per layer.
    pub fn forward(
        &self,
        input: &ChunkInput<'_, T>,
        assignment: &VertexAssignment,
        context: Option<&[KvContext<T>]>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        let c = &self.config;
        let p = &self.params;
        let d = c.model_dim;
        let agents = assignment.agents();
        let geo = ChunkGeometry::new(c, agents, input.first_frame, input.frames, opts.mode)?;
        self.check_input(input, &geo)?;
        if let Some(ctx) = context {
            if ctx.len() != c.layers {
                return Err(Error::ShapeMismatch {
                    lhs: vec![ctx.len()],
                    rhs: vec![c.layers],
                    context: "context layers",
                });
            }
            if opts.keep_tape {
                return Err(invalid("backward through cached context is not supported"));
            }
        }
        let encoder = self.encoder(assignment, input.first_frame + input.frames)?;
        let rotations: Vec<Rotation<T>> = geo
            .coords
            .iter()
            .map(|co| encoder.angles(co).map(|a| Rotation::from_angles(&a)))
            .collect::<Result<_>>()?;
        let row_blocks = geo.row_blocks();
        let rows = geo.rows();
        let agent_rows = geo.agent_rows();
        let spatial = geo.spec.spatial();

        // Conditioning, one vector per block.
        let emb: Vec<T> = input
            .sigmas
            .iter()
            .flat_map(|&s| sigma_embedding::<T>(s, c.sigma_embed_dim))
            .collect();
        let c_pre = p.sigma.forward(&emb);
        let cond: Vec<T> = c_pre.iter().map(|&x| silu(x)).collect();

        // Token embedding.
        let mut x = p.embed.forward(input.latents);
        for _ in 0..geo.spec.frames {
            x.extend_from_slice(&p.hub_tokens[..geo.spec.hubs * d]);
        }
        debug_assert_eq!(x.len(), rows * d);

        let (u, action_tape) = p.action.forward(input.actions);

        let mut stats = AttentionStats::default();
        let mut nanos = 0u64;
        let mut layer_kv = Vec::with_capacity(c.layers);
        let mut tapes = Vec::new();
        let plan_ctx: Vec<AttentionPlan> = match context {
            Some(ctx) => ctx.iter().map(|k| geo.plan(opts.mode, c, Some(k))).collect::<Result<_>>()?,
            None => vec![geo.plan::<T>(opts.mode, c, None)?],
        };
        for (li, layer) in p.layers.iter().enumerate() {
            let beta = layer.action_proj.forward(&u);
            for (r, row) in x[..agent_rows * d].chunks_exact_mut(d).enumerate() {
                let b = &beta[(r / spatial) * d..(r / spatial + 1) * d];
                row.iter_mut().zip(b).for_each(|(a, b)| *a += *b);
            }
            let mods = layer.modulation.forward(&cond);
            let (n1, rstd1) = layer_norm(&x, d);
            let h1 = modulate(&n1, &mods, &row_blocks, d, 4 * d, 0, d);
            let mut q = layer.attn.query.forward(&h1);
            let mut k = layer.attn.key.forward(&h1);
            let v = layer.attn.value.forward(&h1);
            rotate_heads(&mut q, &rotations, c.head_dim, false);
            rotate_heads(&mut k, &rotations, c.head_dim, false);
            let plan = &plan_ctx[if context.is_some() { li } else { 0 }];
            let joined = context.map(|ctx| {
                let ctx = &ctx[li];
                let mut keys = ctx.keys.clone();
                keys.extend_from_slice(&k);
                let mut values = ctx.values.clone();
                values.extend_from_slice(&v);
                (keys, values)
            });
            let (keys, values) = match &joined {
                Some((a, b)) => (a.as_slice(), b.as_slice()),
                None => (k.as_slice(), v.as_slice()),
            };
            let start = Instant::now();
            let mixed = attend(plan, &q, keys, values, c.heads, c.head_dim, &mut stats, opts.parallel);
            nanos += start.elapsed().as_nanos() as u64;
            let o = layer.attn.output.forward(&mixed);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += *b);
            let (n2, rstd2) = layer_norm(&x, d);
            let h2 = modulate(&n2, &mods, &row_blocks, d, 4 * d, 2 * d, 3 * d);
            let ff_pre = layer.ff_in.forward(&h2);
            let ff_act: Vec<T> = ff_pre.iter().map(|&a| silu(a)).collect();
            let y = layer.ff_out.forward(&ff_act);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += *b);
            if opts.keep_tape {
                tapes.push(LayerTape {
                    mods,
                    n1,
                    rstd1,
                    h1,
                    q,
                    k: k.clone(),
                    v: v.clone(),
                    mixed,
                    n2,
                    rstd2,
                    h2,
                    ff_pre,
                    ff_act,
                });
            }
            layer_kv.push(LayerKv { keys: k, values: v });
        }

        let final_mods = p.final_mod.forward(&cond);
        let (nf, rstdf) = layer_norm(&x[..agent_rows * d], d);
        let hf = modulate(&nf, &final_mods, &row_blocks[..agent_rows], d, 2 * d, 0, d);
        let velocity = p.out.forward(&hf);

        let tape = opts.keep_tape.then(|| Tape {
            plan: plan_ctx.into_iter().next().expect("one plan"),
            geometry: geo,
            rotations,
            latents: input.latents.to_vec(),
            emb,
            c_pre,
            c: cond,
            u,
            action: action_tape,
            layers: tapes,
            final_mods,
            nf,
            rstdf,
            hf,
        });
        Ok(ForwardOutput {
            velocity,
            layer_kv,
            stats,
            attention_nanos: nanos,
            tape,
        })
    }

    /// Token states entering the first attention layer: embeddings plus the
    /// first layer's action bias. Used by locality probes.
    pub fn pre_attention_tokens(&self, input: &ChunkInput<'_, T>, agents: usize, mode: AttentionMode) -> Result<Vec<T>> {
        let c = &self.config;
        let p = &self.params;
        let d = c.model_dim;
        let geo = ChunkGeometry::new(c, agents, input.first_frame, input.frames, mode)?;
        self.check_input(input, &geo)?;
        let mut x = p.embed.forward(input.latents);
        for _ in 0..geo.spec.frames {
            x.extend_from_slice(&p.hub_tokens[..geo.spec.hubs * d]);
        }
        let (u, _) = p.action.forward(input.actions);
        let beta = p.layers[0].action_proj.forward(&u);
        let spatial = geo.spec.spatial();
        for (r, row) in x[..geo.agent_rows() * d].chunks_exact_mut(d).enumerate() {
            let b = &beta[(r / spatial) * d..(r / spatial + 1) * d];
            row.iter_mut().zip(b).for_each(|(a, b)| *a += *b);
        }
        Ok(x)
    }

    /// Gradients of `sum(dvelocity * velocity)` with respect to every parameter.
    pub fn backward(&self, tape: &Tape<T>, dvelocity: &[T]) -> Result<ModelParams<T>> {
        let c = &self.config;
        let p = &self.params;
        let d = c.model_dim;
        let geo = &tape.geometry;
        let rows = geo.rows();
        let agent_rows = geo.agent_rows();
        let spatial = geo.spec.spatial();
        let row_blocks = geo.row_blocks();
        let nb = geo.blocks();
        if dvelocity.len() != agent_rows * c.channels {
            return Err(Error::ShapeMismatch {
                lhs: vec![dvelocity.len()],
                rhs: vec![agent_rows * c.channels],
                context: "velocity gradient",
            });
        }
        let mut g = p.zeros_like();
        let mut dcond = vec![T::zero(); nb * d];

        // Output head.
        let dhf = p.out.backward(&tape.hf, dvelocity, &mut g.out);
        let mut dfm = vec![T::zero(); nb * 2 * d];
        let dnf = modulate_backward(&tape.nf, &dhf, &tape.final_mods, &mut dfm, &row_blocks[..agent_rows], d, 2 * d, 0, d);
        let mut dx = layer_norm_backward(&tape.nf, &tape.rstdf, &dnf, d);
        dx.resize(rows * d, T::zero());
        let dc = p.final_mod.backward(&tape.c, &dfm, &mut g.final_mod);
        dcond.iter_mut().zip(&dc).for_each(|(a, b)| *a += *b);

        let mut du = vec![T::zero(); tape.u.len()];
        for (li, (layer, lt)) in p.layers.iter().zip(&tape.layers).enumerate().rev() {
            let gl = &mut g.layers[li];
            let mut dmods = vec![T::zero(); nb * 4 * d];
            // Feedforward branch.
            let dact = layer.ff_out.backward(&lt.ff_act, &dx, &mut gl.ff_out);
            let dpre = silu_backward(&lt.ff_pre, &dact);
            let dh2 = layer.ff_in.backward(&lt.h2, &dpre, &mut gl.ff_in);
            let dn2 = modulate_backward(&lt.n2, &dh2, &lt.mods, &mut dmods, &row_blocks, d, 4 * d, 2 * d, 3 * d);
            let dx1 = layer_norm_backward(&lt.n2, &lt.rstd2, &dn2, d);
            dx.iter_mut().zip(&dx1).for_each(|(a, b)| *a += *b);
            // Attention branch.
            let dmixed = layer.attn.output.backward(&lt.mixed, &dx, &mut gl.attn.output);
            let (mut dq, mut dk, dv) = attend_backward(&tape.plan, &lt.q, &lt.k, &lt.v, &dmixed, c.heads, c.head_dim);
            rotate_heads(&mut dq, &tape.rotations, c.head_dim, true);
            rotate_heads(&mut dk, &tape.rotations, c.head_dim, true);
            let mut dh1 = layer.attn.query.backward(&lt.h1, &dq, &mut gl.attn.query);
            let dh1k = layer.attn.key.backward(&lt.h1, &dk, &mut gl.attn.key);
            let dh1v = layer.attn.value.backward(&lt.h1, &dv, &mut gl.attn.value);
            for ((a, b), c2) in dh1.iter_mut().zip(&dh1k).zip(&dh1v) {
                *a += *b + *c2;
            }
            let dn1 = modulate_backward(&lt.n1, &dh1, &lt.mods, &mut dmods, &row_blocks, d, 4 * d, 0, d);
            let dxb = layer_norm_backward(&lt.n1, &lt.rstd1, &dn1, d);
            dx.iter_mut().zip(&dxb).for_each(|(a, b)| *a += *b);
            // Modulation.
            let dc = layer.modulation.backward(&tape.c, &dmods, &mut gl.modulation);
            dcond.iter_mut().zip(&dc).for_each(|(a, b)| *a += *b);
            // Action bias: every spatial token of (agent, frame) shares one beta.
            let mut dbeta = vec![T::zero(); tape.u.len()];
            for (r, row) in dx[..agent_rows * d].chunks_exact(d).enumerate() {
                let dst = &mut dbeta[(r / spatial) * d..(r / spatial + 1) * d];
                dst.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
            }
            let dul = layer.action_proj.backward(&tape.u, &dbeta, &mut gl.action_proj);
            du.iter_mut().zip(&dul).for_each(|(a, b)| *a += *b);
        }

        // Embeddings.
        p.embed.accumulate_grad(&tape.latents, &dx[..agent_rows * d], &mut g.embed);
        let hubs = geo.spec.hubs;
        for (i, row) in dx[agent_rows * d..].chunks_exact(d).enumerate() {
            let slot = i % hubs.max(1);
            let dst = &mut g.hub_tokens[slot * d..(slot + 1) * d];
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
        p.action.backward(&tape.action, &du, &mut g.action);
        let dcpre = silu_backward(&tape.c_pre, &dcond);
        p.sigma.accumulate_grad(&tape.emb, &dcpre, &mut g.sigma);
        Ok(g)
    }
}
