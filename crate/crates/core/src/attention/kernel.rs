use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sorted_sum, Scalar};
use crate::rope::Identity;
use crate::topology::{TopologySpec, Visibility};
use rayon::prelude::*;
use std::ops::Range;

/// Contiguous key rows of one stream within one temporal block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySegment {
    pub block: usize,
    pub rows: Range<usize>,
}

/// Contiguous query rows sharing a stream and a block, and therefore sharing
/// one gathered key set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGroup {
    pub stream: Identity,
    pub block: usize,
    pub rows: Range<usize>,
}

/// Which key rows each query group reads.
#[derive(Debug, Clone)]
pub struct AttentionPlan {
    pub visibility: Visibility,
    pub num_blocks: usize,
    pub queries: Vec<QueryGroup>,
    /// Per agent stream, segments in ascending block order.
    pub agent_keys: Vec<Vec<KeySegment>>,
    /// Hub segments in ascending block order.
    pub hub_keys: Vec<KeySegment>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Query-key pairs whose logits were evaluated (per head).
    pub pairs: u64,
    /// Segment reads where an agent query touched another agent's stream.
    pub cross_agent_reads: u64,
    pub query_rows: u64,
}

impl std::ops::AddAssign for AttentionStats {
    fn add_assign(&mut self, o: Self) {
        self.pairs += o.pairs;
        self.cross_agent_reads += o.cross_agent_reads;
        self.query_rows += o.query_rows;
    }
}

impl AttentionPlan {
    /// Plan over a full sequence laid out as in [`crate::topology::build_layout`],
    /// where queries and keys live in the same buffer.
    pub fn full_sequence(spec: &TopologySpec, visibility: Visibility) -> Result<Self> {
        spec.validate()?;
        let n = spec.block;
        let blocks = spec.blocks();
        let agent_keys: Vec<Vec<KeySegment>> = (0..spec.agents)
            .map(|p| {
                (0..blocks)
                    .map(|b| KeySegment {
                        block: b,
                        rows: spec.agent_range(p, b * n, (b + 1) * n),
                    })
                    .collect()
            })
            .collect();
        let hub_keys: Vec<KeySegment> = if spec.hubs == 0 {
            Vec::new()
        } else {
            (0..blocks)
                .map(|b| KeySegment {
                    block: b,
                    rows: spec.hub_range(b * n, (b + 1) * n),
                })
                .collect()
        };
        let mut queries = Vec::new();
        for (p, segs) in agent_keys.iter().enumerate() {
            queries.extend(segs.iter().map(|s| QueryGroup {
                stream: Identity::Agent(p),
                block: s.block,
                rows: s.rows.clone(),
            }));
        }
        queries.extend(hub_keys.iter().map(|s| QueryGroup {
            stream: Identity::Hub,
            block: s.block,
            rows: s.rows.clone(),
        }));
        Ok(Self {
            visibility,
            num_blocks: blocks,
            queries,
            agent_keys,
            hub_keys,
        })
    }

    /// Key row ranges visible to `group`, grouped by stream (agents in index
    /// order, hub last). Streams with nothing visible are omitted.
    pub fn gather(&self, group: &QueryGroup) -> Vec<(Identity, Vec<Range<usize>>)> {
        let blocks = self.visibility.key_blocks(group.block, self.num_blocks);
        let pick = |segs: &[KeySegment]| -> Vec<Range<usize>> {
            segs.iter()
                .filter(|s| blocks.contains(&s.block) && !s.rows.is_empty())
                .map(|s| s.rows.clone())
                .collect()
        };
        let mut out = Vec::new();
        for (p, segs) in self.agent_keys.iter().enumerate() {
            let id = Identity::Agent(p);
            if self.visibility.streams(group.stream, id) {
                let r = pick(segs);
                if !r.is_empty() {
                    out.push((id, r));
                }
            }
        }
        if self.visibility.streams(group.stream, Identity::Hub) {
            let r = pick(&self.hub_keys);
            if !r.is_empty() {
                out.push((Identity::Hub, r));
            }
        }
        out
    }

    pub fn check_rows(&self, query_rows: usize, key_rows: usize) -> Result<()> {
        for g in &self.queries {
            if g.rows.end > query_rows {
                return Err(Error::OutOfRange(format!("query rows {:?} of {query_rows}", g.rows)));
            }
        }
        for s in self.agent_keys.iter().flatten().chain(&self.hub_keys) {
            if s.rows.end > key_rows {
                return Err(Error::OutOfRange(format!("key rows {:?} of {key_rows}", s.rows)));
            }
        }
        Ok(())
    }
}

#[inline]
fn head<T>(buf: &[T], row: usize, h: usize, width: usize, hd: usize) -> &[T] {
    &buf[row * width + h * hd..row * width + (h + 1) * hd]
}

fn attend_group<T: Scalar>(
    plan: &AttentionPlan,
    group: &QueryGroup,
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    hd: usize,
    out: &mut [T],
) -> AttentionStats {
    let width = heads * hd;
    let streams = plan.gather(group);
    let nkeys: usize = streams.iter().flat_map(|(_, r)| r.iter().map(|x| x.len())).sum();
    let mut stats = AttentionStats {
        pairs: (group.rows.len() * nkeys) as u64,
        query_rows: group.rows.len() as u64,
        cross_agent_reads: 0,
    };
    if let Identity::Agent(p) = group.stream {
        for (id, ranges) in &streams {
            if matches!(id, Identity::Agent(o) if *o != p) {
                stats.cross_agent_reads += ranges.len() as u64;
            }
        }
    }
    if nkeys == 0 {
        // Unreachable for valid plans: every query sees at least its own block.
        return stats;
    }
    let scale = T::one() / T::from_f64c((hd as f64).sqrt());
    let ns = streams.len();
    let mut logits = vec![T::zero(); nkeys];
    let mut partial_o = vec![T::zero(); ns * hd];
    let mut partial_z = vec![T::zero(); ns];
    let mut column = vec![T::zero(); ns];
    for (ri, r) in group.rows.clone().enumerate() {
        for h in 0..heads {
            let qh = head(q, r, h, width, hd);
            let mut max = T::neg_infinity();
            let mut idx = 0;
            for (_, ranges) in &streams {
                for range in ranges {
                    for j in range.clone() {
                        let l = dot(qh, head(k, j, h, width, hd)) * scale;
                        logits[idx] = l;
                        max = max.max(l);
                        idx += 1;
                    }
                }
            }
            idx = 0;
            for (s, (_, ranges)) in streams.iter().enumerate() {
                let o = &mut partial_o[s * hd..(s + 1) * hd];
                o.iter_mut().for_each(|x| *x = T::zero());
                let mut z = T::zero();
                for range in ranges {
                    for j in range.clone() {
                        let e = (logits[idx] - max).exp();
                        z += e;
                        axpy(e, head(v, j, h, width, hd), o);
                        idx += 1;
                    }
                }
                partial_z[s] = z;
            }
            let dst = &mut out[ri * width + h * hd..ri * width + (h + 1) * hd];
            if ns == 1 {
                let inv = T::one() / partial_z[0];
                for (d, o) in dst.iter_mut().zip(&partial_o[..hd]) {
                    *d = *o * inv;
                }
            } else {
                // Cross-stream partials are combined in sorted order so the
                // result is independent of agent numbering.
                column.copy_from_slice(&partial_z);
                let inv = T::one() / sorted_sum(&mut column);
                for (c, d) in dst.iter_mut().enumerate() {
                    for (s, x) in column.iter_mut().enumerate() {
                        *x = partial_o[s * hd + c];
                    }
                    *d = sorted_sum(&mut column) * inv;
                }
            }
        }
    }
    stats
}

/// Sparse attention following `plan`. `q` rows index query groups, `k`/`v`
/// rows index key segments; all buffers are `[rows, heads*head_dim]`.
/// Rows not covered by any query group are left at zero.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    plan: &AttentionPlan,
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    head_dim: usize,
    stats: &mut AttentionStats,
    parallel: bool,
) -> Vec<T> {
    let width = heads * head_dim;
    let mut out = vec![T::zero(); q.len()];
    let mut order: Vec<&QueryGroup> = plan.queries.iter().collect();
    order.sort_by_key(|g| g.rows.start);
    let mut jobs: Vec<(&QueryGroup, &mut [T])> = Vec::with_capacity(order.len());
    let mut rest: &mut [T] = &mut out;
    let mut cursor = 0;
    for g in order {
        assert!(g.rows.start >= cursor, "overlapping query groups");
        let tail = std::mem::take(&mut rest);
        let (_, tail) = tail.split_at_mut((g.rows.start - cursor) * width);
        let (mine, tail) = tail.split_at_mut(g.rows.len() * width);
        jobs.push((g, mine));
        rest = tail;
        cursor = g.rows.end;
    }
    let run = |(g, dst): (&QueryGroup, &mut [T])| attend_group(plan, g, q, k, v, heads, head_dim, dst);
    let total = if parallel {
        jobs.into_par_iter()
            .map(run)
            .reduce(AttentionStats::default, |mut a, b| {
                a += b;
                a
            })
    } else {
        let mut acc = AttentionStats::default();
        for job in jobs {
            acc += run(job);
        }
        acc
    };
    *stats += total;
    out
}

/// Gradients of [`attend`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward<T: Scalar>(
    plan: &AttentionPlan,
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    heads: usize,
    head_dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = heads * head_dim;
    let hd = head_dim;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let scale = T::one() / T::from_f64c((hd as f64).sqrt());
    for group in &plan.queries {
        let keys: Vec<usize> = plan
            .gather(group)
            .into_iter()
            .flat_map(|(_, r)| r.into_iter().flatten())
            .collect();
        let mut probs = vec![T::zero(); keys.len()];
        let mut dprobs = vec![T::zero(); keys.len()];
        for r in group.rows.clone() {
            for h in 0..heads {
                let qh = head(q, r, h, width, hd);
                let go = head(dout, r, h, width, hd);
                let mut max = T::neg_infinity();
                for (p, &j) in probs.iter_mut().zip(&keys) {
                    *p = dot(qh, head(k, j, h, width, hd)) * scale;
                    max = max.max(*p);
                }
                let mut z = T::zero();
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let inv = T::one() / z;
                let mut mean = T::zero();
                for ((p, dp), &j) in probs.iter_mut().zip(dprobs.iter_mut()).zip(&keys) {
                    *p *= inv;
                    *dp = dot(go, head(v, j, h, width, hd));
                    mean += *p * *dp;
                }
                for ((&p, &dp), &j) in probs.iter().zip(&dprobs).zip(&keys) {
                    let ds = p * (dp - mean) * scale;
                    axpy(p, go, &mut dv[j * width + h * hd..j * width + (h + 1) * hd]);
                    axpy(ds, head(k, j, h, width, hd), &mut dq[r * width + h * hd..r * width + (h + 1) * hd]);
                    axpy(ds, qh, &mut dk[j * width + h * hd..j * width + (h + 1) * hd]);
                }
            }
        }
    }
    (dq, dk, dv)
}
