//! Probes shared by the test suites and the `verify` subcommand: finite
//! differences, causality perturbations and agent-permutation equivariance.

use crate::error::Result;
use crate::model::{
    flow_matching_loss, AttentionMode, ChunkInput, ForwardOptions, NoiseDraw, Sample, ToyModel,
};
use crate::numerics::{RngStream, Scalar};
use crate::simplex::{sample_assignment, VertexAssignment};

/// Reorder the leading agent axis: output agent `i` is input agent `perm[i]`.
pub fn permute_agents<T: Copy>(buf: &[T], perm: &[usize]) -> Vec<T> {
    let per = buf.len() / perm.len().max(1);
    perm.iter().flat_map(|&p| buf[p * per..(p + 1) * per].iter().copied()).collect()
}

/// Random episode with Gaussian latents and valid random actions.
pub fn random_sample<T: Scalar>(model: &ToyModel<T>, agents: usize, rng: &mut RngStream) -> Result<Sample<T>> {
    let c = &model.config;
    let t = &c.topology;
    let latents = rng.normal_vec(agents * t.frames * t.spatial() * c.channels, 1.0);
    let kind = c.action_kind;
    let mut actions = Vec::with_capacity(agents * t.frames * kind.fields());
    for _ in 0..agents * t.frames {
        for i in 0..kind.fields() {
            let v = if i < kind.discrete() {
                f64::from(rng.uniform() < 0.4)
            } else {
                2.0 * rng.uniform() - 1.0
            };
            actions.push(T::from_f64c(v));
        }
    }
    Ok(Sample {
        latents,
        actions,
        assignment: sample_assignment(agents, c.pool_size, rng)?,
    })
}

pub fn random_noise<T: Scalar>(model: &ToyModel<T>, agents: usize, rng: &mut RngStream) -> Result<NoiseDraw<T>> {
    let c = &model.config;
    let t = &c.topology;
    NoiseDraw::sample(rng, agents * t.frames * t.spatial() * c.channels, t.blocks())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    /// `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)` over the checked entries.
    pub rel_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Central finite differences of the flow-matching loss for every parameter
/// group. `max_entries` caps the entries checked per group (evenly strided).
pub fn gradient_check(
    model: &ToyModel<f64>,
    sample: &Sample<f64>,
    noise: &NoiseDraw<f64>,
    mode: AttentionMode,
    step: f64,
    max_entries: Option<usize>,
) -> Result<Vec<GroupCheck>> {
    let analytic = flow_matching_loss(model, sample, noise, mode, true)?
        .grads
        .expect("gradients requested");
    let names: Vec<(String, Vec<f64>)> = analytic.groups().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
    let mut out = Vec::with_capacity(names.len());
    let mut probe = model.clone();
    for (gi, (name, grad)) in names.iter().enumerate() {
        let len = grad.len();
        let stride = match max_entries {
            Some(m) if m < len => len.div_ceil(m),
            _ => 1,
        };
        let (mut diff, mut na, mut nf, mut checked) = (0.0, 0.0, 0.0, 0);
        for i in (0..len).step_by(stride) {
            let orig = probe.params.groups()[gi].1[i];
            probe.params.groups_mut()[gi].1[i] = orig + step;
            let plus = flow_matching_loss(&probe, sample, noise, mode, false)?.loss;
            probe.params.groups_mut()[gi].1[i] = orig - step;
            let minus = flow_matching_loss(&probe, sample, noise, mode, false)?.loss;
            probe.params.groups_mut()[gi].1[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            diff += (grad[i] - fd).powi(2);
            na += grad[i].powi(2);
            nf += fd.powi(2);
            checked += 1;
        }
        let denom = na.sqrt().max(nf.sqrt());
        out.push(GroupCheck {
            name: name.clone(),
            rel_error: if denom == 0.0 { 0.0 } else { diff.sqrt() / denom },
            checked,
            analytic_norm: na.sqrt(),
        });
    }
    Ok(out)
}

fn full_forward<T: Scalar>(
    model: &ToyModel<T>,
    latents: &[T],
    actions: &[T],
    sigmas: &[f64],
    assignment: &VertexAssignment,
    mode: AttentionMode,
) -> Result<Vec<T>> {
    let input = ChunkInput {
        latents,
        actions,
        sigmas,
        first_frame: 0,
        frames: model.config.topology.frames,
    };
    Ok(model.forward(&input, assignment, None, ForwardOptions::new(mode))?.velocity)
}

/// Indices of output elements in blocks `< first` (agent-major layout).
fn before_block(model_frames: usize, frame_len: usize, block: usize, first: usize, agents: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for p in 0..agents {
        for t in 0..(first * block).min(model_frames) {
            let base = (p * model_frames + t) * frame_len;
            idx.extend(base..base + frame_len);
        }
    }
    idx
}

/// For every block `b`, perturb latents, actions and noise level of every
/// block `>= b` and require outputs of blocks `< b` to stay bit-identical.
pub fn causality_probe<T: Scalar>(model: &ToyModel<T>, sample: &Sample<T>, sigmas: &[f64], rng: &mut RngStream) -> Result<bool> {
    let c = &model.config;
    let t = &c.topology;
    let agents = sample.assignment.agents();
    let frame_len = t.spatial() * c.channels;
    let act_len = c.action_kind.fields();
    let mode = AttentionMode::CausalHub;
    let base = full_forward(model, &sample.latents, &sample.actions, sigmas, &sample.assignment, mode)?;
    for b in 1..t.blocks() {
        let mut lat = sample.latents.clone();
        let mut act = sample.actions.clone();
        let mut sig = sigmas.to_vec();
        for p in 0..agents {
            for f in b * t.block..t.frames {
                let i = (p * t.frames + f) * frame_len;
                for x in &mut lat[i..i + frame_len] {
                    *x += T::from_f64c(rng.normal::<f64>());
                }
                let i = (p * t.frames + f) * act_len;
                for (k, x) in act[i..i + act_len].iter_mut().enumerate() {
                    *x = if k < c.action_kind.discrete() { T::one() - *x } else { *x + T::from_f64c(0.5) };
                }
            }
        }
        for s in &mut sig[b..] {
            *s = 1.0 - *s;
        }
        let out = full_forward(model, &lat, &act, &sig, &sample.assignment, mode)?;
        if before_block(t.frames, c.channels * t.spatial(), t.block, b, agents)
            .into_iter()
            .any(|i| out[i].to_f64c().to_bits() != base[i].to_f64c().to_bits())
        {
            return Ok(false);
        }
        // The perturbation must be visible somewhere, or the probe proves nothing.
        if out == base {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Jointly permute latents, actions and vertex assignment; the output must
/// be the permuted output, bit for bit.
pub fn equivariance_probe<T: Scalar>(
    model: &ToyModel<T>,
    sample: &Sample<T>,
    sigmas: &[f64],
    perm: &[usize],
    mode: AttentionMode,
) -> Result<bool> {
    let base = full_forward(model, &sample.latents, &sample.actions, sigmas, &sample.assignment, mode)?;
    let lat = permute_agents(&sample.latents, perm);
    let act = permute_agents(&sample.actions, perm);
    let asg = sample.assignment.permuted(perm);
    let out = full_forward(model, &lat, &act, sigmas, &asg, mode)?;
    let expect = permute_agents(&base, perm);
    Ok(out.iter().zip(&expect).all(|(a, b)| a.to_f64c().to_bits() == b.to_f64c().to_bits()))
}

/// Loss under joint permutation, bit for bit.
pub fn loss_invariance_probe<T: Scalar>(model: &ToyModel<T>, sample: &Sample<T>, noise: &NoiseDraw<T>, perm: &[usize]) -> Result<bool> {
    let mode = AttentionMode::CausalHub;
    let a = flow_matching_loss(model, sample, noise, mode, false)?.loss;
    let permuted = Sample {
        latents: permute_agents(&sample.latents, perm),
        actions: permute_agents(&sample.actions, perm),
        assignment: sample.assignment.permuted(perm),
    };
    let pn = NoiseDraw {
        eps: permute_agents(&noise.eps, perm),
        sigmas: noise.sigmas.clone(),
    };
    let b = flow_matching_loss(model, &permuted, &pn, mode, false)?.loss;
    Ok(a.to_f64c().to_bits() == b.to_f64c().to_bits())
}

/// Changing agent `q`'s actions leaves every other agent's pre-attention
/// tokens bit-identical.
pub fn action_locality_probe<T: Scalar>(model: &ToyModel<T>, sample: &Sample<T>, sigmas: &[f64], q: usize) -> Result<bool> {
    let c = &model.config;
    let t = &c.topology;
    let agents = sample.assignment.agents();
    fn input<'a, T>(latents: &'a [T], actions: &'a [T], sigmas: &'a [f64], frames: usize) -> ChunkInput<'a, T> {
        ChunkInput {
            latents,
            actions,
            sigmas,
            first_frame: 0,
            frames,
        }
    }
    let mode = AttentionMode::CausalHub;
    let base = model.pre_attention_tokens(&input(&sample.latents, &sample.actions, sigmas, t.frames), agents, mode)?;
    let mut act = sample.actions.clone();
    let per = act.len() / agents;
    for x in &mut act[q * per..(q + 1) * per] {
        *x = T::one() - *x;
    }
    let out = model.pre_attention_tokens(&input(&sample.latents, &act, sigmas, t.frames), agents, mode)?;
    let width = c.model_dim;
    let per_agent = t.frames * t.spatial() * width;
    let agent_rows = agents * per_agent;
    for p in 0..agents {
        let r = p * per_agent..(p + 1) * per_agent;
        if (p == q) == (out[r.clone()] == base[r]) {
            return Ok(false);
        }
    }
    // Hub tokens carry no action bias.
    Ok(out[agent_rows..] == base[agent_rows..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> PropertyResult {
    let t = std::time::Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    PropertyResult {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Fast versions of the property checks, for the `verify` subcommand.
pub fn run_property_suite(seed: u64) -> Vec<PropertyResult> {
    use crate::attention::{block_pairs, masked_attention_reference, sparse_hub_attention, CostMode};
    use crate::bench::fit_log_slope;
    use crate::model::ToyModelConfig;
    use crate::simplex::{complex_pair_distance, Embedding, SimplexPool};
    use crate::streaming::{monolithic_step, rollout, RolloutConfig};
    use crate::topology::{causal_hub_mask, hub_mask, hub_mask_count, TopologySpec};
    use crate::numerics::Tensor;

    let mut out = Vec::new();
    out.push(check("simplex geometry", || {
        let mut worst = 0.0f64;
        for v in 2..=16 {
            let pool = SimplexPool::new(v, v - 1, 1.0)?;
            let vf = v as f64;
            for i in 0..v {
                let a = pool.vertex(i);
                worst = worst.max((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs());
                for j in i + 1..v {
                    let b = pool.vertex(j);
                    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                    let ip: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    worst = worst.max((d - 2.0 * vf / (vf - 1.0)).abs());
                    worst = worst.max((ip + 1.0 / (vf - 1.0)).abs());
                }
            }
        }
        Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
    }));
    out.push(check("complex-phase equidistance", || {
        let mut spread = 0.0f64;
        let mut rel = 0.0f64;
        for v in 2..=8 {
            for alpha in [0.05, 0.1] {
                let pool = SimplexPool::with_embedding(v, v, alpha, Embedding::CenteredOneHot)?;
                let asg = VertexAssignment::identity(v, v)?;
                let d: Vec<f64> = (0..v)
                    .flat_map(|p| (p + 1..v).map(move |q| (p, q)))
                    .map(|(p, q)| complex_pair_distance(&pool, &asg, p, q))
                    .collect::<Result<_>>()?;
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                spread = spread.max(hi - lo);
                let vf = v as f64;
                let small = alpha * alpha * 2.0 * vf / (vf - 1.0);
                rel = rel.max((d[0] - small).abs() / small);
            }
        }
        Ok((spread <= 1e-12 && rel <= 0.01, format!("spread {spread:.2e}, small-angle rel error {rel:.2e}")))
    }));
    out.push(check("sparse vs dense attention", || {
        let mut rng = RngStream::new(seed).split("verify/attention");
        let mut worst = 0.0f32;
        for _ in 0..40 {
            let p = 1 + rng.below(4);
            let n = 1 + rng.below(2);
            let t = n * (1 + rng.below(2));
            let spec = TopologySpec::new(p, t, 1, 1 + rng.below(6), rng.below(9), n, None)?;
            let d = 4;
            let s = spec.seq_len();
            let mk = |r: &mut RngStream| Tensor::new(vec![s, d], r.normal_vec::<f32>(s * d, 1.0));
            let (q, k, v) = (mk(&mut rng)?, mk(&mut rng)?, mk(&mut rng)?);
            let a = sparse_hub_attention(&q, &k, &v, &spec)?;
            let b = masked_attention_reference(&q, &k, &v, &causal_hub_mask(&spec)?)?;
            worst = worst.max(a.max_abs_diff(&b)? as f32);
        }
        Ok((worst <= 1e-5, format!("max deviation {worst:.2e}")))
    }));
    out.push(check("mask structure and count", || {
        let mut ok = true;
        for p in 1..=3 {
            for (t, n) in [(2, 1), (4, 2), (3, 3)] {
                for k in 0..=2 {
                    let spec = TopologySpec::new(p, t, 1, 2, k, n, None)?;
                    let h = hub_mask(&spec)?;
                    let c = causal_hub_mask(&spec)?;
                    ok &= h.count() == hub_mask_count(&spec);
                    let b = spec.blocks();
                    let per = block_pairs(&spec, CostMode::SparseHub) as usize;
                    ok &= c.count() == b * (b + 1) / 2 * per;
                }
            }
        }
        Ok((ok, "hub and causal-hub counts match closed forms".into()))
    }));
    out.push(check("analytic scaling slopes", || {
        let pts = |mode| -> Result<Vec<(f64, f64)>> {
            [8usize, 16, 32]
                .iter()
                .map(|&p| {
                    let s = TopologySpec::new(p, 3, 2, 2, if mode == CostMode::Dense { 0 } else { 2 }, 3, None)?;
                    Ok((p as f64, block_pairs(&s, mode) as f64))
                })
                .collect()
        };
        let dense = fit_log_slope(&pts(CostMode::Dense)?)?;
        let sparse = fit_log_slope(&pts(CostMode::SparseHub)?)?;
        Ok((
            (dense - 2.0).abs() <= 0.01 && sparse <= 1.1,
            format!("dense {dense:.4}, sparse {sparse:.4}"),
        ))
    }));
    out.push(check("gradient check (sampled)", || {
        let m = ToyModel::<f64>::new(ToyModelConfig::tiny(), seed)?;
        let mut rng = RngStream::new(seed).split("verify/grad");
        let s = random_sample(&m, 2, &mut rng)?;
        let n = random_noise(&m, 2, &mut rng)?;
        let checks = gradient_check(&m, &s, &n, AttentionMode::CausalHub, 1e-5, Some(8))?;
        let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        Ok((worst <= 1e-3, format!("{} groups, worst rel error {worst:.2e}", checks.len())))
    }));
    out.push(check("causality and equivariance", || {
        let m = ToyModel::<f32>::new(ToyModelConfig::tiny(), seed)?;
        let mut rng = RngStream::new(seed).split("verify/probes");
        let s = random_sample(&m, 2, &mut rng)?;
        let sig = [0.3, 0.7];
        let causal = causality_probe(&m, &s, &sig, &mut rng)?;
        let equi = equivariance_probe(&m, &s, &sig, &[1, 0], AttentionMode::CausalHub)?;
        let local = action_locality_probe(&m, &s, &sig, 0)?;
        Ok((causal && equi && local, format!("causal {causal}, equivariant {equi}, action-local {local}")))
    }));
    out.push(check("cached vs monolithic rollout", || {
        let base = ToyModel::<f32>::new(ToyModelConfig::desk(), seed)?;
        let frames = 12;
        let m = base.with_topology(TopologySpec {
            frames,
            window: Some(frames),
            ..base.config.topology
        })?;
        let mut rng = RngStream::new(seed).split("verify/rollout");
        let s = random_sample(&m, 2, &mut rng)?;
        let first = rng.normal_vec(2 * 3 * 16, 1.0);
        let cfg = RolloutConfig {
            keep_trace: true,
            ..RolloutConfig::default()
        };
        let out = rollout(&m, &first, &s.actions, &s.assignment, frames, &cfg)?;
        let mut worst = 0.0f32;
        for step in &out.trace {
            let r = monolithic_step(&m, &out, step, &s.actions, &s.assignment, frames, AttentionMode::CausalHub)?;
            worst = step.velocity.iter().zip(&r).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
        Ok((
            worst <= 1e-4 && out.stats.cross_agent_reads == 0,
            format!("max deviation {worst:.2e}, cross-agent reads {}", out.stats.cross_agent_reads),
        ))
    }));
    out.push(check("zero-shot agent scaling", || {
        let m = ToyModel::<f32>::new(ToyModelConfig::desk(), seed)?;
        let m4 = m.with_topology(m.config.topology.with_agents(4)?)?;
        let mut rng = RngStream::new(seed).split("verify/scale");
        let s = random_sample(&m4, 4, &mut rng)?;
        let first = rng.normal_vec(4 * 3 * 16, 1.0);
        let out = rollout(&m4, &first, &s.actions, &s.assignment, 6, &RolloutConfig::default())?;
        let finite = out.latents.iter().all(|x| x.is_finite());
        let equi = equivariance_probe(&m4, &s, &[0.2, 0.6], &[3, 1, 0, 2], AttentionMode::CausalHub)?;
        let causal = causality_probe(&m4, &s, &[0.2, 0.6], &mut rng)?;
        Ok((finite && equi && causal, format!("finite {finite}, equivariant {equi}, causal {causal}")))
    }));
    out
}
