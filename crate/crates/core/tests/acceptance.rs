//! Acceptance suite: one PASS/FAIL line per criterion. Oracles here are
//! written independently of the library code paths they check.

use hubworld::attention::{block_pairs, masked_attention_reference, sparse_hub_attention, CostMode};
use hubworld::bench::{fit_scaling_exponent, run_benchmark, BenchConfig, Metric};
use hubworld::model::{train_toy, AttentionMode, SynthWorld, ToyModel, ToyModelConfig, TrainConfig};
use hubworld::numerics::{RngStream, Tensor};
use hubworld::simplex::{sample_assignment, Embedding, SimplexPool, VertexAssignment};
use hubworld::streaming::{gather_frames, monolithic_step, rollout, RolloutConfig};
use hubworld::topology::{causal_hub_mask, hub_mask, TopologySpec};
use hubworld::verify::{
    action_locality_probe, causality_probe, equivariance_probe, gradient_check, loss_invariance_probe, random_noise,
    random_sample,
};
use std::time::{Duration, Instant};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "simplex geometry", budget: Duration::from_secs(1), run: simplex_geometry },
        Criterion { id: 2, name: "complex-phase equidistance", budget: Duration::from_secs(1), run: complex_phase },
        Criterion { id: 3, name: "sparse/dense oracle equivalence", budget: Duration::from_secs(60), run: sparse_dense },
        Criterion { id: 4, name: "mask correctness", budget: Duration::from_secs(10), run: mask_correctness },
        Criterion { id: 5, name: "scaling", budget: Duration::from_secs(600), run: scaling },
        Criterion { id: 6, name: "gradient checks", budget: Duration::from_secs(300), run: gradients },
        Criterion { id: 7, name: "causality and equivariance", budget: Duration::from_secs(60), run: causality },
        Criterion { id: 8, name: "streaming equivalence", budget: Duration::from_secs(300), run: streaming },
        Criterion { id: 9, name: "toy training", budget: Duration::from_secs(900), run: training },
        Criterion { id: 10, name: "zero-shot agent scaling", budget: Duration::from_secs(300), run: zero_shot },
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let (ok, detail) = match (c.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let took = start.elapsed();
        let in_budget = took <= c.budget;
        let pass = ok && in_budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {:>2} {:<32} {:>8.2}s (budget {}s{}) {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", exceeded" },
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// 1 -------------------------------------------------------------------------

fn simplex_geometry() -> Outcome {
    let mut worst = 0.0f64;
    let mut pools = 0;
    for v in 2..=16usize {
        let vf = v as f64;
        for (d_half, emb) in [(v - 1, Embedding::Helmert), (v + 2, Embedding::Helmert), (v, Embedding::CenteredOneHot)] {
            let pool = SimplexPool::with_embedding(v, d_half, 1.0, emb)?;
            pools += 1;
            for i in 0..v {
                let a = pool.vertex(i);
                worst = worst.max((dot(a, a) - 1.0).abs());
                for j in 0..v {
                    if i == j {
                        continue;
                    }
                    let b = pool.vertex(j);
                    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    worst = worst.max((d2 - 2.0 * vf / (vf - 1.0)).abs());
                    worst = worst.max((dot(a, b) + 1.0 / (vf - 1.0)).abs());
                }
            }
            // Vertices of a centred regular simplex sum to zero.
            for r in 0..d_half {
                let s: f64 = (0..v).map(|i| pool.vertex(i)[r]).sum();
                worst = worst.max(s.abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("{pools} pools, V=2..16, max deviation {worst:.2e}")))
}

// 2 -------------------------------------------------------------------------

/// `sum_r |exp(i a a_r) - exp(i a b_r)|^2` via explicit real/imaginary parts.
fn complex_sq_dist(alpha: f64, a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let re = (alpha * x).cos() - (alpha * y).cos();
            let im = (alpha * x).sin() - (alpha * y).sin();
            re * re + im * im
        })
        .sum()
}

fn complex_phase() -> Outcome {
    let mut spread = 0.0f64;
    let mut small_angle = 0.0f64;
    for v in 2..=16usize {
        let vf = v as f64;
        for d_half in [v, v + 4] {
            for alpha in [0.01, 0.05, 0.1, 0.5, 1.0, 2.0] {
                let pool = SimplexPool::with_embedding(v, d_half, alpha, Embedding::CenteredOneHot)?;
                let mut d = Vec::new();
                for i in 0..v {
                    for j in i + 1..v {
                        d.push(complex_sq_dist(alpha, pool.vertex(i), pool.vertex(j)));
                        let asg = VertexAssignment::identity(v, v)?;
                        let lib = hubworld::simplex::complex_pair_distance(&pool, &asg, i, j)?;
                        spread = spread.max((lib - d[d.len() - 1]).abs());
                    }
                }
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                spread = spread.max(hi - lo);
                if alpha <= 0.1 {
                    let approx = alpha * alpha * 2.0 * vf / (vf - 1.0);
                    small_angle = small_angle.max((d[0] - approx).abs() / approx);
                }
            }
        }
    }
    Ok((
        spread <= 1e-12 && small_angle <= 0.01,
        format!("pairwise spread {spread:.2e}, small-angle rel error {small_angle:.2e} (alpha <= 0.1)"),
    ))
}

// 3, 4 ----------------------------------------------------------------------

/// Token identity as `(agent or None for hub, frame)` from the layout
/// convention: agent tokens `(agent, frame, spatial)` then hubs `(frame, slot)`.
fn decode(p: usize, t: usize, l: usize, k: usize, i: usize) -> (Option<usize>, usize) {
    let agent_tokens = p * t * l;
    if i < agent_tokens {
        (Some(i / (t * l)), (i / l) % t)
    } else {
        (None, (i - agent_tokens) / k)
    }
}

fn brute_hub(p: usize, t: usize, l: usize, k: usize, i: usize, j: usize) -> bool {
    match (decode(p, t, l, k, i).0, decode(p, t, l, k, j).0) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    }
}

fn brute_causal_hub(p: usize, t: usize, l: usize, k: usize, n: usize, i: usize, j: usize) -> bool {
    let bi = decode(p, t, l, k, i).1 / n;
    let bj = decode(p, t, l, k, j).1 / n;
    bj <= bi && brute_hub(p, t, l, k, i, j)
}

/// Dense softmax attention in 64-bit over an explicit predicate.
fn oracle_attention(q: &[f32], kk: &[f32], v: &[f32], s: usize, d: usize, allow: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let mut out = vec![0.0; s * d];
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..s {
        let logits: Vec<Option<f64>> = (0..s)
            .map(|j| {
                allow(i, j).then(|| (0..d).map(|c| q[i * d + c] as f64 * kk[j * d + c] as f64).sum::<f64>() * scale)
            })
            .collect();
        let m = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |x| (x - m).exp())).collect();
        let z: f64 = w.iter().sum();
        for j in 0..s {
            for c in 0..d {
                out[i * d + c] += w[j] / z * v[j * d + c] as f64;
            }
        }
    }
    out
}

fn sparse_dense() -> Outcome {
    let mut rng = RngStream::new(2024).split("acceptance/sparse-dense");
    let (mut vs_ref, mut vs_oracle) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let p = 1 + rng.below(4);
        let t = 1 + rng.below(4);
        let divisors: Vec<usize> = (1..=t).filter(|n| t % n == 0).collect();
        let n = divisors[rng.below(divisors.len())];
        let l = 1 + rng.below(6);
        let k = rng.below(9);
        let d = 2 + rng.below(7);
        let spec = TopologySpec::new(p, t, 1, l, k, n, None)?;
        let s = spec.seq_len();
        let q: Vec<f32> = rng.normal_vec(s * d, 1.0);
        let kk: Vec<f32> = rng.normal_vec(s * d, 1.0);
        let v: Vec<f32> = rng.normal_vec(s * d, 1.0);
        let tq = Tensor::new(vec![s, d], q.clone())?;
        let tk = Tensor::new(vec![s, d], kk.clone())?;
        let tv = Tensor::new(vec![s, d], v.clone())?;
        let sparse = sparse_hub_attention(&tq, &tk, &tv, &spec)?;
        let dense = masked_attention_reference(&tq, &tk, &tv, &causal_hub_mask(&spec)?)?;
        vs_ref = vs_ref.max(sparse.max_abs_diff(&dense)? as f64);
        let oracle = oracle_attention(&q, &kk, &v, s, d, |i, j| brute_causal_hub(p, t, l, k, n, i, j));
        for (a, b) in sparse.data().iter().zip(&oracle) {
            vs_oracle = vs_oracle.max((*a as f64 - b).abs());
        }
    }
    Ok((
        vs_ref <= 1e-5 && vs_oracle <= 1e-5,
        format!("200 specs, vs masked reference {vs_ref:.2e}, vs 64-bit brute-force oracle {vs_oracle:.2e}"),
    ))
}

fn mask_correctness() -> Outcome {
    let mut specs = 0;
    let mut mismatches = 0usize;
    for p in 1..=3usize {
        for t in 1..=4usize {
            for n in (1..=t).filter(|n| t % n == 0) {
                for l in 1..=3usize {
                    for k in 0..=2usize {
                        let spec = TopologySpec::new(p, t, 1, l, k, n, None)?;
                        let s = spec.seq_len();
                        let causal = causal_hub_mask(&spec)?;
                        let hub = hub_mask(&spec)?;
                        let mut brute_count = 0;
                        for i in 0..s {
                            for j in 0..s {
                                let want = brute_causal_hub(p, t, l, k, n, i, j);
                                brute_count += usize::from(want);
                                mismatches += usize::from(causal.get(i, j) != want);
                                mismatches += usize::from(hub.get(i, j) != brute_hub(p, t, l, k, i, j));
                            }
                        }
                        // Per (query block, key block <= query block): agent self
                        // pairs, agent<->hub pairs in both directions, hub-hub pairs.
                        let (b, nl, nk) = (t / n, n * l, n * k);
                        let closed = b * (b + 1) / 2 * (p * nl * nl + 2 * p * nl * nk + nk * nk);
                        mismatches += usize::from(causal.count() != closed) + usize::from(brute_count != closed);
                        specs += 1;
                    }
                }
            }
        }
    }
    Ok((mismatches == 0, format!("{specs} exhaustive specs, {mismatches} mismatched entries or counts")))
}

// 5 -------------------------------------------------------------------------

/// Ordinary least squares slope of ln y against ln x.
fn ols_log_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn scaling() -> Outcome {
    let (n, l, k) = (3usize, 4usize, 2usize);
    let mut dense_pts = Vec::new();
    let mut sparse_pts = Vec::new();
    let mut formula_ok = true;
    for p in [8usize, 16, 32] {
        let spec = TopologySpec::new(p, n, 2, 2, k, n, None)?;
        let (nl, nk) = (n * l, n * k);
        let dense = (p * nl) * (p * nl);
        let sparse = p * nl * nl + 2 * p * nl * nk + nk * nk;
        formula_ok &= block_pairs(&spec.with_hubs(0), CostMode::Dense) == dense as u64;
        formula_ok &= block_pairs(&spec, CostMode::SparseHub) == sparse as u64;
        dense_pts.push((p as f64, dense as f64));
        sparse_pts.push((p as f64, sparse as f64));
    }
    let dense_slope = ols_log_slope(&dense_pts);
    let sparse_slope = ols_log_slope(&sparse_pts);

    let cfg = BenchConfig::default();
    let records = run_benchmark(&cfg)?;
    let counters = records.iter().all(|r| r.counters_agree());
    let dense_wall = fit_scaling_exponent(&records, CostMode::Dense, Metric::WallClock)?;
    let sparse_wall = fit_scaling_exponent(&records, CostMode::SparseHub, Metric::WallClock)?;
    let pass = formula_ok
        && counters
        && sparse_slope <= 1.1
        && (dense_slope - 2.0).abs() <= 0.01
        && sparse_wall < 1.3
        && dense_wall > 1.7;
    Ok((
        pass,
        format!(
            "analytic slopes dense {dense_slope:.4} sparse {sparse_slope:.4}; wall-clock exponents over P={:?} dense {dense_wall:.3} sparse {sparse_wall:.3}; counters agree {counters}",
            cfg.agents
        ),
    ))
}

// 6 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let model = ToyModel::<f64>::new(ToyModelConfig::tiny(), 11)?;
    let mut rng = RngStream::new(11).split("acceptance/grad");
    let sample = random_sample(&model, 2, &mut rng)?;
    let noise = random_noise(&model, 2, &mut rng)?;
    let total: usize = model.params.groups().iter().map(|(_, g)| g.len()).sum();
    let mut worst = (0.0f64, String::new());
    let mut all = true;
    let mut groups = 0;
    for mode in [AttentionMode::CausalHub, AttentionMode::BidirectionalDense] {
        let checks = gradient_check(&model, &sample, &noise, mode, 1e-5, None)?;
        let entries: usize = checks.iter().map(|c| c.checked).sum();
        all &= entries == total;
        for c in &checks {
            all &= c.passes(1e-3);
            if mode == AttentionMode::CausalHub {
                all &= c.analytic_norm > 0.0;
            }
            if c.rel_error >= worst.0 {
                worst = (c.rel_error, format!("{} ({mode:?})", c.name));
            }
        }
        groups = checks.len();
    }
    Ok((
        all,
        format!("{groups} groups x 2 modes, {total} entries each, worst rel error {:.2e} at {}", worst.0, worst.1),
    ))
}

// 7 -------------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn causality() -> Outcome {
    let base = ToyModel::<f32>::new(ToyModelConfig::tiny(), 5)?;
    // Four frames so there are several blocks to perturb.
    let model = base.with_topology(TopologySpec {
        agents: 3,
        frames: 4,
        ..base.config.topology
    })?;
    let mut rng = RngStream::new(5).split("acceptance/probes");
    let (mut causal, mut equi, mut invariant, mut local) = (true, true, true, true);
    let mut perms_checked = 0;
    for _ in 0..3 {
        let sample = random_sample(&model, 3, &mut rng)?;
        let noise = random_noise(&model, 3, &mut rng)?;
        let sigmas: Vec<f64> = (0..model.config.topology.blocks()).map(|_| rng.uniform()).collect();
        causal &= causality_probe(&model, &sample, &sigmas, &mut rng)?;
        for perm in permutations(3) {
            for mode in [AttentionMode::CausalHub, AttentionMode::CausalDense, AttentionMode::BidirectionalDense] {
                equi &= equivariance_probe(&model, &sample, &sigmas, &perm, mode)?;
            }
            invariant &= loss_invariance_probe(&model, &sample, &noise, &perm)?;
            perms_checked += 1;
        }
        for q in 0..3 {
            local &= action_locality_probe(&model, &sample, &sigmas, q)?;
        }
    }
    Ok((
        causal && equi && invariant && local,
        format!(
            "block-causal {causal}, equivariant {equi} ({perms_checked} permutations x 3 modes), loss invariant {invariant}, action-local {local}"
        ),
    ))
}

// 8 -------------------------------------------------------------------------

fn streaming_check<T: hubworld::numerics::Scalar>(agents: usize, seed: u64) -> Result<(f64, bool, usize), Box<dyn std::error::Error>> {
    let frames = 24;
    let base = ToyModel::<T>::new(ToyModelConfig::desk(), seed)?;
    let model = base.with_topology(TopologySpec {
        agents,
        frames,
        window: Some(frames),
        ..base.config.topology
    })?;
    let spec = model.config.topology;
    let mut rng = RngStream::new(seed).split("acceptance/stream");
    let sample = random_sample(&model, agents, &mut rng)?;
    let first: Vec<T> = rng.normal_vec(agents * spec.block * spec.spatial() * model.config.channels, 1.0);
    let cfg = RolloutConfig {
        keep_trace: true,
        seed,
        ..RolloutConfig::default()
    };
    let out = rollout(&model, &first, &sample.actions, &sample.assignment, frames, &cfg)?;
    let mut worst = 0.0f64;
    for step in &out.trace {
        let reference = monolithic_step(&model, &out, step, &sample.actions, &sample.assignment, frames, AttentionMode::CausalHub)?;
        for (a, b) in step.velocity.iter().zip(&reference) {
            worst = worst.max((a.to_f64c() - b.to_f64c()).abs());
        }
    }
    let window = spec.window.unwrap_or(frames);
    let bound = agents * window * spec.spatial() + window * spec.hubs;
    let expected_steps = (spec.blocks() - 1) * model.config.timesteps.len();
    let ok = out.peak_cache_tokens <= bound && out.stats.cross_agent_reads == 0 && out.trace.len() == expected_steps;
    Ok((worst, ok, out.peak_cache_tokens))
}

fn streaming() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for agents in [2usize, 3] {
        let (worst, ok, peak) = streaming_check::<f32>(agents, 3 + agents as u64)?;
        pass &= ok && worst <= 1e-4;
        detail.push(format!("P={agents}: max deviation {worst:.2e}, peak cache {peak} tokens/layer"));
    }
    Ok((pass, detail.join("; ")))
}

// 9 -------------------------------------------------------------------------

/// Rollout of `frames` latents from a synthetic-world start with the given actions.
fn world_rollout<T: hubworld::numerics::Scalar>(
    model: &ToyModel<T>,
    first: &[f64],
    actions: &[f64],
    assignment: &VertexAssignment,
    frames: usize,
) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let cast = |x: &[f64]| x.iter().map(|&v| T::from_f64c(v)).collect::<Vec<T>>();
    let cfg = RolloutConfig { seed: 99, ..RolloutConfig::default() };
    let out = rollout(model, &cast(first), &cast(actions), assignment, frames, &cfg)?;
    Ok(out.latents.iter().map(|x| x.to_f64c()).collect())
}

fn training() -> Outcome {
    let cfg = TrainConfig::default();
    let mut model = ToyModel::<f32>::new(ToyModelConfig::desk(), cfg.seed)?;
    let metrics = train_toy(&mut model, &cfg)?;
    let reduction = metrics.reduction();

    // Agent 1 perturbs its controls; watch agent 2's generated future.
    let frames = 24;
    let agents = 2;
    let model = model.with_topology(TopologySpec {
        frames,
        ..model.config.topology
    })?;
    let c = &model.config;
    let n = c.topology.block;
    let world = SynthWorld::new(c, cfg.world_seed);
    let mut rng = RngStream::new(31).split("acceptance/perturb");
    let actions = world.sample_actions(&mut rng, agents);
    let start = world.sample_start(&mut rng, agents);
    let frame_len = c.topology.spatial() * c.channels;
    let first = gather_frames(&world.render(&start, &actions)?, agents, frames, frame_len, 0, n);
    let assignment = sample_assignment(agents, c.pool_size, &mut rng)?;

    let fields = c.action_kind.fields();
    let nd = c.action_kind.discrete();
    let mut perturbed = actions.clone();
    for t in n..frames {
        let row = &mut perturbed[t * fields..(t + 1) * fields];
        for (i, x) in row.iter_mut().enumerate() {
            *x = if i < nd { 1.0 - *x } else { -*x };
        }
    }
    let base = world_rollout(&model, &first, &actions, &assignment, frames)?;
    let moved = world_rollout(&model, &first, &perturbed, &assignment, frames)?;
    let reference = world_rollout(&model.cast::<f64>(), &first, &actions, &assignment, frames)?;
    let other = (frames + n) * frame_len..2 * frames * frame_len;
    let count = other.len() as f64;
    let change: f64 = other.clone().map(|i| (moved[i] - base[i]).abs()).sum::<f64>() / count;
    let floor: f64 = other.map(|i| (base[i] - reference[i]).abs()).sum::<f64>() / count;
    let own_change: f64 = (n * frame_len..frames * frame_len).map(|i| (moved[i] - base[i]).abs()).sum::<f64>()
        / ((frames - n) * frame_len) as f64;
    let ratio = change / floor.max(f64::MIN_POSITIVE);
    Ok((
        reduction >= 0.30 && ratio >= 10.0,
        format!(
            "eval loss {:.4} -> {:.4} ({:.1}% reduction over {} steps); agent 2 change {change:.2e} vs noise floor {floor:.2e} ({ratio:.0}x), agent 1 own change {own_change:.2e}",
            metrics.initial_eval,
            metrics.final_eval,
            100.0 * reduction,
            cfg.steps
        ),
    ))
}

// 10 ------------------------------------------------------------------------

fn zero_shot() -> Outcome {
    let config = ToyModelConfig::desk();
    if config.pool_size != 4 || config.topology.agents != 2 {
        return Ok((false, "desk preset is not P=2 from a V=4 pool".into()));
    }
    let cfg = TrainConfig {
        steps: 100,
        agents: Some(2),
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trained = ToyModel::<f32>::new(config, cfg.seed)?;
    let metrics = train_toy(&mut trained, &cfg)?;

    let agents = 4;
    let model = trained.with_topology(trained.config.topology.with_agents(agents)?)?;
    let mut rng = RngStream::new(13).split("acceptance/zero-shot");
    let sample = random_sample(&model, agents, &mut rng)?;
    let spec = model.config.topology;
    let sigmas: Vec<f64> = (0..spec.blocks()).map(|_| rng.uniform()).collect();
    let causal = causality_probe(&model, &sample, &sigmas, &mut rng)?;
    let mut equi = true;
    for perm in permutations(agents).into_iter().step_by(5) {
        equi &= equivariance_probe(&model, &sample, &sigmas, &perm, AttentionMode::CausalHub)?;
    }
    let noise = random_noise(&model, agents, &mut rng)?;
    let invariant = loss_invariance_probe(&model, &sample, &noise, &[2, 0, 3, 1])?;
    let local = (0..agents).map(|q| action_locality_probe(&model, &sample, &sigmas, q)).collect::<Result<Vec<_>, _>>()?;
    let local = local.into_iter().all(|x| x);

    // 24-frame cached rollout at P=4, checked step by step against the full forward.
    let frames = 24;
    let long = model.with_topology(TopologySpec { frames, ..spec })?;
    let actions: Vec<f32> = {
        let world = SynthWorld::new(&long.config, cfg.world_seed);
        world.sample_actions(&mut rng, agents).into_iter().map(|x| x as f32).collect()
    };
    let first: Vec<f32> = rng.normal_vec(agents * spec.block * spec.spatial() * long.config.channels, 1.0);
    let out = rollout(&long, &first, &actions, &sample.assignment, frames, &RolloutConfig { keep_trace: true, ..RolloutConfig::default() })?;
    let finite = out.latents.iter().all(|x| x.is_finite()) && out.latents.len() == agents * frames * spec.spatial() * long.config.channels;
    let mut worst = 0.0f32;
    for step in &out.trace {
        let r = monolithic_step(&long, &out, step, &actions, &sample.assignment, frames, AttentionMode::CausalHub)?;
        worst = step.velocity.iter().zip(&r).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    let isolated = out.stats.cross_agent_reads == 0;
    Ok((
        causal && equi && invariant && local && finite && worst <= 1e-4 && isolated,
        format!(
            "trained P=2 ({:.1}% loss reduction in {} steps); at P=4: causal {causal}, equivariant {equi}, loss invariant {invariant}, action-local {local}, rollout finite {finite}, cached vs full {worst:.2e}, cross-agent reads {}",
            100.0 * metrics.reduction(),
            cfg.steps,
            out.stats.cross_agent_reads
        ),
    ))
}
