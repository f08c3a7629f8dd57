//! Scaling study: analytic attention cost and timed cached rollouts for
//! dense versus hub attention as the agent count grows.

use crate::attention::{attention_cost, block_pairs, rollout_pair_count, CostMode};
use crate::error::{invalid, Result};
use crate::model::{AttentionMode, ToyModel, ToyModelConfig};
use crate::numerics::RngStream;
use crate::rope::RopeLayout;
use crate::simplex::VertexAssignment;
use crate::streaming::{rollout, DenoiseSchedule, RolloutConfig};
use crate::topology::TopologySpec;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub agents: Vec<usize>,
    pub modes: Vec<CostMode>,
    pub frames: usize,
    pub block: usize,
    pub height: usize,
    pub width: usize,
    pub hubs: usize,
    pub window: usize,
    pub layers: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Dense runs whose full sequence exceeds this many tokens are skipped.
    pub memory_budget_tokens: Option<usize>,
    pub seed: u64,
    /// Multi-threaded attention kernels inside the timed region.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agents: vec![2, 4, 8],
            modes: vec![CostMode::Dense, CostMode::SparseHub],
            frames: 24,
            block: 3,
            height: 4,
            width: 4,
            hubs: 2,
            window: 24,
            layers: 1,
            heads: 2,
            repetitions: 3,
            warmup: 1,
            memory_budget_tokens: None,
            seed: 0,
            parallel: false,
        }
    }
}

impl BenchConfig {
    pub fn spec(&self, agents: usize) -> Result<TopologySpec> {
        TopologySpec::new(agents, self.frames, self.height, self.width, self.hubs, self.block, Some(self.window))
    }

    /// Toy model used for timing. The agent band is wide enough for a pool of
    /// `max(agents)` vertices.
    pub fn model_config(&self) -> Result<ToyModelConfig> {
        let pool = self.agents.iter().copied().max().unwrap_or(2).max(2);
        let d_p = 2 * (pool - 1);
        let rope = RopeLayout::new(8, d_p, 4, 4)?;
        let head_dim = rope.d_head();
        let mut c = ToyModelConfig::desk();
        c.rope = rope;
        c.pool_size = pool;
        c.heads = self.heads;
        c.head_dim = head_dim;
        c.model_dim = self.heads * head_dim;
        c.layers = self.layers;
        c.action_hidden = 32;
        c.topology = self.spec(2)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: CostMode,
    pub agents: usize,
    pub frames: usize,
    pub spatial: usize,
    pub hubs: usize,
    pub block: usize,
    pub window: usize,
    /// Closed-form pairs per block.
    pub pairs: u64,
    pub flops: u64,
    /// Pairs counted by the kernels over one rollout.
    pub measured_pairs: u64,
    /// Closed-form pairs for one rollout, all cached forwards and layers.
    pub expected_pairs: u64,
    /// Median attention time per rollout.
    pub median_rollout_ns: u64,
    /// Median attention time per generated block.
    pub median_step_ns: u64,
    pub repetitions: usize,
    pub threads: usize,
    pub skipped: bool,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str =
        "mode,P,T,L,K,n,window,pairs,flops,measured_pairs,expected_pairs,median_rollout_ns,median_step_ns,repetitions,threads,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.agents,
            self.frames,
            self.spatial,
            self.hubs,
            self.block,
            self.window,
            self.pairs,
            self.flops,
            self.measured_pairs,
            self.expected_pairs,
            self.median_rollout_ns,
            self.median_step_ns,
            self.repetitions,
            self.threads,
            self.skipped
        )
    }

    pub fn counters_agree(&self) -> bool {
        self.skipped || self.measured_pairs == self.expected_pairs
    }
}

fn mode_of(mode: CostMode) -> AttentionMode {
    match mode {
        CostMode::Dense => AttentionMode::CausalDense,
        CostMode::SparseHub => AttentionMode::CausalHub,
    }
}

/// Closed-form pairs counted over one rollout: block 0 runs one cached
/// forward, every later block runs one per denoise step plus the cache pass.
pub fn expected_rollout_pairs(spec: &TopologySpec, mode: CostMode, layers: usize, steps: usize) -> u64 {
    let per_block = block_pairs(spec, mode);
    let all = rollout_pair_count(spec, mode) * (steps as u64 + 1);
    (all - per_block * steps as u64) * layers as u64
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repetitions < 3 || cfg.warmup < 1 {
        return Err(invalid("timing needs at least 3 repetitions after at least 1 warm-up"));
    }
    let mc = cfg.model_config()?;
    let base = ToyModel::<f32>::new(mc.clone(), cfg.seed)?;
    let schedule = DenoiseSchedule::from_config(&mc)?;
    let threads = if cfg.parallel { rayon::current_num_threads() } else { 1 };
    let mut records = Vec::new();
    for &p in &cfg.agents {
        let spec = cfg.spec(p)?;
        for &mode in &cfg.modes {
            let cost_spec = if mode == CostMode::Dense { spec.with_hubs(0) } else { spec };
            let cost = attention_cost(&cost_spec, mode, mc.heads, mc.head_dim);
            let expected = expected_rollout_pairs(&cost_spec, mode, mc.layers, schedule.timesteps().len());
            let mut record = BenchRecord {
                mode,
                agents: p,
                frames: spec.frames,
                spatial: spec.spatial(),
                hubs: cost_spec.hubs,
                block: spec.block,
                window: cfg.window,
                pairs: cost.pairs,
                flops: cost.flops,
                measured_pairs: 0,
                expected_pairs: expected,
                median_rollout_ns: 0,
                median_step_ns: 0,
                repetitions: cfg.repetitions,
                threads,
                skipped: false,
            };
            if let Some(budget) = cfg.memory_budget_tokens {
                if mode == CostMode::Dense && cost_spec.seq_len() > budget {
                    record.skipped = true;
                    records.push(record);
                    continue;
                }
            }
            let model = base.with_topology(spec)?;
            let mut rng = RngStream::new(cfg.seed).split_indexed("bench/inputs", p as u64);
            let frame_len = spec.spatial() * mc.channels;
            let first = rng.normal_vec(p * spec.block * frame_len, 1.0);
            let actions = crate::verify::random_sample(&model, p, &mut rng)?.actions;
            let assignment = VertexAssignment::identity(p, mc.pool_size)?;
            let rc = RolloutConfig {
                mode: mode_of(mode),
                schedule: schedule.clone(),
                seed: cfg.seed,
                parallel: cfg.parallel,
                keep_trace: false,
            };
            let mut times = Vec::with_capacity(cfg.repetitions);
            for rep in 0..cfg.warmup + cfg.repetitions {
                let out = rollout(&model, &first, &actions, &assignment, spec.frames, &rc)?;
                if rep >= cfg.warmup {
                    times.push(out.attention_nanos);
                    record.measured_pairs = out.stats.pairs;
                }
            }
            record.median_rollout_ns = median(times);
            record.median_step_ns = record.median_rollout_ns / spec.blocks() as u64;
            records.push(record);
        }
    }
    Ok(records)
}

/// Least-squares slope of `ln(metric)` against `ln(P)`.
pub fn fit_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    if xs.len() < 3 {
        return Err(invalid("need at least 3 distinct agent counts"));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(invalid("log-log fit needs positive values"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Pairs,
    Flops,
    WallClock,
}

/// Scaling exponent of `metric` over the non-skipped records of `mode`.
pub fn fit_scaling_exponent(records: &[BenchRecord], mode: CostMode, metric: Metric) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mode == mode && !r.skipped)
        .map(|r| {
            let y = match metric {
                Metric::Pairs => r.pairs as f64,
                Metric::Flops => r.flops as f64,
                Metric::WallClock => r.median_rollout_ns as f64,
            };
            (r.agents as f64, y)
        })
        .collect();
    fit_log_slope(&pts)
}

/// Smallest agent count at which hub attention needs fewer analytic FLOPs
/// than dense attention, searching `1..=max_agents`.
pub fn crossover_agents(spec: &TopologySpec, heads: usize, head_dim: usize, max_agents: usize) -> Result<Option<usize>> {
    for p in 1..=max_agents {
        let s = spec.with_agents(p)?;
        let dense = attention_cost(&s.with_hubs(0), CostMode::Dense, heads, head_dim).flops;
        let sparse = attention_cost(&s, CostMode::SparseHub, heads, head_dim).flops;
        if sparse < dense {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

pub fn write_records_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "{}", BenchRecord::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Plot-ready long format: one row per (mode, P, metric).
pub fn write_long_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "mode,P,metric,value")?;
    for r in records.iter().filter(|r| !r.skipped) {
        writeln!(w, "{},{},pairs,{}", r.mode, r.agents, r.pairs)?;
        writeln!(w, "{},{},flops,{}", r.mode, r.agents, r.flops)?;
        writeln!(w, "{},{},median_rollout_ns,{}", r.mode, r.agents, r.median_rollout_ns)?;
    }
    Ok(())
}
