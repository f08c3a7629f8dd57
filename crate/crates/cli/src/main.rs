//! Command-line entry point: scaling benchmark, toy training, cached
//! rollouts, mask dumps, the property suite and analytic cost reports.

mod settings;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hubworld::attention::{attention_cost, CostMode, CostReport};
use hubworld::bench::{
    crossover_agents, fit_scaling_exponent, run_benchmark, write_long_csv, write_records_csv, BenchConfig, Metric,
};
use hubworld::model::{
    load_checkpoint, save_checkpoint, train_toy, ActionKind, AttentionMode, SynthWorld, ToyModel, ToyModelConfig,
    TrainConfig,
};
use hubworld::numerics::{read_tensor, write_tensor, RngStream, Tensor};
use hubworld::simplex::sample_assignment;
use hubworld::streaming::{parse_action_csv, rollout, DenoiseSchedule, RolloutConfig};
use hubworld::topology::{
    block_causal_mask, causal_hub_mask, hub_mask, local_window_mask, TopologySpec,
};
use settings::Settings;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hubworld", version, about = "Multi-agent hub-attention world model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time dense vs hub attention rollouts as the agent count grows.
    Bench(BenchArgs),
    /// Train the toy model on the synthetic shared world.
    TrainToy(TrainArgs),
    /// Generate latents block by block from a checkpoint.
    Rollout(RolloutArgs),
    /// Dump a composed attention mask.
    Masks(MaskArgs),
    /// Run the property suite and print a pass/fail table.
    Verify(VerifyArgs),
    /// Print analytic attention cost reports.
    Cost(CostArgs),
}

#[derive(Args, Default)]
struct TopologyArgs {
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    hubs: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    /// Local window in latent frames; 0 disables it.
    #[arg(long)]
    window: Option<usize>,
}

const TOPOLOGY_KEYS: [&str; 6] = ["frames", "height", "width", "hubs", "block", "window"];

fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    TOPOLOGY_KEYS.iter().copied().chain(extra.iter().copied()).collect()
}

fn topology(s: &Settings, t: &TopologyArgs, agents: usize, defaults: &TopologySpec) -> Result<TopologySpec> {
    let window = s.get("window", t.window, defaults.window.unwrap_or(0))?;
    Ok(TopologySpec::new(
        agents,
        s.get("frames", t.frames, defaults.frames)?,
        s.get("height", t.height, defaults.height)?,
        s.get("width", t.width, defaults.width)?,
        s.get("hubs", t.hubs, defaults.hubs)?,
        s.get("block", t.block, defaults.block)?,
        (window > 0).then_some(window),
    )?)
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<usize>>,
    #[command(flatten)]
    topo: TopologyArgs,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Skip dense runs whose full sequence exceeds this many tokens.
    #[arg(long)]
    memory_budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use multi-threaded attention kernels inside the timed region.
    #[arg(long)]
    parallel: Option<bool>,
    /// Record CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready long-format CSV output path.
    #[arg(long)]
    long_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: desk or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Action layout: game or robot.
    #[arg(long)]
    action_kind: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Gradient-norm clip; 0 disables.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    eval_batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Metrics CSV path (step, loss).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Local window in latent frames; 0 disables it.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    timesteps: Option<Vec<u32>>,
    #[arg(long)]
    shift: Option<f64>,
    /// Action CSV: agent,frame,field_0..
    #[arg(long)]
    actions: Option<PathBuf>,
    /// Tensor dump of the first block, shape (P, n, H, W, C).
    #[arg(long)]
    first_obs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Synthetic world used for actions and the first block when not given.
    #[arg(long)]
    world_seed: Option<u64>,
    /// causal-hub or causal-dense.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    agents: Option<usize>,
    #[command(flatten)]
    topo: TopologyArgs,
    /// hub, block-causal, causal-hub or window.
    #[arg(long)]
    kind: Option<String>,
    /// text or tensor.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<usize>>,
    #[command(flatten)]
    topo: TopologyArgs,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    /// Search bound for the dense/hub crossover.
    #[arg(long)]
    max_agents: Option<usize>,
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn bench(a: BenchArgs) -> Result<()> {
    let s = Settings::load(
        a.config.as_deref(),
        &keys(&[
            "agents", "layers", "heads", "repetitions", "warmup", "memory_budget", "seed", "parallel", "out", "long_out",
        ]),
    )?;
    let d = BenchConfig::default();
    let defaults = TopologySpec::new(2, d.frames, d.height, d.width, d.hubs, d.block, Some(d.window))?;
    let spec = topology(&s, &a.topo, 2, &defaults)?;
    let cfg = BenchConfig {
        agents: s.get_list("agents", a.agents, d.agents.clone())?,
        modes: d.modes.clone(),
        frames: spec.frames,
        block: spec.block,
        height: spec.height,
        width: spec.width,
        hubs: spec.hubs,
        window: spec.window.unwrap_or(spec.frames),
        layers: s.get("layers", a.layers, d.layers)?,
        heads: s.get("heads", a.heads, d.heads)?,
        repetitions: s.get("repetitions", a.repetitions, d.repetitions)?,
        warmup: s.get("warmup", a.warmup, d.warmup)?,
        memory_budget_tokens: s.get_opt("memory_budget", a.memory_budget)?,
        seed: s.get("seed", a.seed, d.seed)?,
        parallel: s.get("parallel", a.parallel, d.parallel)?,
    };
    let records = run_benchmark(&cfg)?;
    let out: Option<PathBuf> = s.get_opt("out", a.out)?;
    write_records_csv(out_writer(out.as_deref())?, &records)?;
    if let Some(p) = s.get_opt::<PathBuf>("long_out", a.long_out)? {
        write_long_csv(out_writer(Some(&p))?, &records)?;
    }
    for mode in &cfg.modes {
        match fit_scaling_exponent(&records, *mode, Metric::WallClock) {
            Ok(e) => eprintln!("{mode}: wall-clock exponent {e:.3}"),
            Err(e) => eprintln!("{mode}: no exponent ({e})"),
        }
    }
    if let Some(bad) = records.iter().find(|r| !r.counters_agree()) {
        bail!("kernel pair counter disagrees with the closed form: {}", bad.csv_row());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let s = Settings::load(
        a.config.as_deref(),
        &[
            "preset", "action_kind", "agents", "steps", "batch", "lr", "momentum", "clip_norm", "seed", "world_seed",
            "eval_batch", "eval_every", "out_dir", "metrics",
        ],
    )?;
    let mut config = match s.get("preset", a.preset, "desk".to_string())?.as_str() {
        "desk" => ToyModelConfig::desk(),
        "tiny" => ToyModelConfig::tiny(),
        other => bail!("unknown preset '{other}' (desk or tiny)"),
    };
    config.action_kind = s.get::<ActionKind>("action_kind", a.action_kind.map(|k| k.parse()).transpose()?, config.action_kind)?;
    let d = TrainConfig::default();
    let clip = s.get("clip_norm", a.clip_norm, d.clip_norm.unwrap_or(0.0))?;
    let cfg = TrainConfig {
        steps: s.get("steps", a.steps, d.steps)?,
        batch: s.get("batch", a.batch, d.batch)?,
        lr: s.get("lr", a.lr, d.lr)?,
        momentum: s.get("momentum", a.momentum, d.momentum)?,
        clip_norm: (clip > 0.0).then_some(clip),
        seed: s.get("seed", a.seed, d.seed)?,
        world_seed: s.get("world_seed", a.world_seed, d.world_seed)?,
        agents: s.get_opt("agents", a.agents)?,
        eval_batch: s.get("eval_batch", a.eval_batch, d.eval_batch)?,
        eval_every: s.get("eval_every", a.eval_every, d.eval_every)?,
        ..d
    };
    let mut model = ToyModel::<f32>::new(config, cfg.seed)?;
    let metrics = train_toy(&mut model, &cfg)?;
    let path: Option<PathBuf> = s.get_opt("metrics", a.metrics)?;
    metrics.write_csv(out_writer(path.as_deref())?)?;
    eprintln!(
        "eval loss {:.5} -> {:.5} ({:.1}% reduction)",
        metrics.initial_eval,
        metrics.final_eval,
        100.0 * metrics.reduction()
    );
    if let Some(dir) = s.get_opt::<PathBuf>("out_dir", a.out_dir)? {
        save_checkpoint(&dir, &model, cfg.seed, cfg.steps)?;
        eprintln!("checkpoint written to {}", dir.display());
    }
    Ok(())
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let s = Settings::load(
        a.config.as_deref(),
        &[
            "checkpoint", "seed", "agents", "frames", "window", "timesteps", "shift", "actions", "first_obs", "out", "mode",
            "world_seed",
        ],
    )?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let model = match s.get_opt::<PathBuf>("checkpoint", a.checkpoint)? {
        Some(dir) => load_checkpoint::<f32>(&dir)?.0,
        None => {
            eprintln!("no checkpoint given; using a randomly initialized desk model");
            ToyModel::new(ToyModelConfig::desk(), seed)?
        }
    };
    let c = &model.config;
    let agents = s.get("agents", a.agents, c.topology.agents)?;
    let frames = s.get("frames", a.frames, 24)?;
    let window = s.get("window", a.window, c.topology.window.unwrap_or(0))?;
    let spec = TopologySpec {
        agents,
        frames,
        window: (window > 0).then_some(window),
        ..c.topology
    };
    let model = model.with_topology(spec)?;
    let c = &model.config;
    let schedule = DenoiseSchedule::new(
        s.get_list("timesteps", a.timesteps, c.timesteps.clone())?,
        s.get("shift", a.shift, c.flow_shift)?,
    )?;
    let mode: AttentionMode = s.get("mode", a.mode, "causal-hub".to_string())?.parse()?;
    let mut rng = RngStream::new(seed).split("cli/rollout");
    let world = SynthWorld::new(c, s.get("world_seed", a.world_seed, TrainConfig::default().world_seed)?);
    let actions: Vec<f32> = match s.get_opt::<PathBuf>("actions", a.actions)? {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            parse_action_csv(&text, c.action_kind, agents, frames)?.into_iter().map(|x| x as f32).collect()
        }
        None => world.sample_actions(&mut rng, agents).into_iter().map(|x| x as f32).collect(),
    };
    let frame_len = spec.spatial() * c.channels;
    let first: Vec<f32> = match s.get_opt::<PathBuf>("first_obs", a.first_obs)? {
        Some(p) => read_tensor::<f32>(&p)?.into_data(),
        None => {
            let start = world.sample_start(&mut rng, agents);
            let z = world.render(&start, &actions.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
            hubworld::streaming::gather_frames(&z, agents, frames, frame_len, 0, spec.block)
                .into_iter()
                .map(|x| x as f32)
                .collect()
        }
    };
    let assignment = sample_assignment(agents, c.pool_size, &mut rng)?;
    let cfg = RolloutConfig {
        mode,
        schedule,
        seed,
        parallel: true,
        keep_trace: false,
    };
    let out = rollout(&model, &first, &actions, &assignment, frames, &cfg)?;
    let tensor = Tensor::new(vec![agents, frames, spec.height, spec.width, c.channels], out.latents)?;
    let path: PathBuf = s.get("out", a.out, PathBuf::from("rollout.bin"))?;
    write_tensor(&path, &tensor)?;
    eprintln!(
        "wrote {:?} latents to {} ({} cached forwards, peak cache {} tokens/layer, vertices {:?})",
        tensor.shape(),
        path.display(),
        out.forwards,
        out.peak_cache_tokens,
        assignment.as_slice()
    );
    Ok(())
}

fn masks(a: MaskArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), &keys(&["agents", "kind", "format", "out"]))?;
    let defaults = TopologySpec::new(2, 2, 1, 2, 1, 1, None)?;
    let spec = topology(&s, &a.topo, s.get("agents", a.agents, 2)?, &defaults)?;
    if spec.seq_len() > 4096 {
        bail!("sequence of {} tokens is too long to materialize a dense mask", spec.seq_len());
    }
    let mask = match s.get("kind", a.kind, "causal-hub".to_string())?.as_str() {
        "hub" => hub_mask(&spec)?,
        "block-causal" => block_causal_mask(&spec)?,
        "causal-hub" => causal_hub_mask(&spec)?,
        "window" => local_window_mask(&spec)?,
        other => bail!("unknown mask kind '{other}'"),
    };
    let out: Option<PathBuf> = s.get_opt("out", a.out)?;
    match s.get("format", a.format, "text".to_string())?.as_str() {
        "text" => {
            let mut w = out_writer(out.as_deref())?;
            write!(w, "{}", mask.to_text_grid())?;
            writeln!(w, "# {} of {} entries allowed", mask.count(), spec.seq_len() * spec.seq_len())?;
        }
        "tensor" => {
            let p = out.context("--out is required for tensor output")?;
            write_tensor(&p, &mask.to_tensor::<f32>())?;
        }
        other => bail!("unknown format '{other}' (text or tensor)"),
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let results = hubworld::verify::run_property_suite(a.seed.unwrap_or(0));
    println!("{:<32} {:<6} {:>8}  detail", "property", "result", "seconds");
    for r in &results {
        println!(
            "{:<32} {:<6} {:>8.2}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} properties failed", results.len());
    }
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), &keys(&["agents", "heads", "head_dim", "max_agents"]))?;
    let defaults = TopologySpec::new(2, 24, 2, 2, 2, 3, Some(24))?;
    let agents = s.get_list("agents", a.agents, vec![2, 4, 8, 16, 32])?;
    let heads = s.get("heads", a.heads, 16)?;
    let head_dim = s.get("head_dim", a.head_dim, 128)?;
    println!("{}", CostReport::CSV_HEADER);
    let mut base = None;
    for p in agents {
        let spec = topology(&s, &a.topo, p, &defaults)?;
        base.get_or_insert(spec);
        for mode in [CostMode::Dense, CostMode::SparseHub] {
            let sp = if mode == CostMode::Dense { spec.with_hubs(0) } else { spec };
            println!("{}", attention_cost(&sp, mode, heads, head_dim).csv_row());
        }
    }
    if let Some(spec) = base {
        match crossover_agents(&spec, heads, head_dim, s.get("max_agents", a.max_agents, 64)?)? {
            Some(p) => eprintln!("hub attention needs fewer FLOPs than dense from P = {p}"),
            None => eprintln!("no crossover within the search bound"),
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Bench(a) => bench(a),
        Command::TrainToy(a) => train(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Masks(a) => masks(a),
        Command::Verify(a) => verify(a),
        Command::Cost(a) => cost(a),
    }
}
