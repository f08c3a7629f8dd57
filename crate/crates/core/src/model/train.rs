//! Momentum gradient descent on the flow-matching loss.

use super::config::AttentionMode;
use super::forward::ToyModel;
use super::loss::{flow_matching_loss, NoiseDraw, Sample};
use super::params::ModelParams;
use super::synth::{synth_world_batch, SynthWorld};
use crate::error::{invalid, Result};
use crate::numerics::{sorted_sum, RngStream, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub world_seed: u64,
    /// Agents per training episode; defaults to the topology's agent count.
    pub agents: Option<usize>,
    pub eval_batch: usize,
    /// Evaluate the held-out batch every this many steps (and at both ends).
    pub eval_every: usize,
    pub mode: AttentionMode,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 3e-4,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
            world_seed: 7,
            agents: None,
            eval_batch: 8,
            eval_every: 25,
            mode: AttentionMode::CausalHub,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean loss of the training minibatch at this step, before the update.
    pub train_loss: f64,
    /// Held-out loss before the update, when evaluated at this step.
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

impl TrainMetrics {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_eval / self.initial_eval
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,eval_loss")?;
        for r in &self.records {
            let eval = r.eval_loss.map(|e| e.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{}", r.step, r.train_loss, eval)?;
        }
        writeln!(w, "{},,{}", self.records.len(), self.final_eval)?;
        Ok(())
    }
}

/// Fixed evaluation set: episodes plus their noise draws.
#[derive(Debug, Clone)]
pub struct EvalSet<T> {
    pub samples: Vec<Sample<T>>,
    pub noise: Vec<NoiseDraw<T>>,
}

impl<T: Scalar> EvalSet<T> {
    pub fn new(world: &SynthWorld, model: &ToyModel<T>, agents: usize, size: usize, seed: u64) -> Result<Self> {
        let c = &model.config;
        let mut rng = RngStream::new(seed).split("train/eval");
        let samples = synth_world_batch(&mut rng, world, c, agents, size)?;
        let elements = agents * c.topology.frames * c.topology.spatial() * c.channels;
        let noise = (0..size)
            .map(|_| NoiseDraw::sample(&mut rng, elements, c.topology.blocks()))
            .collect::<Result<_>>()?;
        Ok(Self { samples, noise })
    }

    pub fn loss(&self, model: &ToyModel<T>, mode: AttentionMode, parallel: bool) -> Result<f64> {
        let run = |(s, n): (&Sample<T>, &NoiseDraw<T>)| flow_matching_loss(model, s, n, mode, false).map(|o| o.loss);
        let losses: Vec<T> = if parallel {
            self.samples.par_iter().zip(&self.noise).map(run).collect::<Result<_>>()?
        } else {
            self.samples.iter().zip(&self.noise).map(run).collect::<Result<_>>()?
        };
        Ok(mean(losses))
    }
}

fn mean<T: Scalar>(mut v: Vec<T>) -> f64 {
    let n = v.len().max(1) as f64;
    sorted_sum(&mut v).to_f64c() / n
}

/// Trains `model` in place and returns the loss record. Deterministic for a
/// given `TrainConfig` regardless of thread count.
pub fn train_toy<T: Scalar>(model: &mut ToyModel<T>, cfg: &TrainConfig) -> Result<TrainMetrics> {
    if cfg.batch == 0 || cfg.eval_batch == 0 || cfg.eval_every == 0 {
        return Err(invalid("batch, eval_batch and eval_every must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) || cfg.lr < 0.0 {
        return Err(invalid("need lr >= 0 and momentum in [0, 1)"));
    }
    let c = model.config.clone();
    let agents = cfg.agents.unwrap_or(c.topology.agents);
    let world = SynthWorld::new(&c, cfg.world_seed);
    let eval = EvalSet::new(&world, model, agents, cfg.eval_batch, cfg.seed)?;
    let root = RngStream::new(cfg.seed).split("train");
    let elements = agents * c.topology.frames * c.topology.spatial() * c.channels;
    let mut velocity = model.params.zeros_like();
    let mut records = Vec::with_capacity(cfg.steps);
    let initial_eval = eval.loss(model, cfg.mode, cfg.parallel)?;
    let lr = T::from_f64c(cfg.lr);
    let mu = T::from_f64c(cfg.momentum);
    for step in 0..cfg.steps {
        let mut rng = root.split_indexed("step", step as u64);
        let samples = synth_world_batch::<T>(&mut rng, &world, &c, agents, cfg.batch)?;
        let noise: Vec<NoiseDraw<T>> = (0..cfg.batch)
            .map(|_| NoiseDraw::sample(&mut rng, elements, c.topology.blocks()))
            .collect::<Result<_>>()?;
        let run = |(s, n): (&Sample<T>, &NoiseDraw<T>)| flow_matching_loss(&*model, s, n, cfg.mode, true);
        let outs: Vec<_> = if cfg.parallel {
            samples.par_iter().zip(&noise).map(run).collect::<Result<_>>()?
        } else {
            samples.iter().zip(&noise).map(run).collect::<Result<_>>()?
        };
        // Reduce in sample order so the result does not depend on scheduling.
        let mut grad = model.params.zeros_like();
        let inv = T::one() / T::from_f64c(cfg.batch as f64);
        let mut losses = Vec::with_capacity(outs.len());
        for o in outs {
            losses.push(o.loss);
            grad.axpy(inv, o.grads.as_ref().expect("gradients requested"));
        }
        let eval_loss = if step == 0 {
            Some(initial_eval)
        } else if step % cfg.eval_every == 0 {
            Some(eval.loss(model, cfg.mode, cfg.parallel)?)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            train_loss: mean(losses),
            eval_loss,
        });
        if let Some(max) = cfg.clip_norm {
            clip(&mut grad, max);
        }
        for ((_, v), (_, g)) in velocity.groups_mut().into_iter().zip(grad.groups()) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = mu * *vi + *gi;
            }
        }
        model.params.axpy(-lr, &velocity);
    }
    let final_eval = eval.loss(model, cfg.mode, cfg.parallel)?;
    Ok(TrainMetrics {
        records,
        initial_eval,
        final_eval,
    })
}

fn clip<T: Scalar>(grad: &mut ModelParams<T>, max: f64) {
    let norm = grad
        .groups()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x.to_f64c() * x.to_f64c())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = T::from_f64c(max / norm);
        for (_, g) in grad.groups_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}
