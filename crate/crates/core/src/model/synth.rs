//! Synthetic shared world used as training data.
//!
//! A low-dimensional global state drifts with the sum of every agent's
//! continuous controls, and each agent walks around with its locomotion
//! controls. An agent's latent frame is a fixed random linear rendering of
//! (global state, own continuous controls, own position), so one agent's
//! actions reach the other agents' future frames through the shared state.

use super::action::{ActionKind, GAME_MOVE};
use super::config::ToyModelConfig;
use super::loss::Sample;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Scalar};
use crate::simplex::sample_assignment;

pub const STATE_DIM: usize = 4;
const STEP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    kind: ActionKind,
    frames: usize,
    spatial: usize,
    channels: usize,
    /// `STATE_DIM x continuous`
    drive: Vec<f64>,
    /// Per spatial location, `channels x features`.
    render: Vec<f64>,
}

/// Initial conditions of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldStart {
    pub state: Vec<f64>,
    /// `(x, y)` per agent.
    pub positions: Vec<[f64; 2]>,
}

impl SynthWorld {
    pub fn new(config: &ToyModelConfig, world_seed: u64) -> Self {
        let kind = config.action_kind;
        let mut rng = RngStream::new(world_seed).split("synth/world");
        let features = STATE_DIM + kind.continuous() + 2;
        let drive = rng.normal_vec(STATE_DIM * kind.continuous(), 1.0 / (kind.continuous() as f64).sqrt());
        let render = rng.normal_vec(
            config.topology.spatial() * config.channels * features,
            1.0 / (features as f64).sqrt(),
        );
        Self {
            kind,
            frames: config.topology.frames,
            spatial: config.topology.spatial(),
            channels: config.channels,
            drive,
            render,
        }
    }

    pub fn features(&self) -> usize {
        STATE_DIM + self.kind.continuous() + 2
    }

    fn locomotion(&self, a: &[f64]) -> [f64; 2] {
        match self.kind {
            ActionKind::Game => {
                let m = &a[GAME_MOVE];
                // forward, back, left, right
                [m[3] - m[2], m[0] - m[1]]
            }
            ActionKind::Robot => [a[0], a[1]],
        }
    }

    /// Random controls `(P, T, fields)`.
    pub fn sample_actions(&self, rng: &mut RngStream, agents: usize) -> Vec<f64> {
        let f = self.kind.fields();
        let nd = self.kind.discrete();
        let mut out = Vec::with_capacity(agents * self.frames * f);
        for _ in 0..agents * self.frames {
            for i in 0..f {
                let v = if i < nd {
                    let p = if GAME_MOVE.contains(&i) { 0.3 } else { 0.05 };
                    f64::from(rng.uniform() < p)
                } else {
                    2.0 * rng.uniform() - 1.0
                };
                out.push(v);
            }
        }
        out
    }

    pub fn sample_start(&self, rng: &mut RngStream, agents: usize) -> WorldStart {
        WorldStart {
            state: rng.normal_vec(STATE_DIM, 1.0),
            positions: (0..agents).map(|_| [rng.normal::<f64>() * 0.5, rng.normal::<f64>() * 0.5]).collect(),
        }
    }

    /// Latents `(P, T, H, W, C)` for the given controls.
    pub fn render(&self, start: &WorldStart, actions: &[f64]) -> Result<Vec<f64>> {
        let agents = start.positions.len();
        let f = self.kind.fields();
        if actions.len() != agents * self.frames * f {
            return Err(Error::ShapeMismatch {
                lhs: vec![actions.len()],
                rhs: vec![agents, self.frames, f],
                context: "synthetic world actions",
            });
        }
        let nc = self.kind.continuous();
        let nd = self.kind.discrete();
        let act = |p: usize, t: usize| &actions[(p * self.frames + t) * f..(p * self.frames + t + 1) * f];
        // Roll the shared state and positions forward.
        let mut states = vec![start.state.clone()];
        let mut pos = vec![start.positions.clone()];
        for t in 0..self.frames - 1 {
            let mut total = vec![0.0; nc];
            for p in 0..agents {
                total.iter_mut().zip(&act(p, t)[nd..]).for_each(|(a, b)| *a += b);
            }
            let prev = states.last().expect("seeded");
            let next: Vec<f64> = (0..STATE_DIM)
                .map(|g| prev[g] + STEP * (0..nc).map(|k| self.drive[g * nc + k] * total[k]).sum::<f64>())
                .collect();
            states.push(next);
            let cur = pos.last().expect("seeded");
            let moved: Vec<[f64; 2]> = (0..agents)
                .map(|p| {
                    let m = self.locomotion(act(p, t));
                    [cur[p][0] + STEP * m[0], cur[p][1] + STEP * m[1]]
                })
                .collect();
            pos.push(moved);
        }
        let nf = self.features();
        let mut out = Vec::with_capacity(agents * self.frames * self.spatial * self.channels);
        let mut feat = vec![0.0; nf];
        for p in 0..agents {
            for t in 0..self.frames {
                feat[..STATE_DIM].copy_from_slice(&states[t]);
                feat[STATE_DIM..STATE_DIM + nc].copy_from_slice(&act(p, t)[nd..]);
                feat[STATE_DIM + nc..].copy_from_slice(&pos[t][p]);
                for s in 0..self.spatial {
                    for ch in 0..self.channels {
                        let r = &self.render[(s * self.channels + ch) * nf..(s * self.channels + ch + 1) * nf];
                        out.push(r.iter().zip(&feat).map(|(a, b)| a * b).sum());
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `batch` independent episodes with `agents` agents, each with its own
/// vertex assignment drawn from the configured pool.
pub fn synth_world_batch<T: Scalar>(
    rng: &mut RngStream,
    world: &SynthWorld,
    config: &ToyModelConfig,
    agents: usize,
    batch: usize,
) -> Result<Vec<Sample<T>>> {
    (0..batch)
        .map(|_| {
            let actions = world.sample_actions(rng, agents);
            let start = world.sample_start(rng, agents);
            let latents = world.render(&start, &actions)?;
            let assignment = sample_assignment(agents, config.pool_size, rng)?;
            Ok(Sample {
                latents: latents.into_iter().map(T::from_f64c).collect(),
                actions: actions.into_iter().map(T::from_f64c).collect(),
                assignment,
            })
        })
        .collect()
}
