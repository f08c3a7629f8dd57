//! Toy multi-agent diffusion transformer and its training loop.

mod action;
mod checkpoint;
mod config;
mod forward;
mod layers;
mod loss;
mod params;
mod synth;
mod train;

pub use action::{downsample_actions, ActionEncoder, ActionFrame, ActionKind, GAME_CAMERA, GAME_FIELDS, GAME_MOVE, ROBOT_FIELDS};
pub use checkpoint::{load_checkpoint, save_checkpoint, GroupEntry, Manifest};
pub use config::{AttentionMode, ToyModelConfig};
pub use forward::{ChunkGeometry, ChunkInput, ForwardOptions, ForwardOutput, KvContext, LayerKv, Tape, ToyModel};
pub use layers::{layer_norm, sigma_embedding, silu};
pub use loss::{
    blockwise_interpolant, diffusion_forcing_noise, flow_interpolant, flow_matching_loss, permutation_invariant_mse,
    LossOutput, NoiseDraw, Sample,
};
pub use params::{LayerParams, ModelParams};
pub use synth::{synth_world_batch, SynthWorld, WorldStart, STATE_DIM};
pub use train::{train_toy, EvalSet, StepRecord, TrainConfig, TrainMetrics};
