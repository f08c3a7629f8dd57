//! Per-agent action frames and the shared action encoder.

use super::layers::{silu, silu_backward};
use crate::error::{invalid, Result};
use crate::numerics::{Linear, RngStream, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    /// 23 binary controls followed by 2 continuous camera values.
    Game,
    /// 3 position, 6 orientation and 1 gripper value, all continuous.
    Robot,
}

impl ActionKind {
    pub fn fields(&self) -> usize {
        match self {
            ActionKind::Game => 25,
            ActionKind::Robot => 10,
        }
    }

    pub fn discrete(&self) -> usize {
        match self {
            ActionKind::Game => 23,
            ActionKind::Robot => 0,
        }
    }

    pub fn continuous(&self) -> usize {
        self.fields() - self.discrete()
    }

    pub fn field_names(&self) -> Vec<&'static str> {
        match self {
            ActionKind::Game => GAME_FIELDS.to_vec(),
            ActionKind::Robot => ROBOT_FIELDS.to_vec(),
        }
    }
}

impl std::str::FromStr for ActionKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "game" => Ok(Self::Game),
            "robot" => Ok(Self::Robot),
            other => Err(invalid(format!("unknown action kind '{other}'"))),
        }
    }
}

pub const GAME_FIELDS: [&str; 25] = [
    "inventory", "ESC", "hotbar.1", "hotbar.2", "hotbar.3", "hotbar.4", "hotbar.5", "hotbar.6",
    "hotbar.7", "hotbar.8", "hotbar.9", "forward", "back", "left", "right", "jump", "sneak",
    "sprint", "swapHands", "attack", "use", "pickItem", "drop", "cameraX", "cameraY",
];

pub const ROBOT_FIELDS: [&str; 10] = [
    "pos_x", "pos_y", "pos_z", "rot_6d_0", "rot_6d_1", "rot_6d_2", "rot_6d_3", "rot_6d_4",
    "rot_6d_5", "gripper",
];

/// Locomotion controls (forward, back, left, right) in the game layout.
pub const GAME_MOVE: std::ops::Range<usize> = 11..15;
/// Camera yaw and pitch in the game layout.
pub const GAME_CAMERA: std::ops::Range<usize> = 23..25;

/// One agent's control vector at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionFrame {
    kind: ActionKind,
    values: Vec<f64>,
}

impl ActionFrame {
    pub fn new(kind: ActionKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.fields() {
            return Err(invalid(format!(
                "{kind:?} action needs {} fields, got {}",
                kind.fields(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(invalid(format!("action field {i} is not finite")));
            }
            if i < kind.discrete() && *v != 0.0 && *v != 1.0 {
                return Err(invalid(format!("binary action field {i} has value {v}")));
            }
        }
        Ok(Self { kind, values })
    }

    pub fn zeros(kind: ActionKind) -> Self {
        Self {
            kind,
            values: vec![0.0; kind.fields()],
        }
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn discrete(&self) -> &[f64] {
        &self.values[..self.kind.discrete()]
    }

    pub fn continuous(&self) -> &[f64] {
        &self.values[self.kind.discrete()..]
    }

    pub fn orientation(&self) -> Option<&[f64]> {
        (self.kind == ActionKind::Robot).then(|| &self.values[3..9])
    }
}

/// Mean over consecutive groups of `stride` raw frames, one output per latent
/// frame. A trailing partial group is averaged over what it has.
pub fn downsample_actions(raw: &[Vec<f64>], stride: usize) -> Result<Vec<Vec<f64>>> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    raw.chunks(stride)
        .map(|group| {
            let width = group[0].len();
            if group.iter().any(|r| r.len() != width) {
                return Err(invalid("ragged action rows"));
            }
            Ok((0..width)
                .map(|c| group.iter().map(|r| r[c]).sum::<f64>() / group.len() as f64)
                .collect())
        })
        .collect()
}

/// Shared encoder `f_a`: discrete and continuous branches, fused to `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEncoder<T> {
    pub kind: ActionKind,
    pub discrete: Option<Linear<T>>,
    pub continuous: Linear<T>,
    pub fuse: Linear<T>,
    pub proj: Linear<T>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActionTape<T> {
    disc_in: Vec<T>,
    cont_in: Vec<T>,
    disc_pre: Vec<T>,
    cont_pre: Vec<T>,
    cat: Vec<T>,
    fuse_pre: Vec<T>,
    fused: Vec<T>,
}

impl<T: Scalar> ActionEncoder<T> {
    pub fn init(kind: ActionKind, hidden: usize, model_dim: usize, rng: &mut RngStream) -> Self {
        let branches = if kind.discrete() > 0 { 2 } else { 1 };
        Self {
            kind,
            discrete: (kind.discrete() > 0).then(|| Linear::init(kind.discrete(), hidden, 1.0, rng)),
            continuous: Linear::init(kind.continuous(), hidden, 1.0, rng),
            fuse: Linear::init(branches * hidden, model_dim, 1.0, rng),
            proj: Linear::init(model_dim, model_dim, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            discrete: self.discrete.as_ref().map(|l| Linear::zeros(l.input, l.output)),
            continuous: Linear::zeros(self.continuous.input, self.continuous.output),
            fuse: Linear::zeros(self.fuse.input, self.fuse.output),
            proj: Linear::zeros(self.proj.input, self.proj.output),
        }
    }

    fn hidden(&self) -> usize {
        self.continuous.output
    }

    /// Encode a single frame.
    pub fn encode(&self, frame: &ActionFrame) -> Result<Vec<T>> {
        if frame.kind() != self.kind {
            return Err(invalid(format!(
                "encoder expects {:?} actions, got {:?}",
                self.kind,
                frame.kind()
            )));
        }
        let row: Vec<T> = frame.values().iter().map(|&v| T::from_f64c(v)).collect();
        Ok(self.forward(&row).0)
    }

    /// Encode rows of `kind.fields()` values; returns features and tape.
    pub fn forward(&self, rows: &[T]) -> (Vec<T>, ActionTape<T>) {
        let f = self.kind.fields();
        let nd = self.kind.discrete();
        let n = rows.len() / f;
        let mut disc_in = Vec::with_capacity(n * nd);
        let mut cont_in = Vec::with_capacity(n * (f - nd));
        for r in rows.chunks_exact(f) {
            disc_in.extend_from_slice(&r[..nd]);
            cont_in.extend_from_slice(&r[nd..]);
        }
        let h = self.hidden();
        let disc_pre = self.discrete.as_ref().map(|l| l.forward(&disc_in)).unwrap_or_default();
        let cont_pre = self.continuous.forward(&cont_in);
        let branches = if self.discrete.is_some() { 2 } else { 1 };
        let mut cat = Vec::with_capacity(n * branches * h);
        for i in 0..n {
            if self.discrete.is_some() {
                cat.extend(disc_pre[i * h..(i + 1) * h].iter().map(|&x| silu(x)));
            }
            cat.extend(cont_pre[i * h..(i + 1) * h].iter().map(|&x| silu(x)));
        }
        let fuse_pre = self.fuse.forward(&cat);
        let fused: Vec<T> = fuse_pre.iter().map(|&x| silu(x)).collect();
        let out = self.proj.forward(&fused);
        (
            out,
            ActionTape {
                disc_in,
                cont_in,
                disc_pre,
                cont_pre,
                cat,
                fuse_pre,
                fused,
            },
        )
    }

    pub fn backward(&self, tape: &ActionTape<T>, dout: &[T], grad: &mut ActionEncoder<T>) {
        let dfused = self.proj.backward(&tape.fused, dout, &mut grad.proj);
        let dfuse_pre = silu_backward(&tape.fuse_pre, &dfused);
        let dcat = self.fuse.backward(&tape.cat, &dfuse_pre, &mut grad.fuse);
        let h = self.hidden();
        let branches = if self.discrete.is_some() { 2 } else { 1 };
        let n = dcat.len() / (branches * h);
        let mut ddisc = Vec::with_capacity(if branches == 2 { n * h } else { 0 });
        let mut dcont = Vec::with_capacity(n * h);
        for row in dcat.chunks_exact(branches * h) {
            if branches == 2 {
                ddisc.extend_from_slice(&row[..h]);
            }
            dcont.extend_from_slice(&row[(branches - 1) * h..]);
        }
        let dcont_pre = silu_backward(&tape.cont_pre, &dcont);
        self.continuous.accumulate_grad(&tape.cont_in, &dcont_pre, &mut grad.continuous);
        if let (Some(l), Some(g)) = (&self.discrete, grad.discrete.as_mut()) {
            let ddisc_pre = silu_backward(&tape.disc_pre, &ddisc);
            l.accumulate_grad(&tape.disc_in, &ddisc_pre, g);
        }
    }

    pub fn linears(&self) -> Vec<(&'static str, &Linear<T>)> {
        let mut v = Vec::new();
        if let Some(d) = &self.discrete {
            v.push(("discrete", d));
        }
        v.push(("continuous", &self.continuous));
        v.push(("fuse", &self.fuse));
        v.push(("proj", &self.proj));
        v
    }

    pub fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear<T>)> {
        let mut v = Vec::new();
        if let Some(d) = &mut self.discrete {
            v.push(("discrete", d));
        }
        v.push(("continuous", &mut self.continuous));
        v.push(("fuse", &mut self.fuse));
        v.push(("proj", &mut self.proj));
        v
    }
}
