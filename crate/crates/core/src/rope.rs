//! Factorized rotary embedding over (t, p, h, w) bands.
//!
//! Head dimensions are laid out as `[t | p | h | w]`; inside each band
//! consecutive pairs `(x[2r], x[2r+1])` are rotated together. Temporal and
//! spatial bands use the geometric schedule `base^(-2r/d)`; the agent band
//! takes the scaled simplex vertex directly as its angle vector.

use crate::error::{invalid, Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::simplex::{agent_angles, SimplexPool, VertexAssignment};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeLayout {
    d_t: usize,
    d_p: usize,
    d_h: usize,
    d_w: usize,
    base: f64,
    temporal_freqs: Vec<f64>,
    height_freqs: Vec<f64>,
    width_freqs: Vec<f64>,
}

fn schedule(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|r| base.powf(-2.0 * r as f64 / d as f64))
        .collect()
}

impl RopeLayout {
    pub fn new(d_t: usize, d_p: usize, d_h: usize, d_w: usize) -> Result<Self> {
        Self::with_base(d_t, d_p, d_h, d_w, 10_000.0)
    }

    pub fn with_base(d_t: usize, d_p: usize, d_h: usize, d_w: usize, base: f64) -> Result<Self> {
        for (name, d) in [("d_t", d_t), ("d_p", d_p), ("d_h", d_h), ("d_w", d_w)] {
            if d % 2 != 0 {
                return Err(invalid(format!("rotary band {name}={d} must be even")));
            }
        }
        if !(base > 1.0) {
            return Err(invalid(format!("rotary base must exceed 1, got {base}")));
        }
        Ok(Self {
            d_t,
            d_p,
            d_h,
            d_w,
            base,
            temporal_freqs: schedule(d_t, base),
            height_freqs: schedule(d_h, base),
            width_freqs: schedule(d_w, base),
        })
    }

    /// Desk-scale default `(16, 8, 4, 4)`.
    pub fn desk() -> Self {
        Self::new(16, 8, 4, 4).expect("valid default layout")
    }

    /// Production partition `(64, 32, 16, 16)`.
    pub fn production() -> Self {
        Self::new(64, 32, 16, 16).expect("valid production layout")
    }

    pub fn bands(&self) -> (usize, usize, usize, usize) {
        (self.d_t, self.d_p, self.d_h, self.d_w)
    }

    pub fn d_head(&self) -> usize {
        self.d_t + self.d_p + self.d_h + self.d_w
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Agent-angle dimension `d_p / 2`.
    pub fn agent_slots(&self) -> usize {
        self.d_p / 2
    }

    pub fn temporal_freqs(&self) -> &[f64] {
        &self.temporal_freqs
    }

    pub fn height_freqs(&self) -> &[f64] {
        &self.height_freqs
    }

    pub fn width_freqs(&self) -> &[f64] {
        &self.width_freqs
    }
}

/// Move the `d_p` lowest-frequency temporal dimensions into a new agent band.
///
/// The remaining temporal frequencies and both spatial bands are unchanged.
pub fn reallocate_temporal_band(layout: &RopeLayout, d_p: usize) -> Result<RopeLayout> {
    if d_p % 2 != 0 {
        return Err(invalid(format!("agent band d_p={d_p} must be even")));
    }
    if d_p == 0 {
        return Ok(layout.clone());
    }
    if d_p >= layout.d_t {
        return Err(invalid(format!(
            "cannot take d_p={d_p} from a temporal band of {}",
            layout.d_t
        )));
    }
    let mut out = layout.clone();
    out.d_t -= d_p;
    out.d_p += d_p;
    out.temporal_freqs.truncate(out.d_t / 2);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Identity {
    Agent(usize),
    Hub,
}

/// Position of one token in the multi-agent sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenCoordinate {
    pub identity: Identity,
    pub t: usize,
    /// Spatial row; for hub tokens this holds the hub slot and carries no phase.
    pub h: usize,
    pub w: usize,
    pub block: usize,
}

/// Layout plus per-agent simplex phases, ready to produce angle vectors.
#[derive(Debug, Clone)]
pub struct RotaryEncoder {
    layout: RopeLayout,
    agent_phase: Vec<Vec<f64>>,
    frames: usize,
    height: usize,
    width: usize,
}

impl RotaryEncoder {
    pub fn new(
        layout: &RopeLayout,
        pool: &SimplexPool,
        assignment: &VertexAssignment,
        extent: (usize, usize, usize),
    ) -> Result<Self> {
        if pool.d_half() != layout.agent_slots() {
            return Err(invalid(format!(
                "simplex pool has {} angle dimensions but the agent band holds {}",
                pool.d_half(),
                layout.agent_slots()
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            agent_phase: agent_angles(pool, assignment)?,
            frames: extent.0,
            height: extent.1,
            width: extent.2,
        })
    }

    pub fn layout(&self) -> &RopeLayout {
        &self.layout
    }

    pub fn agents(&self) -> usize {
        self.agent_phase.len()
    }

    /// Angle vector of length `d_head / 2`.
    pub fn angles(&self, coord: &TokenCoordinate) -> Result<Vec<f64>> {
        if coord.t >= self.frames {
            return Err(Error::OutOfRange(format!("frame {} of {}", coord.t, self.frames)));
        }
        let l = &self.layout;
        let mut out = Vec::with_capacity(l.d_head() / 2);
        let t = coord.t as f64;
        out.extend(l.temporal_freqs.iter().map(|f| t * f));
        match coord.identity {
            Identity::Hub => {
                out.resize(l.d_head() / 2, 0.0);
            }
            Identity::Agent(p) => {
                let phase = self
                    .agent_phase
                    .get(p)
                    .ok_or_else(|| Error::OutOfRange(format!("agent {p} of {}", self.agents())))?;
                if coord.h >= self.height || coord.w >= self.width {
                    return Err(Error::OutOfRange(format!(
                        "spatial ({}, {}) in {}x{}",
                        coord.h, coord.w, self.height, self.width
                    )));
                }
                out.extend_from_slice(phase);
                let (h, w) = (coord.h as f64, coord.w as f64);
                out.extend(l.height_freqs.iter().map(|f| h * f));
                out.extend(l.width_freqs.iter().map(|f| w * f));
            }
        }
        Ok(out)
    }
}

/// Angles for one token (see [`RotaryEncoder::angles`]).
pub fn rope_angles(
    layout: &RopeLayout,
    pool: &SimplexPool,
    assignment: &VertexAssignment,
    coord: &TokenCoordinate,
    extent: (usize, usize, usize),
) -> Result<Vec<f64>> {
    RotaryEncoder::new(layout, pool, assignment, extent)?.angles(coord)
}

/// Precomputed cosines and sines for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> Rotation<T> {
    pub fn from_angles(angles: &[f64]) -> Self {
        Self {
            cos: angles.iter().map(|a| T::from_f64c(a.cos())).collect(),
            sin: angles.iter().map(|a| T::from_f64c(a.sin())).collect(),
        }
    }

    /// Rotate consecutive pairs of `x` in place.
    #[inline]
    pub fn apply(&self, x: &mut [T]) {
        for ((pair, &c), &s) in x.chunks_exact_mut(2).zip(&self.cos).zip(&self.sin) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }

    /// Inverse rotation (transpose), used by the backward pass.
    #[inline]
    pub fn apply_inverse(&self, x: &mut [T]) {
        for ((pair, &c), &s) in x.chunks_exact_mut(2).zip(&self.cos).zip(&self.sin) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c + b * s;
            pair[1] = -a * s + b * c;
        }
    }
}

/// Rotate every trailing-axis row of `x` by the same angle vector.
pub fn apply_rotary<T: Scalar>(x: &Tensor<T>, angles: &[f64]) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| invalid("apply_rotary on a scalar"))?;
    if d != 2 * angles.len() {
        return Err(Error::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: vec![2 * angles.len()],
            context: "apply_rotary trailing extent vs angle count",
        });
    }
    let rot = Rotation::<T>::from_angles(angles);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        rot.apply(row);
    }
    Ok(out)
}
