//! Multi-agent world-model toolkit.
//!
//! Agents are identified by rotary phases placed on the vertices of a regular
//! simplex, talk to each other only through a small set of hub tokens, and are
//! rolled out block by block with per-agent key/value caches.
//!
//! Module map:
//! - [`numerics`]: tensors, masked softmax, seeded random streams, tensor dumps
//! - [`simplex`]: simplex vertex pools and agent-to-vertex assignments
//! - [`rope`]: factorized (t, p, h, w) rotary embedding
//! - [`topology`]: token layout and attention mask algebra
//! - [`attention`]: dense reference, sparse hub kernel, analytic cost model
//! - [`model`]: toy action-conditioned diffusion transformer with hand-written backward
//! - [`streaming`]: KV-cached block-autoregressive rollout
//! - [`bench`]: dense vs hub scaling study
//! - [`verify`]: quick property suite used by the CLI

pub mod attention;
pub mod bench;
pub mod error;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod simplex;
pub mod streaming;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};
