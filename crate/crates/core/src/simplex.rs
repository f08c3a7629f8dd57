//! Regular-simplex agent identities.
//!
//! Each of the `V` pool vertices is a unit vector in the `d_half`-dimensional
//! agent-angle space; every pair of distinct vertices sits at squared distance
//! `2V/(V-1)`. Agents are mapped injectively onto vertices and the scaled
//! vertex becomes the agent's rotary phase.

use crate::error::{invalid, Error, Result};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

/// How the zero-mean subspace of `R^V` is mapped into agent-angle space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Embedding {
    /// Helmert basis in the first `V-1` coordinates, zero rows after that.
    #[default]
    Helmert,
    /// Centered one-hot vectors in the first `V` coordinates, zero rows after
    /// that. Needs `d_half >= V`; all pairwise difference vectors share one
    /// coordinate pattern, so complex-phase distances are exactly equal too.
    CenteredOneHot,
}

impl std::str::FromStr for Embedding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "helmert" => Ok(Self::Helmert),
            "onehot" | "centered-onehot" => Ok(Self::CenteredOneHot),
            other => Err(invalid(format!("unknown simplex embedding '{other}'"))),
        }
    }
}

/// Deterministic `(V-1) x V` Helmert matrix, row-major.
///
/// Row `k` (1-based) is `(1, .., 1, -k, 0, .., 0) / sqrt(k(k+1))` with `k`
/// leading ones; rows are orthonormal and each annihilates the all-ones vector.
pub fn build_isometry(v: usize) -> Result<Vec<Vec<f64>>> {
    if v < 2 {
        return Err(invalid(format!("simplex needs V >= 2, got {v}")));
    }
    let rows = (1..v)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            (0..v)
                .map(|j| match j.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexPool {
    v: usize,
    d_half: usize,
    alpha: f64,
    embedding: Embedding,
    vertices: Vec<Vec<f64>>,
}

impl SimplexPool {
    pub fn new(v: usize, d_half: usize, alpha: f64) -> Result<Self> {
        Self::with_embedding(v, d_half, alpha, Embedding::Helmert)
    }

    pub fn with_embedding(v: usize, d_half: usize, alpha: f64, embedding: Embedding) -> Result<Self> {
        if v < 2 {
            return Err(invalid(format!("simplex needs V >= 2, got {v}")));
        }
        if v > d_half + 1 {
            return Err(invalid(format!(
                "pool size V={v} does not fit in {d_half} agent-angle dimensions"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(invalid(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        let scale = (v as f64 / (v as f64 - 1.0)).sqrt();
        let vertices = match embedding {
            Embedding::Helmert => {
                let q = build_isometry(v)?;
                (0..v)
                    .map(|vi| {
                        let mut s = vec![0.0; d_half];
                        // Q 1 = 0, so Q (e_v - 1/V) is just column v of Q.
                        for (r, row) in q.iter().enumerate() {
                            let centered: f64 = row
                                .iter()
                                .enumerate()
                                .map(|(j, &x)| x * ((j == vi) as u8 as f64 - 1.0 / v as f64))
                                .sum();
                            s[r] = scale * centered;
                        }
                        s
                    })
                    .collect()
            }
            Embedding::CenteredOneHot => {
                if d_half < v {
                    return Err(invalid(format!(
                        "centered one-hot embedding needs d_half >= V ({d_half} < {v})"
                    )));
                }
                (0..v)
                    .map(|vi| {
                        let mut s = vec![0.0; d_half];
                        for (j, x) in s.iter_mut().take(v).enumerate() {
                            *x = scale * ((j == vi) as u8 as f64 - 1.0 / v as f64);
                        }
                        s
                    })
                    .collect()
            }
        };
        Ok(Self {
            v,
            d_half,
            alpha,
            embedding,
            vertices,
        })
    }

    pub fn size(&self) -> usize {
        self.v
    }

    pub fn d_half(&self) -> usize {
        self.d_half
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn embedding(&self) -> Embedding {
        self.embedding
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.vertices[v]
    }

    /// Same geometry with a different separation scale.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::with_embedding(self.v, self.d_half, alpha, self.embedding)
    }

    /// Vertices as a `V x d_half` row-major matrix.
    pub fn to_matrix(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }
}

/// Injective map from agent slot to pool vertex (both 0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexAssignment(Vec<usize>);

impl VertexAssignment {
    pub fn new(map: Vec<usize>, pool_size: usize) -> Result<Self> {
        if map.len() > pool_size {
            return Err(Error::PoolExhausted {
                agents: map.len(),
                pool: pool_size,
            });
        }
        let mut seen = vec![false; pool_size];
        for &v in &map {
            if v >= pool_size {
                return Err(Error::OutOfRange(format!("vertex {v} in pool of {pool_size}")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(invalid(format!("vertex {v} assigned twice")));
            }
        }
        Ok(Self(map))
    }

    /// Agents `0..P` on vertices `0..P`.
    pub fn identity(agents: usize, pool_size: usize) -> Result<Self> {
        Self::new((0..agents).collect(), pool_size)
    }

    pub fn agents(&self) -> usize {
        self.0.len()
    }

    pub fn vertex_of(&self, agent: usize) -> usize {
        self.0[agent]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Assignment after reordering agents: new slot `i` is old slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(perm.iter().map(|&p| self.0[p]).collect())
    }
}

/// Uniformly random injective assignment of `agents` slots into the pool.
pub fn sample_assignment(agents: usize, pool_size: usize, rng: &mut RngStream) -> Result<VertexAssignment> {
    if agents > pool_size {
        return Err(Error::PoolExhausted {
            agents,
            pool: pool_size,
        });
    }
    let mut verts: Vec<usize> = (0..pool_size).collect();
    // Partial Fisher-Yates: the first `agents` entries are a uniform injective draw.
    for i in 0..agents {
        let j = i + rng.below(pool_size - i);
        verts.swap(i, j);
    }
    verts.truncate(agents);
    Ok(VertexAssignment(verts))
}

/// Per-agent rotary phase `alpha * s_{pi(p)}`.
pub fn agent_angles(pool: &SimplexPool, assignment: &VertexAssignment) -> Result<Vec<Vec<f64>>> {
    assignment
        .as_slice()
        .iter()
        .map(|&v| {
            if v >= pool.size() {
                return Err(Error::OutOfRange(format!("vertex {v} in pool of {}", pool.size())));
            }
            Ok(pool.vertex(v).iter().map(|x| pool.alpha() * x).collect())
        })
        .collect()
}

/// Squared distance between two agents' unit-modulus rotary phases,
/// `sum_r 2 (1 - cos(theta_p^r - theta_q^r))`, evaluated exactly.
pub fn complex_pair_distance(
    pool: &SimplexPool,
    assignment: &VertexAssignment,
    p: usize,
    q: usize,
) -> Result<f64> {
    if p == q {
        return Err(invalid("complex_pair_distance needs two distinct agents"));
    }
    if p >= assignment.agents() || q >= assignment.agents() {
        return Err(Error::OutOfRange(format!(
            "agents {p},{q} of {}",
            assignment.agents()
        )));
    }
    let a = pool.vertex(assignment.vertex_of(p));
    let b = pool.vertex(assignment.vertex_of(q));
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| 2.0 * (1.0 - (pool.alpha() * (x - y)).cos()))
        .sum())
}
