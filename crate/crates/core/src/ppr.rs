//! Personalized PageRank diffusion and sparsification.
//!
//! `S = φ (I − (1−φ) D^{-1/2} A D^{-1/2})⁻¹`, solved densely per connected
//! component, then cut down to a binary relation by per-row top-k.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::graph::SparseAdjacency;
use crate::numeric::{matmul, Matrix};

/// Largest node count accepted by the dense solve.
pub const MAX_DENSE_NODES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprConfig {
    pub phi: f64,
    pub topk: usize,
    pub epsilon_cut: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        PprConfig {
            phi: 0.15,
            topk: 64,
            epsilon_cut: 1e-4,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(GradError::Config(format!("teleport probability {} outside (0,1)", self.phi)));
        }
        if self.topk == 0 {
            return Err(GradError::Config("PPR top-k must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi < 1.0 {
        Ok(())
    } else {
        Err(GradError::Argument(format!("teleport probability {phi} outside (0,1)")))
    }
}

/// `D^{-1/2} A D^{-1/2}` with degrees as row sums; zero-degree rows stay 0.
pub fn sym_normalized(a: &Matrix) -> Matrix {
    let inv: Vec<f64> = (0..a.rows())
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Matrix::from_fn(a.rows(), a.cols(), |i, j| inv[i] * a[(i, j)] * inv[j])
}

/// Closed form on a dense (possibly weighted, self-looped) adjacency.
pub fn ppr_dense_matrix(a: &Matrix, phi: f64) -> Result<Matrix> {
    check_phi(phi)?;
    let n = a.rows();
    if a.cols() != n {
        return Err(GradError::Shape("PPR needs a square adjacency".into()));
    }
    if n > MAX_DENSE_NODES {
        return Err(GradError::Size(format!(
            "{n} nodes exceed the dense PPR limit of {MAX_DENSE_NODES}; sparsify the relation or use the truncated series"
        )));
    }
    let t = sym_normalized(a);
    let m = DMatrix::from_fn(n, n, |i, j| f64::from(i == j) - (1.0 - phi) * t[(i, j)]);
    let inv = m
        .lu()
        .try_inverse()
        .ok_or_else(|| GradError::Numeric("PPR system is singular".into()))?;
    let s = Matrix::from_fn(n, n, |i, j| phi * inv[(i, j)]);
    if !s.is_finite() {
        return Err(GradError::Numeric("non-finite PPR entries".into()));
    }
    Ok(s)
}

/// Dense PPR matrix of a relation. Each connected component is solved on its
/// own; cross-component entries are exactly 0.
pub fn ppr_dense(rel: &SparseAdjacency, phi: f64) -> Result<Matrix> {
    check_phi(phi)?;
    let n = rel.n();
    if n > MAX_DENSE_NODES {
        return Err(GradError::Size(format!(
            "{n} nodes exceed the dense PPR limit of {MAX_DENSE_NODES}; sparsify the relation or use the truncated series"
        )));
    }
    let mut s = Matrix::zeros(n, n);
    for comp in rel.components() {
        if comp.len() == 1 {
            s[(comp[0], comp[0])] = phi;
            continue;
        }
        let local = Matrix::from_fn(comp.len(), comp.len(), |i, j| f64::from(rel.has_edge(comp[i], comp[j])));
        let sub = ppr_dense_matrix(&local, phi)?;
        for (i, &u) in comp.iter().enumerate() {
            for (j, &v) in comp.iter().enumerate() {
                s[(u, v)] = sub[(i, j)];
            }
        }
    }
    Ok(s)
}

/// `Σ_{k=0..K} φ(1−φ)ᵏ Tᵏ` with `T = D^{-1/2} A D^{-1/2}`.
pub fn ppr_truncated_oracle(a: &Matrix, phi: f64, terms: usize) -> Result<Matrix> {
    check_phi(phi)?;
    let t = sym_normalized(a);
    let n = a.rows();
    let mut power = Matrix::identity(n);
    let mut s = Matrix::identity(n).scale(phi);
    let mut theta = phi;
    for _ in 0..terms {
        power = matmul(&power, &t)?;
        theta *= 1.0 - phi;
        s.axpy(theta, &power)?;
    }
    Ok(s)
}

/// Keeps, per row, the `topk` largest positive off-diagonal scores that
/// reach `epsilon_cut` (ties broken by lower column index), then
/// symmetrizes by union.
pub fn sparsify_ppr(s: &Matrix, cfg: &PprConfig) -> Result<SparseAdjacency> {
    let n = s.rows();
    let mut pairs = Vec::new();
    let mut row: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        row.clear();
        row.extend(
            s.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v > 0.0 && v >= cfg.epsilon_cut)
                .map(|(j, &v)| (v, j)),
        );
        row.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(row.iter().take(cfg.topk).map(|&(_, j)| (i, j)));
    }
    Ok(SparseAdjacency::from_edges(n, pairs)?.0)
}

/// Dense solve followed by sparsification.
pub fn ppr_relation(rel: &SparseAdjacency, cfg: &PprConfig) -> Result<SparseAdjacency> {
    cfg.validate()?;
    sparsify_ppr(&ppr_dense(rel, cfg.phi)?, cfg)
}
