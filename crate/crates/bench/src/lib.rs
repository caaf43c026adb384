//! Deterministic inputs for the kernel benchmarks.

use grad_core::{Matrix, SparseAdjacency};

/// Entries in `[-1, 1)` from a multiplicative hash of the position.
pub fn filled(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let h = ((i * cols + j) as u64 ^ seed)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .rotate_left(29)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
        (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// Ring with `chords` extra edges per node at fixed strides.
pub fn ring_graph(n: usize, chords: usize) -> SparseAdjacency {
    let mut pairs = Vec::new();
    for u in 0..n {
        pairs.push((u, (u + 1) % n));
        for c in 0..chords {
            pairs.push((u, (u + 7 + 13 * c) % n));
        }
    }
    SparseAdjacency::from_edges(n, pairs).expect("valid ring").0
}

/// Rows scaled to unit length.
pub fn unit_rows(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m[(i, j)] / norm
    })
}
