#![allow(dead_code)]

use grad_core::{Matrix, SparseAdjacency};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi graph `G(n, p)`.
pub fn random_relation(n: usize, p: f64, seed: u64) -> SparseAdjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                pairs.push((i, j));
            }
        }
    }
    SparseAdjacency::from_edges(n, pairs).unwrap().0
}

pub fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn sorted_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = to_nalgebra(m).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Pairwise AUC: wins plus half ties over all positive/negative pairs.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct threshold from high to low.
/// Nodes tied at a threshold are revealed in index order.
pub fn ap_threshold_sweep(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for cut in 1..=order.len() {
        let top = &order[..cut];
        let tp = top.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / positives;
        let precision = tp / cut as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}
