//! Node group sampling: shuffle, cut into equal disjoint groups, slice out
//! each group's dense adjacency and map generated group matrices back.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GradError, Result};
use crate::graph::SparseAdjacency;
use crate::numeric::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeGroup {
    pub index: usize,
    /// Global node indices in shuffled order.
    pub members: Vec<usize>,
}

impl NodeGroup {
    pub fn k(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdjacency {
    pub group: NodeGroup,
    pub a_prime: Matrix,
}

/// Fisher–Yates shuffle of `0..n`, then consecutive chunks of `k`. The
/// trailing `n mod k` nodes are left out.
pub fn sample_node_groups(n: usize, k: usize, seed: u64) -> Result<Vec<NodeGroup>> {
    if k == 0 || k > n {
        return Err(GradError::Argument(format!(
            "group size {k} must be in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks_exact(k)
        .enumerate()
        .map(|(index, chunk)| NodeGroup {
            index,
            members: chunk.to_vec(),
        })
        .collect())
}

pub fn group_adjacency(rel: &SparseAdjacency, group: &NodeGroup) -> GroupAdjacency {
    let k = group.k();
    let mut a = Matrix::zeros(k, k);
    for p in 0..k {
        for q in p + 1..k {
            if rel.has_edge(group.members[p], group.members[q]) {
                a[(p, q)] = 1.0;
                a[(q, p)] = 1.0;
            }
        }
    }
    GroupAdjacency {
        group: group.clone(),
        a_prime: a,
    }
}

/// Block-diagonal union of per-group binary matrices mapped back to global
/// node indices. Nodes outside every group get no edges.
pub fn assemble_auxiliary_relation(
    n: usize,
    groups: &[NodeGroup],
    generated: &[Matrix],
) -> Result<SparseAdjacency> {
    if groups.len() != generated.len() {
        return Err(GradError::Contract(format!(
            "{} groups but {} generated matrices",
            groups.len(),
            generated.len()
        )));
    }
    let mut pairs = Vec::new();
    for (g, a) in groups.iter().zip(generated) {
        let k = g.k();
        if a.shape() != (k, k) {
            return Err(GradError::Contract(format!(
                "group {} has {k} members but a {}x{} matrix",
                g.index,
                a.rows(),
                a.cols()
            )));
        }
        for p in 0..k {
            if a[(p, p)] != 0.0 {
                return Err(GradError::Contract(format!(
                    "group {}: non-zero diagonal at {p}",
                    g.index
                )));
            }
            for q in p + 1..k {
                let v = a[(p, q)];
                if v != 0.0 && v != 1.0 {
                    return Err(GradError::Contract(format!(
                        "group {}: entry ({p}, {q}) = {v} is not binary",
                        g.index
                    )));
                }
                if v != a[(q, p)] {
                    return Err(GradError::Contract(format!(
                        "group {}: asymmetric at ({p}, {q})",
                        g.index
                    )));
                }
                if v == 1.0 {
                    pairs.push((g.members[p], g.members[q]));
                }
            }
        }
    }
    Ok(SparseAdjacency::from_edges(n, pairs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn floor_semantics() {
        let groups = sample_node_groups(10, 3, 1).unwrap();
        assert_eq!(groups.len(), 3);
        let covered: usize = groups.iter().map(NodeGroup::k).sum();
        assert_eq!(covered, 9);
    }

    #[test]
    fn single_group_is_permutation() {
        let groups = sample_node_groups(7, 7, 2).unwrap();
        assert_eq!(groups.len(), 1);
        let mut m = groups[0].members.clone();
        m.sort_unstable();
        assert_eq!(m, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            sample_node_groups(100, 8, 42).unwrap(),
            sample_node_groups(100, 8, 42).unwrap()
        );
        assert_ne!(
            sample_node_groups(100, 8, 42).unwrap(),
            sample_node_groups(100, 8, 43).unwrap()
        );
    }

    #[test]
    fn rejects_oversized_groups() {
        assert!(sample_node_groups(5, 6, 0).is_err());
        assert!(sample_node_groups(5, 0, 0).is_err());
    }

    #[test]
    fn groups_are_disjoint() {
        let groups = sample_node_groups(101, 10, 9).unwrap();
        let mut seen = vec![false; 101];
        for g in &groups {
            for &m in &g.members {
                assert!(!std::mem::replace(&mut seen[m], true));
            }
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), 100);
    }

    #[test]
    fn slice_of_edgeless_group_is_zero() {
        let (rel, _) = SparseAdjacency::from_edges(6, [(0, 1)]).unwrap();
        let g = NodeGroup { index: 0, members: vec![2, 3, 4] };
        assert_eq!(group_adjacency(&rel, &g).a_prime, Matrix::zeros(3, 3));
    }

    #[test]
    fn slice_of_triangle_is_complete() {
        let (rel, _) = SparseAdjacency::from_edges(5, [(1, 3), (3, 4), (1, 4), (0, 2)]).unwrap();
        let g = NodeGroup { index: 0, members: vec![4, 1, 3] };
        let a = group_adjacency(&rel, &g).a_prime;
        let expected = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(a, expected);
    }

    #[test]
    fn slice_matches_pairwise_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<(usize, usize)> = (0..120).map(|_| (rng.random_range(0..40), rng.random_range(0..40))).collect();
        let (rel, _) = SparseAdjacency::from_edges(40, pairs.clone()).unwrap();
        for g in sample_node_groups(40, 9, 3).unwrap() {
            let a = group_adjacency(&rel, &g).a_prime;
            for p in 0..9 {
                for q in 0..9 {
                    let (u, v) = (g.members[p], g.members[q]);
                    let oracle = u != v && pairs.iter().any(|&(x, y)| (x, y) == (u, v) || (x, y) == (v, u));
                    assert_eq!(a[(p, q)] == 1.0, oracle);
                }
            }
        }
    }

    #[test]
    fn assemble_empty() {
        let groups = sample_node_groups(20, 5, 0).unwrap();
        let gen = vec![Matrix::zeros(5, 5); groups.len()];
        assert_eq!(assemble_auxiliary_relation(20, &groups, &gen).unwrap().num_edges(), 0);
    }

    #[test]
    fn assemble_dense_single_group() {
        let groups = sample_node_groups(9, 6, 0).unwrap();
        let full = Matrix::from_fn(6, 6, |i, j| if i == j { 0.0 } else { 1.0 });
        let rel = assemble_auxiliary_relation(9, &groups, &[full]).unwrap();
        assert_eq!(rel.num_edges(), 15);
        for &(u, v) in rel.edges() {
            assert!(groups[0].members.contains(&u) && groups[0].members.contains(&v));
        }
    }

    #[test]
    fn assemble_counts_and_stays_within_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let groups = sample_node_groups(23, 5, 4).unwrap();
        let mut expected = 0;
        let gen: Vec<Matrix> = groups
            .iter()
            .map(|_| {
                let mut a = Matrix::zeros(5, 5);
                for p in 0..5 {
                    for q in p + 1..5 {
                        if rng.random_bool(0.4) {
                            a[(p, q)] = 1.0;
                            a[(q, p)] = 1.0;
                            expected += 1;
                        }
                    }
                }
                a
            })
            .collect();
        let rel = assemble_auxiliary_relation(23, &groups, &gen).unwrap();
        assert_eq!(rel.num_edges(), expected);
        let mut owner = vec![usize::MAX; 23];
        for g in &groups {
            for &m in &g.members {
                owner[m] = g.index;
            }
        }
        assert!(rel.edges().iter().all(|&(u, v)| owner[u] == owner[v] && owner[u] != usize::MAX));
    }

    #[test]
    fn assemble_rejects_bad_matrices() {
        let groups = sample_node_groups(4, 2, 0).unwrap();
        let asym = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let frac = Matrix::from_rows(&[vec![0.0, 0.3], vec![0.3, 0.0]]).unwrap();
        let ok = Matrix::zeros(2, 2);
        assert!(assemble_auxiliary_relation(4, &groups, &[asym, ok.clone()]).is_err());
        assert!(assemble_auxiliary_relation(4, &groups, &[ok.clone(), frac]).is_err());
        assert!(assemble_auxiliary_relation(4, &groups, &[ok]).is_err());
    }
}
