//! Multi-relation graphs, normalized Laplacians and the homophily and
//! neighbor-similarity measurements used to characterise camouflage.

use crate::error::{GradError, Result};
use crate::numeric::{dot, Matrix};

pub const BENIGN: u8 = 0;
pub const FRAUD: u8 = 1;

/// Undirected simple graph on `n` nodes stored as a sorted edge list with
/// `u < v`, plus sorted neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAdjacency {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

/// What [`SparseAdjacency::from_edges`] had to clean up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeCleanup {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl SparseAdjacency {
    pub fn empty(n: usize) -> Self {
        SparseAdjacency {
            n,
            edges: Vec::new(),
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds a relation from arbitrary (possibly directed, repeated,
    /// self-looping) pairs. Pairs are symmetrized, self-loops dropped.
    pub fn from_edges(
        n: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, EdgeCleanup)> {
        let mut cleanup = EdgeCleanup::default();
        let mut edges = Vec::new();
        for (u, v) in pairs {
            if u >= n || v >= n {
                return Err(GradError::Data(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                cleanup.self_loops += 1;
                continue;
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        cleanup.duplicates = before - edges.len();
        Ok((Self::from_canonical(n, edges), cleanup))
    }

    /// Caller guarantees `edges` are sorted, deduplicated, `u < v < n`.
    fn from_canonical(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        SparseAdjacency {
            n,
            edges,
            neighbors,
        }
    }

    /// Reads a dense 0/1 matrix. Must be symmetric with zero diagonal.
    pub fn from_dense(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(GradError::Shape(format!(
                "adjacency must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let n = a.rows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(GradError::Contract(format!("entry ({i}, {j}) = {v} is not binary")));
                }
                if v != a[(j, i)] {
                    return Err(GradError::Contract(format!("asymmetric at ({i}, {j})")));
                }
                if i == j && v != 0.0 {
                    return Err(GradError::Contract(format!("self-loop at {i}")));
                }
                if i < j && v == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        Ok(Self::from_canonical(n, edges))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }

    /// Edge-set union. Both relations must have the same node count.
    pub fn union(&self, other: &SparseAdjacency) -> Result<SparseAdjacency> {
        if self.n != other.n {
            return Err(GradError::Shape(format!(
                "union of relations on {} and {} nodes",
                self.n, other.n
            )));
        }
        let mut edges = Vec::with_capacity(self.edges.len() + other.edges.len());
        let (mut i, mut j) = (0, 0);
        while i < self.edges.len() || j < other.edges.len() {
            let next = match (self.edges.get(i), other.edges.get(j)) {
                (Some(a), Some(b)) if a == b => {
                    i += 1;
                    j += 1;
                    *a
                }
                (Some(a), Some(b)) if a < b => {
                    i += 1;
                    *a
                }
                (Some(_), Some(b)) => {
                    j += 1;
                    *b
                }
                (Some(a), None) => {
                    i += 1;
                    *a
                }
                (None, Some(b)) => {
                    j += 1;
                    *b
                }
                (None, None) => unreachable!(),
            };
            edges.push(next);
        }
        Ok(Self::from_canonical(self.n, edges))
    }

    /// Connected components as sorted node lists, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Node features, optional binary labels and one or more relations over the
/// same node set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRelationGraph {
    pub features: Matrix,
    /// `Some(0)` benign, `Some(1)` fraud, `None` unlabeled.
    pub labels: Vec<Option<u8>>,
    pub relations: Vec<SparseAdjacency>,
    pub relation_names: Vec<String>,
    /// Original external id of each dense node index.
    pub node_ids: Vec<i64>,
}

impl MultiRelationGraph {
    pub fn new(
        features: Matrix,
        labels: Vec<Option<u8>>,
        relations: Vec<SparseAdjacency>,
        relation_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.rows();
        let g = MultiRelationGraph {
            node_ids: (0..n as i64).collect(),
            features,
            labels,
            relations,
            relation_names,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.labels.len() != n {
            return Err(GradError::Data(format!(
                "{} labels for {n} nodes",
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().flatten().find(|&&l| l > 1) {
            return Err(GradError::Data(format!("label {l} outside {{0,1}}")));
        }
        if self.node_ids.len() != n {
            return Err(GradError::Data("node id map length mismatch".into()));
        }
        if self.relations.len() != self.relation_names.len() {
            return Err(GradError::Data("relation names do not match relations".into()));
        }
        if let Some(r) = self.relations.iter().find(|r| r.n() != n) {
            return Err(GradError::Data(format!(
                "relation on {} nodes in a graph of {n}",
                r.n()
            )));
        }
        if !self.features.is_finite() {
            return Err(GradError::Data("non-finite feature value".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn relation(&self, index: usize) -> Result<&SparseAdjacency> {
        self.relations.get(index).ok_or_else(|| {
            GradError::Argument(format!(
                "relation {index} requested, graph has {}",
                self.relations.len()
            ))
        })
    }

    pub fn with_relation(&self, name: impl Into<String>, rel: SparseAdjacency) -> Result<Self> {
        let mut g = self.clone();
        g.relations.push(rel);
        g.relation_names.push(name.into());
        g.validate()?;
        Ok(g)
    }
}

/// Sparse operator `L = I − D^{-1/2} A D^{-1/2}`.
///
/// Isolated nodes have `D^{-1/2}` entry 0, so their row of `L` is the
/// identity row.
#[derive(Debug, Clone)]
pub struct Laplacian {
    inv_sqrt_degree: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
}

pub fn normalized_laplacian(a: &SparseAdjacency) -> Laplacian {
    let inv_sqrt_degree = (0..a.n())
        .map(|u| match a.degree(u) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    Laplacian {
        inv_sqrt_degree,
        neighbors: a.neighbors.clone(),
    }
}

impl Laplacian {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// `L · x` for an `n × d` block.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n() {
            return Err(GradError::Shape(format!(
                "laplacian on {} nodes applied to {} rows",
                self.n(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        let d = x.cols();
        let mut acc = vec![0.0; d];
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            for &j in nbrs {
                let w = self.inv_sqrt_degree[j];
                for (a, xv) in acc.iter_mut().zip(x.row(j)) {
                    *a += w * xv;
                }
            }
            let wi = self.inv_sqrt_degree[i];
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o -= wi * a;
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.n();
        let mut l = Matrix::identity(n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                l[(i, j)] = -self.inv_sqrt_degree[i] * self.inv_sqrt_degree[j];
            }
        }
        l
    }
}

/// Fraction of edge incidences at nodes of `node_class` whose other
/// endpoint carries the same label.
///
/// Every (node, incident edge) pair is one incidence, so an edge joining two
/// nodes of the class counts twice. Edges to unlabeled nodes are ignored.
pub fn homophily_ratio(a: &SparseAdjacency, labels: &[Option<u8>], node_class: u8) -> Result<f64> {
    if labels.len() != a.n() {
        return Err(GradError::Shape(format!(
            "{} labels for a relation on {} nodes",
            labels.len(),
            a.n()
        )));
    }
    let mut same = 0usize;
    let mut total = 0usize;
    for u in 0..a.n() {
        if labels[u] != Some(node_class) {
            continue;
        }
        for &v in a.neighbors(u) {
            match labels[v] {
                Some(l) if l == node_class => {
                    same += 1;
                    total += 1;
                }
                Some(_) => total += 1,
                None => {}
            }
        }
    }
    if total == 0 {
        return Err(GradError::UndefinedRatio(format!(
            "no labeled node of class {node_class} has a labeled neighbor"
        )));
    }
    Ok(same as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    /// Cosine similarity to the neighbor mean, one entry per non-isolated
    /// benign node.
    pub benign: Vec<f64>,
    pub fraud: Vec<f64>,
    /// Fraction of fraud similarities strictly above the benign median.
    pub similarity_ratio: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-class distribution of cos(xᵢ, mean of neighbors' features) and the
/// share of fraud nodes above the benign median.
pub fn fraud_benign_similarity_stats(
    g: &MultiRelationGraph,
    relation_index: usize,
) -> Result<SimilarityStats> {
    let rel = g.relation(relation_index)?;
    similarity_stats_with(&g.features, rel, &g.labels)
}

pub(crate) fn similarity_stats_with(
    features: &Matrix,
    rel: &SparseAdjacency,
    labels: &[Option<u8>],
) -> Result<SimilarityStats> {
    let d = features.cols();
    let mut mean = vec![0.0; d];
    let mut benign = Vec::new();
    let mut fraud = Vec::new();
    for u in 0..rel.n() {
        let Some(label) = labels[u] else { continue };
        let nbrs = rel.neighbors(u);
        if nbrs.is_empty() {
            continue;
        }
        mean.iter_mut().for_each(|v| *v = 0.0);
        for &v in nbrs {
            for (m, x) in mean.iter_mut().zip(features.row(v)) {
                *m += x;
            }
        }
        let inv = 1.0 / nbrs.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        let s = cosine(features.row(u), &mean);
        if label == FRAUD {
            fraud.push(s);
        } else {
            benign.push(s);
        }
    }
    if benign.is_empty() || fraud.is_empty() {
        return Err(GradError::UndefinedRatio(
            "every node of a class is isolated or unlabeled".into(),
        ));
    }
    let med = median(&benign);
    let above = fraud.iter().filter(|&&s| s > med).count();
    Ok(SimilarityStats {
        similarity_ratio: above as f64 / fraud.len() as f64,
        benign,
        fraud,
    })
}

/// Union of every relation's edge set.
pub fn fuse_raw_relations(g: &MultiRelationGraph) -> Result<SparseAdjacency> {
    let (first, rest) = g
        .relations
        .split_first()
        .ok_or_else(|| GradError::Argument("graph has no relations to fuse".into()))?;
    rest.iter().try_fold(first.clone(), |acc, r| acc.union(r))
}
