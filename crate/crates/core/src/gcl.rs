//! Supervised graph contrastive learning.
//!
//! A high-pass encoder (each layer transforms `Hᵢ − mean(H over neighbors)`)
//! feeds a linear projection whose rows are L2-normalized into embeddings
//! `zᵢ`. Training minimizes the supervised contrastive loss over labeled
//! training nodes; the trained embeddings then drive the similarity guidance
//! energy used by the diffusion sampler.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{GradError, Result};
use crate::graph::{MultiRelationGraph, SparseAdjacency};
use crate::numeric::{adam_step, dot, matmul, matmul_nt, matmul_tn, AdamState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMethod {
    EdgeAdd,
    EdgeRemove,
    FeatureDropout,
    FeatureMask,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 4] = [
        AugmentMethod::EdgeAdd,
        AugmentMethod::EdgeRemove,
        AugmentMethod::FeatureDropout,
        AugmentMethod::FeatureMask,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub method: AugmentMethod,
    pub rate: f64,
    pub seed: u64,
}

/// Returns a perturbed copy of `g`. Edge methods act on every relation.
pub fn augment(g: &MultiRelationGraph, spec: &AugmentSpec) -> Result<MultiRelationGraph> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(GradError::Argument(format!(
            "augmentation rate {} outside [0,1]",
            spec.rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = g.clone();
    if spec.rate == 0.0 {
        return Ok(out);
    }
    match spec.method {
        AugmentMethod::EdgeRemove => {
            for rel in &mut out.relations {
                let kept: Vec<_> = rel
                    .edges()
                    .iter()
                    .copied()
                    .filter(|_| !rng.random_bool(spec.rate))
                    .collect();
                *rel = SparseAdjacency::from_edges(rel.n(), kept)?.0;
            }
        }
        AugmentMethod::EdgeAdd => {
            for rel in &mut out.relations {
                let n = rel.n();
                let capacity = n * n.saturating_sub(1) / 2 - rel.num_edges();
                let target = ((spec.rate * rel.num_edges() as f64).round() as usize).min(capacity);
                let mut added = std::collections::BTreeSet::new();
                while added.len() < target {
                    let u = rng.random_range(0..n);
                    let v = rng.random_range(0..n);
                    if u != v && !rel.has_edge(u, v) {
                        added.insert((u.min(v), u.max(v)));
                    }
                }
                let all = rel.edges().iter().copied().chain(added);
                *rel = SparseAdjacency::from_edges(n, all)?.0;
            }
        }
        AugmentMethod::FeatureDropout => {
            for v in out.features.as_mut_slice() {
                if rng.random_bool(spec.rate) {
                    *v = 0.0;
                }
            }
        }
        AugmentMethod::FeatureMask => {
            let d = out.d();
            let masked: Vec<bool> = (0..d).map(|_| rng.random_bool(spec.rate)).collect();
            for i in 0..out.n() {
                for (v, &m) in out.features.row_mut(i).iter_mut().zip(&masked) {
                    if m {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row `i` of `mean(x)` is the average of `x` over `i`'s neighbors; isolated
/// nodes average to zero.
fn neighbor_mean(rel: &SparseAdjacency, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..rel.n() {
        let nbrs = rel.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let w = 1.0 / nbrs.len() as f64;
        let row = out.row_mut(i);
        for &j in nbrs {
            for (o, v) in row.iter_mut().zip(x.row(j)) {
                *o += w * v;
            }
        }
    }
    out
}

/// Transpose of [`neighbor_mean`].
fn neighbor_mean_t(rel: &SparseAdjacency, y: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..rel.n() {
        let nbrs = rel.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let w = 1.0 / nbrs.len() as f64;
        for &j in nbrs {
            let src: Vec<f64> = y.row(i).iter().map(|v| w * v).collect();
            for (o, v) in out.row_mut(j).iter_mut().zip(&src) {
                *o += v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GclConfig {
    pub tau: f64,
    pub hidden: usize,
    pub layers: usize,
    pub proj_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment_rate: f64,
}

impl Default for GclConfig {
    fn default() -> Self {
        GclConfig {
            tau: 0.5,
            hidden: 64,
            layers: 2,
            proj_dim: 32,
            epochs: 200,
            lr: AdamState::DEFAULT_LR,
            weight_decay: AdamState::DEFAULT_WEIGHT_DECAY,
            augment_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GclModel {
    /// Layer `l` maps `H⁽ˡ⁾` (rows are nodes) via `H · W`.
    pub encoder: Vec<Matrix>,
    pub projection: Matrix,
    pub tau: f64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct GclForward {
    diffs: Vec<Matrix>,
    pre: Vec<Matrix>,
    hidden: Matrix,

    norms: Vec<f64>,
    pub z: Matrix,
    /// Rows whose projection was exactly zero and got a basis vector.
    pub zero_rows: usize,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

impl GclModel {
    pub fn init(d: usize, cfg: &GclConfig, seed: u64) -> Result<Self> {
        if cfg.tau <= 0.0 {
            return Err(GradError::Config(format!("temperature {} must be positive", cfg.tau)));
        }
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.proj_dim == 0 {
            return Err(GradError::Config("encoder needs ≥1 layer and non-zero dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(cfg.layers);
        let mut fan_in = d;
        for _ in 0..cfg.layers {
            encoder.push(glorot(fan_in, cfg.hidden, &mut rng));
            fan_in = cfg.hidden;
        }
        let projection = glorot(cfg.hidden, cfg.proj_dim, &mut rng);
        Ok(GclModel {
            encoder,
            projection,
            tau: cfg.tau,
        })
    }

    /// High-pass encoder only.
    pub fn encode(&self, x: &Matrix, rel: &SparseAdjacency) -> Result<Matrix> {
        Ok(self.forward(x, rel)?.hidden)
    }

    pub fn embed(&self, x: &Matrix, rel: &SparseAdjacency) -> Result<Matrix> {
        Ok(self.forward(x, rel)?.z)
    }

    pub fn forward(&self, x: &Matrix, rel: &SparseAdjacency) -> Result<GclForward> {
        if x.rows() != rel.n() {
            return Err(GradError::Shape(format!(
                "{} feature rows for {} nodes",
                x.rows(),
                rel.n()
            )));
        }
        let mut h = x.clone();
        let mut diffs = Vec::with_capacity(self.encoder.len());
        let mut pre = Vec::with_capacity(self.encoder.len());
        for w in &self.encoder {
            let (d, p, next) = highpass_layer(&h, rel, w)?;
            diffs.push(d);
            pre.push(p);
            h = next;
        }
        let u = matmul(&h, &self.projection)?;
        let (z, norms, zero_rows) = project_rows(&u);
        Ok(GclForward {
            diffs,
            pre,
            hidden: h,

            norms,
            z,
            zero_rows,
        })
    }

    /// Gradients of the parameters given `dL/dz`, ordered as
    /// [`GclModel::params`].
    pub fn backward(&self, fwd: &GclForward, dz: &Matrix, rel: &SparseAdjacency) -> Result<Vec<Matrix>> {
        let du = project_backward(&fwd.z, &fwd.norms, dz);
        let d_proj = matmul_tn(&fwd.hidden, &du)?;
        let mut dh = matmul_nt(&du, &self.projection)?;
        let mut grads = vec![Matrix::zeros(0, 0); self.encoder.len()];
        for l in (0..self.encoder.len()).rev() {
            let mut dpre = dh;
            for (g, p) in dpre.as_mut_slice().iter_mut().zip(fwd.pre[l].as_slice()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            grads[l] = matmul_tn(&fwd.diffs[l], &dpre)?;
            let dd = matmul_nt(&dpre, &self.encoder[l])?;
            dh = dd.sub(&neighbor_mean_t(rel, &dd))?;
        }
        grads.push(d_proj);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.encoder.iter().chain(std::iter::once(&self.projection)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .collect()
    }

    pub fn to_arrays(&self) -> Vec<Matrix> {
        let mut out = vec![checkpoint::scalars(&[self.tau, self.encoder.len() as f64])];
        out.extend(self.params().into_iter().cloned());
        out
    }

    pub fn from_arrays(arrays: Vec<Matrix>) -> Result<Self> {
        let bad = || GradError::Checkpoint("not a contrastive-model checkpoint".into());
        let mut it = arrays.into_iter();
        let head = it.next().ok_or_else(bad)?;
        if head.shape() != (1, 2) {
            return Err(bad());
        }
        let (tau, layers) = (head[(0, 0)], head[(0, 1)] as usize);
        let mut encoder: Vec<Matrix> = it.by_ref().take(layers).collect();
        let projection = it.next().ok_or_else(bad)?;
        if encoder.len() != layers || it.next().is_some() {
            return Err(bad());
        }
        for pair in encoder.windows(2) {
            if pair[0].cols() != pair[1].rows() {
                return Err(bad());
            }
        }
        if encoder.last().map(Matrix::cols) != Some(projection.rows()) {
            return Err(bad());
        }
        encoder.shrink_to_fit();
        Ok(GclModel { encoder, projection, tau })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let arrays = self.to_arrays();
        checkpoint::save(path, &arrays.iter().collect::<Vec<_>>())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_arrays(checkpoint::load(path)?)
    }
}

/// One encoder layer: returns `(H − mean(H), (H − mean(H))·W, relu(·))`.
fn highpass_layer(h: &Matrix, rel: &SparseAdjacency, w: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let diff = h.sub(&neighbor_mean(rel, h))?;
    let pre = matmul(&diff, w)?;
    let out = pre.map(|v| v.max(0.0));
    Ok((diff, pre, out))
}

/// High-pass encoder applied with explicit layer weights.
pub fn highpass_encode(x: &Matrix, rel: &SparseAdjacency, layers: &[Matrix]) -> Result<Matrix> {
    let mut h = x.clone();
    for w in layers {
        h = highpass_layer(&h, rel, w)?.2;
    }
    Ok(h)
}

/// L2-normalizes rows. All-zero rows become the first basis vector.
fn project_rows(u: &Matrix) -> (Matrix, Vec<f64>, usize) {
    let mut z = u.clone();
    let mut norms = Vec::with_capacity(u.rows());
    let mut zero_rows = 0;
    for i in 0..u.rows() {
        let nrm = dot(u.row(i), u.row(i)).sqrt();
        norms.push(nrm);
        let row = z.row_mut(i);
        if nrm == 0.0 {
            zero_rows += 1;
            row.iter_mut().for_each(|v| *v = 0.0);
            if let Some(first) = row.first_mut() {
                *first = 1.0;
            }
        } else {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
    }
    (z, norms, zero_rows)
}

fn project_backward(z: &Matrix, norms: &[f64], dz: &Matrix) -> Matrix {
    let mut du = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        if norms[i] == 0.0 {
            continue;
        }
        let zi = z.row(i);
        let gi = dz.row(i);
        let radial = dot(zi, gi);
        for ((o, &zv), &gv) in du.row_mut(i).iter_mut().zip(zi).zip(gi) {
            *o = (gv - zv * radial) / norms[i];
        }
    }
    du
}

/// Linear map followed by row L2 normalization. Returns the embeddings and
/// how many zero rows were replaced by a basis vector.
pub fn project(hidden: &Matrix, weights: &Matrix) -> Result<(Matrix, usize)> {
    let u = matmul(hidden, weights)?;
    let (z, _, zeros) = project_rows(&u);
    Ok((z, zeros))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Supervised contrastive loss over a batch of embeddings.
///
/// For each anchor `i`, positives are the other rows sharing its label and
/// the softmax runs over every other row. The per-anchor terms are averaged
/// over anchors that have at least one positive. A single-class batch has no
/// negatives; it yields loss 0 and a zero gradient.
pub fn supcon_loss(z: &Matrix, labels: &[u8], tau: f64) -> Result<(f64, Matrix)> {
    let m = z.rows();
    if labels.len() != m {
        return Err(GradError::Shape(format!("{} labels for {m} embeddings", labels.len())));
    }
    if tau <= 0.0 {
        return Err(GradError::Argument(format!("temperature {tau} must be positive")));
    }
    let mut grad = Matrix::zeros(m, z.cols());
    if labels.iter().all(|&l| l == labels[0]) {
        log::warn!("contrastive batch of {m} holds a single class; loss set to 0");
        return Ok((0.0, grad));
    }
    let sims = matmul_nt(z, z)?.scale(1.0 / tau);
    let positives: Vec<usize> = (0..m)
        .map(|i| (0..m).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Ok((0.0, grad));
    }
    let inv_anchors = 1.0 / anchors as f64;

    let mut loss = 0.0;
    let mut coeff = Matrix::zeros(m, m);
    for i in 0..m {
        if positives[i] == 0 {
            continue;
        }
        let row = sims.row(i);
        let lse = log_sum_exp((0..m).filter(|&j| j != i).map(|j| row[j]));
        let inv_p = 1.0 / positives[i] as f64;
        let mut term = 0.0;
        for j in 0..m {
            if j == i {
                continue;
            }
            let softmax = (row[j] - lse).exp();
            let pos = if labels[j] == labels[i] { inv_p } else { 0.0 };
            if pos > 0.0 {
                term += lse - row[j];
            }
            coeff[(i, j)] = inv_anchors * (softmax - pos);
        }
        loss += inv_anchors * inv_p * term;
    }
    // d s_ij / d z_i = z_j / τ and d s_ij / d z_j = z_i / τ.
    let sym = coeff.add(&coeff.transpose())?.scale(1.0 / tau);
    grad = matmul(&sym, z)?;
    Ok((loss, grad))
}

pub const GUIDANCE_WEIGHT_EPS: f64 = 1e-8;

/// Maps the {−1,+1} diffusion encoding to an edge intensity in [0,1] and
/// returns its derivative.
#[inline]
pub fn edge_intensity(a: f64) -> (f64, f64) {
    let w = (a + 1.0) * 0.5;
    if w <= 0.0 {
        (0.0, 0.0)
    } else if w >= 1.0 {
        (1.0, 0.0)
    } else {
        (w, 0.5)
    }
}

/// Similarity guidance energy of a group and its gradient w.r.t. `a_t`.
///
/// Each node's neighbor set is relaxed to edge intensities
/// `wᵢⱼ = clamp((aᵢⱼ + 1)/2, 0, 1)`; the energy sums, over nodes, the
/// intensity-weighted mean of `−log softmaxᵢ(zᵢ·zⱼ/τ)` with the softmax over
/// all other group members. For ±1 entries this is the discrete neighborhood
/// average.
pub fn guidance_similarity(z_group: &Matrix, a_t: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    let k = z_group.rows();
    if a_t.shape() != (k, k) {
        return Err(GradError::Shape(format!(
            "{k} embeddings but a {}x{} adjacency",
            a_t.rows(),
            a_t.cols()
        )));
    }
    let sims = matmul_nt(z_group, z_group)?.scale(1.0 / tau);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(k, k);
    let mut nll = vec![0.0; k];
    let mut w = vec![0.0; k];
    let mut dw = vec![0.0; k];
    for i in 0..k {
        let row = sims.row(i);
        let lse = log_sum_exp((0..k).filter(|&j| j != i).map(|j| row[j]));
        let mut total = 0.0;
        let mut weighted = 0.0;
        for j in 0..k {
            if j == i {
                w[j] = 0.0;
                dw[j] = 0.0;
                continue;
            }
            nll[j] = lse - row[j];
            let (wij, dij) = edge_intensity(a_t[(i, j)]);
            w[j] = wij;
            dw[j] = dij;
            total += wij;
            weighted += wij * nll[j];
        }
        if total > GUIDANCE_WEIGHT_EPS {
            let mean = weighted / total;
            value += mean;
            for j in 0..k {
                if dw[j] != 0.0 {
                    grad[(i, j)] = dw[j] * (nll[j] - mean) / total;
                }
            }
        } else {
            value += weighted / GUIDANCE_WEIGHT_EPS;
            for j in 0..k {
                if dw[j] != 0.0 {
                    grad[(i, j)] = dw[j] * nll[j] / GUIDANCE_WEIGHT_EPS;
                }
            }
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GclTrace {
    pub losses: Vec<f64>,
    pub augmentations: Vec<AugmentMethod>,
}

/// Trains the contrastive model on `train_nodes` of `g`, using `relation`
/// for the encoder's neighborhoods. Each epoch sees one freshly augmented
/// view.
pub fn train_gcl(
    g: &MultiRelationGraph,
    relation: &SparseAdjacency,
    train_nodes: &[usize],
    cfg: &GclConfig,
    seed: u64,
) -> Result<(GclModel, GclTrace)> {
    let labels: Vec<u8> = train_nodes
        .iter()
        .map(|&i| {
            g.labels[i].ok_or_else(|| GradError::Data(format!("training node {i} is unlabeled")))
        })
        .collect::<Result<_>>()?;
    let mut model = GclModel::init(g.d(), cfg, seed)?;
    let mut adam = AdamState::new(&model.params(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6763_6c5f_6175_6721);
    let base = MultiRelationGraph::new(
        g.features.clone(),
        g.labels.clone(),
        vec![relation.clone()],
        vec!["fused".into()],
    )?;
    let mut trace = GclTrace {
        losses: Vec::with_capacity(cfg.epochs),
        augmentations: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let method = *AugmentMethod::ALL.choose(&mut rng).expect("non-empty");
        let view = augment(
            &base,
            &AugmentSpec {
                method,
                rate: cfg.augment_rate,
                seed: rng.random(),
            },
        )?;
        let rel = &view.relations[0];
        let fwd = model.forward(&view.features, rel)?;
        let z_batch = fwd.z.select_rows(train_nodes);
        let (loss, dz_batch) = supcon_loss(&z_batch, &labels, model.tau)?;
        if !loss.is_finite() {
            return Err(GradError::Training {
                step: epoch,
                msg: format!("contrastive loss is {loss}"),
            });
        }
        let mut dz = Matrix::zeros(fwd.z.rows(), fwd.z.cols());
        for (b, &i) in train_nodes.iter().enumerate() {
            dz.row_mut(i).copy_from_slice(dz_batch.row(b));
        }
        let grads = model.backward(&fwd, &dz, rel)?;
        let grad_refs: Vec<&Matrix> = grads.iter().collect();
        adam_step(&mut model.params_mut(), &grad_refs, &mut adam).map_err(|e| GradError::Training {
            step: epoch,
            msg: e.to_string(),
        })?;
        trace.losses.push(loss);
        trace.augmentations.push(method);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn unit_rows(m: &Matrix) -> Matrix {
        project_rows(m).0
    }

    fn path3() -> SparseAdjacency {
        SparseAdjacency::from_edges(3, [(0, 1), (1, 2)]).unwrap().0
    }

    fn toy_graph(n: usize, edges: &[(usize, usize)]) -> MultiRelationGraph {
        let rel = SparseAdjacency::from_edges(n, edges.iter().copied()).unwrap().0;
        MultiRelationGraph::new(random(n, 4, 1), vec![Some(0); n], vec![rel], vec!["r".into()]).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let g = toy_graph(10, &[(0, 1), (2, 3), (4, 5)]);
        for method in AugmentMethod::ALL {
            let out = augment(&g, &AugmentSpec { method, rate: 0.0, seed: 3 }).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn full_edge_removal_empties_relation() {
        let g = toy_graph(10, &[(0, 1), (2, 3), (4, 5)]);
        let out = augment(&g, &AugmentSpec { method: AugmentMethod::EdgeRemove, rate: 1.0, seed: 0 }).unwrap();
        assert_eq!(out.relations[0].num_edges(), 0);
    }

    #[test]
    fn edge_removal_is_binomial() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pairs = std::collections::BTreeSet::new();
        while pairs.len() < 1000 {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u != v {
                pairs.insert((u.min(v), u.max(v)));
            }
        }
        let g = toy_graph(n, &pairs.into_iter().collect::<Vec<_>>());
        // Binomial(1000, 0.5): σ ≈ 15.8, 3σ ≈ 47.4.
        for seed in 0..20 {
            let out = augment(&g, &AugmentSpec { method: AugmentMethod::EdgeRemove, rate: 0.5, seed }).unwrap();
            let kept = out.relations[0].num_edges() as f64;
            assert!((kept - 500.0).abs() <= 47.5, "seed {seed}: {kept}");
        }
    }

    #[test]
    fn edge_add_and_feature_masks() {
        let g = toy_graph(30, &[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]);
        let added = augment(&g, &AugmentSpec { method: AugmentMethod::EdgeAdd, rate: 0.4, seed: 1 }).unwrap();
        assert_eq!(added.relations[0].num_edges(), 7);
        let masked = augment(&g, &AugmentSpec { method: AugmentMethod::FeatureMask, rate: 0.5, seed: 4 }).unwrap();
        for c in 0..4 {
            let col_zero = (0..30).all(|i| masked.features[(i, c)] == 0.0);
            let col_same = (0..30).all(|i| masked.features[(i, c)] == g.features[(i, c)]);
            assert!(col_zero || col_same);
        }
        assert!(augment(&g, &AugmentSpec { method: AugmentMethod::FeatureDropout, rate: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn encoder_zero_when_node_equals_neighbor_mean() {
        // Node 1's neighbors (0 and 2) average to its own features.
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, 2.0]]).unwrap();
        let w = vec![Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap()];
        let h = highpass_encode(&x, &path3(), &w).unwrap();
        assert_eq!(h.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn encoder_isolated_node_uses_own_features() {
        let rel = SparseAdjacency::from_edges(3, [(0, 1)]).unwrap().0;
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, -2.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let h = highpass_encode(&x, &rel, std::slice::from_ref(&w)).unwrap();
        // relu([3, -2]·W) = relu([2, -7])
        assert_eq!(h.row(2), &[2.0, 0.0]);
    }

    #[test]
    fn encoder_matches_manual_evaluation() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![4.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, -1.0]]).unwrap();
        // Node 0: x0 - x1 = [1, 3] → [4, -3] → [4, 0]
        // Node 1: x1 - (x0 + x2)/2 = [-2.5, -2.5] → [-5, 2.5] → [0, 2.5]
        // Node 2: x2 - x1 = [4, 2] → [6, -2] → [6, 0]
        let h = highpass_encode(&x, &path3(), &[w]).unwrap();
        assert_eq!(h, Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 2.5], vec![6.0, 0.0]]).unwrap());
    }

    #[test]
    fn projection_rows_are_unit() {
        let (z, zeros) = project(&random(7, 5, 3), &random(5, 4, 4)).unwrap();
        assert_eq!(zeros, 0);
        for i in 0..7 {
            assert!((dot(z.row(i), z.row(i)).sqrt() - 1.0).abs() < 1e-12);
        }
        let (z, zeros) = project(&Matrix::zeros(2, 3), &Matrix::identity(3)).unwrap();
        assert_eq!(zeros, 2);
        assert_eq!(z.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_projection_keeps_unit_rows() {
        let u = unit_rows(&random(4, 3, 8));
        let (z, _) = project(&u, &Matrix::identity(3)).unwrap();
        assert!(z.max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn normalization_gradient() {
        let u = random(3, 4, 5);
        let target = random(3, 4, 6);
        let f = |flat: &[f64]| {
            let m = Matrix::from_vec(3, 4, flat.to_vec()).unwrap();
            let z = unit_rows(&m);
            dot(z.as_slice(), target.as_slice())
        };
        let (z, norms, _) = project_rows(&u);
        let analytic = project_backward(&z, &norms, &target);
        let err = finite_diff_check(f, u.as_slice(), analytic.as_slice(), 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    /// Direct double loop over anchors and positives.
    fn supcon_brute(z: &Matrix, labels: &[u8], tau: f64) -> f64 {
        let m = z.rows();
        let s = |i: usize, j: usize| dot(z.row(i), z.row(j)) / tau;
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..m {
            let pos: Vec<usize> = (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..m).filter(|&j| j != i).map(|j| s(i, j).exp()).sum();
            let mut term = 0.0;
            for &p in &pos {
                term += (s(i, p).exp() / denom).ln();
            }
            total += -term / pos.len() as f64;
        }
        total / anchors as f64
    }

    #[test]
    fn supcon_orthogonal_matches_brute_force() {
        let z = Matrix::identity(4);
        let labels = [0, 0, 1, 1];
        let (loss, _) = supcon_loss(&z, &labels, 1.0).unwrap();
        // Every similarity is 0: each anchor scores -log(1/3).
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - supcon_brute(&z, &labels, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn supcon_matches_brute_force_random() {
        let z = unit_rows(&random(9, 5, 11));
        let labels = [0, 1, 0, 0, 1, 1, 0, 2, 0];
        let (loss, _) = supcon_loss(&z, &labels, 0.5).unwrap();
        assert!((loss - supcon_brute(&z, &labels, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn supcon_duplicate_positive_closed_form() {
        // z0 = z1 and z2 = z3 orthogonal to them: every anchor sees e/(e + 2).
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let (loss, _) = supcon_loss(&z, &[0, 0, 1, 1], 1.0).unwrap();
        let e = 1f64.exp();
        assert!((loss + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_is_permutation_invariant() {
        let z = unit_rows(&random(6, 3, 2));
        let labels = [0, 1, 1, 0, 1, 0];
        let perm = [3, 0, 5, 1, 4, 2];
        let zp = z.select_rows(&perm);
        let lp: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let a = supcon_loss(&z, &labels, 0.5).unwrap().0;
        let b = supcon_loss(&zp, &lp, 0.5).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn supcon_single_class_is_zero() {
        let z = unit_rows(&random(5, 3, 2));
        let (loss, g) = supcon_loss(&z, &[1; 5], 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g, Matrix::zeros(5, 3));
    }

    #[test]
    fn supcon_decreases_when_positive_moves_closer() {
        let mut z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let before = supcon_loss(&z, &labels, 0.5).unwrap().0;
        // Rotate node 1 towards node 0.
        z.row_mut(1).copy_from_slice(&[0.6, 0.8]);
        let after = supcon_loss(&z, &labels, 0.5).unwrap().0;
        assert!(after < before && after >= 0.0);
    }

    #[test]
    fn supcon_gradient_four_node_batch() {
        let z0 = unit_rows(&random(4, 3, 21));
        let labels = [0, 1, 0, 1];
        let (_, g) = supcon_loss(&z0, &labels, 0.5).unwrap();
        let f = |flat: &[f64]| supcon_loss(&Matrix::from_vec(4, 3, flat.to_vec()).unwrap(), &labels, 0.5).unwrap().0;
        let err = finite_diff_check(f, z0.as_slice(), g.as_slice(), 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn guidance_all_no_edge_is_zero() {
        let z = unit_rows(&random(5, 3, 1));
        let (v, g) = guidance_similarity(&z, &Matrix::filled(5, 5, -1.0), 0.5).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, Matrix::zeros(5, 5));
    }

    #[test]
    fn guidance_prefers_similar_edges() {
        // Nodes 0,1 nearly parallel; 2,3 far apart from each other.
        let z = unit_rows(&Matrix::from_rows(&[
            vec![1.0, 0.1, 0.0],
            vec![1.0, 0.0, 0.1],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, 0.2],
        ])
        .unwrap());
        let hard_edge = |p: usize, q: usize| {
            let mut a = Matrix::filled(4, 4, -1.0);
            a[(p, q)] = 1.0;
            a[(q, p)] = 1.0;
            a
        };
        let similar = guidance_similarity(&z, &hard_edge(0, 1), 0.5).unwrap().0;
        let dissimilar = guidance_similarity(&z, &hard_edge(2, 3), 0.5).unwrap().0;
        assert!(similar < dissimilar, "{similar} vs {dissimilar}");
    }

    #[test]
    fn guidance_reduces_to_discrete_form() {
        let z = unit_rows(&random(6, 4, 13));
        let tau = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Matrix::filled(6, 6, -1.0);
        for i in 0..6 {
            for j in i + 1..6 {
                if rng.random_bool(0.5) {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        let (v, _) = guidance_similarity(&z, &a, tau).unwrap();
        let s = |i: usize, j: usize| dot(z.row(i), z.row(j)) / tau;
        let mut discrete = 0.0;
        for i in 0..6 {
            let nbrs: Vec<usize> = (0..6).filter(|&j| j != i && a[(i, j)] == 1.0).collect();
            if nbrs.is_empty() {
                continue;
            }
            let denom: f64 = (0..6).filter(|&j| j != i).map(|j| s(i, j).exp()).sum();
            let sum: f64 = nbrs.iter().map(|&j| (s(i, j).exp() / denom).ln()).sum();
            discrete += -sum / nbrs.len() as f64;
        }
        assert!((v - discrete).abs() < 1e-12);
    }

    #[test]
    fn guidance_gradient() {
        let z = unit_rows(&random(5, 3, 17));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(5, 5, |_, _| rng.random_range(-0.9..0.9));
        let (_, g) = guidance_similarity(&z, &a, 0.5).unwrap();
        let f = |flat: &[f64]| guidance_similarity(&z, &Matrix::from_vec(5, 5, flat.to_vec()).unwrap(), 0.5).unwrap().0;
        let err = finite_diff_check(f, a.as_slice(), g.as_slice(), 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn encoder_and_projection_gradients() {
        let n = 8;
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (1, 6)];
        let rel = SparseAdjacency::from_edges(n, pairs).unwrap().0;
        let x = random(n, 3, 31);
        let cfg = GclConfig { hidden: 5, proj_dim: 4, layers: 2, ..GclConfig::default() };
        let model = GclModel::init(3, &cfg, 9).unwrap();
        let labels = [0, 1, 0, 1, 1, 0, 0, 1];

        let loss_of = |m: &GclModel| {
            let z = m.embed(&x, &rel).unwrap();
            supcon_loss(&z, &labels, m.tau).unwrap().0
        };
        let fwd = model.forward(&x, &rel).unwrap();
        let (_, dz) = supcon_loss(&fwd.z, &labels, model.tau).unwrap();
        let grads = model.backward(&fwd, &dz, &rel).unwrap();

        for p in 0..grads.len() {
            let base: Vec<f64> = model.params()[p].as_slice().to_vec();
            let f = |flat: &[f64]| {
                let mut m = model.clone();
                m.params_mut()[p].as_mut_slice().copy_from_slice(flat);
                loss_of(&m)
            };
            let err = finite_diff_check(f, &base, grads[p].as_slice(), 1e-5).unwrap();
            assert!(err <= 1e-4, "param {p}: {err}");
        }
    }

    fn two_cluster_graph(seed: u64) -> MultiRelationGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let labels: Vec<Option<u8>> = (0..n).map(|i| Some((i >= 20) as u8)).collect();
        let x = Matrix::from_fn(n, 6, |i, j| {
            let center = if (i >= 20) == (j < 3) { 2.0 } else { 0.0 };
            center + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        let mut pairs = Vec::new();
        for _ in 0..60 {
            pairs.push((rng.random_range(0..n), rng.random_range(0..n)));
        }
        let rel = SparseAdjacency::from_edges(n, pairs).unwrap().0;
        MultiRelationGraph::new(x, labels, vec![rel], vec!["r".into()]).unwrap()
    }

    fn mean_cos(z: &Matrix, labels: &[Option<u8>], same: bool) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..z.rows() {
            for j in 0..i {
                if (labels[i] == labels[j]) == same {
                    total += dot(z.row(i), z.row(j));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn training_separates_two_clusters() {
        let g = two_cluster_graph(1);
        let train: Vec<usize> = (0..40).collect();
        let cfg = GclConfig { epochs: 150, lr: 1e-2, ..GclConfig::default() };
        let (model, trace) = train_gcl(&g, &g.relations[0], &train, &cfg, 7).unwrap();
        let z = model.embed(&g.features, &g.relations[0]).unwrap();
        let intra = mean_cos(&z, &g.labels, true);
        let inter = mean_cos(&z, &g.labels, false);
        assert!(intra > inter, "intra {intra} inter {inter}");
        assert_eq!(trace.losses.len(), 150);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let g = two_cluster_graph(2);
        let train: Vec<usize> = (0..40).collect();
        let cfg = GclConfig { epochs: 0, ..GclConfig::default() };
        let (model, trace) = train_gcl(&g, &g.relations[0], &train, &cfg, 3).unwrap();
        assert_eq!(model, GclModel::init(g.d(), &cfg, 3).unwrap());
        assert!(trace.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let g = two_cluster_graph(3);
        let train: Vec<usize> = (0..30).collect();
        let cfg = GclConfig { epochs: 10, ..GclConfig::default() };
        let a = train_gcl(&g, &g.relations[0], &train, &cfg, 5).unwrap();
        let b = train_gcl(&g, &g.relations[0], &train, &cfg, 5).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = GclModel::init(5, &GclConfig::default(), 1).unwrap();
        let back = GclModel::from_arrays(model.to_arrays()).unwrap();
        assert_eq!(back, model);
        assert!(GclModel::from_arrays(vec![Matrix::zeros(1, 3)]).is_err());
    }
}
