//! Multi-relation beta-wavelet detector.
//!
//! Each relation filters the node features with a bank of beta kernels
//! `W_{p,q} = (L/2)^p (I − L/2)^q / (2 B(p+1, q+1))`, `p + q = C`. The
//! concatenated filter outputs go through a per-relation linear + ReLU
//! transform and a one-logit head; relation logits are fused with weights
//! `ω` and squashed by the logistic function.
//!
//! The filters have no parameters, so their outputs are computed once per
//! relation and reused across epochs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{write_file, SplitMasks};
use crate::error::{GradError, Result};
use crate::graph::{normalized_laplacian, Laplacian, MultiRelationGraph, SparseAdjacency};
use crate::metrics::auc;
use crate::numeric::{adam_step, matmul, matmul_nt, matmul_tn, sigmoid, AdamState, Matrix};

pub const MAX_KERNEL_DEGREE: usize = 8;
pub const PROB_CLAMP: f64 = 1e-12;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// `B(p+1, q+1) = p! q! / (p+q+1)!`.
pub fn beta_function(p: usize, q: usize) -> f64 {
    factorial(p) * factorial(q) / factorial(p + q + 1)
}

/// Spectral response of `W_{p,q}` at Laplacian eigenvalue `lambda`.
pub fn beta_response(p: usize, q: usize, lambda: f64) -> f64 {
    let w = lambda / 2.0;
    w.powi(p as i32) * (1.0 - w).powi(q as i32) / (2.0 * beta_function(p, q))
}

fn check_degree(p: usize, q: usize) -> Result<()> {
    if p + q > MAX_KERNEL_DEGREE {
        return Err(GradError::Argument(format!(
            "kernel degree {} exceeds {MAX_KERNEL_DEGREE}",
            p + q
        )));
    }
    Ok(())
}

/// Applies `W_{p,q}` with `p + q` sparse Laplacian products.
pub fn beta_kernel_apply(l: &Laplacian, p: usize, q: usize, x: &Matrix) -> Result<Matrix> {
    check_degree(p, q)?;
    let mut y = x.clone();
    for _ in 0..q {
        let ly = l.apply(&y)?;
        y.axpy(-0.5, &ly)?;
    }
    for _ in 0..p {
        y = l.apply(&y)?.scale(0.5);
    }
    y.scale_in_place(1.0 / (2.0 * beta_function(p, q)));
    Ok(y)
}

/// Outputs of the `C + 1` kernels with `p = 0..=C`, concatenated along
/// features.
pub fn filter_bank_features(rel: &SparseAdjacency, x: &Matrix, order: usize) -> Result<Matrix> {
    check_degree(order, 0)?;
    let l = normalized_laplacian(rel);
    let blocks = (0..=order)
        .map(|p| beta_kernel_apply(&l, p, order - p, x))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hconcat(&blocks)
}

/// Linear + ReLU transform and single-logit head of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHead {
    pub w: Matrix,
    pub b: Matrix,
    pub v: Matrix,
    pub c: Matrix,
}

struct HeadCache {
    pre: Matrix,
    hidden: Matrix,
    logit: Vec<f64>,
}

impl RelationHead {
    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (input + hidden) as f64).sqrt();
        let w = Matrix::from_fn(input, hidden, |_, _| rng.random_range(-a..a));
        let a = (6.0 / (hidden + 1) as f64).sqrt();
        let v = Matrix::from_fn(hidden, 1, |_, _| rng.random_range(-a..a));
        RelationHead {
            w,
            b: Matrix::zeros(1, hidden),
            v,
            c: Matrix::zeros(1, 1),
        }
    }

    /// Transform alone: `relu(features · w + b)`.
    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward(features)?.hidden)
    }

    fn forward(&self, features: &Matrix) -> Result<HeadCache> {
        let mut pre = matmul(features, &self.w)?;
        pre.add_row_vector(self.b.as_slice())?;
        let hidden = pre.map(|v| v.max(0.0));
        let logit = matmul(&hidden, &self.v)?
            .into_vec()
            .into_iter()
            .map(|v| v + self.c[(0, 0)])
            .collect();
        Ok(HeadCache { pre, hidden, logit })
    }

    fn backward(&self, features: &Matrix, cache: &HeadCache, dlogit: &[f64]) -> Result<[Matrix; 4]> {
        let dl = Matrix::from_vec(dlogit.len(), 1, dlogit.to_vec())?;
        let dv = matmul_tn(&cache.hidden, &dl)?;
        let dc = checkpoint::scalars(&[dlogit.iter().sum()]);
        let mut dh = matmul_nt(&dl, &self.v)?;
        for (g, p) in dh.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let dw = matmul_tn(features, &dh)?;
        let db = checkpoint::scalars(&dh.column_sums());
        Ok([dw, db, dv, dc])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub order: usize,
    pub heads: Vec<RelationHead>,
    /// Fusion weights, one per relation.
    pub omega: Vec<f64>,
    pub learn_omega: bool,
}

impl DetectorModel {
    pub fn init(num_relations: usize, d: usize, cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        if num_relations == 0 {
            return Err(GradError::Argument("detector needs at least one relation".into()));
        }
        check_degree(cfg.order, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = d * (cfg.order + 1);
        let heads = (0..num_relations)
            .map(|_| RelationHead::init(input, cfg.hidden, &mut rng))
            .collect();
        let omega = if cfg.learn_omega {
            vec![1.0; num_relations]
        } else {
            vec![1.0 / num_relations as f64; num_relations]
        };
        Ok(DetectorModel {
            order: cfg.order,
            heads,
            omega,
            learn_omega: cfg.learn_omega,
        })
    }

    /// Head tensors, `w, b, v, c` per relation.
    pub fn params(&self) -> Vec<&Matrix> {
        self.heads.iter().flat_map(|h| [&h.w, &h.b, &h.v, &h.c]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.heads.iter_mut().flat_map(|h| [&mut h.w, &mut h.b, &mut h.v, &mut h.c]).collect()
    }

    pub fn to_arrays(&self) -> Vec<Matrix> {
        let mut out = vec![
            checkpoint::scalars(&[self.order as f64, self.heads.len() as f64, f64::from(u8::from(self.learn_omega))]),
            checkpoint::scalars(&self.omega),
        ];
        out.extend(self.params().into_iter().cloned());
        out
    }

    pub fn from_arrays(arrays: Vec<Matrix>) -> Result<Self> {
        let bad = || GradError::Checkpoint("not a detector checkpoint".into());
        let mut it = arrays.into_iter();
        let head = it.next().ok_or_else(bad)?;
        if head.shape() != (1, 3) {
            return Err(bad());
        }
        let (order, r, learn) = (head[(0, 0)] as usize, head[(0, 1)] as usize, head[(0, 2)] != 0.0);
        let omega = it.next().ok_or_else(bad)?;
        if omega.shape() != (1, r) {
            return Err(bad());
        }
        let mut heads = Vec::with_capacity(r);
        for _ in 0..r {
            let mut take = || it.next().ok_or_else(bad);
            let h = RelationHead {
                w: take()?,
                b: take()?,
                v: take()?,
                c: take()?,
            };
            if h.b.shape() != (1, h.w.cols()) || h.v.shape() != (h.w.cols(), 1) || h.c.shape() != (1, 1) {
                return Err(bad());
            }
            heads.push(h);
        }
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(DetectorModel {
            order,
            heads,
            omega: omega.into_vec(),
            learn_omega: learn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays = self.to_arrays();
        checkpoint::save(path, &arrays.iter().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(checkpoint::load(path)?)
    }
}

fn fused_logits(features: &[Matrix], model: &DetectorModel) -> Result<(Vec<f64>, Vec<HeadCache>)> {
    if features.len() != model.heads.len() || model.omega.len() != model.heads.len() {
        return Err(GradError::Contract(format!(
            "{} feature blocks for {} relation heads and {} weights",
            features.len(),
            model.heads.len(),
            model.omega.len()
        )));
    }
    let n = features[0].rows();
    let mut logits = vec![0.0; n];
    let mut caches = Vec::with_capacity(features.len());
    for ((f, h), &w) in features.iter().zip(&model.heads).zip(&model.omega) {
        if f.rows() != n {
            return Err(GradError::Contract("feature blocks differ in node count".into()));
        }
        let cache = h.forward(f)?;
        for (l, v) in logits.iter_mut().zip(&cache.logit) {
            *l += w * v;
        }
        caches.push(cache);
    }
    Ok((logits, caches))
}

/// `logistic(Σᵢ ωᵢ · headᵢ(featuresᵢ))` for every node.
pub fn fuse_and_classify(features: &[Matrix], model: &DetectorModel) -> Result<Vec<f64>> {
    // Saturated logits round to exactly 0 or 1; keep scores strictly inside.
    Ok(fused_logits(features, model)?
        .0
        .into_iter()
        .map(|l| sigmoid(l).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
        .collect())
}

/// Detection loss over `mask` with gradients for every head tensor (in
/// [`DetectorModel::params`] order) and for `ω`.
pub fn detection_loss_grads(
    features: &[Matrix],
    model: &DetectorModel,
    y: &[u8],
    mask: &[usize],
    pos_weight: Option<f64>,
) -> Result<(f64, Vec<Matrix>, Vec<f64>)> {
    let (logits, caches) = fused_logits(features, model)?;
    let y_hat: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let (loss, dy) = bce_loss(&y_hat, y, mask, pos_weight)?;
    let dlogit: Vec<f64> = dy.iter().zip(&y_hat).map(|(d, p)| d * p * (1.0 - p)).collect();
    let mut grads = Vec::with_capacity(4 * model.heads.len());
    let mut d_omega = Vec::with_capacity(model.heads.len());
    for ((h, cache), (&w, f)) in model.heads.iter().zip(&caches).zip(model.omega.iter().zip(features)) {
        let scaled: Vec<f64> = dlogit.iter().map(|d| d * w).collect();
        grads.extend(h.backward(f, cache, &scaled)?);
        d_omega.push(dlogit.iter().zip(&cache.logit).map(|(d, l)| d * l).sum());
    }
    Ok((loss, grads, d_omega))
}

/// Mean (optionally class-weighted) binary cross-entropy over `mask`, with
/// its gradient w.r.t. every `ŷ` (zero outside the mask).
pub fn bce_loss(y_hat: &[f64], y: &[u8], mask: &[usize], pos_weight: Option<f64>) -> Result<(f64, Vec<f64>)> {
    if mask.is_empty() {
        return Err(GradError::Argument("loss mask is empty".into()));
    }
    if y_hat.len() != y.len() {
        return Err(GradError::Shape(format!("{} predictions for {} labels", y_hat.len(), y.len())));
    }
    let m = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; y_hat.len()];
    for &i in mask {
        let raw = y_hat[i];
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let w = if y[i] == 1 { pos_weight.unwrap_or(1.0) } else { 1.0 };
        let t = f64::from(y[i]);
        loss -= w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln()) / m;
        if raw == p {
            grad[i] = -w * (t / p - (1.0 - t) / (1.0 - p)) / m;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Kernel order `C`; the bank holds `C + 1` filters.
    pub order: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub learn_omega: bool,
    pub pos_weight: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            order: 2,
            hidden: 64,
            epochs: 500,
            lr: 1e-2,
            weight_decay: AdamState::DEFAULT_WEIGHT_DECAY,
            patience: 50,
            learn_omega: true,
            pos_weight: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrace {
    pub losses: Vec<f64>,
    pub val_auc: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Filter-bank features of every relation of `g`.
pub fn relation_features(g: &MultiRelationGraph, order: usize) -> Result<Vec<Matrix>> {
    g.relations
        .iter()
        .map(|rel| filter_bank_features(rel, &g.features, order))
        .collect()
}

fn labels_of(g: &MultiRelationGraph, nodes: &[usize]) -> Result<()> {
    match nodes.iter().find(|&&i| g.labels[i].is_none()) {
        Some(i) => Err(GradError::Data(format!("node {i} in a split is unlabeled"))),
        None => Ok(()),
    }
}

fn subset_auc(scores: &[f64], labels: &[u8], nodes: &[usize]) -> Result<f64> {
    let s: Vec<f64> = nodes.iter().map(|&i| scores[i]).collect();
    let l: Vec<u8> = nodes.iter().map(|&i| labels[i]).collect();
    auc(&s, &l)
}

/// Full-batch Adam on the training nodes with early stopping on validation
/// AUC. The returned model holds the parameters of the best validation
/// epoch.
pub fn train_detector(
    g: &MultiRelationGraph,
    masks: &SplitMasks,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(DetectorModel, DetectorTrace)> {
    if masks.train.is_empty() {
        return Err(GradError::Argument("training mask is empty".into()));
    }
    labels_of(g, &masks.train)?;
    labels_of(g, &masks.val)?;
    let features = relation_features(g, cfg.order)?;
    let y: Vec<u8> = g.labels.iter().map(|l| l.unwrap_or(0)).collect();
    let mut model = DetectorModel::init(g.relations.len(), g.d(), cfg, seed)?;
    let mut omega_m = checkpoint::scalars(&model.omega);
    let mut adam = {
        let mut p = model.params();
        if model.learn_omega {
            p.push(&omega_m);
        }
        AdamState::new(&p, cfg.lr, cfg.weight_decay)
    };
    let mut trace = DetectorTrace::default();
    let mut best: Option<(f64, DetectorModel)> = None;
    let mut since_best = 0;
    let validate = !masks.val.is_empty();

    for epoch in 0..cfg.epochs {
        let (loss, grads, d_omega) = detection_loss_grads(&features, &model, &y, &masks.train, cfg.pos_weight)?;
        if !loss.is_finite() {
            return Err(GradError::Training {
                step: epoch,
                msg: format!("detection loss is {loss}"),
            });
        }
        let d_omega_m = checkpoint::scalars(&d_omega);
        {
            let learn_omega = model.learn_omega;
            let mut params = model.params_mut();
            let mut grad_refs: Vec<&Matrix> = grads.iter().collect();
            if learn_omega {
                params.push(&mut omega_m);
                grad_refs.push(&d_omega_m);
            }
            adam_step(&mut params, &grad_refs, &mut adam).map_err(|e| GradError::Training {
                step: epoch,
                msg: e.to_string(),
            })?;
        }
        if model.learn_omega {
            model.omega = omega_m.as_slice().to_vec();
        }
        trace.losses.push(loss);

        if validate {
            let scores = fuse_and_classify(&features, &model)?;
            let v = subset_auc(&scores, &y, &masks.val)?;
            trace.val_auc.push(v);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.clone()));
                trace.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), trace))
}

/// Scores for every node of `g` under a trained model.
pub fn score_nodes(g: &MultiRelationGraph, model: &DetectorModel) -> Result<Vec<f64>> {
    fuse_and_classify(&relation_features(g, model.order)?, model)
}

/// `id,score` rows in node order.
pub fn save_scores(path: &Path, node_ids: &[i64], scores: &[f64]) -> Result<()> {
    let mut out = String::from("id,score\n");
    for (id, s) in node_ids.iter().zip(scores) {
        out.push_str(&format!("{id},{s}\n"));
    }
    write_file(path, &out)
}
