//! Denoising diffusion over group adjacency matrices.
//!
//! Adjacencies are encoded to `{−1,+1}` off the diagonal (diagonal 0), noised
//! with a cosine schedule, and denoised by a small fully connected network
//! with a sinusoidal time embedding. Sampling is ancestral, optionally
//! steered by the gradient of a log guidance energy built from the
//! contrastive similarity term and a degree term.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{GradError, Result};
use crate::gcl::{edge_intensity, guidance_similarity};
use crate::numeric::{adam_step, matmul, matmul_nt, matmul_tn, AdamState, Matrix};
use crate::sampler::NodeGroup;

pub const DEFAULT_STEPS: usize = 100;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
/// Offset inside the log of the guidance energy.
pub const GUIDANCE_LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    // Index 0 of `beta` and `alpha` is unused so that step t lives at [t].
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(GradError::Argument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Cosine schedule with offset 0.008 and β clipped at 0.999.
pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(GradError::Config("diffusion needs at least one step".into()));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        beta[t] = (1.0 - f(t) / f(t - 1)).clamp(f64::MIN_POSITIVE, MAX_BETA);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

/// `{0,1}` adjacency to `{−1,+1}` off the diagonal; the diagonal is 0.
pub fn encode(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        if i == j {
            0.0
        } else if a[(i, j)] > 0.0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// Positive entries become edges; the diagonal is always 0.
pub fn binarize(a0: &Matrix) -> Matrix {
    Matrix::from_fn(a0.rows(), a0.cols(), |i, j| {
        if i != j && a0[(i, j)] > 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// `√ᾱₜ · a0 + √(1 − ᾱₜ) · eps`.
pub fn forward_diffuse(a0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_step(t)?;
    if a0.shape() != eps.shape() {
        return Err(GradError::Shape("noise and data shapes differ".into()));
    }
    let ab = sched.alpha_bar(t);
    let mut out = a0.scale(ab.sqrt());
    out.axpy((1.0 - ab).sqrt(), eps)?;
    Ok(out)
}

/// Symmetric standard normal noise with a zero diagonal, as a flat `k²` row.
fn symmetric_noise(k: usize, rng: &mut impl Rng, out: &mut [f64]) {
    for i in 0..k {
        out[i * k + i] = 0.0;
        for j in i + 1..k {
            let v: f64 = rng.sample(StandardNormal);
            out[i * k + j] = v;
            out[j * k + i] = v;
        }
    }
}

fn symmetrize_flat(k: usize, a: &mut [f64]) {
    for i in 0..k {
        a[i * k + i] = 0.0;
        for j in i + 1..k {
            let m = 0.5 * (a[i * k + j] + a[j * k + i]);
            a[i * k + j] = m;
            a[j * k + i] = m;
        }
    }
}

/// Sinusoidal embedding of an integer step: `dim/2` sines then `dim/2` cosines.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (t as f64 * freq).sin();
        out[half + j] = (t as f64 * freq).cos();
    }
    out
}

/// Noise predictor `k² → hidden → hidden → k²` with the projected time
/// embedding added before the first activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub k: usize,
    pub time_dim: usize,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w_time: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    /// Time-gated skip: the output gains `(emb(t)·w_gate + b_gate) · x`.
    pub w_gate: Matrix,
    pub b_gate: Matrix,
}

struct DenoiserCache {
    x: Matrix,
    emb: Matrix,
    pre1: Matrix,
    h1: Matrix,
    pre2: Matrix,
    h2: Matrix,
}

fn glorot(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Matrix {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

fn relu_in_place(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

fn mask_relu(grad: &mut Matrix, pre: &Matrix) {
    for (g, p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn row_matrix(v: Vec<f64>) -> Matrix {
    checkpoint::scalars(&v)
}

impl Denoiser {
    pub fn init(k: usize, hidden: usize, time_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = k * k;
        Denoiser {
            k,
            time_dim,
            w1: glorot(d, hidden, 1.0, &mut rng),
            b1: Matrix::zeros(1, hidden),
            w_time: glorot(time_dim, hidden, 1.0, &mut rng),
            w2: glorot(hidden, hidden, 1.0, &mut rng),
            b2: Matrix::zeros(1, hidden),
            // A small output layer keeps the untrained prediction near 0.
            w3: glorot(hidden, d, 0.1, &mut rng),
            b3: Matrix::zeros(1, d),
            w_gate: Matrix::zeros(time_dim, 1),
            b_gate: Matrix::zeros(1, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn forward_cached(&self, x: &Matrix, steps: &[usize]) -> Result<(Matrix, DenoiserCache)> {
        if x.cols() != self.k * self.k || steps.len() != x.rows() {
            return Err(GradError::Shape(format!(
                "denoiser expects rows of length {} with one step each",
                self.k * self.k
            )));
        }
        let mut emb = Matrix::zeros(x.rows(), self.time_dim);
        for (r, &t) in steps.iter().enumerate() {
            emb.row_mut(r).copy_from_slice(&time_embedding(t, self.time_dim));
        }
        let mut pre1 = matmul(x, &self.w1)?;
        pre1.add_assign(&matmul(&emb, &self.w_time)?)?;
        pre1.add_row_vector(self.b1.as_slice())?;
        let h1 = relu_in_place(&pre1);
        let mut pre2 = matmul(&h1, &self.w2)?;
        pre2.add_row_vector(self.b2.as_slice())?;
        let h2 = relu_in_place(&pre2);
        let mut out = matmul(&h2, &self.w3)?;
        out.add_row_vector(self.b3.as_slice())?;
        let gate_w = matmul(&emb, &self.w_gate)?;
        let gate: Vec<f64> = gate_w.as_slice().iter().map(|g| g + self.b_gate[(0, 0)]).collect();
        for (r, &c) in gate.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o += c * v;
            }
        }
        Ok((
            out,
            DenoiserCache {
                x: x.clone(),
                emb,
                pre1,
                h1,
                pre2,
                h2,
            },
        ))
    }

    /// Predicted noise for each flattened row of `x` at its step.
    pub fn predict(&self, x: &Matrix, steps: &[usize]) -> Result<Matrix> {
        Ok(self.forward_cached(x, steps)?.0)
    }

    /// Mean squared error of the prediction against `target` and its
    /// gradients in [`Denoiser::params`] order.
    pub fn mse_grads(&self, x: &Matrix, steps: &[usize], target: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        let (pred, cache) = self.forward_cached(x, steps)?;
        let diff = pred.sub(target)?;
        let count = diff.as_slice().len() as f64;
        let loss = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / count;
        let grads = self.backward(&cache, &diff.scale(2.0 / count))?;
        Ok((loss, grads))
    }

    /// Gradients in [`Denoiser::params`] order.
    fn backward(&self, cache: &DenoiserCache, dout: &Matrix) -> Result<Vec<Matrix>> {
        let dw3 = matmul_tn(&cache.h2, dout)?;
        let db3 = row_matrix(dout.column_sums());
        let mut dh2 = matmul_nt(dout, &self.w3)?;
        mask_relu(&mut dh2, &cache.pre2);
        let dw2 = matmul_tn(&cache.h1, &dh2)?;
        let db2 = row_matrix(dh2.column_sums());
        let mut dh1 = matmul_nt(&dh2, &self.w2)?;
        mask_relu(&mut dh1, &cache.pre1);
        let dw1 = matmul_tn(&cache.x, &dh1)?;
        let dwt = matmul_tn(&cache.emb, &dh1)?;
        let db1 = row_matrix(dh1.column_sums());
        let dgate: Vec<f64> = (0..dout.rows())
            .map(|r| dout.row(r).iter().zip(cache.x.row(r)).map(|(d, x)| d * x).sum())
            .collect();
        let dwg = matmul_tn(&cache.emb, &Matrix::from_vec(dgate.len(), 1, dgate.clone())?)?;
        let dbg = Matrix::filled(1, 1, dgate.iter().sum());
        Ok(vec![dw1, db1, dwt, dw2, db2, dw3, db3, dwg, dbg])
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.w1,
            &self.b1,
            &self.w_time,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.w_gate,
            &self.b_gate,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w_time,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w_gate,
            &mut self.b_gate,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn k(&self) -> usize {
        self.denoiser.k
    }

    pub fn to_arrays(&self) -> Vec<Matrix> {
        let d = &self.denoiser;
        let mut out = vec![checkpoint::scalars(&[
            d.k as f64,
            d.hidden() as f64,
            d.time_dim as f64,
            self.schedule.steps() as f64,
        ])];
        out.extend(d.params().into_iter().cloned());
        out
    }

    pub fn from_arrays(arrays: Vec<Matrix>) -> Result<Self> {
        let bad = || GradError::Checkpoint("not a diffusion-model checkpoint".into());
        let [head, w1, b1, w_time, w2, b2, w3, b3, w_gate, b_gate]: [Matrix; 10] = arrays.try_into().map_err(|_| bad())?;
        if head.shape() != (1, 4) {
            return Err(bad());
        }
        let k = head[(0, 0)] as usize;
        let hidden = head[(0, 1)] as usize;
        let time_dim = head[(0, 2)] as usize;
        let steps = head[(0, 3)] as usize;
        let d = k * k;
        let shapes_ok = w1.shape() == (d, hidden)
            && b1.shape() == (1, hidden)
            && w_time.shape() == (time_dim, hidden)
            && w2.shape() == (hidden, hidden)
            && b2.shape() == (1, hidden)
            && w3.shape() == (hidden, d)
            && b3.shape() == (1, d)
            && w_gate.shape() == (time_dim, 1)
            && b_gate.shape() == (1, 1);
        if !shapes_ok {
            return Err(bad());
        }
        Ok(DiffusionModel {
            denoiser: Denoiser {
                k,
                time_dim,
                w1,
                b1,
                w_time,
                w2,
                b2,
                w3,
                b3,
                w_gate,
                b_gate,
            },
            schedule: make_schedule(steps)?,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub hidden: usize,
    pub time_dim: usize,
    /// Passes over the training matrices.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: DEFAULT_STEPS,
            hidden: 256,
            time_dim: 64,
            epochs: 300,
            batch_size: 32,
            lr: AdamState::DEFAULT_LR,
            weight_decay: AdamState::DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// Trains the denoiser with the noise-prediction MSE. Returns the model and
/// the per-step loss trace.
pub fn train_diffusion(
    group_adjacencies: &[Matrix],
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    let first = group_adjacencies
        .first()
        .ok_or_else(|| GradError::Data("no group matrices to train the diffusion model on".into()))?;
    let k = first.rows();
    if cfg.batch_size == 0 {
        return Err(GradError::Config("diffusion batch size must be positive".into()));
    }
    let data: Vec<Matrix> = group_adjacencies
        .iter()
        .map(|a| {
            if a.shape() != (k, k) {
                return Err(GradError::Shape("group matrices differ in size".into()));
            }
            // Symmetrize by union so every training target is a valid graph.
            let sym = Matrix::from_fn(k, k, |i, j| f64::from(a[(i, j)] > 0.0 || a[(j, i)] > 0.0));
            Ok(encode(&sym))
        })
        .collect::<Result<_>>()?;

    let schedule = make_schedule(cfg.steps)?;
    let mut denoiser = Denoiser::init(k, cfg.hidden, cfg.time_dim, seed);
    let mut adam = AdamState::new(&denoiser.params(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_6666_7573_696f);
    let d = k * k;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Matrix::zeros(b, d);
            let mut eps = Matrix::zeros(b, d);
            let mut steps = Vec::with_capacity(b);
            for (r, &idx) in chunk.iter().enumerate() {
                let t = rng.random_range(1..=schedule.steps());
                let ab = schedule.alpha_bar(t);
                symmetric_noise(k, &mut rng, eps.row_mut(r));
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                for ((xv, &a0), &e) in x.row_mut(r).iter_mut().zip(data[idx].as_slice()).zip(eps.row(r)) {
                    *xv = sa * a0 + sn * e;
                }
                steps.push(t);
            }
            let (loss, grads) = denoiser.mse_grads(&x, &steps, &eps)?;
            if !loss.is_finite() {
                return Err(GradError::Training {
                    step: trace.len(),
                    msg: format!("diffusion loss is {loss}"),
                });
            }
            let refs: Vec<&Matrix> = grads.iter().collect();
            adam_step(&mut denoiser.params_mut(), &refs, &mut adam).map_err(|e| GradError::Training {
                step: trace.len(),
                msg: e.to_string(),
            })?;
            trace.push(loss);
        }
    }
    Ok((DiffusionModel { denoiser, schedule }, trace))
}

/// `Σᵢ (Σⱼ wᵢⱼ)²` over edge intensities, and its gradient w.r.t. `a`.
pub fn degree_penalty(a: &Matrix) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(a.rows(), a.cols());
    let mut value = 0.0;
    for i in 0..a.rows() {
        let mut row_sum = 0.0;
        for j in 0..a.cols() {
            row_sum += edge_intensity(a[(i, j)]).0;
        }
        value += row_sum * row_sum;
        for j in 0..a.cols() {
            let dw = edge_intensity(a[(i, j)]).1;
            grad[(i, j)] = 2.0 * row_sum * dw;
        }
    }
    (value, grad)
}

/// Whether a guidance term enters the noise correction exactly as written
/// (`Literal`, which raises the energy) or with the opposite sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceSign {
    Literal,
    Flipped,
}

impl GuidanceSign {
    pub fn factor(self) -> f64 {
        match self {
            GuidanceSign::Literal => 1.0,
            GuidanceSign::Flipped => -1.0,
        }
    }
}

impl FromStr for GuidanceSign {
    type Err = GradError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "literal" | "+1" | "1" => Ok(GuidanceSign::Literal),
            "flipped" | "-1" => Ok(GuidanceSign::Flipped),
            other => Err(GradError::Config(format!(
                "guidance sign must be literal or flipped, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for GuidanceSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceSign::Literal => "literal",
            GuidanceSign::Flipped => "flipped",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale `s`; 0 disables guidance entirely.
    pub scale: f64,
    pub gamma_sim: f64,
    pub gamma_deg: f64,
    pub tau: f64,
    /// Flipped by default: the similarity energy is a negative
    /// log-likelihood, so lowering it links nodes with similar embeddings.
    pub sim_sign: GuidanceSign,
    pub deg_sign: GuidanceSign,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 10.0,
            gamma_sim: 1.0,
            gamma_deg: 0.01,
            tau: 0.5,
            sim_sign: GuidanceSign::Flipped,
            deg_sign: GuidanceSign::Literal,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.gamma_sim >= 0.0 && self.gamma_deg >= 0.0) {
            return Err(GradError::Config(
                "guidance scale and weights must be non-negative".into(),
            ));
        }
        if self.tau <= 0.0 {
            return Err(GradError::Config("guidance temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `γ₁·Gui_sim + γ₂·Gui_deg` and its gradient, both terms as written.
pub fn guidance_energy(z_group: &Matrix, a: &Matrix, cfg: &GuidanceConfig) -> Result<(f64, Matrix)> {
    let (sim, g_sim) = guidance_similarity(z_group, a, cfg.tau)?;
    let (deg, g_deg) = degree_penalty(a);
    let mut grad = g_sim.scale(cfg.gamma_sim);
    grad.axpy(cfg.gamma_deg, &g_deg)?;
    Ok((cfg.gamma_sim * sim + cfg.gamma_deg * deg, grad))
}

/// Direction subtracted (scaled by `s·√(1−ᾱ)`) from the predicted noise:
/// the gradient of `log(energy + ε)`, with each term's sign applied.
pub fn guidance_direction(z_group: &Matrix, a: &Matrix, cfg: &GuidanceConfig) -> Result<Matrix> {
    let (sim, g_sim) = guidance_similarity(z_group, a, cfg.tau)?;
    let (deg, g_deg) = degree_penalty(a);
    let energy = cfg.gamma_sim * sim + cfg.gamma_deg * deg;
    let inv = 1.0 / (energy + GUIDANCE_LOG_EPS);
    let mut dir = g_sim.scale(cfg.sim_sign.factor() * cfg.gamma_sim * inv);
    dir.axpy(cfg.deg_sign.factor() * cfg.gamma_deg * inv, &g_deg)?;
    Ok(dir)
}

/// Ancestral sampling for every group at once. Group `g` draws from its own
/// generator seeded with `seed + g.index`. `embeddings` (one row per node)
/// is required when guidance is on. `observer`, if given, sees the `B × k²`
/// state after every step.
pub fn sample_groups(
    groups: &[NodeGroup],
    model: &DiffusionModel,
    embeddings: Option<&Matrix>,
    guidance: &GuidanceConfig,
    seed: u64,
    mut observer: Option<&mut dyn FnMut(usize, &Matrix)>,
) -> Result<Vec<Matrix>> {
    guidance.validate()?;
    let k = model.k();
    let d = k * k;
    let guided = guidance.scale > 0.0;
    let z_groups: Vec<Matrix> = if guided {
        let z = embeddings.ok_or_else(|| {
            GradError::Argument("guided sampling needs node embeddings".into())
        })?;
        groups.iter().map(|g| z.select_rows(&g.members)).collect()
    } else {
        Vec::new()
    };
    for g in groups {
        if g.k() != k {
            return Err(GradError::Shape(format!(
                "group {} has {} members but the model expects {k}",
                g.index,
                g.k()
            )));
        }
    }

    let mut rngs: Vec<ChaCha8Rng> = groups
        .iter()
        .map(|g| ChaCha8Rng::seed_from_u64(seed.wrapping_add(g.index as u64)))
        .collect();
    let mut state = Matrix::zeros(groups.len(), d);
    for (r, rng) in rngs.iter_mut().enumerate() {
        symmetric_noise(k, rng, state.row_mut(r));
    }
    let sched = &model.schedule;
    for t in (1..=sched.steps()).rev() {
        let eps = model.denoiser.predict(&state, &vec![t; groups.len()])?;
        let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
        let noise_coef = beta / (1.0 - ab).sqrt();
        let guide_coef = guidance.scale * (1.0 - ab).sqrt();
        let sigma = beta.sqrt();
        let (root_ab, root_rest) = (ab.sqrt(), (1.0 - ab).sqrt());
        state
            .as_mut_slice()
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .enumerate()
            .try_for_each(|(r, (a, rng))| -> Result<()> {
                let mut eps_hat = eps.row(r).to_vec();
                if guided {
                    let a_mat = Matrix::from_vec(k, k, a.to_vec())?;
                    let dir = guidance_direction(&z_groups[r], &a_mat, guidance)?;
                    for (e, g) in eps_hat.iter_mut().zip(dir.as_slice()) {
                        *e -= guide_coef * g;
                    }
                }
                // Project the implied clean matrix onto the encoding range
                // [−1, 1]; the noise estimate is rewritten to match, so the
                // mean step below is unchanged whenever no entry is clipped.
                for (x, e) in a.iter().zip(eps_hat.iter_mut()) {
                    let x0 = (x - root_rest * *e) / root_ab;
                    if x0.abs() > 1.0 {
                        *e = (x - root_ab * x0.clamp(-1.0, 1.0)) / root_rest;
                    }
                }
                for (x, e) in a.iter_mut().zip(&eps_hat) {
                    *x = (*x - noise_coef * e) / alpha.sqrt();
                }
                if t > 1 {
                    let mut z = vec![0.0; d];
                    symmetric_noise(k, rng, &mut z);
                    for (x, n) in a.iter_mut().zip(&z) {
                        *x += sigma * n;
                    }
                }
                symmetrize_flat(k, a);
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(GradError::Sampling {
                        step: t,
                        msg: format!("non-finite state in group {}", groups[r].index),
                    });
                }
                Ok(())
            })?;
        if let Some(obs) = observer.as_mut() {
            obs(t, &state);
        }
    }
    (0..groups.len())
        .map(|r| Matrix::from_vec(k, k, state.row(r).to_vec()))
        .collect()
}

/// Continuous sample for one group.
pub fn guided_sample(
    group: &NodeGroup,
    embeddings: &Matrix,
    model: &DiffusionModel,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Matrix> {
    let mut out = sample_groups(std::slice::from_ref(group), model, Some(embeddings), guidance, seed, None)?;
    Ok(out.remove(0))
}

/// Ancestral sampling without any guidance term.
pub fn unguided_sample(group: &NodeGroup, model: &DiffusionModel, seed: u64) -> Result<Matrix> {
    let cfg = GuidanceConfig {
        scale: 0.0,
        ..GuidanceConfig::default()
    };
    let mut out = sample_groups(std::slice::from_ref(group), model, None, &cfg, seed, None)?;
    Ok(out.remove(0))
}
