//! Dataset files, stratified splits and the synthetic camouflage generator.
//!
//! On-disk layout of a dataset directory:
//!
//! * `nodes.csv`: header `id,f0,...,f{d-1}`, one row per node
//! * `labels.csv`: header `id,label`, label in {0,1}; unlabeled nodes omitted
//! * `edges_<relation>.tsv`: two tab-separated node ids per line
//! * `splits.json`: optional `{"train": [...], "val": [...], "test": [...]}` of node ids

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::graph::{similarity_stats_with, EdgeCleanup, MultiRelationGraph, SparseAdjacency, FRAUD};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub self_loops_dropped: usize,
    pub duplicate_edges: usize,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> GradError {
    GradError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| GradError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Loads a dataset directory. Node ids are densified in `nodes.csv` order.
pub fn load_dataset(dir: &Path) -> Result<(MultiRelationGraph, LoadStats)> {
    let nodes_path = dir.join("nodes.csv");
    let mut rdr = csv_reader(&nodes_path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(&nodes_path, 1, e.to_string()))?
        .clone();
    if header.get(0) != Some("id") {
        return Err(parse_err(&nodes_path, 1, "first column must be `id`"));
    }
    let d = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(&nodes_path, 1, format!("expected column f{i}, found `{name}`")));
        }
    }

    let mut node_ids = Vec::new();
    let mut index_of = HashMap::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(&nodes_path, line, e.to_string())
        })?;
        let line = line_of(&rec);
        if rec.len() != d + 1 {
            return Err(parse_err(
                &nodes_path,
                line,
                format!("ragged row: {} fields, header has {}", rec.len(), d + 1),
            ));
        }
        let id: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(&nodes_path, line, format!("bad node id `{}`", &rec[0])))?;
        if index_of.insert(id, node_ids.len()).is_some() {
            return Err(parse_err(&nodes_path, line, format!("duplicate node id {id}")));
        }
        node_ids.push(id);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(&nodes_path, line, format!("bad feature `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(&nodes_path, line, "non-finite feature"));
            }
            data.push(v);
        }
    }
    let n = node_ids.len();
    let features = Matrix::from_vec(n, d, data)?;

    let labels_path = dir.join("labels.csv");
    let mut labels = vec![None; n];
    let mut rdr = csv_reader(&labels_path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&labels_path, 0, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(parse_err(&labels_path, line, "expected `id,label`"));
        }
        let id: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(&labels_path, line, format!("bad node id `{}`", &rec[0])))?;
        let idx = *index_of
            .get(&id)
            .ok_or_else(|| parse_err(&labels_path, line, format!("unknown node id {id}")))?;
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    &labels_path,
                    line,
                    format!("label `{other}` outside {{0,1}}"),
                ))
            }
        };
        labels[idx] = Some(label);
    }

    let mut edge_files: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| GradError::io(dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let name = path.file_name()?.to_str()?;
            let rel = name.strip_prefix("edges_")?.strip_suffix(".tsv")?.to_string();
            Some((rel, path))
        })
        .collect();
    edge_files.sort();
    if edge_files.is_empty() {
        return Err(GradError::Data(format!(
            "{}: no edges_<relation>.tsv file",
            dir.display()
        )));
    }

    let mut stats = LoadStats::default();
    let mut relations = Vec::new();
    let mut relation_names = Vec::new();
    for (name, path) in edge_files {
        let (rel, cleanup) = read_edges(&path, &index_of, n)?;
        if cleanup.self_loops > 0 {
            log::warn!("{}: dropped {} self-loops", path.display(), cleanup.self_loops);
        }
        stats.self_loops_dropped += cleanup.self_loops;
        stats.duplicate_edges += cleanup.duplicates;
        relations.push(rel);
        relation_names.push(name);
    }

    let g = MultiRelationGraph {
        features,
        labels,
        relations,
        relation_names,
        node_ids,
    };
    g.validate()?;
    Ok((g, stats))
}

fn read_edges(
    path: &Path,
    index_of: &HashMap<i64, usize>,
    n: usize,
) -> Result<(SparseAdjacency, EdgeCleanup)> {
    let text = fs::read_to_string(path).map_err(|e| GradError::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, lineno, "expected two node ids"));
        };
        let lookup = |tok: &str| -> Result<usize> {
            let id: i64 = tok
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad node id `{tok}`")))?;
            index_of.get(&id).copied().ok_or_else(|| {
                parse_err(path, lineno, format!("edge endpoint {id} out of range"))
            })
        };
        pairs.push((lookup(a)?, lookup(b)?));
    }
    SparseAdjacency::from_edges(n, pairs)
}

/// Writes the canonical form of `g` into `dir`.
pub fn save_dataset(g: &MultiRelationGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GradError::io(dir, e))?;

    let mut nodes = String::from("id");
    for j in 0..g.d() {
        nodes.push_str(&format!(",f{j}"));
    }
    nodes.push('\n');
    for i in 0..g.n() {
        nodes.push_str(&g.node_ids[i].to_string());
        for v in g.features.row(i) {
            nodes.push(',');
            nodes.push_str(&v.to_string());
        }
        nodes.push('\n');
    }
    write_file(&dir.join("nodes.csv"), &nodes)?;

    let mut labels = String::from("id,label\n");
    for (i, l) in g.labels.iter().enumerate() {
        if let Some(l) = l {
            labels.push_str(&format!("{},{l}\n", g.node_ids[i]));
        }
    }
    write_file(&dir.join("labels.csv"), &labels)?;

    for (rel, name) in g.relations.iter().zip(&g.relation_names) {
        save_relation(rel, &g.node_ids, &dir.join(format!("edges_{name}.tsv")))?;
    }
    Ok(())
}

/// Writes one relation as a TSV edge list using external node ids.
pub fn save_relation(rel: &SparseAdjacency, node_ids: &[i64], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(rel.num_edges() * 12);
    for &(u, v) in rel.edges() {
        out.push_str(&format!("{}\t{}\n", node_ids[u], node_ids[v]));
    }
    write_file(path, &out)
}

/// Reads a single TSV relation against an existing graph's id map.
pub fn load_relation(path: &Path, g: &MultiRelationGraph) -> Result<SparseAdjacency> {
    let index_of: HashMap<i64, usize> = g.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    Ok(read_edges(path, &index_of, g.n())?.0)
}

/// Reads an `id,score` file into node order. Every node needs a score.
pub fn load_scores(path: &Path, g: &MultiRelationGraph) -> Result<Vec<f64>> {
    let index_of: HashMap<i64, usize> = g.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut scores = vec![None; g.n()];
    let mut rdr = csv_reader(path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = line_of(&rec);
        let field = |j: usize| rec.get(j).ok_or_else(|| parse_err(path, line, "expected `id,score`"));
        let id: i64 = field(0)?.parse().map_err(|_| parse_err(path, line, "bad node id"))?;
        let score: f64 = field(1)?.parse().map_err(|_| parse_err(path, line, "bad score"))?;
        let &i = index_of
            .get(&id)
            .ok_or_else(|| parse_err(path, line, format!("unknown node id {id}")))?;
        scores[i] = Some(score);
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| GradError::Data(format!("{}: no score for node {}", path.display(), g.node_ids[i]))))
        .collect()
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| GradError::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| GradError::io(path, e))
}

/// Disjoint train/validation/test node index sets (dense indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.4, 0.3, 0.3];

/// Largest-remainder apportionment of `total` items to `ratios`.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Stratified split of the labeled nodes.
///
/// Overall split sizes follow `ratios` by largest remainder; the fraud class
/// is apportioned the same way and benign nodes fill the rest, so each
/// split's fraud count is within one node of its proportional share.
pub fn make_split(labels: &[Option<u8>], ratios: [f64; 3], seed: u64) -> Result<SplitMasks> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GradError::Argument(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fraud: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(FRAUD)).collect();
    let mut benign: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(0)).collect();
    for (name, class) in [("fraud", &fraud), ("benign", &benign)] {
        if class.len() < 3 {
            return Err(GradError::Argument(format!(
                "cannot stratify: {} {name} nodes for 3 splits",
                class.len()
            )));
        }
    }
    fraud.shuffle(&mut rng);
    benign.shuffle(&mut rng);

    let overall = apportion(fraud.len() + benign.len(), &ratios);
    let fraud_counts = apportion(fraud.len(), &ratios);
    let mut sets: [Vec<usize>; 3] = Default::default();
    let (mut fi, mut bi) = (0, 0);
    for s in 0..3 {
        let benign_count = overall[s].checked_sub(fraud_counts[s]).ok_or_else(|| {
            GradError::Argument("split too small to hold its fraud share".into())
        })?;
        sets[s].extend_from_slice(&fraud[fi..fi + fraud_counts[s]]);
        sets[s].extend_from_slice(&benign[bi..bi + benign_count]);
        fi += fraud_counts[s];
        bi += benign_count;
        sets[s].sort_unstable();
    }
    let [train, val, test] = sets;
    Ok(SplitMasks { train, val, test })
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<i64>,
    val: Vec<i64>,
    test: Vec<i64>,
}

pub fn save_splits(masks: &SplitMasks, node_ids: &[i64], path: &Path) -> Result<()> {
    let ids = |v: &[usize]| v.iter().map(|&i| node_ids[i]).collect();
    let file = SplitFile {
        train: ids(&masks.train),
        val: ids(&masks.val),
        test: ids(&masks.test),
    };
    let json = serde_json::to_string(&file).expect("split file serializes");
    write_file(path, &json)
}

pub fn load_splits(path: &Path, g: &MultiRelationGraph) -> Result<SplitMasks> {
    let text = fs::read_to_string(path).map_err(|e| GradError::io(path, e))?;
    let file: SplitFile = serde_json::from_str(&text)
        .map_err(|e| parse_err(path, e.line() as u64, e.to_string()))?;
    let index_of: HashMap<i64, usize> = g.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let map = |v: Vec<i64>| -> Result<Vec<usize>> {
        v.into_iter()
            .map(|id| {
                index_of
                    .get(&id)
                    .copied()
                    .ok_or_else(|| GradError::Data(format!("split references unknown node {id}")))
            })
            .collect()
    };
    let masks = SplitMasks {
        train: map(file.train)?,
        val: map(file.val)?,
        test: map(file.test)?,
    };
    let mut seen = vec![false; g.n()];
    for &i in masks.train.iter().chain(&masks.val).chain(&masks.test) {
        if std::mem::replace(&mut seen[i], true) {
            return Err(GradError::Data(format!("node {} appears in two splits", g.node_ids[i])));
        }
    }
    Ok(masks)
}

/// Parameters of the synthetic camouflage graph.
///
/// Benign nodes draw features around a benign center. Each fraud node picks
/// one of its camouflage neighbors as a victim and copies a share `λ` of the
/// victim's profile; the rest comes from the fraud center, with fresh noise
/// scaled so every node has the same per-coordinate noise variance. `λ` is
/// calibrated so the measured similarity ratio hits `similarity_target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub fraud_rate: f64,
    pub d: usize,
    pub similarity_target: f64,
    /// Mean benign–benign degree.
    pub intra_degree: f64,
    pub camouflage_edges_per_fraud: usize,
    /// Mean fraud–fraud degree.
    pub fraud_degree: f64,
    /// Norm of each class center.
    pub center_norm: f64,
    pub noise_std: f64,
    /// The first `signature_dims` features have noise scaled by
    /// `signature_noise`; cosine similarity barely sees them, a linear
    /// model does.
    pub signature_dims: usize,
    pub signature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            fraud_rate: 0.1,
            d: 32,
            similarity_target: 0.8,
            intra_degree: 8.0,
            camouflage_edges_per_fraud: 4,
            fraud_degree: 1.0,
            center_norm: 3.0,
            noise_std: 1.0,
            signature_dims: 4,
            signature_noise: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GradError::Config(m));
        if !(self.fraud_rate > 0.0 && self.fraud_rate < 1.0) {
            return bad(format!("fraud_rate {} outside (0,1)", self.fraud_rate));
        }
        if (self.n as f64 * self.fraud_rate) < 10.0 {
            return bad(format!(
                "n·fraud_rate = {} must be at least 10",
                self.n as f64 * self.fraud_rate
            ));
        }
        if self.d < 2 {
            return bad(format!("d = {} must be at least 2", self.d));
        }
        if !(0.0..=1.0).contains(&self.similarity_target) {
            return bad(format!("similarity_target {} outside [0,1]", self.similarity_target));
        }
        if self.signature_dims > self.d {
            return bad(format!("{} signature features but d = {}", self.signature_dims, self.d));
        }
        if self.intra_degree < 0.0 || self.fraud_degree < 0.0 || self.noise_std < 0.0 || self.signature_noise < 0.0 {
            return bad("degrees and noise must be non-negative".into());
        }
        let n_benign = self.n - (self.n as f64 * self.fraud_rate).round() as usize;
        if self.camouflage_edges_per_fraud > n_benign {
            return bad("more camouflage edges per fraud node than benign nodes".into());
        }
        Ok(())
    }
}

/// Calibration stops once the measured ratio is this close to the target.
pub const SYNTH_CALIBRATION_TOL: f64 = 0.01;
const SYNTH_MAX_BISECTIONS: usize = 50;

struct SynthDraw {
    labels: Vec<Option<u8>>,
    relation: SparseAdjacency,
    benign_center: Vec<f64>,
    fraud_center: Vec<f64>,
    noise: Matrix,
    fresh_noise: Matrix,
    victim: Vec<Option<usize>>,
    /// Per-feature noise scale.
    noise_std: Vec<f64>,
}

impl SynthDraw {
    fn features(&self, lambda: f64) -> Matrix {
        let n = self.labels.len();
        let d = self.benign_center.len();
        let keep = (1.0 - lambda * lambda).max(0.0).sqrt();
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            if self.labels[i] != Some(FRAUD) {
                for j in 0..d {
                    x[(i, j)] = self.benign_center[j] + self.noise_std[j] * self.noise[(i, j)];
                }
            }
        }
        for i in 0..n {
            if self.labels[i] != Some(FRAUD) {
                continue;
            }
            for j in 0..d {
                let copied = match self.victim[i] {
                    Some(v) => x[(v, j)],
                    None => self.benign_center[j] + self.noise_std[j] * self.noise[(i, j)],
                };
                x[(i, j)] = lambda * copied
                    + (1.0 - lambda) * self.fraud_center[j]
                    + keep * self.noise_std[j] * self.fresh_noise[(i, j)];
            }
        }
        x
    }

    fn ratio(&self, lambda: f64) -> Result<f64> {
        Ok(similarity_stats_with(&self.features(lambda), &self.relation, &self.labels)?.similarity_ratio)
    }
}

fn random_center(d: usize, norm: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut c: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let len = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    c.iter_mut().for_each(|v| *v *= norm / len);
    c
}

fn random_pairs(pool: &[usize], count: usize, taken: &mut std::collections::HashSet<(usize, usize)>, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let max_pairs = pool.len() * pool.len().saturating_sub(1) / 2;
    let mut out = Vec::with_capacity(count);
    let mut guard = 0usize;
    while out.len() < count.min(max_pairs) && guard < 100 * count + 1000 {
        guard += 1;
        let u = *pool.choose(rng).expect("non-empty pool");
        let v = *pool.choose(rng).expect("non-empty pool");
        if u == v {
            continue;
        }
        let e = (u.min(v), u.max(v));
        if taken.insert(e) {
            out.push(e);
        }
    }
    out
}

/// Centers each column and scales it to unit variance; constant columns
/// become 0.
pub fn standardize_columns(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for i in 0..n {
            out[(i, j)] = (x[(i, j)] - mean) * inv;
        }
    }
    out
}

/// Builds a single-relation camouflage graph whose similarity ratio matches
/// `cfg.similarity_target` within [`SYNTH_CALIBRATION_TOL`].
pub fn generate_synthetic_camouflage(cfg: &SynthConfig) -> Result<MultiRelationGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let n_fraud = (n as f64 * cfg.fraud_rate).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![Some(0u8); n];
    for &i in &order[..n_fraud] {
        labels[i] = Some(FRAUD);
    }
    let mut fraud_nodes: Vec<usize> = order[..n_fraud].to_vec();
    fraud_nodes.sort_unstable();
    let mut benign_nodes: Vec<usize> = order[n_fraud..].to_vec();
    benign_nodes.sort_unstable();

    let benign_center = random_center(cfg.d, cfg.center_norm, &mut rng);
    let fraud_center = random_center(cfg.d, cfg.center_norm, &mut rng);

    let mut taken = std::collections::HashSet::new();
    let mut edges = random_pairs(
        &benign_nodes,
        (benign_nodes.len() as f64 * cfg.intra_degree / 2.0).round() as usize,
        &mut taken,
        &mut rng,
    );
    let mut victim = vec![None; n];
    for &f in &fraud_nodes {
        let targets: Vec<usize> = benign_nodes
            .choose_multiple(&mut rng, cfg.camouflage_edges_per_fraud)
            .copied()
            .collect();
        victim[f] = targets.first().copied();
        for b in targets {
            let e = (f.min(b), f.max(b));
            if taken.insert(e) {
                edges.push(e);
            }
        }
    }
    edges.extend(random_pairs(
        &fraud_nodes,
        (n_fraud as f64 * cfg.fraud_degree / 2.0).round() as usize,
        &mut taken,
        &mut rng,
    ));
    let (relation, _) = SparseAdjacency::from_edges(n, edges)?;

    let noise = Matrix::from_fn(n, cfg.d, |_, _| rng.sample(StandardNormal));
    let fresh_noise = Matrix::from_fn(n, cfg.d, |_, _| rng.sample(StandardNormal));
    let draw = SynthDraw {
        labels,
        relation,
        benign_center,
        fraud_center,
        noise,
        fresh_noise,
        victim,
        noise_std: (0..cfg.d)
            .map(|j| if j < cfg.signature_dims { cfg.noise_std * cfg.signature_noise } else { cfg.noise_std })
            .collect(),
    };

    let lambda = calibrate_blend(&draw, cfg.similarity_target)?;
    log::debug!("synthetic camouflage blend λ = {lambda:.4}");
    let features = draw.features(lambda);
    MultiRelationGraph::new(features, draw.labels, vec![draw.relation], vec!["txn".into()])
}

/// Bisection on the blend coefficient; the ratio is non-decreasing in λ.
/// Targets below the unblended ratio clamp to λ = 0.
fn calibrate_blend(draw: &SynthDraw, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let r_lo = draw.ratio(lo)?;
    if r_lo >= target - SYNTH_CALIBRATION_TOL {
        // Without any mimicry the graph is already at or above the target.
        if r_lo > target + SYNTH_CALIBRATION_TOL {
            log::warn!("similarity target {target} below the unblended ratio {r_lo:.3}; using λ = 0");
        }
        return Ok(lo);
    }
    let r_hi = draw.ratio(hi)?;
    if (r_hi - target).abs() <= SYNTH_CALIBRATION_TOL {
        return Ok(hi);
    }
    if r_hi < target {
        return Err(GradError::Data(format!(
            "similarity target {target} above the attainable maximum {r_hi:.3}"
        )));
    }
    let mut best = (f64::INFINITY, lo);
    for _ in 0..SYNTH_MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = draw.ratio(mid)?;
        if (r - target).abs() < best.0 {
            best = ((r - target).abs(), mid);
        }
        if (r - target).abs() <= SYNTH_CALIBRATION_TOL {
            return Ok(mid);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(GradError::Data(format!(
        "similarity calibration did not converge: closest ratio misses target {target} by {:.3}",
        best.0
    )))
}
