//! Acceptance criteria, one line each.
//!
//! Runs as a plain binary: `cargo test -p grad-core --test acceptance`.
//! Pass criterion numbers (`... -- 1 3 5`) to run a subset. The Amazon
//! check runs only when `GRAD_AMAZON_DIR` points at a dataset directory.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use grad_core::detector::{beta_kernel_apply, beta_response, detection_loss_grads, DetectorConfig, DetectorModel};
use grad_core::diffusion::{
    degree_penalty, encode, forward_diffuse, guided_sample, make_schedule, train_diffusion, unguided_sample,
    Denoiser, DiffusionConfig, GuidanceConfig,
};
use grad_core::gcl::{guidance_similarity, supcon_loss, GclConfig, GclModel};
use grad_core::graph::normalized_laplacian;
use grad_core::metrics::{auc, average_precision};
use grad_core::numeric::finite_diff_check;
use grad_core::pipeline::{compare_ablations, run_pipeline, Ablation, PipelineConfig};
use grad_core::ppr::{ppr_dense, ppr_truncated_oracle};
use grad_core::sampler::NodeGroup;
use grad_core::{Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{ap_threshold_sweep, auc_pairs, random_relation, sorted_eigenvalues};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn unit_rows(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m[(i, j)] / n
    })
}

/// Worst relative error over every gradient, perturbing one tensor at a time.
fn check_tensors(
    base: &[&Matrix],
    grads: &[Matrix],
    h: f64,
    mut loss: impl FnMut(usize, &[f64]) -> f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, (p, g)) in base.iter().zip(grads).enumerate() {
        let err = finite_diff_check(|v| loss(i, v), p.as_slice(), g.as_slice(), h)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    // Encoder, projection and contrastive loss as one chain.
    let n = 12;
    let rel = random_relation(n, 0.3, 7);
    let x = uniform(n, 5, -1.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let cfg = GclConfig { hidden: 6, proj_dim: 4, layers: 2, ..GclConfig::default() };
    let model = GclModel::init(5, &cfg, 3)?;
    let fwd = model.forward(&x, &rel)?;
    let (_, dz) = supcon_loss(&fwd.z, &labels, model.tau)?;
    let grads = model.backward(&fwd, &dz, &rel)?;
    let err = check_tensors(&model.params(), &grads, 1e-5, |i, v| {
        let mut m = model.clone();
        m.params_mut()[i].as_mut_slice().copy_from_slice(v);
        let z = m.embed(&x, &rel).unwrap();
        supcon_loss(&z, &labels, m.tau).unwrap().0
    })?;
    errs.push(("encoder+supcon", err));

    let k = 6;
    let z = unit_rows(&uniform(k, 4, -1.0, 1.0, &mut rng));
    let a = uniform(k, k, -0.9, 0.9, &mut rng);
    let (_, g) = guidance_similarity(&z, &a, 0.5)?;
    let f = |v: &[f64]| guidance_similarity(&z, &Matrix::from_vec(k, k, v.to_vec()).unwrap(), 0.5).unwrap().0;
    errs.push(("similarity guidance", finite_diff_check(f, a.as_slice(), g.as_slice(), 1e-5)?));

    let (_, g) = degree_penalty(&a);
    let f = |v: &[f64]| degree_penalty(&Matrix::from_vec(k, k, v.to_vec()).unwrap()).0;
    errs.push(("degree penalty", finite_diff_check(f, a.as_slice(), g.as_slice(), 1e-5)?));

    let net = Denoiser::init(4, 8, 8, 5);
    let xs = uniform(5, 16, -1.0, 1.0, &mut rng);
    let target = uniform(5, 16, -1.0, 1.0, &mut rng);
    let steps = [1, 9, 50, 100, 3];
    let (_, grads) = net.mse_grads(&xs, &steps, &target)?;
    let err = check_tensors(&net.params(), &grads, 1e-6, |i, v| {
        let mut m = net.clone();
        m.params_mut()[i].as_mut_slice().copy_from_slice(v);
        m.mse_grads(&xs, &steps, &target).unwrap().0
    })?;
    errs.push(("denoiser mse", err));

    let feats = vec![uniform(10, 6, -1.0, 1.0, &mut rng), uniform(10, 6, -1.0, 1.0, &mut rng)];
    let y: Vec<u8> = (0..10).map(|i| (i % 4 == 0) as u8).collect();
    let mask: Vec<usize> = (0..8).collect();
    let dcfg = DetectorConfig { order: 2, hidden: 5, ..DetectorConfig::default() };
    let mut det = DetectorModel::init(2, 2, &dcfg, 4)?;
    det.omega = vec![0.6, 1.4];
    let (_, grads, d_omega) = detection_loss_grads(&feats, &det, &y, &mask, Some(3.0))?;
    let err = check_tensors(&det.params(), &grads, 1e-6, |i, v| {
        let mut m = det.clone();
        m.params_mut()[i].as_mut_slice().copy_from_slice(v);
        detection_loss_grads(&feats, &m, &y, &mask, Some(3.0)).unwrap().0
    })?;
    errs.push(("detector heads", err));
    let f = |v: &[f64]| {
        let mut m = det.clone();
        m.omega = v.to_vec();
        detection_loss_grads(&feats, &m, &y, &mask, Some(3.0)).unwrap().0
    };
    errs.push(("relation weights", finite_diff_check(f, &det.omega, &d_omega, 1e-6)?));

    let secs = start.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(verdict(
        worst <= 1e-4 && secs <= 60.0,
        format!("gradient checks max rel err {worst:.1e} ({detail}) in {secs:.1}s"),
    ))
}

fn forward_moments() -> Result<Outcome> {
    let sched = make_schedule(100)?;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let k = 4;
    let raw = Matrix::from_fn(k, k, |i, j| f64::from(i != j && (i + j) % 3 == 0));
    let a0 = encode(&raw);
    let draws = 10_000;
    let mut ok = true;
    let mut worst = 0.0f64;
    for t in [1, 50, 100] {
        let ab = sched.alpha_bar(t);
        let sd = (1.0 - ab).sqrt();
        let (mut s1, mut s1_signed, mut s2) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let eps = Matrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let at = forward_diffuse(&a0, t, &eps, &sched)?;
            for (v, s) in at.as_slice().iter().zip(a0.as_slice()) {
                let r = (v - ab.sqrt() * s) / sd;
                s1 += r;
                s1_signed += r * s;
                s2 += r * r;
            }
        }
        let m = (draws * k * k) as f64;
        let mean = s1 / m;
        let signed = s1_signed / m;
        let var = s2 / m - mean * mean;
        // Standardized residuals are N(0, 1): mean has sd 1/√m, variance √(2/(m−1)).
        let z = [mean * m.sqrt(), signed * m.sqrt(), (var - 1.0) / (2.0 / (m - 1.0)).sqrt()];
        for v in z {
            worst = worst.max(v.abs());
            ok &= v.abs() <= 3.0;
        }
    }

    // Guidance at s = 0 must reproduce the unguided sampler bit for bit.
    let graphs: Vec<Matrix> = (0..8)
        .map(|s| {
            let r = random_relation(6, 0.3, 300 + s).to_dense();
            encode(&r)
        })
        .collect();
    let dcfg = DiffusionConfig { steps: 20, hidden: 16, time_dim: 8, epochs: 2, batch_size: 4, ..DiffusionConfig::default() };
    let (model, _) = train_diffusion(&graphs, &dcfg, 9)?;
    let group = NodeGroup { index: 0, members: (0..6).collect() };
    let emb = unit_rows(&uniform(6, 3, -1.0, 1.0, &mut rng));
    let zero = GuidanceConfig { scale: 0.0, ..GuidanceConfig::default() };
    let guided = guided_sample(&group, &emb, &model, &zero, 17)?;
    let plain = unguided_sample(&group, &model, 17)?;
    let bitwise = guided
        .as_slice()
        .iter()
        .zip(plain.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    Ok(verdict(
        ok && bitwise,
        format!("forward moments at t=1,50,100 over 1e4 draws: max |z| {worst:.2} (≤3); s=0 bitwise unguided: {bitwise}"),
    ))
}

fn spectral_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for s in 0..10 {
        let n = rng.random_range(6..=20);
        let rel = random_relation(n, rng.random_range(0.15..0.5), 3000 + s);
        let l = normalized_laplacian(&rel);
        let lambda = sorted_eigenvalues(&l.to_dense());
        let eye = Matrix::identity(n);
        for p in 0..=4 {
            for q in 0..=4 - p {
                let w = beta_kernel_apply(&l, p, q, &eye)?;
                let got = sorted_eigenvalues(&w);
                let mut want: Vec<f64> = lambda.iter().map(|&x| beta_response(p, q, x)).collect();
                want.sort_by(f64::total_cmp);
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(verdict(
        worst <= 1e-8,
        format!("kernel spectrum vs response, 10 graphs, all p+q≤4: max err {worst:.1e} (≤1e-8)"),
    ))
}

fn ppr_series() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for s in 0..10 {
        let n = rng.random_range(10..=50);
        let rel = random_relation(n, rng.random_range(0.05..0.3), 4000 + s);
        let closed = ppr_dense(&rel, 0.15)?;
        let series = ppr_truncated_oracle(&rel.to_dense(), 0.15, 200)?;
        worst = worst.max(closed.max_abs_diff(&series));
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("closed-form PPR vs 200-term series, 10 graphs: max err {worst:.1e} (≤1e-6)"),
    ))
}

fn metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut auc_mismatch, mut ap_worst) = (0usize, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=60);
        let levels = rng.random_range(2..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        if auc(&scores, &labels)? != auc_pairs(&scores, &labels) {
            auc_mismatch += 1;
        }
        let ap = average_precision(&scores, &labels)?;
        ap_worst = ap_worst.max((ap - ap_threshold_sweep(&scores, &labels)).abs());
    }
    Ok(verdict(
        auc_mismatch == 0 && ap_worst <= 1e-12,
        format!("200 tied instances: AUC mismatches {auc_mismatch} (exact), AP max diff {ap_worst:.1e} (≤1e-12)"),
    ))
}

fn ablation_criteria() -> Result<(Outcome, Outcome)> {
    let start = Instant::now();
    let seeds = [0, 1, 2, 3, 4];
    let table = compare_ablations(&PipelineConfig::default(), &seeds)?;
    let secs = start.elapsed().as_secs_f64();
    let mean = |a: Ablation| table.row(a).map_or(f64::NAN, |r| r.auc_mean);
    let (full, no_gen, no_gui) = (mean(Ablation::Full), mean(Ablation::NoGen), mean(Ablation::NoGui));
    let six = verdict(
        full - no_gen >= 0.02 && full > no_gui && secs <= 900.0,
        format!(
            "mean test AUC full {full:.4}, no_gen {no_gen:.4} (gain {:+.4}, need ≥0.02), no_gui {no_gui:.4} (need full above); 4 modes × 5 seeds in {secs:.0}s",
            full - no_gen
        ),
    );

    let mut wins = 0;
    let mut pairs = Vec::new();
    for r in table.reports.iter().filter(|r| r.ablation == Ablation::Full) {
        let (orig, generated) = (r.homophily_original.fraud, r.homophily_generated.fraud);
        if let (Some(o), Some(g)) = (orig, generated) {
            if g > o {
                wins += 1;
            }
            pairs.push(format!("{g:.2}/{o:.2}"));
        } else {
            pairs.push("n/a".into());
        }
    }
    let seven = verdict(
        wins >= 4,
        format!("fraud homophily generated/original {} : higher in {wins}/5 seeds (need ≥4)", pairs.join(" ")),
    );
    Ok((six, seven))
}

fn amazon() -> Result<Outcome> {
    let Some(dir) = std::env::var_os("GRAD_AMAZON_DIR") else {
        return Ok(Outcome::Skip("GRAD_AMAZON_DIR not set".into()));
    };
    let mut cfg = PipelineConfig::default();
    cfg.set("data-dir", &dir.to_string_lossy())?;
    cfg.set("ablation", "no_gen")?;
    let report = run_pipeline(&cfg)?;
    Ok(verdict(
        report.test_auc >= 0.93,
        format!("Amazon detector-only test AUC {:.4} (≥0.93)", report.test_auc),
    ))
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |c: u32| wanted.is_empty() || wanted.contains(&c);
    let mut results: Vec<(u32, Result<Outcome>)> = Vec::new();
    let mut report = |c: u32, r: Result<Outcome>| {
        let line = match &r {
            Ok(Outcome::Pass(d)) => format!("criterion {c}: PASS  {d}"),
            Ok(Outcome::Fail(d)) => format!("criterion {c}: FAIL  {d}"),
            Ok(Outcome::Skip(d)) => format!("criterion {c}: SKIP  {d}"),
            Err(e) => format!("criterion {c}: FAIL  error: {e}"),
        };
        println!("{line}");
        results.push((c, r));
    };

    let simple: [(u32, fn() -> Result<Outcome>); 5] = [
        (1, gradients),
        (2, forward_moments),
        (3, spectral_identity),
        (4, ppr_series),
        (5, metric_oracles),
    ];
    for (c, f) in simple {
        if run(c) {
            report(c, f());
        }
    }
    if run(6) || run(7) {
        match ablation_criteria() {
            Ok((six, seven)) => {
                if run(6) {
                    report(6, Ok(six));
                }
                if run(7) {
                    report(7, Ok(seven));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for c in [6, 7].into_iter().filter(|&c| run(c)) {
                    report(c, Ok(Outcome::Fail(format!("ablation run failed: {msg}"))));
                }
            }
        }
    }
    if run(8) {
        report(8, amazon());
    }

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, r)| !matches!(r, Ok(Outcome::Pass(_)) | Ok(Outcome::Skip(_))))
        .map(|(c, _)| *c)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
