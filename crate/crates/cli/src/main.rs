//! `grad` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use grad_core::datasets::{
    generate_synthetic_camouflage, load_relation, load_scores, load_splits, save_dataset, save_relation, save_splits,
    write_file, SplitMasks,
};
use grad_core::detector::{save_scores, score_nodes, train_detector};
use grad_core::diffusion::DiffusionModel;
use grad_core::gcl::GclModel;
use grad_core::graph::{fuse_raw_relations, FRAUD};
use grad_core::pipeline::{
    compare_ablations, derive_seed, diffusion_stage, effective_detector, evaluate, gcl_stage, generation_stage,
    prepare_data, run_pipeline, Ablation, ClassHomophily, PipelineConfig, CONFIG_KEYS,
};
use grad_core::ppr::ppr_relation;
use grad_core::{ErrorClass, GradError, MultiRelationGraph, Result};

const SEED_ENV: &str = "GRAD_SEED";

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat `key = value` file; flags override it")];
    for &(key, help) in CONFIG_KEYS {
        args.push(Arg::new(key).long(key).value_name("VALUE").help(help));
    }
    args
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).value_name("PATH").help(help)
}

fn cli() -> Command {
    let stage = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("grad")
        .about("Guided relation diffusion for graph fraud detection")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more log output (-v info, -vv debug)"),
        )
        .subcommand(stage("synth", "write a synthetic camouflage dataset to --out"))
        .subcommand(stage("split", "write splits.json for the configured data to --out"))
        .subcommand(stage("train-gcl", "train the contrastive encoder; writes gcl.ckpt"))
        .subcommand(stage("train-diff", "train the group-adjacency denoiser; writes diffusion.ckpt"))
        .subcommand(
            stage("generate", "sample generated relations; writes edges_generated*.tsv")
                .arg(path_arg("gcl", "contrastive checkpoint (default: OUT/gcl.ckpt)"))
                .arg(path_arg("diffusion", "denoiser checkpoint (default: OUT/diffusion.ckpt)")),
        )
        .subcommand(stage("ppr", "PPR-enrich edges_generated*.tsv into edges_generated_ppr*.tsv"))
        .subcommand(stage("train-det", "train the detector on original plus enriched relations; writes scores.csv"))
        .subcommand(
            stage("eval", "test AUC and AP of a score file; writes eval.json")
                .arg(path_arg("scores", "score file (default: OUT/scores.csv)")),
        )
        .subcommand(stage("pipeline", "run every stage; writes report.json, scores.csv and checkpoints"))
        .subcommand(
            stage("ablate", "run all four ablation modes over several seeds; writes ablation_table.csv")
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0,1,2,3,4")
                        .help("comma-separated seeds"),
                ),
        )
}

/// Defaults, then `GRAD_SEED`, then the config file, then flags.
fn load_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("seed", &seed)
            .map_err(|_| GradError::Config(format!("{SEED_ENV}={seed:?} is not a seed")))?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| GradError::Config(format!("{path}: {e}")))?;
        cfg.apply_text(&text)?;
    }
    for &(key, _) in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| GradError::Config("this command needs --out".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| GradError::io(&dir, e))?;
    Ok(dir)
}

/// Configured data and split; an existing `OUT/splits.json` wins over a
/// fresh split.
fn data(cfg: &PipelineConfig, out: &Path) -> Result<(MultiRelationGraph, SplitMasks)> {
    let (g, masks) = prepare_data(cfg)?;
    let path = out.join("splits.json");
    if path.exists() {
        let masks = load_splits(&path, &g)?;
        return Ok((g, masks));
    }
    Ok((g, masks))
}

fn suffix(r: usize) -> String {
    if r == 0 {
        String::new()
    } else {
        format!("_{r}")
    }
}

fn to_json(value: &serde_json::Value) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| GradError::Data(e.to_string()))
}

fn homophily_line(h: &ClassHomophily) -> String {
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"));
    format!("fraud {} benign {}", show(h.fraud), show(h.benign))
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    match name {
        "synth" => {
            let out = out_dir(&cfg)?;
            let mut synth = cfg.synth.clone();
            synth.seed = cfg.synth_seed.unwrap_or(cfg.seed);
            let g = generate_synthetic_camouflage(&synth)?;
            save_dataset(&g, &out)?;
            println!("wrote {} nodes, {} edges to {}", g.n(), g.relations[0].num_edges(), out.display());
        }
        "split" => {
            let out = out_dir(&cfg)?;
            let (g, masks) = prepare_data(&cfg)?;
            save_splits(&masks, &g.node_ids, &out.join("splits.json"))?;
            println!("train {} val {} test {}", masks.train.len(), masks.val.len(), masks.test.len());
        }
        "train-gcl" => {
            let out = out_dir(&cfg)?;
            let (g, masks) = data(&cfg, &out)?;
            let (model, trace) = gcl_stage(&cfg, &g, &masks)?;
            model.save(&out.join("gcl.ckpt"))?;
            write_file(&out.join("gcl_loss.json"), &to_json(&json!(trace.losses))?)?;
            println!("final contrastive loss {:.6}", trace.losses.last().copied().unwrap_or(f64::NAN));
        }
        "train-diff" => {
            let out = out_dir(&cfg)?;
            let (g, _) = data(&cfg, &out)?;
            let (model, losses) = diffusion_stage(&cfg, &g)?;
            model.save(&out.join("diffusion.ckpt"))?;
            write_file(&out.join("diffusion_loss.json"), &to_json(&json!(losses))?)?;
            println!("final denoiser loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
        }
        "generate" => {
            let out = out_dir(&cfg)?;
            let (g, _) = data(&cfg, &out)?;
            let path_or = |id: &str, file: &str| m.get_one::<String>(id).map_or_else(|| out.join(file), PathBuf::from);
            let gcl = GclModel::load(&path_or("gcl", "gcl.ckpt"))?;
            let diffusion = DiffusionModel::load(&path_or("diffusion", "diffusion.ckpt"))?;
            let fused = fuse_raw_relations(&g)?;
            let z = gcl.embed(&g.features, &fused)?;
            let generated = generation_stage(&cfg, &g, &z, &diffusion)?;
            println!("original: {}", homophily_line(&ClassHomophily::of(&fused, &g.labels)));
            for (r, rel) in generated.iter().enumerate() {
                save_relation(rel, &g.node_ids, &out.join(format!("edges_generated{}.tsv", suffix(r))))?;
                println!(
                    "generated_{r}: {} edges, {}",
                    rel.num_edges(),
                    homophily_line(&ClassHomophily::of(rel, &g.labels))
                );
            }
        }
        "ppr" => {
            let out = out_dir(&cfg)?;
            let (g, _) = data(&cfg, &out)?;
            for r in 0..cfg.generated_relations {
                let rel = load_relation(&out.join(format!("edges_generated{}.tsv", suffix(r))), &g)?;
                let augmented = ppr_relation(&rel, &cfg.ppr)?;
                save_relation(&augmented, &g.node_ids, &out.join(format!("edges_generated_ppr{}.tsv", suffix(r))))?;
                println!("generated_{r}: {} edges -> {} after PPR", rel.num_edges(), augmented.num_edges());
            }
        }
        "train-det" => {
            let out = out_dir(&cfg)?;
            let (g, masks) = data(&cfg, &out)?;
            let mut graph = g.clone();
            if cfg.ablation != Ablation::NoGen {
                for r in 0..cfg.generated_relations {
                    let rel = load_relation(&out.join(format!("edges_generated_ppr{}.tsv", suffix(r))), &g)?;
                    graph = graph.with_relation(format!("generated_{r}"), rel)?;
                }
            }
            let (model, trace) = train_detector(&graph, &masks, &effective_detector(&cfg), derive_seed(cfg.seed, "detector"))?;
            model.save(&out.join("detector.ckpt"))?;
            let scores = score_nodes(&graph, &model)?;
            save_scores(&out.join("scores.csv"), &g.node_ids, &scores)?;
            let best = trace.best_epoch.map(|e| trace.val_auc[e]);
            println!(
                "relations {:?}, omega {:?}, best validation AUC {}",
                graph.relation_names,
                model.omega,
                best.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
            );
        }
        "eval" => {
            let out = out_dir(&cfg)?;
            let (g, masks) = data(&cfg, &out)?;
            let path = m.get_one::<String>("scores").map_or_else(|| out.join("scores.csv"), PathBuf::from);
            let scores = load_scores(&path, &g)?;
            let (auc, ap) = evaluate(&g, &masks, &scores)?;
            let fraud = masks.test.iter().filter(|&&i| g.labels[i] == Some(FRAUD)).count();
            let summary = json!({ "test_auc": auc, "test_ap": ap, "test_nodes": masks.test.len(), "test_fraud": fraud });
            write_file(&out.join("eval.json"), &to_json(&summary)?)?;
            println!("test AUC {auc:.4} AP {ap:.4}");
        }
        "pipeline" => {
            let report = run_pipeline(&cfg)?;
            println!("ablation {} seed {}", report.ablation, report.seed);
            println!("test AUC {:.4} AP {:.4}", report.test_auc, report.test_ap);
            println!("original homophily: {}", homophily_line(&report.homophily_original));
            if report.ablation != Ablation::NoGen {
                println!(
                    "generated homophily: {} ({} edges, {} after PPR)",
                    homophily_line(&report.homophily_generated),
                    report.generated_edges,
                    report.augmented_edges
                );
            }
            if cfg.output_dir.is_none() {
                println!("{}", report.to_json()?);
            }
        }
        "ablate" => {
            let seeds: Vec<u64> = m
                .get_one::<String>("seeds")
                .expect("has default")
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| GradError::Config(format!("bad seed {s:?} in --seeds")))
                })
                .collect::<Result<_>>()?;
            let table = compare_ablations(&cfg, &seeds)?;
            print!("{}", table.to_csv());
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn exit_code(e: &GradError) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
