mod common;

use std::fs;
use std::path::Path;

use grad_core::datasets::{load_dataset, load_relation, load_scores, load_splits, make_split, save_dataset, save_splits};
use grad_core::detector::save_scores;
use grad_core::{GradError, Matrix, MultiRelationGraph};
use proptest::prelude::*;

fn write(dir: &Path, files: &[(&str, &str)]) {
    for (name, body) in files {
        fs::write(dir.join(name), body).unwrap();
    }
}

fn toy(dir: &Path) {
    write(
        dir,
        &[
            ("nodes.csv", "id,f0,f1\n10,0.5,1\n20,-1,2\n30,3,0.25\n"),
            ("labels.csv", "id,label\n10,0\n30,1\n"),
            ("edges_pay.tsv", "10\t20\n20\t30\n"),
        ],
    );
}

#[test]
fn three_node_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    toy(tmp.path());
    let (g, stats) = load_dataset(tmp.path()).unwrap();
    assert_eq!((g.n(), g.d()), (3, 2));
    assert_eq!(g.relation_names, ["pay"]);
    assert_eq!(g.node_ids, [10, 20, 30]);
    assert_eq!(g.labels, [Some(0), None, Some(1)]);
    assert_eq!(g.relations[0].edges(), &[(0, 1), (1, 2)]);
    assert_eq!(g.features.row(2), &[3.0, 0.25]);
    assert_eq!((stats.self_loops_dropped, stats.duplicate_edges), (0, 0));
}

#[test]
fn self_loop_is_dropped_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    toy(tmp.path());
    write(tmp.path(), &[("edges_pay.tsv", "10\t20\n30\t30\n")]);
    let (g, stats) = load_dataset(tmp.path()).unwrap();
    assert_eq!(stats.self_loops_dropped, 1);
    assert_eq!(g.relations[0].num_edges(), 1);
}

#[test]
fn reverse_duplicates_collapse() {
    let tmp = tempfile::tempdir().unwrap();
    toy(tmp.path());
    write(tmp.path(), &[("edges_pay.tsv", "20\t30\n30\t20\n20\t30\n10\t30\n")]);
    let (g, stats) = load_dataset(tmp.path()).unwrap();
    // Set-union oracle over unordered pairs.
    let mut expected: Vec<(usize, usize)> = [(1, 2), (2, 1), (1, 2), (0, 2)]
        .iter()
        .map(|&(a, b): &(usize, usize)| (a.min(b), a.max(b)))
        .collect();
    expected.sort();
    expected.dedup();
    assert_eq!(g.relations[0].edges(), expected.as_slice());
    assert_eq!(stats.duplicate_edges, 2);
}

fn parse_line(err: GradError) -> (String, u64) {
    match err {
        GradError::Parse { path, line, .. } => (path.file_name().unwrap().to_string_lossy().into_owned(), line),
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn descriptive_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    assert!(matches!(load_dataset(dir).unwrap_err(), GradError::Io { .. }));

    toy(dir);
    write(dir, &[("nodes.csv", "id,f0,f1\n10,0.5,1\n20,-1\n30,3,0.25\n")]);
    assert_eq!(parse_line(load_dataset(dir).unwrap_err()), ("nodes.csv".into(), 3));

    toy(dir);
    write(dir, &[("labels.csv", "id,label\n10,0\n30,2\n")]);
    let err = load_dataset(dir).unwrap_err();
    assert!(err.to_string().contains("outside"), "{err}");
    assert_eq!(parse_line(err), ("labels.csv".into(), 3));

    toy(dir);
    write(dir, &[("edges_pay.tsv", "10\t20\n\n20\t99\n")]);
    let err = load_dataset(dir).unwrap_err();
    assert!(err.to_string().contains("99"), "{err}");
    assert_eq!(parse_line(err), ("edges_pay.tsv".into(), 3));

    toy(dir);
    fs::remove_file(dir.join("edges_pay.tsv")).unwrap();
    assert!(matches!(load_dataset(dir).unwrap_err(), GradError::Data(_)));
}

fn graph(n: usize, d: usize, p: f64, seed: u64) -> MultiRelationGraph {
    let features = Matrix::from_fn(n, d, |i, j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 / 4.0 - 1.0);
    MultiRelationGraph {
        features,
        labels: (0..n).map(|i| if i % 5 == 4 { None } else { Some((i % 3 == 0) as u8) }).collect(),
        relations: vec![common::random_relation(n, p, seed), common::random_relation(n, p / 2.0, seed + 1)],
        relation_names: vec!["a".into(), "b".into()],
        node_ids: (0..n as i64).map(|i| 100 + 3 * i).collect(),
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn canonical_files_roundtrip_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let (first, second) = (tmp.path().join("a"), tmp.path().join("b"));
    save_dataset(&graph(30, 3, 0.2, 5), &first).unwrap();
    let (g, _) = load_dataset(&first).unwrap();
    save_dataset(&g, &second).unwrap();
    assert_eq!(read_all(&first), read_all(&second));
}

#[test]
fn splits_and_scores_roundtrip_through_external_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let g = graph(40, 2, 0.1, 9);
    let masks = make_split(&g.labels, [0.4, 0.3, 0.3], 4).unwrap();
    let path = tmp.path().join("splits.json");
    save_splits(&masks, &g.node_ids, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["train"][0].as_i64().unwrap(), g.node_ids[masks.train[0]]);
    assert_eq!(load_splits(&path, &g).unwrap(), masks);

    let scores: Vec<f64> = (0..g.n()).map(|i| (i as f64 * 0.37).sin()).collect();
    let path = tmp.path().join("scores.csv");
    save_scores(&path, &g.node_ids, &scores).unwrap();
    assert_eq!(load_scores(&path, &g).unwrap(), scores);
}

#[test]
fn relation_file_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let g = graph(25, 2, 0.3, 2);
    save_dataset(&g, tmp.path()).unwrap();
    assert_eq!(load_relation(&tmp.path().join("edges_b.tsv"), &g).unwrap(), g.relations[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_graphs_roundtrip(n in 2usize..30, d in 1usize..4, p in 0.0f64..0.5, seed in 0u64..1000) {
        let tmp = tempfile::tempdir().unwrap();
        let g = graph(n, d, p, seed);
        save_dataset(&g, tmp.path()).unwrap();
        let (back, stats) = load_dataset(tmp.path()).unwrap();
        prop_assert_eq!(back, g);
        prop_assert_eq!(stats.duplicate_edges + stats.self_loops_dropped, 0);
    }
}
