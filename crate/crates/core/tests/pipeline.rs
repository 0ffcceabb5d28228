use std::path::PathBuf;
use std::time::Instant;

use sevex::harness::{evaluate_checkpoint, explain_records, run_training, Checkpoint, Partition, RunConfig};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn config(seed: u64) -> RunConfig {
    let (mut c, warnings) = RunConfig::load(&fixture("config.toml")).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    c.seed = Some(seed);
    c
}

#[test]
fn fixture_graph_keeps_the_symptom_entities() {
    let c = config(1);
    let emb = sevex::harness::embedders_for(&c).unwrap();
    let g = sevex::harness::resolve_graph(&c, &emb).unwrap();
    assert_eq!(g.node_count(), 12);
    assert_eq!(g.edge_count(), 16);
    assert!(g.nodes().iter().all(|n| n.entity != "coffee"));
}

#[test]
fn train_evaluate_explain_round_trip() {
    let t = Instant::now();
    let report = run_training(&config(5)).unwrap();
    eprintln!("train: {:?}", t.elapsed());
    assert_eq!(report.log.len(), 8);
    let bytes = report.checkpoint.to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let records = sevex::harness::dataset_records(&ck.config).unwrap();
    let a = evaluate_checkpoint(&report.checkpoint, &records, Partition::Test, 1).unwrap();
    let b = evaluate_checkpoint(&ck, &records, Partition::Test, 1).unwrap();
    assert_eq!(a, b);
    let t = Instant::now();
    let ex = explain_records(&ck, &records[..2], 4).unwrap();
    eprintln!("explain: {:?}", t.elapsed());
    assert_eq!(ex.len(), 2);
    assert_eq!(ex[0].subgraph.edges.len(), 4);
}
