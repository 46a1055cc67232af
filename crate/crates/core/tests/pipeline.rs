//! End-to-end checks across module boundaries on a small nav instance.

use modeground::demos::demo_batch;
use modeground::envs::{chain_adjacency, generate_polygon_chain, EnvSpec};
use modeground::grounding::{build_feasibility, train, GroundingModel, TrainConfig};
use modeground::llmclient::features::{FeatureRegistry, FeatureSpec};
use modeground::perturb::{build_dataset, label_success, PerturbConfig};
use modeground::trajectory::{read_jsonl, write_jsonl};

fn small_dataset(seed: u64) -> (EnvSpec, modeground::grounding::FeasibilityMatrix, Vec<modeground::trajectory::Trajectory>) {
    let env = EnvSpec::Nav(generate_polygon_chain(seed, 3, 200).unwrap());
    let f = build_feasibility(&chain_adjacency(3), 3).unwrap();
    let demos = demo_batch(&env, 4, seed).unwrap();
    let cfg = PerturbConfig { total_replays: 60, seed, ..Default::default() };
    let data = build_dataset(&env, &f, &demos, &cfg).unwrap();
    (env, f, data)
}

#[test]
fn dataset_labels_survive_a_jsonl_round_trip() {
    let (env, f, data) = small_dataset(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.jsonl");
    write_jsonl(&path, &data).unwrap();
    let back = read_jsonl(&path).unwrap();
    assert_eq!(back, data);
    for t in &back {
        assert_eq!(label_success(&env, &f, t).unwrap(), t.success);
    }
    assert!(back.iter().any(|t| t.success) && back.iter().any(|t| !t.success));
}

#[test]
fn training_is_seeded_and_the_saved_model_classifies_identically() {
    let (_, f, data) = small_dataset(5);
    let spec = FeatureSpec::new(&FeatureRegistry::nav(), vec!["x".into(), "y".into()]).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 9, ..Default::default() };
    let (a, log_a) = train(&data, &f, &spec, &cfg).unwrap();
    let (b, log_b) = train(&data, &f, &spec, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    a.save(&path).unwrap();
    let loaded = GroundingModel::load(&path).unwrap();
    let states: Vec<Vec<f64>> = data.iter().flat_map(|t| t.states.iter().cloned()).collect();
    assert_eq!(loaded.classify_batch(&states).unwrap(), a.classify_batch(&states).unwrap());
}
