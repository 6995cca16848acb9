mod common;

use std::fs;
use std::path::Path;

use blurspace::imaging::procedural_image;
use blurspace::kernel_space::{load_checkpoint, train_kernel_space_from};
use blurspace::{Error, KernelSpace, RunConfig, TrainState};
use common::{tiny_arch, tiny_dataset, tiny_run_config};

fn fresh_state(cfg: &RunConfig) -> TrainState {
    TrainState::new(cfg.arch, cfg.optimizer, cfg.seed, cfg.weights.eps_charbonnier).unwrap()
}

fn saved_model(dir: &Path) -> (KernelSpace, RunConfig) {
    let cfg = tiny_run_config(20);
    let data = tiny_dataset(2);
    let out = train_kernel_space_from(fresh_state(&cfg), &data, 5, |_, _| Ok(())).unwrap();
    out.state.model.save(&cfg, 5, dir).unwrap();
    (out.state.model, cfg)
}

fn checkpoint_err(dir: &Path) -> String {
    match KernelSpace::load(dir) {
        Err(e @ Error::Checkpoint(_)) => e.to_string(),
        Err(e) => panic!("expected a checkpoint error, got {e}"),
        Ok(_) => panic!("corrupt checkpoint loaded"),
    }
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn model_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, cfg) = saved_model(tmp.path());
    let (loaded, loaded_cfg) = KernelSpace::load(tmp.path()).unwrap();
    assert_eq!(loaded_cfg, cfg);
    for (a, b) in [
        (&model.operator_params, &loaded.operator_params),
        (&model.extractor_params, &loaded.extractor_params),
    ] {
        let names_a: Vec<_> = a.iter().map(|(n, _)| n.to_string()).collect();
        let names_b: Vec<_> = b.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names_a, names_b);
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta, tb);
        }
    }
    let x = procedural_image(3, 3, 16);
    let y = procedural_image(4, 3, 16);
    let k = model.extract_kernel(&x, &y).unwrap();
    assert_eq!(loaded.extract_kernel(&x, &y).unwrap(), k);
    assert_eq!(loaded.apply_blur(&x, &k).unwrap(), model.apply_blur(&x, &k).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(20);
    let data = tiny_dataset(3);
    let straight = train_kernel_space_from(fresh_state(&cfg), &data, 20, |_, _| Ok(())).unwrap();

    let first = train_kernel_space_from(fresh_state(&cfg), &data, 8, |_, _| Ok(())).unwrap();
    first.state.save(&cfg, tmp.path()).unwrap();
    let resumed = load_checkpoint(tmp.path()).unwrap().into_train_state().unwrap();
    assert_eq!(resumed.iteration, 8);
    let second = train_kernel_space_from(resumed, &data, 20, |_, _| Ok(())).unwrap();

    let losses: Vec<u64> = first
        .history
        .iter()
        .chain(&second.history)
        .map(|l| l.value.to_bits())
        .collect();
    let expected: Vec<u64> = straight.history.iter().map(|l| l.value.to_bits()).collect();
    assert_eq!(losses, expected);
    for ((_, a), (_, b)) in straight
        .state
        .model
        .operator_params
        .iter()
        .zip(second.state.model.operator_params.iter())
    {
        assert_eq!(a, b);
    }
}

#[test]
fn model_only_checkpoint_cannot_resume_training() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    let err = load_checkpoint(tmp.path()).unwrap().into_train_state().unwrap_err();
    assert!(err.to_string().contains("optimizer state"), "{err}");
}

#[test]
fn missing_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(checkpoint_err(tmp.path()).contains("no manifest"));
}

#[test]
fn truncated_blob_names_its_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    let manifest = load_checkpoint(tmp.path()).unwrap().manifest;
    let entry = &manifest.tensors[2];
    let blob = tmp.path().join(&entry.file);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let msg = checkpoint_err(tmp.path());
    assert!(msg.contains(&entry.name), "{msg}");
}

#[test]
fn missing_blob_names_its_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    let entry = load_checkpoint(tmp.path()).unwrap().manifest.tensors[0].clone();
    fs::remove_file(tmp.path().join(&entry.file)).unwrap();
    assert!(checkpoint_err(tmp.path()).contains(&entry.name));
}

#[test]
fn shape_disagreeing_with_the_architecture_names_its_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    // reshape a tensor consistently so only the architecture check can fail
    let mut name = String::new();
    edit_manifest(tmp.path(), |v| {
        let t = v["tensors"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .find(|t| t["shape"].as_array().unwrap().len() == 4)
            .unwrap();
        name = t["name"].as_str().unwrap().to_string();
        let n: u64 = t["shape"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| d.as_u64().unwrap())
            .product();
        t["shape"] = serde_json::json!([n]);
    });
    let msg = checkpoint_err(tmp.path());
    let short = name.split_once('/').unwrap().1;
    assert!(msg.contains(short), "{msg} should name {name}");
}

#[test]
fn unknown_format_and_garbage_manifests_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    edit_manifest(tmp.path(), |v| v["format_version"] = serde_json::json!(99));
    assert!(checkpoint_err(tmp.path()).contains("format_version"));

    edit_manifest(tmp.path(), |v| {
        v["format_version"] = serde_json::json!(blurspace::kernel_space::FORMAT_VERSION);
        v["surprise"] = serde_json::json!(1);
    });
    assert!(checkpoint_err(tmp.path()).contains("corrupt manifest"));

    fs::write(tmp.path().join("manifest.json"), "{not json").unwrap();
    assert!(checkpoint_err(tmp.path()).contains("corrupt manifest"));
}

#[test]
fn arch_id_must_agree_with_the_stored_config() {
    let tmp = tempfile::tempdir().unwrap();
    saved_model(tmp.path());
    let other = blurspace::ArchConfig {
        base_channels: 8,
        ..tiny_arch()
    };
    edit_manifest(tmp.path(), |v| v["arch_id"] = serde_json::json!(other.arch_id()));
    assert!(checkpoint_err(tmp.path()).contains("arch_id"));
}
