//! End-to-end runs of the experiment harness on small scene sets.

use std::collections::BTreeMap;
use std::path::Path;

use steerlens::decoding::DecodeConfig;
use steerlens::harness::{
    ablation_cell, ablation_grid, execute, experiment_latency, run_experiment, write_ablation, Axis,
    ExperimentConfig, SweepGrid, Variant, MANIFEST_FILE,
};
use steerlens::model::Model;
use steerlens::sla::SlaConfig;
use steerlens::synthetic::{generate_scenes, EOS};
use steerlens::Error;

fn small(dir: &Path, scenes: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scenes.count = scenes;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn vanilla() -> DecodeConfig {
    DecodeConfig::greedy(64).with_stop(vec![EOS])
}

fn deterministic_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["deterministic"].as_bool().unwrap())
        .map(|f| {
            let p = f["path"].as_str().unwrap().to_string();
            let bytes = std::fs::read(dir.join(&p)).unwrap();
            (p, bytes)
        })
        .collect()
}

#[test]
fn smoke_run_writes_a_verifiable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("run"), 10);
    let exp = run_experiment(&cfg).unwrap();
    let m = &exp.manifest;
    assert_eq!(m.config_hash, cfg.hash().unwrap());
    for name in ["vanilla", "vista"] {
        let v = m.variant(name).unwrap();
        assert!(v.chair.is_some() && v.stages.is_some());
        assert!(v.timing.tokens_timed > 0);
        assert_eq!(v.scenes_ok, 10);
        println!("{name}: {:?} {:.3} ms/token", v.chair.as_ref().unwrap(), v.timing.mean_ms);
    }
    m.verify(&cfg.output_dir).unwrap();
    for required in ["vanilla/chair.csv", "vista/stages.json", "vista/layers.csv", "vista/timing.json"] {
        assert!(m.files.iter().any(|f| f.path == required), "{required} missing");
    }
    let rows = experiment_latency(&exp).unwrap();
    assert_eq!(rows.iter().find(|r| r.variant == "vanilla").unwrap().factor, 1.0);
}

#[test]
fn rerun_is_bit_identical_and_thread_count_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&tmp.path().join("a"), 12);
    cfg.threads = 1;
    run_experiment(&cfg).unwrap();
    let first = deterministic_files(&cfg.output_dir);
    run_experiment(&cfg).unwrap();
    assert_eq!(deterministic_files(&cfg.output_dir), first);

    let mut wide = cfg.clone();
    wide.threads = 4;
    wide.output_dir = tmp.path().join("b");
    run_experiment(&wide).unwrap();
    let second = deterministic_files(&wide.output_dir);
    // config.json records the thread count; every report must match.
    for (path, bytes) in &first {
        if path != "config.json" {
            assert_eq!(&second[path], bytes, "{path}");
        }
    }
}

#[test]
fn changed_config_in_existing_directory_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("run"), 3);
    run_experiment(&cfg).unwrap();
    let mut other = cfg.clone();
    other.scenes.seed += 1;
    let err = run_experiment(&other).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }));
    assert!(err.is_config_error());
}

#[test]
fn identical_and_identity_variants_report_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path(), 15);
    cfg.variants = vec![
        Variant { name: "vanilla".into(), decode: vanilla() },
        Variant { name: "twin".into(), decode: vanilla() },
        Variant { name: "identity".into(), decode: vanilla().with_steering(0.0).with_sla(0.0, 5) },
    ];
    let exp = execute(&cfg).unwrap();
    let chair = |n: &str| exp.manifest.variant(n).unwrap().chair.clone().unwrap();
    assert_eq!(chair("twin"), chair("vanilla"));
    assert_eq!(chair("identity"), chair("vanilla"));
    let stages = |n: &str| exp.manifest.variant(n).unwrap().stages.clone().unwrap();
    assert_eq!(stages("twin"), stages("vanilla"));
    for (a, b) in exp.run("identity").unwrap().records.iter().zip(&exp.run("vanilla").unwrap().records) {
        assert_eq!(a.tokens, b.tokens);
    }
}

#[test]
fn failing_scene_is_isolated_and_failing_variant_does_not_stop_others() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small(&tmp.path().join("run"), 5);
    let model: Model = base.model.load().unwrap();
    let mut scenes = generate_scenes(3, 5, 3, base.model.vocab(), &model.token_embedding).unwrap();
    scenes[2].visual_embeddings[1].pop();
    let file = tmp.path().join("scenes.json");
    std::fs::write(&file, serde_json::to_vec(&scenes).unwrap()).unwrap();

    let mut cfg = base.clone();
    cfg.scenes.file = Some(file);
    let mut broken = vanilla();
    broken.sla = Some(SlaConfig { gamma: 0.3, window: 99 });
    cfg.variants.push(Variant { name: "broken".into(), decode: broken });
    let exp = run_experiment(&cfg).unwrap();
    for name in ["vanilla", "vista"] {
        let v = exp.manifest.variant(name).unwrap();
        assert_eq!(v.failed_scenes, vec![2]);
        assert_eq!(v.scenes_ok, 4);
        assert_eq!(v.chair.as_ref().unwrap().captions, 4);
    }
    let b = exp.manifest.variant("broken").unwrap();
    assert!(b.error.is_some() && b.chair.is_none());
    let failures: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.output_dir.join("vanilla/failures.json")).unwrap()).unwrap();
    assert_eq!(failures[0]["scene_id"], 2);
}

#[test]
fn ablation_cells_match_single_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path(), 20);
    cfg.sweep = SweepGrid {
        lambda: vec![0.0, 0.1, 0.17],
        gamma: vec![0.0, 0.2, 0.3],
        ..Default::default()
    };
    let report = ablation_grid(&cfg).unwrap();
    assert_eq!((report.row_axis, report.col_axis), (Some(Axis::Lambda), Axis::Gamma));
    assert_eq!(report.cells.len(), 3);
    assert!(report.cells.iter().all(|r| r.len() == 3 && r.iter().all(Option::is_some)));
    // (λ = 0, γ = 0) is the vanilla cell.
    assert_eq!(report.cells[0][0], report.vanilla[0]);
    // Each cell is reproducible on its own.
    for (r, &l) in report.row_values.iter().enumerate() {
        for (c, &g) in report.col_values.iter().enumerate() {
            let cell = ablation_cell(&cfg, &[(Axis::Lambda, l), (Axis::Gamma, g)]).unwrap();
            assert_eq!(Some(cell), report.cells[r][c], "cell ({l}, {g})");
        }
    }
    // A 1x1 grid equals the matching run_experiment variant.
    let mut one = small(tmp.path(), 20);
    one.sweep = SweepGrid { lambda: vec![0.17], gamma: vec![0.3], ..Default::default() };
    let grid = ablation_grid(&one).unwrap();
    let exp = execute(&one).unwrap();
    assert_eq!(grid.cells[0][0], exp.manifest.variant("vista").unwrap().chair);

    let files = write_ablation(&report, &tmp.path().join("abl"), true).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("abl/ablation_f1.csv")).unwrap();
    assert!(csv.starts_with("lambda\\gamma,0,0.2,0.3,vanilla\n"), "{csv}");
    assert_eq!(files.len(), 7);
}

#[test]
fn empty_sweep_is_a_config_error() {
    let cfg = small(Path::new("/nonexistent"), 2);
    assert!(ablation_grid(&cfg).unwrap_err().is_config_error());
}
