use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tonalsig::pipeline::{PipelineConfig, RunLedger, Stage};

fn tonalsig(args: &[&str], config: &Path, stage_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tonalsig"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--stage-dir")
        .arg(stage_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, config: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    config.save(&path).unwrap();
    path
}

fn artifact_hashes(stage_dir: &Path) -> Vec<(Stage, String, Vec<(String, String)>)> {
    RunLedger::load(stage_dir)
        .unwrap()
        .entries
        .into_iter()
        .map(|e| {
            let files = e.artifacts.into_iter().map(|a| (a.path, a.sha256)).collect();
            (e.stage, e.config_hash, files)
        })
        .collect()
}

#[test]
fn init_config_emits_loadable_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = Command::new(env!("CARGO_BIN_EXE_tonalsig"))
        .args(["init-config", "--seed", "99", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = PipelineConfig::load(&out).unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.corpus.per_class, 50);
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &PipelineConfig::quick());
    let o = tonalsig(&["cluster"], &config, &dir.path().join("runs"));
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("cluster") && msg.contains("synth"), "{msg}");
}

#[test]
fn bad_threshold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &PipelineConfig::quick());
    let o = tonalsig(&["sweep", "--threshold", "1.5"], &config, &dir.path().join("runs"));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("threshold"));
}

#[test]
fn full_run_is_reproducible_and_guards_stale_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &PipelineConfig::quick());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for runs in [&a, &b] {
        let o = tonalsig(&["run"], &config, runs);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(a.join("sweep/sweep.json").exists());
    assert!(a.join("report/report.md").exists());
    assert_eq!(artifact_hashes(&a), artifact_hashes(&b));

    // single-image extraction into a separate directory
    let manifest = tonalsig::sonogen::DatasetManifest::load(&a.join("synth/manifest.json")).unwrap();
    let test = manifest
        .entries
        .iter()
        .find(|e| e.split == tonalsig::sonogen::Split::Test)
        .unwrap();
    let out = dir.path().join("single");
    let input = a.join("synth").join(&test.spectrogram);
    let o = tonalsig(
        &["extract", "--input", input.to_str().unwrap(), "--output", out.to_str().unwrap()],
        &config,
        &a,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("predicted_class"));
    assert!(out.join(format!("{}.png", test.id)).exists());

    // a tampered upstream file blocks downstream stages
    let model = a.join("cluster/class_0/model.json");
    let mut text = fs::read_to_string(&model).unwrap();
    text.push(' ');
    fs::write(&model, text).unwrap();
    let o = tonalsig(&["sweep"], &config, &a);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("cluster") && msg.contains("changed"), "{msg}");

    // a config edit invalidates everything that depends on it
    let mut edited = PipelineConfig::quick();
    edited.cluster.k_max = 3;
    let config = write_config(dir.path(), &edited);
    let o = tonalsig(&["sweep"], &config, &b);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("config changed") && msg.contains("cluster"), "{msg}");
    let o = tonalsig(&["cluster"], &config, &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tonalsig(&["sweep"], &config, &b);
    assert!(o.status.success(), "{}", stderr(&o));
}
