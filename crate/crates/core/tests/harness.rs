mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use twinseg::harness::{
    emit_reports, global_checkpoint, plan, run_experiment, validate_paper_preset, ExperimentConfig,
    INCOMPLETE_MARKER, ROUND_LOG, SUMMARY,
};
use twinseg::model::ModelConfig;

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("ci").unwrap();
    c.model = ModelConfig::micro();
    c.cohort = common::tiny_spec(&[6, 5, 4]);
    c.rounds = 2;
    c.local_epochs = 1;
    c.roc_points = 11;
    c.output_dir = out.to_path_buf();
    c
}

/// Every file under `dir`, relative path to contents.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn text(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_writes_every_artefact_with_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let config = tiny_config(&dir);
    let outcome = run_experiment(&config).unwrap();
    let hash = config.hash();
    assert_eq!(outcome.config_hash, hash);
    assert!(!dir.join(INCOMPLETE_MARKER).exists());
    for r in 0..=2 {
        assert!(global_checkpoint(&dir, r).exists());
    }
    for k in 0..3 {
        assert!(dir.join(format!("checkpoints/dt_client_{k:02}.ckpt")).exists());
        for kind in ["global", "dt"] {
            let report = text(&dir, &format!("reports/{kind}_client_{k:02}.json"));
            assert!(report.contains(&hash));
        }
    }
    let header = format!("# config_hash: {hash}\n");
    for csv in ["comparison.csv", "per_class_dice.csv", "roc.csv", "sens_spec.csv", "subregions.csv", "learning_curve.csv"] {
        assert!(text(&dir, csv).starts_with(&header), "{csv}");
    }
    let per_class = text(&dir, "per_class_dice.csv");
    assert_eq!(per_class.lines().count(), 2 + 3 * 4);
    let comparison = text(&dir, "comparison.csv");
    assert_eq!(comparison.lines().count(), 2 + 3 + 1);
    let rounds: Vec<serde_json::Value> = text(&dir, ROUND_LOG)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rounds.len(), 2);
    for (i, r) in rounds.iter().enumerate() {
        assert_eq!(r["config_hash"], hash.as_str());
        assert_eq!(r["round"], i + 1);
        assert_eq!(r["participants"].as_array().unwrap().len(), 3);
    }
    let summary: serde_json::Value = serde_json::from_str(&text(&dir, SUMMARY)).unwrap();
    assert_eq!(summary["config_hash"], hash.as_str());
    assert_eq!(summary["seed"], config.seed);
    let manifest: serde_json::Value = serde_json::from_str(&text(&dir, "manifest.json")).unwrap();
    assert_eq!(manifest["config_hash"], hash.as_str());
    assert!(outcome.final_params.bit_eq(
        &twinseg::fed::checkpoint::load(&global_checkpoint(&dir, 2)).unwrap().store
    ));
}

#[test]
fn identical_configs_give_identical_artefacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&tiny_config(&a)).unwrap();
    run_experiment(&tiny_config(&b)).unwrap();
    let (mut sa, mut sb) = (snapshot(&a), snapshot(&b));
    // wall-clock times live only in the summary file
    sa.remove(Path::new(SUMMARY));
    sb.remove(Path::new(SUMMARY));
    for s in [&mut sa, &mut sb] {
        let resolved = s.get_mut(Path::new("config.resolved.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(resolved).unwrap();
        v["config"]["output_dir"] = serde_json::Value::Null;
        *resolved = serde_json::to_vec(&v).unwrap();
    }
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{} differs", name.display());
    }

    let reseeded = ExperimentConfig { seed: 8, ..tiny_config(&tmp.path().join("c")) };
    run_experiment(&reseeded).unwrap();
    assert_ne!(text(&a, "comparison.csv"), text(&tmp.path().join("c"), "comparison.csv"));
}

#[test]
fn emit_reports_reproduces_run_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_experiment(&tiny_config(&dir)).unwrap();
    let before = snapshot(&dir);
    for name in before.keys().filter(|n| n.extension().is_some_and(|e| e == "csv")).cloned().collect::<Vec<_>>() {
        std::fs::remove_file(dir.join(name)).unwrap();
    }
    std::fs::remove_dir_all(dir.join("reports")).unwrap();
    let summary = emit_reports(&dir).unwrap();
    assert_eq!(snapshot(&dir), before);
    assert_eq!(summary.per_round_mean_fg_dice.len(), 3);
    assert_eq!(summary.clients.len(), 3);
}

#[test]
fn emit_reports_rejects_incomplete_directories() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(emit_reports(tmp.path()).is_err());
    let dir = tmp.path().join("run");
    run_experiment(&tiny_config(&dir)).unwrap();
    std::fs::remove_file(global_checkpoint(&dir, 1)).unwrap();
    let err = emit_reports(&dir).unwrap_err().to_string();
    assert!(err.contains("[1]"), "{err}");
}

#[test]
fn mid_run_failure_leaves_the_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    // a directory where the round-1 checkpoint belongs makes the save fail
    std::fs::create_dir_all(global_checkpoint(&dir, 1)).unwrap();
    std::fs::write(global_checkpoint(&dir, 1).join("keep"), b"x").unwrap();
    assert!(run_experiment(&tiny_config(&dir)).is_err());
    assert!(dir.join(INCOMPLETE_MARKER).exists());
    assert!(global_checkpoint(&dir, 0).exists());
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let bad = ExperimentConfig { rounds: 0, ..tiny_config(&dir) };
    let err = run_experiment(&bad).unwrap_err().to_string();
    assert!(err.contains("`rounds`"), "{err}");
    assert!(!dir.exists());
}

#[test]
fn plan_counts_work_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("plan");
    let p = plan(&tiny_config(&dir)).unwrap();
    assert_eq!(p.rounds, 2);
    let subjects: Vec<usize> = p.clients.iter().map(|c| c.subjects).collect();
    assert_eq!(subjects, vec![6, 5, 4]);
    let train: usize = p.clients.iter().map(|c| c.train).sum();
    assert_eq!(p.sample_steps, 2 * train + train);
    assert!(!dir.exists());
}

#[test]
fn presets_have_the_documented_shape() {
    let desk = ExperimentConfig::preset("desk").unwrap();
    assert_eq!((desk.rounds, desk.local_epochs, desk.batch_size), (10, 5, 2));
    assert_eq!(desk.cohort.clients.len(), 9);
    let ci = ExperimentConfig::preset("ci").unwrap();
    assert_eq!((ci.rounds, ci.local_epochs), (10, 2));
    assert_eq!(plan(&ci).unwrap().clients.iter().map(|c| c.subjects).collect::<Vec<_>>(), vec![50, 40, 7, 4, 4, 50, 15, 10, 4]);
    let paper = ExperimentConfig::preset("paper").unwrap();
    assert_eq!(paper.model.input_extent, 128);
    assert_eq!(paper.learning_rate, 1e-4);
}

#[test]
fn paper_preset_report_without_forward_pass() {
    let r = validate_paper_preset(false);
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.output_shape, [1, 4, 128, 128, 128]);
    assert_eq!(r.trainable_parameters, r.closed_form_parameters);
    assert_eq!((r.bottleneck_extent, r.tokens), (8, 1));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_twinseg")).args(args).output().unwrap()
}

#[test]
fn cli_dry_run_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    let out = tmp.path().join("out");
    std::fs::write(&cfg, "preset = \"ci\"\nrounds = 3\n").unwrap();
    let o = cli(&["run", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["config"]["seed"], 99);
    assert_eq!(printed["config"]["rounds"], 3);
    assert_eq!(printed["plan"]["output_dir"], out.to_str().unwrap());
    assert!(!out.exists());

    let o = cli(&["run", "--preset", "desk", "--dry-run"]);
    assert!(o.status.success());
}

#[test]
fn cli_reports_bad_fields_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model.vit]\nheads = \"two\"\n").unwrap();
    let o = cli(&["validate", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.vit.heads"), "{err}");

    std::fs::write(&cfg, "local_epochs = 0\n").unwrap();
    let o = cli(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("local_epochs"));

    let o = cli(&["emit-reports", "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn resolved_config_round_trips_to_the_same_hash() {
    let mut c = tiny_config(Path::new("x"));
    c.learning_rate = 1.0 / 3.0;
    c.cohort.clients[0].radius = 11.200000000000001;
    c.cohort.clients[1].noise = 0.1 + 0.2;
    c.augment.max_rotation_deg = 1e-300 * 7.0;
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}
