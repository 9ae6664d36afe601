//! The `essential` binary: exit codes, manifests and output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::{Array2, Array4};
use ndarray_npy::NpzWriter;
use sha2::{Digest, Sha256};

const FAST: &[&str] = &["--set", "epochs_base=2", "--set", "epochs_incremental=2"];

fn essential(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_essential"));
    cmd.args(args).env_remove("ESSENTIAL_DATA_DIR");
    if let Some(d) = data_dir {
        cmd.env("ESSENTIAL_DATA_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("synthetic.cfg");
    fs::write(&path, "dataset = synthetic\nschedule.num_sessions = 3\nseed = 1\n").unwrap();
    path.to_string_lossy().into_owned()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&essential(&[], None)), 1);
    assert_eq!(code(&essential(&["frobnicate"], None)), 1);
    assert_eq!(code(&essential(&["run"], None)), 1);
    assert_eq!(code(&essential(&["--help"], None)), 0);
    let missing = essential(&["run", "--config", "/nonexistent/x.cfg"], None);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("does not exist"));
    assert_eq!(code(&essential(&["report"], None)), 1);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = essential(&["run", "--config", &cfg, "--set", "tau=0"], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
    let o = essential(&["run", "--config", &cfg, "--set", "selector=greedy"], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("greedy"));
    let o = essential(&["run", "--config", &cfg, "--set", "no_such_key=1"], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_data_exits_two_and_marks_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("path.cfg");
    fs::write(&cfg, "dataset = pathmnist\n").unwrap();
    let out = dir.path().join("run");
    let empty = tempfile::tempdir().unwrap();
    let o = essential(
        &["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        Some(empty.path()),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("Failed"));
    assert!(manifest.contains("Pending"));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = essential(
        &["run", "--config", &cfg, "--set", "lr_base=1e12", "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn run_writes_manifest_summary_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let args = with(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], FAST);
    let o = essential(&refs(&args), None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("d_final"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let text = manifest["config"].as_str().unwrap();
    let digest: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_hash"].as_str().unwrap(), digest);
    assert!(text.contains("epochs_base = 2"));
    let sessions = manifest["sessions"].as_array().unwrap();
    assert_eq!(sessions.len(), 3);
    assert!(sessions.iter().all(|s| s.get("Done").is_some()));

    for f in ["summary.tsv", "summary.txt", "accuracy.svg", "uncertainty.svg", "confusion_final.svg", "config.cfg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for t in 0..3 {
        for f in ["report.json", "bank.tsv", "trajectories.tsv", "entropy_audit.tsv"] {
            assert!(out.join(format!("session_{t}")).join(f).exists(), "session {t} {f}");
        }
    }

    let r = essential(&["report", "--run", out.to_str().unwrap()], None);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(stdout(&r).contains("average"));
}

#[test]
fn ablate_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("grid");
    let bad = essential(&["ablate", "--config", &cfg, "--axes", "learning_rate"], None);
    assert_eq!(code(&bad), 1);
    let args = with(&["ablate", "--config", &cfg, "--axes", "similarity", "--out", out.to_str().unwrap()], FAST);
    let o = essential(&refs(&args), None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    for cell in ["cos", "dot", "euc", "mah"] {
        assert!(out.join(cell).join("manifest.json").exists());
    }
    let r = essential(&["report", "--run", out.to_str().unwrap()], None);
    assert_eq!(code(&r), 0);
    assert!(out.join("report.tsv").exists());
}

#[test]
fn memory_sweep_dedupes_and_rejects_nonpositive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("mem");
    assert_eq!(code(&essential(&["sweep-memory", "--config", &cfg, "--sizes", "10,0"], None)), 1);
    assert_eq!(code(&essential(&["sweep-memory", "--config", &cfg, "--sizes=-3"], None)), 1);
    let args = with(&["sweep-memory", "--config", &cfg, "--sizes", "12,6,12", "--out", out.to_str().unwrap()], FAST);
    let o = essential(&refs(&args), None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("memory_sweep.tsv")).unwrap();
    let sizes: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(sizes, ["6", "12"]);
    assert!(out.join("memory_sweep.svg").exists());
}

#[test]
fn expansion_sweep_runs_chosen_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("exp");
    let args = with(
        &["sweep-expansion", "--config", &cfg, "--variants", "rotation,none", "--out", out.to_str().unwrap()],
        FAST,
    );
    let o = essential(&refs(&args), None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("expansion_sweep.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    let bad = essential(&["sweep-expansion", "--config", &cfg, "--variants", "mirror"], None);
    assert_eq!(code(&bad), 1);
}

#[test]
fn published_report_prints_reference_tables() {
    let o = essential(&["report", "--published"], None);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("FACT"));
    assert!(text.contains("Long-tailed"));
}

fn write_fake_pathmnist(dir: &Path) {
    let (classes, train_per, test_per) = (9usize, 12usize, 4usize);
    let images = |n: usize, offset: usize| {
        Array4::from_shape_fn((n * classes, 28, 28, 3), |(i, y, x, c)| {
            let class = i / n;
            ((class * 23 + y * 3 + x * (c + 1) + offset) % 256) as u8
        })
    };
    let labels = |n: usize| Array2::from_shape_fn((n * classes, 1), |(i, _)| (i / n) as u8);
    let file = fs::File::create(dir.join("pathmnist.npz")).unwrap();
    let mut npz = NpzWriter::new(file);
    npz.add_array("train_images", &images(train_per, 0)).unwrap();
    npz.add_array("train_labels", &labels(train_per)).unwrap();
    npz.add_array("test_images", &images(test_per, 7)).unwrap();
    npz.add_array("test_labels", &labels(test_per)).unwrap();
    npz.finish().unwrap();
}

#[test]
fn medmnist_archive_is_read_from_env_dir() {
    let data = tempfile::tempdir().unwrap();
    write_fake_pathmnist(data.path());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("path.cfg");
    fs::write(
        &cfg,
        "dataset = pathmnist\nschedule.num_sessions = 3\nschedule.samples_per_base_class = 10\n\
         schedule.samples_per_increment_class = 5\nschedule.memory_size = 12\nbackbone = mlp\n\
         hidden_dims = 16\nepochs_base = 2\nepochs_incremental = 2\nbatch_size = 16\n\
         queue_length = 64\nprojection_dim = 8\nreduce_dim = 8\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = essential(
        &["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        Some(data.path()),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("session_2").join("report.json").exists());
}
