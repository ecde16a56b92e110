//! End-to-end tests of the `borealis` binary: exit codes, artifact
//! production, config handling, and byte-level reproducibility. Pipeline
//! runs use a deliberately tiny recipe so the whole file stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use borealis_core::data::read_cache;
use borealis_core::tensor::Tensor;
use borealis_core::train::embeddings::write_embeddings;
use borealis_core::train::EmbeddingSet;

fn borealis() -> Command {
    Command::new(env!("CARGO_BIN_EXE_borealis"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    borealis()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_code(output: &Output, expected: i32) {
    assert_eq!(
        output.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

/// A pipeline recipe small enough that training takes seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "run.seed = 11\n\
         data.synthetic_per_class = 4\n\
         data.synthetic_size = 16\n\
         augment.output_size = 16\n\
         encoder.stage_channels = 4,8\n\
         encoder.blocks_per_stage = 1,1\n\
         encoder.input_size = 16\n\
         encoder.head_hidden_dim = 8\n\
         encoder.head_projection_dim = 8\n\
         loss.temperature = 0.5\n\
         train.epochs = 2\n\
         train.batch_size = 4\n\
         probe.folds = 3\n\
         probe.max_iterations = 50\n\
         cluster.k_min = 2\n\
         cluster.k_max = 3\n\
         cluster.restarts = 2\n\
         cluster.max_iter = 30\n",
    )
    .unwrap();
    path
}

/// Runs every stage in `dir` with the tiny recipe, asserting success.
fn run_pipeline(dir: &Path) {
    tiny_config(dir);
    for stage in ["preprocess", "train", "embed", "probe", "cluster", "report"] {
        let output = run(&["--config", "run.conf", "--out-dir", "art", stage], dir);
        assert_code(&output, 0);
    }
}

#[test]
fn help_lists_every_stage_and_global_flag() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["--help"], dir.path());
    assert_code(&output, 0);
    let text = stdout(&output);
    for needle in [
        "preprocess", "train", "embed", "probe", "cluster", "report",
        "--config", "--seed", "--out-dir",
    ] {
        assert!(text.contains(needle), "help is missing `{needle}`:\n{text}");
    }
}

#[test]
fn preprocess_synthetic_writes_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(
        &["--out-dir", "art", "--seed", "7", "preprocess", "--synthetic", "10"],
        dir.path(),
    );
    assert_code(&output, 0);
    assert!(stdout(&output).contains("dataset: 60 records"), "{}", stdout(&output));
    let dataset = read_cache(&dir.path().join("art/dataset.crds")).unwrap();
    assert_eq!(dataset.len(), 60);
    assert_eq!(dataset.class_counts, [10; 6]);
}

#[test]
fn preprocess_with_missing_label_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("imgs")).unwrap();
    let output = run(
        &["preprocess", "--images", "imgs", "--labels", "absent.csv"],
        dir.path(),
    );
    assert_code(&output, 2);
    assert!(stderr(&output).contains("absent.csv"), "{}", stderr(&output));
}

#[test]
fn train_on_a_corrupt_cache_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.crds"), b"CRDSgarbage").unwrap();
    let output = run(&["train", "--data", "bad.crds"], dir.path());
    assert_code(&output, 2);
}

#[test]
fn probe_without_embeddings_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["--out-dir", "art", "probe"], dir.path());
    assert_code(&output, 2);
    let err = stderr(&output);
    assert!(err.contains("embeddings.crem"), "{err}");
    assert!(err.contains("borealis embed"), "{err}");
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let conf = &["--config", "run.conf", "--out-dir", "art"];

    let output = run(&[&conf[..], &["preprocess"]].concat(), dir.path());
    assert_code(&output, 0);
    assert!(stdout(&output).contains("dataset: 24 records"), "{}", stdout(&output));

    let output = run(&[&conf[..], &["train"]].concat(), dir.path());
    assert_code(&output, 0);
    let log = stdout(&output);
    assert!(log.contains("loss.temperature = 0.5"), "resolved config not echoed:\n{log}");
    assert!(log.contains("epoch 2/2"), "{log}");

    for stage in ["embed", "probe", "cluster", "report"] {
        let output = run(&[&conf[..], &[stage]].concat(), dir.path());
        assert_code(&output, 0);
    }

    let art = dir.path().join("art");
    for name in [
        "dataset.crds",
        "checkpoint.crck",
        "loss_history.csv",
        "embeddings.crem",
        "embeddings.csv",
        "probe_folds.csv",
        "probe_report.txt",
        "confusion_fold0.csv",
        "confusion_fold1.csv",
        "confusion_fold2.csv",
        "silhouette_sweep.csv",
        "assignments.csv",
        "crosstab.csv",
        "cluster_report.txt",
        "report.txt",
    ] {
        assert!(art.join(name).is_file(), "missing artifact {name}");
    }

    let history = std::fs::read_to_string(art.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    assert!(history.starts_with("epoch,mean_loss\n"), "{history}");

    let sweep = std::fs::read_to_string(art.join("silhouette_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");

    let assignments = std::fs::read_to_string(art.join("assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 25, "{assignments}");

    let report = std::fs::read_to_string(art.join("report.txt")).unwrap();
    assert!(report.contains("-- linear probe --"), "{report}");
    assert!(report.contains("-- cluster structure --"), "{report}");
    assert!(report.contains("best k:"), "{report}");
}

#[test]
fn rerunning_stages_overwrites_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let art = dir.path().join("art");
    let watched = [
        "dataset.crds",
        "checkpoint.crck",
        "loss_history.csv",
        "embeddings.crem",
        "embeddings.csv",
        "probe_folds.csv",
        "silhouette_sweep.csv",
        "assignments.csv",
        "report.txt",
    ];
    let before: Vec<Vec<u8>> = watched
        .iter()
        .map(|name| std::fs::read(art.join(name)).unwrap())
        .collect();
    run_pipeline(dir.path());
    for (name, old) in watched.iter().zip(&before) {
        let new = std::fs::read(art.join(name)).unwrap();
        assert_eq!(&new, old, "{name} changed across identical reruns");
    }
}

#[test]
fn cluster_k_range_flags_set_the_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    // Hand-built embeddings: 20 points in 3-d, labels cycling over three
    // classes — enough rows for k up to 15 without a training run.
    let n = 20;
    let values: Vec<f64> = (0..n * 3)
        .map(|i| (i as f64 * 0.613).sin() * 3.0 + (i % 7) as f64)
        .collect();
    let set = EmbeddingSet {
        embeddings: Tensor::new(vec![n, 3], values).unwrap(),
        labels: (0..n).map(|i| i % 3).collect(),
        source_ids: (0..n).map(|i| format!("p{i:02}")).collect(),
    };
    write_embeddings(&dir.path().join("e.crem"), &set).unwrap();

    let output = run(
        &[
            "--out-dir", "art", "cluster",
            "--embeddings", "e.crem",
            "--k-min", "3",
            "--k-max", "15",
        ],
        dir.path(),
    );
    assert_code(&output, 0);
    let sweep = std::fs::read_to_string(dir.path().join("art/silhouette_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 14, "header plus 13 rows:\n{sweep}");
    assert!(sweep.starts_with("k,mean_silhouette\n"), "{sweep}");
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "train.momentum = 0.9\n").unwrap();
    let output = run(
        &["--config", "bad.conf", "preprocess", "--synthetic", "2"],
        dir.path(),
    );
    assert_code(&output, 2);
    assert!(stderr(&output).contains("train.momentum"), "{}", stderr(&output));
}

#[test]
fn malformed_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "train.epochs = banana\n").unwrap();
    let output = run(
        &["--config", "bad.conf", "preprocess", "--synthetic", "2"],
        dir.path(),
    );
    assert_code(&output, 2);
    assert!(stderr(&output).contains("train.epochs"), "{}", stderr(&output));
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("seeded.conf"), "run.seed = 9\n").unwrap();

    // Flag beats file: the cache must match a run configured with the
    // flag's seed alone, and differ from the file's seed.
    let output = run(
        &[
            "--config", "seeded.conf", "--out-dir", "a",
            "preprocess", "--synthetic", "3",
        ],
        dir.path(),
    );
    assert_code(&output, 0);
    let output = run(
        &["--seed", "9", "--out-dir", "b", "preprocess", "--synthetic", "3"],
        dir.path(),
    );
    assert_code(&output, 0);
    let output = run(
        &[
            "--config", "seeded.conf", "--seed", "5", "--out-dir", "c",
            "preprocess", "--synthetic", "3",
        ],
        dir.path(),
    );
    assert_code(&output, 0);
    let output = run(
        &["--seed", "5", "--out-dir", "d", "preprocess", "--synthetic", "3"],
        dir.path(),
    );
    assert_code(&output, 0);

    let cache = |name: &str| std::fs::read(dir.path().join(name).join("dataset.crds")).unwrap();
    assert_eq!(cache("a"), cache("b"), "config seed alone should reproduce");
    assert_eq!(cache("c"), cache("d"), "flag seed should win over the file");
    assert_ne!(cache("a"), cache("c"), "different seeds should differ");
}
