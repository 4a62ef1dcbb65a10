use std::path::Path;
use std::process::Command;

use metafap::checkpoint::Checkpoint;
use metafap::cli::{sha256_file, RunManifest, EXIT_USAGE, EXIT_VALIDATION, MANIFEST_FILE};

fn metafap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_metafap"))
        .args(args)
        .env("METAFAP_THREADS", "1")
        .output()
        .expect("spawn metafap")
}

fn manifest(dir: &Path) -> RunManifest {
    let files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("manifest"))
        .collect();
    assert_eq!(files, vec![MANIFEST_FILE.to_string()]);
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = metafap(&["generate", "--samples", "1000", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        sha256_file(&a.join("dataset.csv")).unwrap(),
        sha256_file(&b.join("dataset.csv")).unwrap()
    );
    let m = manifest(&a);
    assert_eq!(m.command, "generate");
    assert_eq!(m.seed, 7);
    assert_eq!(m.outputs, vec!["dataset.csv".to_string()]);
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(metafap(&["generate", "--samples", "10"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(metafap(&["generate", "--samples", "0", "--out", out]).status.code(), Some(EXIT_VALIDATION));
    let o = metafap(&["train", "--split", "medium", "--out", out]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("primary") && err.contains("easy") && err.contains("hard"), "{err}");
    assert_eq!(
        metafap(&["eval", "--checkpoint", "nope.json", "--n-support", "100", "--out", out]).status.code(),
        Some(EXIT_USAGE)
    );
}

#[test]
fn bad_csv_is_a_validation_error_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bad.csv");
    std::fs::write(&csv, "freq_ghz,theta_deg\n1,2\n").unwrap();
    let o = metafap(&["train", "--data", csv.to_str().unwrap(), "--out", tmp.path().join("t").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn train_eval_bench_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let cfg = p("cfg.toml");
    std::fs::write(
        &cfg,
        "[meta]\nepochs = 2\ntasks_per_epoch = 2\nn_support = 64\nn_query = 32\nval_tasks = 2\ntest_tasks = 2\n\n[baseline]\nepochs = 1\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let o = metafap(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok(&["generate", "--samples", "8000", "--seed", "3", "--out", &p("data")]);
    let data = p("data/dataset.csv");
    let before = sha256_file(Path::new(&data)).unwrap();

    ok(&["train", "--data", &data, "--config", &cfg, "--seed", "3", "--out", &p("train")]);
    let m = manifest(Path::new(&p("train")));
    assert_eq!(m.inputs.len(), 2);
    assert!(m.inputs.iter().any(|i| i.sha256 == before));
    let ck = Checkpoint::load(p("train/checkpoint.json")).unwrap();
    assert_eq!(ck.params.len(), 3871);
    let epochs = std::fs::read_to_string(p("train/epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,train_loss,val_mse,val_mae,val_cc,inner_lr,outer_lr\n"));
    assert_eq!(epochs.lines().count(), 3);

    let out = ok(&[
        "eval", "--data", &data, "--config", &cfg, "--checkpoint", &p("train/checkpoint.json"), "--n-support", "64",
        "--out", &p("eval"),
    ]);
    assert!(out.contains("mse"));
    let metrics = std::fs::read_to_string(p("eval/metrics.txt")).unwrap();
    assert!(metafap::objective::Metrics::from_kv_text(&metrics).is_ok());
    assert_eq!(Checkpoint::load(p("train/checkpoint.json")).unwrap(), ck);

    ok(&["baseline", "--data", &data, "--config", &cfg, "--kind", "all", "--out", &p("base")]);
    for f in ["plain_dnn_metrics.txt", "knn_metrics.txt", "plain_dnn_checkpoint.json"] {
        assert!(Path::new(&p("base")).join(f).exists(), "{f}");
    }
    manifest(Path::new(&p("base")));

    let bench = ok(&["bench", "--iterations", "200", "--out", &p("bench")]);
    assert!(bench.contains("parameters: 3871"), "{bench}");

    assert_eq!(sha256_file(Path::new(&data)).unwrap(), before);
}

#[test]
fn ablate_writes_three_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    std::fs::write(
        p("cfg.toml"),
        "[meta]\nepochs = 1\ntasks_per_epoch = 1\nn_support = 32\nn_query = 16\nval_tasks = 1\ntest_tasks = 1\n",
    )
    .unwrap();
    metafap(&["generate", "--samples", "6000", "--out", &p("data")]);
    let o = metafap(&["ablate", "--data", &p("data/dataset.csv"), "--config", &p("cfg.toml"), "--out", &p("ab")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(p("ab/summary.csv")).unwrap();
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["complete", "no_freq_branch", "no_other_branch"]);
    manifest(Path::new(&p("ab")));
}
