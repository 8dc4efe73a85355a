//! Black-box runs of the command-line binary: exit codes, output files and
//! checkpoint handling.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_esn-dagmm");

/// Small enough to train in well under a second.
const SMALL: &[&str] = &[
    "--data.source",
    "synth",
    "--synth.total_steps",
    "600",
    "--window.length",
    "8",
    "--split.train_fraction",
    "0.3",
    "--model.latent_dim",
    "3",
    "--reservoir.size",
    "16",
    "--train.epochs",
    "3",
    "--train.batch_size",
    "32",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ESN_DAGMM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--output.dir", out_dir]);
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let o = run(&["train", "--data.source", "synth", "--train.nonsense", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(&["train", "--data.source", "synth", "--train.epochs", "many"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(&["train"]);
    assert_eq!(o.status.code(), Some(1), "missing data.source: {}", stderr(&o));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[data]\nsource = \"csv\"\ncsv_path = \"/nonexistent/trace.csv\"\nfeature_columns = [\"a\"]\n",
    )
    .unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn failed_gradient_check_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--tolerance", "1e-30", "--output.dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(dir.path().join("gradcheck.json").exists());
    let o = run(&["gradcheck", "--output.dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn synth_output_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run_in(d.path(), "synth", &[]).status.success());
    }
    assert!(run_in(c.path(), "synth", &["--seeds.data", "8"]).status.success());
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in ["synth.csv", "synth_labels.txt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "synth.csv"), read(&c, "synth.csv"));
    let csv = String::from_utf8(read(&a, "synth.csv")).unwrap();
    assert!(csv.starts_with("timestamp_ms,kpi_00,"));
    assert_eq!(csv.lines().count(), 601);
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "train", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.txt", "train_report.csv", "metrics.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(dir.path().join("train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    let ckpt = dir.path().join("checkpoint.txt");
    let out = dir.path().join("eval.json");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(dir.path().join("metrics.json")).unwrap()
    );
}

#[test]
fn every_pipeline_trains_from_the_command_line() {
    for kind in ["esn_dagmm", "mlp_dagmm", "rnn_dagmm", "pca_gmm", "esn_ae_gmm"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run_in(dir.path(), "train", &["--model.kind", kind, "--model.rnn_hidden", "6"]);
        assert!(o.status.success(), "{kind}: {}", stderr(&o));
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["model"], kind);
        let ckpt = dir.path().join("checkpoint.txt");
        let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "train"]);
        assert!(o.status.success(), "{kind}: {}", stderr(&o));
    }
}

#[test]
fn corrupted_or_foreign_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), "train", &[]).status.success());
    let ckpt = dir.path().join("checkpoint.txt");
    let text = std::fs::read_to_string(&ckpt).unwrap();

    let bad = dir.path().join("bad.txt");
    let pos = text.rfind('1').expect("payload has digits");
    let mut tampered = text.clone();
    tampered.replace_range(pos..pos + 1, "2");
    std::fs::write(&bad, tampered).unwrap();
    let o = run(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    std::fs::write(&bad, text.replacen("version: 1", "version: 99", 1)).unwrap();
    let o = run(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));

    let o = run(&["eval", "--checkpoint", dir.path().join("absent.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_input_round_trip_and_column_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), "synth", &["--synth.n_features", "3", "--synth.shifted_features", "2"]).status.success());
    let csv = dir.path().join("synth.csv");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[data]\nsource = \"csv\"\ncsv_path = \"{}\"\nfeature_columns = [\"kpi_02\", \"kpi_00\"]\n",
            csv.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("csvrun");
    let mut args = vec!["--config", cfg.to_str().unwrap(), "train"];
    args.extend(SMALL.iter().skip(2));
    args.extend(["--output.dir", out.to_str().unwrap()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = std::fs::read_to_string(out.join("checkpoint.txt")).unwrap();
    assert!(ckpt.contains("[\"kpi_02\",\"kpi_00\"]"));

    // Same checkpoint against a file whose columns differ.
    let other = dir.path().join("other.csv");
    std::fs::write(&other, std::fs::read_to_string(&csv).unwrap().replacen("kpi_02", "kpi_xx", 1)).unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.txt").to_str().unwrap(),
        "--data.csv_path",
        other.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn output_dir_comes_from_the_environment_when_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth"];
    args.extend_from_slice(SMALL);
    let o = Command::new(BIN)
        .args(&args)
        .env("ESN_DAGMM_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("synth.csv").exists());
}

#[test]
fn sweep_writes_long_format_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        "sweep",
        &["--axis", "both", "--models", "pca_gmm,esn_dagmm", "--dims", "2,3", "--components", "2,3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,axis,axis_value,metric,value,status"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.starts_with("pca_gmm,latent_dim,3,reconstruction_mse,")));
    assert!(rows.iter().any(|r| r.starts_with("esn_dagmm,n_components,3,")));
}
