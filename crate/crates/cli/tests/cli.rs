use std::path::PathBuf;
use std::process::Command as Process;

use clap::Parser;
use maneuver_core::metrics::TRANSFER_CLASSES;
use maneuver_core::{Behavior, Checkpoint, MetricsReport, Model, ModelConfig, RunSpec, Variant};
use maneuver_graph::{parse_classes, read_run_log, run_with, Cli, CliError, Context, Output, CHECKPOINT_FILE};

fn dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn try_cli(ctx: &Context, args: &[&str]) -> Result<Output, CliError> {
    let parsed = Cli::try_parse_from(std::iter::once("maneuver-graph").chain(args.iter().copied())).unwrap();
    run_with(ctx, &parsed)
}

fn cli(ctx: &Context, args: &[&str]) -> Output {
    try_cli(ctx, args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn small_dataset(name: &str) -> String {
    let d = dir(name).display().to_string();
    cli(&Context::default(), &["generate", "--out", &d, "--n", "60", "--seed", "4"]);
    d
}

#[test]
fn class_subsets() {
    assert_eq!(parse_classes("all").unwrap(), Behavior::ALL.to_vec());
    assert_eq!(parse_classes("transfer").unwrap(), TRANSFER_CLASSES.to_vec());
    assert_eq!(parse_classes("PRK, mva").unwrap(), vec![Behavior::Parked, Behavior::MovingAway]);
    assert!(matches!(parse_classes("XYZ"), Err(CliError::Usage(_))));
    assert!(matches!(parse_classes(","), Err(CliError::Usage(_))));
}

#[test]
fn generate_is_reproducible_and_creates_dirs() {
    let a = dir("gen-a").join("nested");
    let b = dir("gen-b");
    let ctx = Context::default();
    let run = |p: &PathBuf| cli(&ctx, &["generate", "--out", &p.display().to_string(), "--n", "30", "--seed", "2"]);
    let (ra, rb) = (run(&a), run(&b));
    assert_eq!(ra.json["sequences_sha256"], rb.json["sequences_sha256"]);
    assert_eq!(ra.json["split"]["train"], 18);
    let log = read_run_log(&a).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].command, "generate");
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let data = small_dataset("zero-epoch-data");
    let out = dir("zero-epoch");
    let ctx = Context::default();
    cli(&ctx, &["train", "--dataset", &data, "--epochs", "0", "--seed", "8", "--out", &out.display().to_string()]);
    let ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    let trained = Model::from_checkpoint(&ckpt).unwrap();
    let spec = RunSpec::new(Variant::GraphLstmMultiHead, 8, 0);
    let fresh = Model::new(spec.model).unwrap();
    assert_eq!(trained.params, fresh.params);
}

#[test]
fn train_then_eval() {
    let data = small_dataset("train-eval-data");
    let out = dir("train-eval");
    let out_s = out.display().to_string();
    let ctx = Context::default();
    let trained = cli(&ctx, &["train", "--dataset", &data, "--epochs", "2", "--variant", "G+L", "--out", &out_s]);
    let test: MetricsReport = serde_json::from_value(trained.json["test"].clone()).unwrap();
    assert_eq!(test.loss_curve.len(), 3);
    assert!(test.loss_curve[1] < test.loss_curve[0], "{:?}", test.loss_curve);

    let ckpt = out.join(CHECKPOINT_FILE).display().to_string();
    let all = cli(&ctx, &["eval", "--dataset", &data, "--checkpoint", &ckpt]);
    let six = cli(&ctx, &["eval", "--dataset", &data, "--checkpoint", &ckpt, "--classes", "MVA,MTU,PRK,LCL,LCR,OVT"]);
    assert_eq!(all.json, six.json);
    let report: MetricsReport = serde_json::from_value(all.json).unwrap();
    for (i, row) in report.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), report.row_totals[i]);
    }

    let three = cli(&ctx, &["eval", "--dataset", &data, "--checkpoint", &ckpt, "--classes", "transfer", "--split", "all"]);
    let report: MetricsReport = serde_json::from_value(three.json).unwrap();
    assert_eq!(report.classes, TRANSFER_CLASSES.to_vec());
    let outside: usize = [3, 4, 5].iter().map(|&c| report.row_totals[c]).sum();
    assert_eq!(outside, 0);
    for row in &report.confusion {
        assert_eq!(row[3] + row[4] + row[5], 0);
    }

    // One manifest per run, appended.
    let log = read_run_log(&out).unwrap();
    let commands: Vec<&str> = log.iter().map(|m| m.command.as_str()).collect();
    assert_eq!(commands, ["train", "eval", "eval", "eval"]);
    assert!(log[0].checkpoint_path.is_some());
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let data = small_dataset("bad-ckpt-data");
    let path = dir("bad-ckpt").join("ckpt.json");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut ckpt = Model::new(ModelConfig::for_variant(Variant::GraphLstm)).unwrap().to_checkpoint();
    ckpt.params.remove("head.W_l");
    ckpt.save(&path).unwrap();
    let err = try_cli(&Context::default(), &["eval", "--dataset", &data, "--checkpoint", &path.display().to_string()])
        .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn ablation_and_transfer_tables_have_requested_shape() {
    let data = small_dataset("tables-data");
    let ctx = Context::default();
    let lm = cli(&ctx, &["ablate-landmarks", "--dataset", &data, "--epochs", "1", "--variant", "G+L"]);
    assert_eq!(lm.json["columns"].as_array().unwrap().len(), 3);
    assert_eq!(lm.text.lines().filter(|l| Behavior::ALL.iter().any(|b| l.starts_with(b.abbrev()))).count(), 6);
    assert!(lm.text.contains("ours (50%)") && lm.text.contains("ours (full)"));

    // The full-landmark column reuses the same run as plain training.
    let out = dir("tables-train").display().to_string();
    let plain = cli(&ctx, &["train", "--dataset", &data, "--epochs", "1", "--variant", "G+L", "--out", &out]);
    assert_eq!(lm.json["columns"][2]["runs"][0], plain.json["test"]);

    let ma = cli(&ctx, &["ablate-model", "--dataset", &data, "--epochs", "1", "--variant", "L,G+L"]);
    let rows: Vec<&str> = ma.json["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(rows, ["L", "G+L"]);

    let tr = cli(
        &ctx,
        &["transfer", "--dataset", &data, "--eval-dists", "C", "--n", "30", "--epochs", "1", "--variant", "G+L"],
    );
    let cols = tr.json["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[0]["retention"], 1.0);
    assert_eq!(tr.json["classes"].as_array().unwrap().len(), 3);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_maneuver-graph");
    let status = Process::new(exe).args(["gradcheck", "--variant", "L"]).status().unwrap();
    assert!(status.success());

    let bad = dir("bad-config");
    std::fs::create_dir_all(&bad).unwrap();
    let cfg = bad.join("world.json");
    std::fs::write(&cfg, r#"{"lane_count": 1}"#).unwrap();
    let out = Process::new(exe)
        .args(["generate", "--config", &cfg.display().to_string(), "--out", &bad.join("d").display().to_string()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lane_count"));

    let missing = Process::new(exe).args(["train", "--dataset", "/nonexistent", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));

    let threads = Process::new(exe).env("MANEUVER_GRAPH_THREADS", "zero").args(["gradcheck", "--variant", "L"]).output().unwrap();
    assert_eq!(threads.status.code(), Some(2));

    let json = Process::new(exe).args(["gradcheck", "--variant", "L", "--json"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v[0]["passed"], true);
}
