use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use alignlab_core::segmodel::{init_params, ModelConfig};
use alignlab_core::tensor::write_checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_alignlab");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

const TINY: [&str; 8] = ["--set", "model.widths=4,6,8,8", "--set", "data.width=32", "--set", "data.height=32", "--set", "data.layouts=6"];

fn mean_iou(table: &str) -> f64 {
    let line = table.lines().find(|l| l.starts_with("mean")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn generate_writes_four_appearances_per_layout() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--seed", "3", "--layouts", "100", "--out", "d", "--width", "32", "--height", "24"], tmp.path());
    assert_eq!(fs::read_dir(tmp.path().join("d/labels")).unwrap().count(), 100);
    assert_eq!(fs::read_dir(tmp.path().join("d/rgb")).unwrap().count(), 400);
    let zero = run(&["generate", "--seed", "3", "--layouts", "0", "--out", "z"], tmp.path());
    assert_eq!(zero.status.code(), Some(1));
    assert!(!tmp.path().join("z").exists());
}

#[test]
fn train_logs_alignment_and_mixup_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dg = vec!["train", "--mode", "dg", "--out", "dg", "--set", "iterations=4", "--set", "align.metric=cs"];
    dg.extend(TINY);
    ok(&dg, tmp.path());
    let log = fs::read_to_string(tmp.path().join("dg/log.csv")).unwrap();
    assert!(column(&log, "loss_a").iter().all(|&v| v > 0.0));
    assert!(tmp.path().join("dg/model.ckpt").exists());

    fs::write(tmp.path().join("uda.cfg"), "iterations = 4\nalign.metric = cs\nuda.mixup = on\nuda.tau = 0.1\n").unwrap();
    let mut uda = vec!["train", "--config", "uda.cfg", "--mode", "uda", "--out", "uda"];
    uda.extend(TINY);
    ok(&uda, tmp.path());
    let log = fs::read_to_string(tmp.path().join("uda/log.csv")).unwrap();
    assert!(column(&log, "loss_m").iter().all(|&v| v > 0.0));
    assert!(tmp.path().join("uda/teacher.ckpt").exists());

    let bad = run(&["train", "--out", "bad", "--set", "align.metric=cosine"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cosine"));
    let single = run(&["train", "--out", "bad", "--set", "protocol=single:noon", "--set", "align.metric=cs"], tmp.path());
    assert_eq!(single.status.code(), Some(1));
}

#[test]
fn eval_scores_training_above_untrained() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--seed", "7", "--layouts", "12", "--out", "d", "--width", "32", "--height", "32"], tmp.path());
    let mut train = vec!["train", "--dataset", "d", "--out", "run", "--set", "iterations=150", "--set", "lr=0.003"];
    train.extend(&TINY[..2]);
    ok(&train, tmp.path());
    let params = init_params(0, &ModelConfig::with_widths([4, 6, 8, 8])).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params.tensors).unwrap();
    fs::write(tmp.path().join("untrained.ckpt"), buf).unwrap();

    let trained = ok(&["eval", "--checkpoint", "run/model.ckpt", "--dataset", "d", "--split", "seen", "--out", "e.csv"], tmp.path());
    let untrained = ok(&["eval", "--checkpoint", "untrained.ckpt", "--dataset", "d"], tmp.path());
    assert!(mean_iou(&trained) > mean_iou(&untrained) + 5.0, "{trained}\n{untrained}");
    let csv = fs::read_to_string(tmp.path().join("e.csv")).unwrap();
    assert!(csv.starts_with("class,iou,acc\n") && csv.lines().last().unwrap().starts_with("mean,"));

    let missing = run(&["eval", "--checkpoint", "nope.ckpt", "--dataset", "d"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));
    let no_dusk = run(&["eval", "--checkpoint", "run/model.ckpt", "--dataset", "d", "--split", "unseen"], tmp.path());
    assert_eq!(no_dusk.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_run_and_report_regenerates() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "name = metrics\naxis = metric\nseeds = 3\niterations = 2\nlayouts = 3\neval.layouts = 2\n\
                width = 32\nheight = 32\nmodel.widths = 2,2,2,2\n";
    fs::write(tmp.path().join("spec.txt"), spec).unwrap();
    ok(&["ablate", "--spec", "spec.txt", "--out", "abl"], tmp.path());
    let csv = fs::read_to_string(tmp.path().join("abl/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
    assert!(csv.lines().skip(1).all(|l| l.contains(",ok,")));
    let report = fs::read(tmp.path().join("abl/report.md")).unwrap();
    let chart = fs::read(tmp.path().join("abl/chart.svg")).unwrap();
    ok(&["report", "--results", "abl/results.csv", "--out", "again"], tmp.path());
    assert_eq!(fs::read(tmp.path().join("again/report.md")).unwrap(), report);
    assert_eq!(fs::read(tmp.path().join("again/chart.svg")).unwrap(), chart);

    fs::write(tmp.path().join("bad.txt"), "axis = metric\nvalues = none,cosine\n").unwrap();
    assert_eq!(run(&["ablate", "--spec", "bad.txt", "--out", "x"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], tmp.path()).status.code(), Some(1));
}

#[test]
fn ablation_results_repeat_apart_from_wall_clock() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "axis = blocks\nvalues = 1,1+2+3+4\nseeds = 1\nalign.metric = cs\niterations = 2\nlayouts = 2\n\
                eval.layouts = 1\nwidth = 32\nheight = 32\nmodel.widths = 2,2,2,2\n";
    fs::write(tmp.path().join("spec.txt"), spec).unwrap();
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(tmp.path().join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    ok(&["ablate", "--spec", "spec.txt", "--out", "a"], tmp.path());
    ok(&["ablate", "--spec", "spec.txt", "--out", "b"], tmp.path());
    assert_eq!(strip("a/results.csv"), strip("b/results.csv"));
}
