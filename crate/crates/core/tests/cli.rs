mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfnerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfnerf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = sfnerf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--images",
        "5",
        "--test-images",
        "2",
        "--size",
        "24",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn read_split(dir: &Path) -> (Vec<usize>, Vec<usize>) {
    sfnerf::data::parse_split(&fs::read_to_string(dir.join("split.txt")).unwrap()).unwrap()
}

#[test]
fn synth_writes_the_requested_views_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    synth(&a, &["--seed", "4"]);
    synth(&b, &["--seed", "4"]);
    assert_eq!(files_in(&a.join("images")).len(), 5);
    let (train, test) = read_split(&a);
    assert_eq!((train.len(), test.len()), (3, 2));
    for f in files_in(&a.join("images")) {
        assert_eq!(
            fs::read(a.join("images").join(&f)).unwrap(),
            fs::read(b.join("images").join(&f)).unwrap()
        );
    }
    assert_eq!(
        fs::read(a.join("cameras.txt")).unwrap(),
        fs::read(b.join("cameras.txt")).unwrap()
    );
}

#[test]
fn synth_without_occluders_or_jitter_matches_clean_views() {
    let root = tempfile::tempdir().unwrap();
    let d = root.path().join("d");
    synth(&d, &["--occluders", "0", "--jitter", "0"]);
    for f in files_in(&d.join("images")) {
        assert_eq!(
            fs::read(d.join("images").join(&f)).unwrap(),
            fs::read(d.join("clean").join(&f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn refuses_non_empty_output_without_force() {
    let root = tempfile::tempdir().unwrap();
    let d = root.path().join("d");
    synth(&d, &[]);
    let out = sfnerf(&["synth", "--out", d.to_str().unwrap(), "--size", "16"]);
    assert_eq!(out.status.code(), Some(2));
    synth(&d, &["--force"]);
}

#[test]
fn missing_dataset_exits_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let out = sfnerf(&[
        "train",
        "--data",
        root.path().join("nowhere").to_str().unwrap(),
        "--out",
        root.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let bad_key = sfnerf(&["train", "--set", "train.no_such_key=1", "--out", "x"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert_eq!(sfnerf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_decompose_render_eval_round() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, &[]);
    let cfg = root.path().join("run.toml");
    fs::write(&cfg, common::tiny_run_toml(&data)).unwrap();
    let run = root.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_s,
        "--steps",
        "4",
    ]);
    for f in ["checkpoint.bin", "config.toml", "scalars.tsv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("steps = 4"));

    // Continue the same run to six steps.
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_s,
        "--steps",
        "6",
        "--resume",
    ]);
    let ck = sfnerf::trainer::Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.step, 6);

    let dec = root.path().join("dec");
    ok(&[
        "decompose",
        "--run",
        run_s,
        "--ids",
        "0",
        "--out",
        dec.to_str().unwrap(),
        "--float",
    ]);
    let names = files_in(&dec);
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with(".f32")).count(), 5);

    let test_id = read_split(&data).1[0];
    let bad = sfnerf(&[
        "decompose",
        "--run",
        run_s,
        "--ids",
        &test_id.to_string(),
        "--out",
        root.path().join("bad").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("valid ids"));

    let png = root.path().join("render.png");
    ok(&[
        "render",
        "--run",
        run_s,
        "--id",
        "1",
        "--out",
        png.to_str().unwrap(),
    ]);
    assert!(png.is_file());

    let ev = root.path().join("eval");
    ok(&["eval", "--run", run_s, "--out", ev.to_str().unwrap()]);
    let report = fs::read_to_string(ev.join("report.tsv")).unwrap();
    // Header, one row per held-out view, mean.
    assert_eq!(report.lines().count(), 1 + 2 + 1);
    assert!(report.lines().last().unwrap().starts_with("mean"));
    let iou = fs::read_to_string(ev.join("train_iou.tsv")).unwrap();
    assert_eq!(iou.lines().count(), 1 + 3 + 1);
}
