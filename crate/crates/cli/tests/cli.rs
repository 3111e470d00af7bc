use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "model = segnext-micro
seed = 3

[train]
iters = 4
batch = 2
crop = 64
eval_interval = 0
checkpoint_interval = 2

[data]
train_samples = 4
val_samples = 2
size = 64
";

fn segnext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segnext")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = stdout(&segnext(&["build", s(&cfg)]));
    assert!(out.contains("model segnext-micro"));
    assert!(out.contains("stage4 64x2x2 at input 64"), "{out}");
}

#[test]
fn analyze_emits_tsv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = stdout(&segnext(&["analyze", s(&cfg), "--input-size", "64x64", "--tsv"]));
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 3 && r[1].parse::<usize>().is_ok() && r[2].parse::<u64>().is_ok()));
}

#[test]
fn bad_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model = segnext-micro\n[train]\niters = many\n");
    let o = segnext(&["build", s(&cfg)]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("many"), "{err}");
    let missing = segnext(&["build", s(&dir.path().join("absent.cfg"))]);
    assert!(!missing.status.success());
    assert!(String::from_utf8(missing.stderr).unwrap().starts_with("error: "));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = stdout(&segnext(&["train", s(&cfg), "--out", s(&run), "--threads", "1"]));
    assert!(out.starts_with("iters 4 "), "{out}");
    for f in ["metrics.tsv", "ckpt_2.sgnx", "ckpt_4.sgnx", "final.sgnx"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("final.sgnx");
    let out = stdout(&segnext(&["eval", s(&cfg), "--checkpoint", s(&ckpt)]));
    let miou: f64 = out.lines().last().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let samples = dir.path().join("samples");
    stdout(&segnext(&["synth", s(&cfg), "--out", s(&samples), "--count", "1"]));
    let pred = dir.path().join("pred.pgm");
    stdout(&segnext(&["infer", s(&cfg), "--checkpoint", s(&ckpt), "--image", s(&samples.join("000.ppm")), "--out", s(&pred), "--ms-flip"]));
    let labels = segnext::io::image::read_pgm(&pred).unwrap();
    assert_eq!((labels.h, labels.w), (64, 64));
    assert!(labels.data.iter().all(|&l| l < 3));
}

#[test]
fn bench_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = stdout(&segnext(&["bench", s(&cfg), "--input-size", "64x64", "--reps", "2"]));
    assert!(out.contains("median") && out.contains("p90"), "{out}");
}

#[test]
fn ablate_reports_cost_and_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = stdout(&segnext(&["ablate", s(&cfg), "--decoder", "a", "--no-msca", "--iters", "2"]));
    assert!(out.contains("attention") && out.contains("GFLOPs"), "{out}");
    assert!(out.contains("iters 2 "), "{out}");
}
