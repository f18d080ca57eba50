use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.l_max = 1
model.channels = 4
model.heads = 1
model.layers = 1
model.r_cut = 3.0
model.num_basis = 8
model.max_atomic_number = 8
train.epochs = 2
train.warmup_epochs = 1
train.batch_size = 2
train.seed = 3
";

fn deqff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deqff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = deqff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn body(p: &Path) -> String {
    let text = fs::read_to_string(p).unwrap();
    assert!(text.starts_with("# deqff "), "{}", p.display());
    text.lines().skip(1).map(|l| format!("{l}\n")).collect()
}

/// Generates data and trains the tiny model; returns (dir, data manifest, checkpoint).
fn trained() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("water.xyz");
    ok(&["gen-data", "--potential", "water", "--frames", "12", "--stride", "5", "--out", s(&data)]);
    let manifest = data.with_extension("json");
    assert!(manifest.exists());
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run)]);
    for f in ["config.conf", "checkpoint.deqf", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    (dir, manifest, run.join("checkpoint.deqf"))
}

#[test]
fn pipeline_from_data_to_reports() {
    let (dir, manifest, ck) = trained();
    let metrics = body(&dir.path().join("run/metrics.csv"));
    assert!(metrics.starts_with("epoch,split,force_mae"));

    let report = dir.path().join("eval.csv");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&manifest), "--report", s(&report)]);
    assert_eq!(body(&report).lines().count(), 2);
    assert_eq!(body(&dir.path().join("eval_samples.csv")).lines().count(), 13);

    let xyz = dir.path().join("water.xyz");
    let relax = dir.path().join("relax.csv");
    ok(&["relax", "--checkpoint", s(&ck), "--init", s(&xyz), "--steps", "3", "--ablation", "--out", s(&relax)]);
    let rows = body(&relax);
    let mut lines = rows.lines();
    assert_eq!(
        lines.next().unwrap(),
        "FP reuse,eps_reuse,Time [s],Time std [s],# Solver steps,# Solver steps std,Mean final energy"
    );
    assert_eq!(lines.count(), 3);

    let sweep = dir.path().join("sweep.csv");
    ok(&["sweep-tol", "--checkpoint", s(&ck), "--data", s(&manifest), "--tols", "1e-4,1e-2,1", "--out", s(&sweep)]);
    let rows = body(&sweep);
    let steps: Vec<f64> = rows.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(steps.len(), 3);
    assert!(steps.windows(2).all(|w| w[1] <= w[0]), "{steps:?}");

    let bench = dir.path().join("fpreuse.csv");
    ok(&["bench-fpreuse", "--checkpoint", s(&ck), "--traj", s(&xyz), "--out", s(&bench)]);
    assert!(body(&bench).starts_with("steps,count_no_reuse,count_reuse"));
    assert!(dir.path().join("fpreuse_deviation.csv").exists());

    let md = dir.path().join("md");
    ok(&["md", "--checkpoint", s(&ck), "--init", s(&xyz), "--steps", "5", "--out", s(&md)]);
    let traj = fs::read_to_string(dir.path().join("md.xyz")).unwrap();
    assert_eq!(traj.lines().filter(|l| l.contains("energy=")).count(), 6);
    assert_eq!(body(&dir.path().join("md_stats.csv")).lines().count(), 7);
}

#[test]
fn reruns_without_timing_are_byte_identical() {
    let (dir, manifest, ck) = trained();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&["--no-timing", "sweep-tol", "--checkpoint", s(&ck), "--data", s(&manifest), "--tols", "1e-3,1e-1", "--out", s(out)]);
    }
    assert_eq!(body(&a), body(&b));
    let (ra, rb) = (dir.path().join("ra.csv"), dir.path().join("rb.csv"));
    let xyz = dir.path().join("water.xyz");
    for out in [&ra, &rb] {
        ok(&["--no-timing", "relax", "--checkpoint", s(&ck), "--init", s(&xyz), "--steps", "2", "--ablation", "--out", s(out)]);
    }
    assert_eq!(body(&ra), body(&rb));

    let again = dir.path().join("run2");
    let cfg = dir.path().join("tiny.conf");
    ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&again)]);
    assert_eq!(body(&dir.path().join("run/metrics.csv")), body(&again.join("metrics.csv")));
    assert_eq!(fs::read(&ck).unwrap(), fs::read(again.join("checkpoint.deqf")).unwrap());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "model.lmax = 1\n").unwrap();
    let out = deqff(&["train", "--config", s(&cfg), "--data", "missing.json", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = deqff(&["eval", "--checkpoint", "nope.deqf", "--data", "nope.xyz", "--report", "r.csv"]);
    assert!(!out.status.success());
    let out = deqff(&["sweep-tol", "--checkpoint", "x", "--data", "y", "--tols", "abc"]);
    assert!(!out.status.success());
}
