use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
synth.train=6
synth.dev=2
synth.test=2
visual.channels=4,6,8
lt.layers=1
lt.heads=2
lt.ffn_hidden=16
see.heads=2
see.ffn_hidden=16
train.epochs=1
";

fn cslr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cslr"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), TINY).unwrap();
    let o = cslr(dir.path(), &["synth", "--config", "c.txt", "--out", "data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn synth_layout_determinism_and_force() {
    let dir = setup();
    let d = dir.path();
    for entry in ["videos", "keypoints", "labels.tsv", "vocab.txt", "config.txt"] {
        assert!(d.join("data").join(entry).exists(), "{entry}");
    }
    let again = cslr(d, &["synth", "--config", "c.txt", "--out", "data"]);
    assert_eq!(again.status.code(), Some(1));

    cslr(d, &["synth", "--config", "c.txt", "--out", "copy"]);
    let seeded = cslr(d, &["synth", "--config", "c.txt", "--out", "seeded", "--seed", "7"]);
    assert!(seeded.status.success());
    let video = "videos/train-0000.slt";
    let a = fs::read(d.join("data").join(video)).unwrap();
    assert_eq!(a, fs::read(d.join("copy").join(video)).unwrap());
    assert_ne!(a, fs::read(d.join("seeded").join(video)).unwrap());

    let forced = cslr(d, &["synth", "--config", "c.txt", "--out", "seeded", "--force"]);
    assert!(forced.status.success());
    assert_eq!(a, fs::read(d.join("seeded").join(video)).unwrap());
}

#[test]
fn train_eval_probe_roundtrip() {
    let dir = setup();
    let d = dir.path();
    let o = cslr(d, &["train", "--config", "c.txt", "--data", "data", "--out", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "train.log", "best.ckpt", "last.ckpt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.split(' ').count() == 8));

    let beam10 = cslr(d, &["eval", "--ckpt", "run/last.ckpt", "--data", "data"]);
    assert_eq!(beam10.status.code(), Some(0));
    let line = stdout(&beam10);
    let pct = line.trim().strip_prefix("WER\t").unwrap();
    assert_eq!(pct.split('.').nth(1).unwrap().len(), 2);

    let greedy = cslr(d, &["eval", "--ckpt", "run/last.ckpt", "--data", "data", "--beam", "0"]);
    let beam1 = cslr(d, &["eval", "--ckpt", "run/last.ckpt", "--data", "data", "--beam", "1"]);
    assert_eq!(stdout(&greedy), stdout(&beam1));

    let probe = cslr(d, &["probe", "--ckpt", "run/last.ckpt", "--data", "data"]);
    let p = stdout(&probe);
    let v: f64 = p.trim().strip_prefix("probe_acc\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = setup();
    let d = dir.path();
    cslr(d, &["train", "--config", "c.txt", "--data", "data", "--out", "full", "--epochs", "2"]);
    cslr(d, &["train", "--config", "c.txt", "--data", "data", "--out", "half", "--epochs", "1"]);
    let o = cslr(d, &["train", "--data", "data", "--out", "half", "--from", "half/last.ckpt", "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.join("full/last.ckpt")).unwrap(),
        fs::read(d.join("half/last.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(d.join("full/train.log")).unwrap(),
        fs::read_to_string(d.join("half/train.log")).unwrap()
    );
}

#[test]
fn ablation_flags_all_run() {
    let dir = setup();
    let d = dir.path();
    for mask in 0..8u8 {
        let out = format!("abl{mask}");
        let mut args = vec!["train", "--config", "c.txt", "--data", "data", "--out", &out];
        let flags = ["--no-sac", "--no-sec", "--no-srm"];
        for (i, f) in flags.iter().enumerate() {
            if mask & (1 << i) != 0 {
                args.push(f);
            }
        }
        let o = cslr(d, &args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let cfg = fs::read_to_string(d.join(&out).join("config.txt")).unwrap();
        assert_eq!(cfg.contains("loss.sac=false"), mask & 1 != 0);
        assert_eq!(cfg.contains("loss.srm=false"), mask & 4 != 0);
    }
}

#[test]
fn wer_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("ref"), "A A B C A D\n").unwrap();
    fs::write(d.join("hyp"), "A C C A D B\n").unwrap();
    let o = cslr(d, &["wer", "ref", "hyp"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).ends_with("WER\t50.00\n"));

    let same = cslr(d, &["wer", "ref", "ref"]);
    assert!(stdout(&same).ends_with("WER\t0.00\n"));

    fs::write(d.join("short"), "A\nB\n").unwrap();
    assert_eq!(cslr(d, &["wer", "ref", "short"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(cslr(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cslr(d, &["train", "--data", "data", "--out", "x", "--set", "nope=1"]).status.code(), Some(1));
    assert_eq!(cslr(d, &["eval", "--ckpt", "missing.ckpt", "--data", "data"]).status.code(), Some(2));
    fs::write(d.join("garbage.ckpt"), "not a checkpoint\n").unwrap();
    assert_eq!(cslr(d, &["probe", "--ckpt", "garbage.ckpt", "--data", "data"]).status.code(), Some(2));
    let nan = cslr(d, &["train", "--config", "c.txt", "--data", "data", "--out", "nan", "--set", "train.lr=1e300"]);
    assert_eq!(nan.status.code(), Some(3), "{}", String::from_utf8_lossy(&nan.stderr));
}
