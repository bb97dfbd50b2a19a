use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a debug-speed pipeline
rooms = 5
keyframes_per_room = 4
point_spacing = 0.4
base_cell = 0.3
width = 4
heads = 2
common_dim = 8
clusters = 4
seg_epochs = 2
embed_epochs = 1
negatives = 2
";

fn aegis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aegis")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aegis(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_runs_and_reports_monotone_recall() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let (data, seg, emb, db) = (
        dir.path().join("data"),
        dir.path().join("seg.aegw"),
        dir.path().join("embed.aegw"),
        dir.path().join("test.aegd"),
    );
    let c = p(&conf);
    ok(&["--config", c, "gen-data", "--out", p(&data)]);
    assert!(data.join("manifest.txt").exists());
    let seg_out = ok(&["--config", c, "train-seg", p(&data), "--out", p(&seg)]);
    assert_eq!(seg_out.lines().count(), 2);
    let log = std::fs::read_to_string(dir.path().join("seg.aegw.log")).unwrap();
    assert!(log.starts_with("epoch,loss,accuracy\n1,"));
    ok(&["--config", c, "train-embed", p(&data), p(&seg), "--out", p(&emb)]);
    assert!(dir.path().join("embed.aegw.log").exists());
    let built = ok(&["--config", c, "build-db", p(&data), p(&seg), p(&emb), "--out", p(&db)]);
    assert!(built.starts_with("8 descriptors"));

    let report = ok(&["--config", c, "eval", p(&db)]);
    let line = report.lines().last().unwrap();
    let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(f.len(), 4);
    assert!(f[0] <= f[1] && f[1] <= f[2], "{line}");
    assert_eq!(f[3], 8.0);

    let kf = std::fs::read_dir(data.join("test/room_004")).unwrap().next().unwrap().unwrap().path();
    let hits = ok(&["--config", c, "query", p(&db), p(&seg), p(&emb), p(&kf), "--k", "2"]);
    let first: Vec<&str> = hits.lines().next().unwrap().split(' ').collect();
    let self_id = kf.file_stem().unwrap().to_str().unwrap();
    assert_eq!(first, [self_id, "0.000000"]);
    assert_eq!(hits.lines().count(), 2);
}

#[test]
fn identical_config_and_seed_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let c = p(&conf);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", c, "--seed", "9", "gen-data", "--out", p(&a)]);
    ok(&["--config", c, "--seed", "9", "gen-data", "--out", p(&b)]);
    let read = |d: &Path| std::fs::read(d.join("manifest.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
    let (sa, sb) = (dir.path().join("sa"), dir.path().join("sb"));
    ok(&["--config", c, "--seed", "9", "train-seg", p(&a), "--out", p(&sa)]);
    ok(&["--config", c, "--seed", "9", "train-seg", p(&b), "--out", p(&sb)]);
    assert_eq!(std::fs::read(&sa).unwrap(), std::fs::read(&sb).unwrap());
}

#[test]
fn every_command_prints_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let out = aegis(&["--config", p(&conf), "gen-data", "--out", p(&dir.path().join("d"))]);
    let err = String::from_utf8(out.stderr).unwrap();
    let hash = err.lines().next().unwrap().strip_prefix("config ").unwrap();
    assert_eq!(hash.len(), 64);
    let again = aegis(&["--config", p(&conf), "--seed", "1", "gen-data", "--out", p(&dir.path().join("e"))]);
    assert!(!String::from_utf8(again.stderr).unwrap().contains(hash));
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "bogus_key = 1\n").unwrap();
    assert_eq!(aegis(&["--config", p(&bad), "gradcheck"]).status.code(), Some(1));
    assert_eq!(aegis(&["no-such-command"]).status.code(), Some(1));

    let junk = dir.path().join("junk.aegd");
    std::fs::write(&junk, b"AEGDnot really").unwrap();
    let out = aegis(&["eval", p(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("format error"));
    assert_eq!(aegis(&["eval", p(&dir.path().join("missing.aegd"))]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_fresh_weights() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.lines().count(), 6);
    assert!(out.lines().all(|l| l.starts_with("pass ")), "{out}");
}
