use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 5
data.n = 200
model.hidden = 4
model.linear_depth = 2
model.sequence_depth = 2
train.epochs = 2
retrain.epochs = 2
";

fn muse(dir: &Path, args: &[&str]) -> Output {
    muse_env(dir, args, None)
}

fn muse_env(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_muse"));
    c.current_dir(dir).args(args).env_remove("MUSE_SEED");
    if let Some(s) = seed {
        c.env("MUSE_SEED", s);
    }
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn report_replay_is_byte_identical() {
    let dir = setup();
    let d = dir.path();
    for name in ["a", "b"] {
        let csv = format!("{name}.csv");
        let table = format!("{name}.txt");
        ok(&muse(d, &["--config", "small.cfg", "report", "--baseline", "--out", &csv, "--table", &table]));
    }
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));
    assert_eq!(read(d, "a.txt"), read(d, "b.txt"));
    let csv = String::from_utf8(read(d, "a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("\nMUSE,") && csv.contains("\nMUSE-discrete,") && csv.contains("\nConcat baseline,"));
    let table = String::from_utf8(read(d, "a.txt")).unwrap();
    assert!(table.contains("data.n = 200"));
}

#[test]
fn seed_environment_overrides_config() {
    let dir = setup();
    let d = dir.path();
    ok(&muse_env(d, &["--config", "small.cfg", "report", "--out", "env.csv", "--table", "env.txt"], Some("9")));
    ok(&muse(d, &["--config", "small.cfg", "--set", "seed=9", "report", "--out", "set.csv", "--table", "set.txt"]));
    ok(&muse(d, &["--config", "small.cfg", "report", "--out", "cfg.csv", "--table", "cfg.txt"]));
    assert_eq!(read(d, "env.txt"), read(d, "set.txt"));
    assert_ne!(read(d, "env.txt"), read(d, "cfg.txt"));
    assert!(String::from_utf8(read(d, "env.csv")).unwrap().contains("# seed 9\n"));
}

#[test]
fn staged_pipeline_matches_one_shot_report() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "small.cfg"];
    let run = |rest: &[&str]| {
        let args: Vec<&str> = c.iter().chain(rest).copied().collect();
        let o = muse(d, &args);
        ok(&o);
        o
    };
    run(&["synth", "--out", "data.musef"]);
    run(&["search", "--data", "data.musef", "--out", "searched.ckpt"]);
    run(&["discretize", "--checkpoint", "searched.ckpt", "--out", "discrete.ckpt"]);
    run(&["retrain", "--checkpoint", "discrete.ckpt", "--data", "data.musef", "--out", "final.ckpt"]);
    run(&["eval", "--checkpoint", "final.ckpt", "--data", "data.musef", "--out", "eval.csv", "--table", "eval.txt"]);
    run(&["report", "--out", "full.csv", "--table", "full.txt"]);

    let staged = String::from_utf8(read(d, "eval.csv")).unwrap();
    let full = String::from_utf8(read(d, "full.csv")).unwrap();
    let staged_row = staged.lines().last().unwrap().strip_prefix("MUSE,").unwrap();
    let full_row = full.lines().last().unwrap().strip_prefix("MUSE-discrete,").unwrap();
    assert_eq!(staged_row, full_row);
}

#[test]
fn dataset_commands_round_trip() {
    let dir = setup();
    let d = dir.path();
    ok(&muse(d, &["--config", "small.cfg", "synth", "--out", "data.jsonl"]));
    ok(&muse(d, &["--config", "small.cfg", "corrupt", "--input", "data.jsonl", "--out", "partial.musef"]));
    let v = muse(d, &["validate", "--input", "partial.musef"]);
    ok(&v);
    let text = String::from_utf8(v.stdout).unwrap();
    assert!(text.contains("train 80 valid 80 test 40"), "{text}");
    let absent: usize = text
        .lines()
        .find(|l| l.starts_with("text absent"))
        .unwrap()
        .split_whitespace()
        .filter_map(|w| w.parse::<usize>().ok())
        .sum();
    assert_eq!(absent, 200);
}

#[test]
fn operator_ablation_rows() {
    let dir = setup();
    let d = dir.path();
    ok(&muse(d, &["--config", "small.cfg", "ablate-operators", "--path", "sequence", "--out", "ops.csv"]));
    let csv = String::from_utf8(read(d, "ops.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(3).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["All Operators", "4 Operators", "3 Operators", "2 Operators", "1 Operators"]);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = setup();
    let d = dir.path();
    let code = |args: &[&str]| muse(d, args).status.code().unwrap();
    assert_eq!(code(&["--set", "nope=1", "synth", "--out", "x.musef"]), 2);
    assert_eq!(code(&["--set", "train.batch_size=0", "report"]), 2);
    assert_eq!(code(&["--config", "missing.cfg", "synth", "--out", "x.musef"]), 2);
    assert_eq!(code(&["bogus-command"]), 2);
    assert_eq!(code(&["ablate-operators", "--path", "static"]), 2);
    assert_eq!(code(&["validate", "--input", "missing.musef"]), 3);
    std::fs::write(d.join("junk.musef"), b"not a feature file at all").unwrap();
    assert_eq!(code(&["validate", "--input", "junk.musef"]), 3);
    assert_eq!(code(&["eval", "--checkpoint", "junk.musef"]), 3);

    ok(&muse(d, &["--config", "small.cfg", "synth", "--out", "d.musef"]));
    ok(&muse(d, &["corrupt", "--input", "d.musef", "--out", "p.musef"]));
    assert_eq!(code(&["corrupt", "--input", "p.musef", "--out", "pp.musef"]), 4);
    let e = muse(d, &["corrupt", "--input", "p.musef", "--out", "pp.musef"]);
    assert!(String::from_utf8_lossy(&e.stderr).starts_with("muse: "));
    assert!(!d.join("pp.musef").exists());
}
