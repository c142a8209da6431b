use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 1
pca_sample_size = 4000

[gmm]
k = 4
sample_size = 4000

[net]
width = 32
epochs = 20
batch_size = 16
dropout = 0.0

[reduction.target]
dim = 8
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvstack"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, out: &str, seed: &str, extra: &[&str]) {
    let mut args = vec![
        "--seed", seed, "synth", "--out", out, "--classes", "3", "--videos", "8", "--records", "60", "--channels",
        "HOG:8,HOF:6",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    synth(d, "train", "1", &["--variants"]);
    synth(d, "test", "2", &["--variants"]);

    ok(d, &["--config", "cfg.toml", "fit-unsup", "--data", "train", "--out", "unsup.fvc"]);
    ok(d, &["encode", "--model", "unsup.fvc", "--data", "train", "--out", "train_cache", "--dafs"]);
    ok(d, &["encode", "--model", "unsup.fvc", "--data", "test", "--out", "test_cache", "--dafs"]);
    ok(d, &["train", "--model", "unsup.fvc", "--cache", "train_cache", "--out", "net.fvc", "--trace", "trace.csv"]);
    ok(d, &["train", "--model", "unsup.fvc", "--cache", "train_cache", "--out", "svm.fvc", "--classifier", "svm"]);
    ok(d, &["bag", "--model", "net.fvc", "--cache", "train_cache", "--out", "bag.fvc", "--count", "2"]);

    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);

    for model in ["net.fvc", "svm.fvc", "bag.fvc"] {
        let report = ok(d, &["eval", "--model", model, "--cache", "test_cache", "--protocol", "map", "--csv", "r.csv"]);
        assert!(!report.is_empty());
        let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
        assert!(csv.starts_with("class,ap,accuracy,sd"));
        assert_eq!(csv.lines().count(), 5);
    }

    ok(d, &["eval", "--model", "net.fvc", "--cache", "test_cache", "--protocol", "map+:0", "--plot", "plots"]);
    assert!(d.join("plots/pr_class1.svg").exists());
    assert!(!d.join("plots/pr_class0.svg").exists());

    ok(d, &["transfer", "--source", "net.fvc", "--data", "test", "--what", "gmm", "--out", "moved.fvc"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    std::fs::write(d.join("bad.toml"), "[net]\ndepth = 0\n").unwrap();
    synth(d, "a", "1", &[]);
    ok(d, &["--seed", "1", "synth", "--out", "b", "--classes", "3", "--videos", "4", "--records", "30", "--channels", "HOG:5"]);
    ok(d, &["--config", "cfg.toml", "fit-unsup", "--data", "a", "--out", "m.fvc"]);

    let code = |args: &[&str]| run(d, args).status.code();
    assert_eq!(code(&["--config", "missing.toml", "fit-unsup", "--data", "a", "--out", "x.fvc"]), Some(2));
    assert_eq!(code(&["--config", "bad.toml", "fit-unsup", "--data", "a", "--out", "x.fvc"]), Some(2));
    assert_eq!(code(&["encode", "--model", "m.fvc", "--data", "b", "--out", "c"]), Some(3));
    assert_eq!(code(&["encode", "--model", "nope.fvc", "--data", "a", "--out", "c"]), Some(3));
    std::fs::write(d.join("junk.fvc"), b"FVC1 not really").unwrap();
    assert_eq!(code(&["train", "--model", "junk.fvc", "--cache", "a", "--out", "x.fvc"]), Some(3));
}
