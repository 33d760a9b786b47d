use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[synth]
prompt_len = [2, 4]
[synth.sizes]
train = 12
dev = 6
test = 6
[synth.generator]
phones = ["a", "b", "c", "d"]
feature_dim = 4
[model]
hidden = 8
att_dim = 4
embed_dim = 4
dec_hidden = 8
conv_filters = 2
conv_width = 3
[train]
epochs = 2
[decode]
beam_width = 3
"#;

fn mde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("mde.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    assert_eq!(mde(&["--help"]).status.code(), Some(0));
    assert_eq!(mde(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mde(&["run"]).status.code(), Some(1));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = mde(&["synth", "--config", "/nonexistent/mde.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/mde.toml"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 1\n");
    assert_eq!(mde(&["synth", "--config", &cfg]).status.code(), Some(1));

    let cfg = write_config(dir.path(), "");
    let o = mde(&["synth", "--config", &cfg, "--set", "decode.lambda=2.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(mde(&["synth", "--config", &cfg, "--jobs", "0"]).status.code(), Some(1));
}

#[test]
fn synth_prints_statistics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = mde(&["synth", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for split in ["train", "dev", "test"] {
        assert!(out.lines().any(|l| l.starts_with(split)), "{out}");
    }
    let manifest = dir.path().join("corpus/test.tsv");
    let first = fs::read(&manifest).unwrap();
    mde(&["synth", "--config", &cfg, "--jobs", "1"]);
    assert_eq!(fs::read(&manifest).unwrap(), first);

    mde(&["synth", "--config", &cfg, "--seed", "99"]);
    assert_ne!(fs::read(&manifest).unwrap(), first);

    let o = mde(&["synth", "--config", &cfg, "--set", "synth.errors.error_rate=0.0"]);
    for line in stdout(&o).lines().skip(1).take(3) {
        assert_eq!(line.split_whitespace().nth(4), Some("0"), "{line}");
    }
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for args in [
        vec!["synth", "--config", &cfg],
        vec!["train", "--config", &cfg],
        vec!["decode", "--config", &cfg, "--split", "test"],
        vec!["detect", "--config", &cfg],
        vec!["evaluate", "--config", &cfg],
    ] {
        let o = mde(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    let metrics = fs::read_to_string(dir.path().join("out/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("label\trecall\tprecision\tf1\n"));
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn detect_before_decode_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    mde(&["synth", "--config", &cfg]);
    let o = mde(&["detect", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("detect"));
}

#[test]
fn run_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[[variants]]\nlabel = \"ctc-sr\"\nlambda = 1.0\n[[variants]]\nlabel = \"joint-sr\"\n",
    );
    mde(&["synth", "--config", &cfg]);
    let o = mde(&["run", "--config", &cfg, "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.lines().nth(1).unwrap().starts_with("ctc-sr"));
    assert!(out.lines().nth(2).unwrap().starts_with("joint-sr"));
}

#[test]
fn confidence_without_dev_split_names_the_calibration_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    mde(&["synth", "--config", &cfg]);
    fs::remove_file(dir.path().join("corpus/dev.tsv")).unwrap();
    let o = mde(&["run", "--config", &cfg, "--set", "decision=confidence"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("calibrate"), "{}", stderr(&o));
}
