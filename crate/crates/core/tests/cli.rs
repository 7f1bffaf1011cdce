use std::path::Path;
use std::process::{Command, Output};

use udparse::conllu::read_conllu_file;

fn udparse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udparse"))
        .args(args)
        .current_dir(dir)
        .env_remove("UDPARSE_MODEL_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &[&str] = &[
    "--set",
    "train.max_epochs=3",
    "--set",
    "train.base_lr=0.05",
    "--set",
    "train.batch_size=4",
    "--set",
    "model.arc_dim=16",
    "--set",
    "model.label_dim=8",
];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--train", "train.conllu", "--dev", "dev.conllu"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args
}

#[test]
fn train_parse_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&udparse(&["synth", "--sentences", "20", "--seed", "3", "--output", "train.conllu"], d));
    ok(&udparse(&["synth", "--sentences", "5", "--seed", "4", "--output", "dev.conllu"], d));
    ok(&udparse(&train_args(&["--out", "m"]), d));
    for f in ["model.bin", "log.jsonl", "config.toml"] {
        assert!(d.join("m").join(f).is_file(), "missing {}", f);
    }
    let log = std::fs::read_to_string(d.join("m/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "lr", "dev", "best_epoch", "wallclock_secs", "steps"] {
        assert!(first.get(key).is_some(), "log lacks {}", key);
    }

    ok(&udparse(&["parse", "--model", "m", "--input", "dev.conllu", "--output", "out.conllu"], d));
    let gold = read_conllu_file(d.join("dev.conllu")).unwrap();
    let parsed = read_conllu_file(d.join("out.conllu")).unwrap();
    assert_eq!(parsed.len(), gold.len());
    for s in &parsed {
        assert!(udparse::conllu::check_tree(&s.heads().unwrap()).is_ok());
    }

    let out = udparse(
        &["evaluate", "--gold", "dev.conllu", "--system", "dev.conllu", "--format", "json"],
        d,
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["f1"].as_f64(), Some(1.0));
    }

    ok(&udparse(&["export-scores", "--model", "m", "--input", "dev.conllu", "--output", "s.bin"], d));
    let scores = udparse::scorer::read_scores(std::fs::File::open(d.join("s.bin")).unwrap()).unwrap();
    assert_eq!(scores.len(), gold.len());
}

#[test]
fn model_dir_from_environment_and_mode_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&udparse(&["synth", "--sentences", "8", "--output", "train.conllu"], d));
    ok(&udparse(&["synth", "--sentences", "3", "--seed", "9", "--output", "dev.conllu"], d));
    let out = Command::new(env!("CARGO_BIN_EXE_udparse"))
        .args(train_args(&["--set", "model.structure=graph"]))
        .current_dir(d)
        .env("UDPARSE_MODEL_DIR", d.join("envmodel"))
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("envmodel/model.bin").is_file());

    let basic = udparse(
        &["parse", "--model", "envmodel", "--input", "dev.conllu", "--output", "x.conllu"],
        d,
    );
    assert!(!basic.status.success());
    assert!(!d.join("x.conllu").exists());
    ok(&udparse(
        &["parse", "--model", "envmodel", "--input", "dev.conllu", "--output", "g.conllu", "--mode", "enhanced"],
        d,
    ));
    for s in read_conllu_file(d.join("g.conllu")).unwrap() {
        let edges: Vec<(usize, usize)> = s.enhanced_edges().iter().map(|e| (e.0, e.1)).collect();
        let mut reach = vec![false; s.len() + 1];
        reach[0] = true;
        loop {
            let before = reach.iter().filter(|&&r| r).count();
            for &(h, d) in &edges {
                if reach[h] {
                    reach[d] = true;
                }
            }
            if reach.iter().filter(|&&r| r).count() == before {
                break;
            }
        }
        assert!(reach.iter().all(|&r| r), "unreachable node in {}", s);
    }
}

#[test]
fn seeded_training_reproduces_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&udparse(&["synth", "--sentences", "10", "--output", "train.conllu"], d));
    ok(&udparse(&["synth", "--sentences", "3", "--seed", "5", "--output", "dev.conllu"], d));
    ok(&udparse(&train_args(&["--out", "a"]), d));
    ok(&udparse(&train_args(&["--out", "b"]), d));
    let a = std::fs::read(d.join("a/model.bin")).unwrap();
    let b = std::fs::read(d.join("b/model.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&udparse(&["synth", "--sentences", "4", "--output", "train.conllu"], d));
    let missing_dev = udparse(&train_args(&["--out", "m"]), d);
    assert!(!missing_dev.status.success());
    assert!(String::from_utf8_lossy(&missing_dev.stderr).contains("dev.conllu"));

    let bad_key = udparse(&["train", "--train", "train.conllu", "--dev", "train.conllu", "--out", "m", "--set", "train.nope=1"], d);
    assert!(!bad_key.status.success());

    ok(&udparse(&["synth", "--sentences", "3", "--seed", "2", "--output", "other.conllu"], d));
    let misaligned = udparse(&["evaluate", "--gold", "train.conllu", "--system", "other.conllu"], d);
    assert!(!misaligned.status.success());
}

#[test]
fn empty_input_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&udparse(&["synth", "--sentences", "6", "--output", "train.conllu"], d));
    ok(&udparse(&["synth", "--sentences", "2", "--seed", "1", "--output", "dev.conllu"], d));
    ok(&udparse(&train_args(&["--out", "m"]), d));
    std::fs::write(d.join("empty.conllu"), "").unwrap();
    ok(&udparse(&["parse", "--model", "m", "--input", "empty.conllu", "--output", "o.conllu"], d));
    assert_eq!(std::fs::read_to_string(d.join("o.conllu")).unwrap(), "");
}

#[test]
fn gradcheck_command_reports_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clean = udparse(&["gradcheck", "--set", "gradcheck.instances=2", "--seed", "4"], d);
    ok(&clean);
    let text = String::from_utf8(clean.stdout).unwrap();
    assert!(text.contains("label.u") && text.contains("upos.w") && text.contains("PASS"));
    let broken = udparse(&["gradcheck", "--set", "gradcheck.instances=2", "--corrupt", "biaffine"], d);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8(broken.stdout).unwrap().contains("FAIL"));
}

#[test]
fn vector_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let layers = |n: usize| {
        (0..2)
            .map(|l| udparse::numeric::Tensor::matrix(n, 3, (0..n * 3).map(|i| (i + l) as f64).collect()))
            .collect::<Vec<_>>()
    };
    let blocks = vec![
        udparse::encoder::ContextualVectors::new(layers(2), "toy"),
        udparse::encoder::ContextualVectors::new(layers(4), "toy"),
    ];
    let mut buf = Vec::new();
    udparse::encoder::write_vectors(&mut buf, "toy", 2, 3, &blocks).unwrap();
    std::fs::write(d.join("v.bin"), buf).unwrap();
    let out = udparse(&["vectors", "--input", "v.bin"], d);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("model toy version 1 layers 2 dim 3 sentences 2"));
    assert!(text.contains("1\t2\n2\t4"));
}
