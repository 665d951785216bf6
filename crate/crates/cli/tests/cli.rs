use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maskslu"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", "a", "--n", "20", "--seed", "4", "--overwrite"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["synth", "--out", "b", "--n", "20", "--seed", "4", "--overwrite"], tmp.path());
    assert!(o.status.success());
    let manifest = fs::read_to_string(tmp.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 20);
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));

    // Without --overwrite every run lands in a fresh subdirectory.
    let first = stdout(&run(&["synth", "--out", "c", "--n", "2"], tmp.path()));
    let second = stdout(&run(&["synth", "--out", "c", "--n", "2"], tmp.path()));
    assert_ne!(first.trim(), second.trim());
    assert!(Path::new(first.trim()).is_relative() || Path::new(first.trim()).exists());
    assert!(tmp.path().join(first.trim()).join("config.lock").exists());
}

#[test]
fn grammar_errors_carry_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("g.txt"), "slot a = x y\n\naction go(b): go $b\n").unwrap();
    let o = run(&["synth", "--grammar", "g.txt", "--out", "x", "--n", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("g.txt:3"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[pretrain]\nrho = 0.3\nwarmup = 5\n").unwrap();
    let o = run(&["--config", "bad.toml", "synth", "--out", "x", "--n", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warmup"));
    let o = run(&["--model.nope", "1", "synth", "--out", "x", "--n", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["no-such-command"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["decode", "--audio", "x.wav", "--checkpoint", "missing.ckpt"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_lock_records_resolved_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &["--synth.noise_snr_db", "20", "synth", "--out", "x", "--n", "1", "--overwrite"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let lock = fs::read_to_string(tmp.path().join("x/config.lock")).unwrap();
    assert!(lock.contains("noise_snr_db = 20.0"), "{lock}");
    assert!(lock.contains("rho = 0.3"));
}

const TINY: &str = "\
[model]
enc_layers = 2
dec_layers = 2
d_model = 64
heads = 4
ffn = 256
conv_channels = [8, 16]

[pretrain]
epochs = 6
batch_size = 16
accum_steps = 1
peak_lr = 0.003
warmup_steps = 100
";

#[test]
fn pretrain_then_decode_reproduces_the_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    for (name, n, seed) in [("train", "600", "1"), ("valid", "40", "2")] {
        let o = run(&["synth", "--out", name, "--n", n, "--seed", seed, "--overwrite"], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = run(
        &[
            "--config", "tiny.toml", "pretrain", "--train", "train/manifest.jsonl", "--valid",
            "valid/manifest.jsonl", "--out", "pt", "--overwrite",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("pt/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let lock = fs::read_to_string(d.join("pt/config.lock")).unwrap();
    assert!(lock.contains("rho = 0.3"));

    let manifest = fs::read_to_string(d.join("valid/manifest.jsonl")).unwrap();
    let mut hits = 0;
    let entries: Vec<serde_json::Value> = manifest.lines().take(5).map(|l| serde_json::from_str(l).unwrap()).collect();
    for e in &entries {
        let audio = format!("valid/{}", e["audio"].as_str().unwrap());
        let o = run(&["decode", "--audio", &audio, "--checkpoint", "pt/best.ckpt"], d);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains("confidence:"));
        let refined = out.lines().find_map(|l| l.strip_prefix("refined: ")).unwrap().trim();
        hits += (refined == e["text"].as_str().unwrap()) as usize;
    }
    assert!(hits >= 4, "only {hits}/5 transcripts reproduced");

    // Resume continues the epoch numbering.
    let o = run(
        &[
            "--config", "tiny.toml", "--pretrain.epochs", "7", "pretrain", "--train", "train/manifest.jsonl",
            "--valid", "valid/manifest.jsonl", "--out", "pt2", "--overwrite", "--resume", "pt/last.ckpt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read_to_string(d.join("pt2/metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(resumed.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 7);
}
