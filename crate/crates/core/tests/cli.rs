use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vitlm");

const MICRO: &str = "\
encoder_dim=8
encoder_depth=1
encoder_heads=2
encoder_mlp_hidden=16
llm_dim=8
llm_heads=2
llm_ffn_hidden=16
epochs=2
warmup_epochs=1
batch_size=8
";

fn vitlm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vitlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vitlm(args).status.code().expect("exit status")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny dataset and micro config under `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["gen-data", "--seed", "7", "--n", "40", "--classes", "3", "--size", "8", "--out", p(&data)]);
    let cfg = dir.join("micro.cfg");
    fs::write(&cfg, MICRO).unwrap();
    (data, cfg)
}

/// Every file under `dir` with its bytes, in path order.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_bit_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "3", "--n", "30", "--out", p(d)]);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let c = t.path().join("c");
    ok(&["gen-data", "--seed", "4", "--n", "30", "--out", p(&c)]);
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn configuration_errors_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");
    assert_eq!(code(&["gen-data", "--classes", "1", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen-data", "--size", "7", "--out", p(&out)]), 2);

    let (data, cfg) = fixture(t.path());
    let run = t.path().join("run");
    // Arms wrapping language blocks need a weight source.
    assert_eq!(code(&["train", "--arm", "plus_llm", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]), 2);
    // Refuses to write into a non-empty directory without --force.
    assert_eq!(code(&["gen-data", "--n", "10", "--out", p(&data)]), 2);
    ok(&["gen-data", "--n", "10", "--out", p(&data), "--force"]);

    let bad = t.path().join("bad.cfg");
    fs::write(&bad, "encoder_width=3\n").unwrap();
    assert_eq!(code(&["train", "--config", p(&bad), "--data", p(&data), "--out", p(&run)]), 2);
}

#[test]
fn io_errors_exit_with_4() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    assert_eq!(code(&["train", "--data", p(&missing), "--out", p(&t.path().join("o"))]), 4);
    let junk = t.path().join("junk");
    fs::create_dir_all(&junk).unwrap();
    fs::write(junk.join("dataset.cfg"), "seed=1\nn_classes=3\nimage_size=8\nchannels=1\n").unwrap();
    fs::write(junk.join("train.fvtw"), b"not a container").unwrap();
    fs::write(junk.join("val.fvtw"), b"not a container").unwrap();
    assert_eq!(code(&["train", "--data", p(&junk), "--out", p(&t.path().join("o"))]), 4);
}

#[test]
fn fine_tune_arm_reports_no_frozen_parameters() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path());
    let run = t.path().join("ft");
    let stdout = ok(&[
        "train", "--arm", "plus_llm_ft", "--config", p(&cfg), "--data", p(&data), "--out", p(&run),
        "--llm-weights", "mock:seed=2",
    ]);
    assert!(stdout.lines().any(|l| l == "frozen_parameters=0"), "{stdout}");
    assert!(run.join("report.csv").exists() && run.join("checkpoint/model.fvtw").exists());
}

#[test]
fn analyze_rejects_stages_the_model_lacks() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path());
    let run = t.path().join("base");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let ckpt = run.join("final");
    let out = t.path().join("an");
    let res = vitlm(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--stage", "l2", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("valid stages: encoder"), "{err}");
    let stdout = ok(&["analyze", "--checkpoint", p(&ckpt), "--data", p(&data), "--stage", "encoder", "--out", p(&out)]);
    assert!(stdout.contains("amplification_identity_max_residual=n/a"));
}

#[test]
fn ablate_and_analyze_are_bit_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path());
    let mut stdouts = Vec::new();
    for run in ["a", "b"] {
        let out = t.path().join(run);
        let s = ok(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--llm-weights", "mock:seed=5"]);
        let an = t.path().join(format!("{run}_an"));
        let s2 = ok(&[
            "analyze", "--checkpoint", p(&out.join("plus_llm/final")), "--data", p(&data), "--out", p(&an), "--limit", "6",
        ]);
        stdouts.push((s, s2));
    }
    assert_eq!(stdouts[0], stdouts[1]);
    assert_eq!(snapshot(&t.path().join("a")), snapshot(&t.path().join("b")));
    assert_eq!(snapshot(&t.path().join("a_an")), snapshot(&t.path().join("b_an")));

    let table = fs::read_to_string(t.path().join("a/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 6, "{table}");
    let maps = fs::read_dir(t.path().join("a_an/maps")).unwrap().count();
    assert_eq!(maps, 12);
    assert!(stdouts[0].1.contains("amplification_identity_max_residual="));
}

#[test]
fn gradcheck_subcommand_passes() {
    let stdout = ok(&["gradcheck", "--seed", "1"]);
    assert!(stdout.lines().any(|l| l.starts_with("model_plus_llm_ft")));
    assert!(stdout.lines().last().unwrap().starts_with("worst="));
}
