//! Exercises the compiled binary stage by stage: generation, corruption,
//! pre-training, training with resume, evaluation, histogram export, and the
//! exit-code contract.

use std::path::Path;
use std::process::Command;

fn scanmix() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scanmix"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn scanmix");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    run_ok(scanmix().args([
        "datagen", "blobs", "--classes", "4", "--per-class", "100", "--dim", "2", "--seed", "1",
        "--out",
    ])
    .arg(p("d.csv")));
    run_ok(scanmix().args([
        "datagen", "blobs", "--classes", "4", "--per-class", "50", "--dim", "2", "--seed", "77",
        "--out",
    ])
    .arg(p("t.csv")));
    let noise_out = run_ok(scanmix()
        .args(["noise", "inject", "--kind", "symmetric", "--rate", "0.4", "--seed", "11", "--in"])
        .arg(p("d.csv"))
        .arg("--out")
        .arg(p("dn.csv")));
    assert!(noise_out.contains("flipped"));

    run_ok(scanmix()
        .args(["pretrain", "--epochs", "5", "--k", "10", "--seed", "3", "--in"])
        .arg(p("dn.csv"))
        .arg("--out-model")
        .arg(p("pre.bin"))
        .arg("--out-knn")
        .arg(p("knn.csv")));
    assert!(p("pre.bin").exists() && p("pre.bin.json").exists() && p("knn.csv").exists());

    std::fs::write(
        p("run.cfg"),
        "train.mode=scanmix\ntrain.epochs=4\ntrain.warmup_epochs=1\ntrain.k=10\n\
         train.checkpoint_every=2\npretrain.epochs=5\n",
    )
    .unwrap();
    run_ok(scanmix()
        .args(["train", "--config"])
        .arg(p("run.cfg"))
        .arg("--data")
        .arg(p("dn.csv"))
        .arg("--test")
        .arg(p("t.csv"))
        .arg("--model")
        .arg(p("pre.bin"))
        .arg("--knn")
        .arg(p("knn.csv"))
        .arg("--out-dir")
        .arg(p("out")));
    let metrics = std::fs::read_to_string(p("out").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // resuming from the mid-run checkpoint reproduces the tail of the metrics
    let ckpt = p("out").join("checkpoints/checkpoint_0002.bin");
    assert!(ckpt.exists(), "checkpoint missing");
    run_ok(scanmix()
        .args(["train", "--config"])
        .arg(p("run.cfg"))
        .arg("--data")
        .arg(p("dn.csv"))
        .arg("--test")
        .arg(p("t.csv"))
        .arg("--model")
        .arg(p("pre.bin"))
        .arg("--knn")
        .arg(p("knn.csv"))
        .arg("--resume")
        .arg(&ckpt)
        .arg("--out-dir")
        .arg(p("resumed")));
    let resumed = std::fs::read_to_string(p("resumed").join("metrics.jsonl")).unwrap();
    let tail: Vec<&str> = metrics.lines().skip(2).collect();
    let resumed_lines: Vec<&str> = resumed.lines().collect();
    assert_eq!(tail, resumed_lines, "resumed metrics differ");

    let eval_out = run_ok(scanmix()
        .args(["eval", "--model"])
        .arg(p("out").join("model.bin"))
        .arg("--data")
        .arg(p("t.csv")));
    assert!(eval_out.contains("accuracy"));
}

#[test]
fn run_subcommand_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "data.kind=blobs\ndata.classes=3\ndata.per_class=60\ndata.test_per_class=30\n\
         noise.kind=symmetric\nnoise.rate=0.3\ntrain.mode=ssl_only\ntrain.epochs=2\n\
         train.warmup_epochs=1\nout.dump_divider=true\n",
    )
    .unwrap();
    run_ok(scanmix()
        .args(["run", "--config"])
        .arg(dir.path().join("run.cfg"))
        .arg("--out-dir")
        .arg(dir.path().join("out")));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap())
            .unwrap();
    for (_, path) in manifest["artifacts"].as_object().unwrap() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }

    // histogram export over the epoch-1 dump
    let dump = dir.path().join("out/divider/divide_epoch_0001.csv");
    run_ok(scanmix()
        .args(["export-hist", "--in"])
        .arg(&dump)
        .args(["--bins", "10", "--out"])
        .arg(dir.path().join("hist.csv")));
    let hist = std::fs::read_to_string(dir.path().join("hist.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,clean_count,noisy_count"));
    assert_eq!(hist.lines().count(), 11);
}

#[test]
fn exit_codes_follow_the_contract() {
    // validation error -> 1
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "noise.rate=1.5\n").unwrap();
    let out = scanmix()
        .args(["run", "--config"])
        .arg(dir.path().join("bad.cfg"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise.rate"));

    // runtime error (missing input file) -> 2
    let out = scanmix()
        .args(["eval", "--model", "/nonexistent/model.bin", "--data", "/nonexistent/t.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // bad flags -> 1
    let out = scanmix().args(["datagen", "blobs", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // help exits 0
    let out = scanmix().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
