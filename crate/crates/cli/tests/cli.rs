use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outlierseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let tiles = tmp.path().join("tiles");
    let run_dir = tmp.path().join("run");

    ok(&["synth", "--out", p(&raw), "--count", "6", "--size", "32", "--seed", "3"]);
    assert_eq!(std::fs::read_dir(raw.join("images")).unwrap().count(), 6);

    let out = ok(&[
        "tile", "--input", p(&raw), "--out", p(&tiles), "--sizes", "16", "--train-fraction", "0.5",
    ]);
    assert!(out.contains("patches"), "{out}");
    assert!(tiles.join("manifest.jsonl").is_file());

    let out = ok(&[
        "train",
        "--seed",
        "1",
        &format!("--train-data={}", p(&tiles)),
        &format!("--val-data={}", p(&tiles)),
        &format!("--out-dir={}", p(&run_dir)),
        "--epochs=2",
        "--sampling-start-epoch=1",
        "--batch-size=4",
        "--pixels-per-image=50",
        "--sample-size=500",
        "--selection-count=50",
        "--queue-capacity=200",
        "--infer-patch=16",
        "--infer-margin=4",
        "--strategy=norm",
        "--gaussian-log=true",
    ]);
    assert!(out.contains("epoch 2/2"), "{out}");
    for f in ["final.ckpt", "loss.csv", "run.json", "config.toml", "gaussian.csv", "checkpoints/epoch-0002.ckpt"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let loss = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,lr,ce,dice,ce_out,dice_out,combined"));
    assert!(loss.contains(",norm,"));

    let ckpt = run_dir.join("final.ckpt");
    let csv = tmp.path().join("eval.csv");
    let json = tmp.path().join("eval.json");
    let out = ok(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&tiles), "--split", "test", "--patch", "16", "--margin", "4",
        "--csv", p(&csv), "--json", p(&json),
    ]);
    assert!(out.contains("DSC="), "{out}");
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("id,dsc,hd95,iou"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(summary["mean_dsc"].is_number());

    let image = raw.join("images/synth_0000.png");
    let mask = tmp.path().join("pred.png");
    let over = tmp.path().join("over.png");
    let probs = tmp.path().join("probs.png");
    ok(&[
        "infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&mask), "--overlay", p(&over),
        "--probs", p(&probs), "--patch", "16", "--margin", "4",
    ]);
    assert!(mask.is_file() && over.is_file() && probs.is_file());

    let over2 = tmp.path().join("over2.png");
    ok(&["overlay", "--image", p(&image), "--mask", p(&mask), "--out", p(&over2)]);
    assert_eq!(std::fs::read(&over).unwrap(), std::fs::read(&over2).unwrap());

    // Resuming a finished run is a no-op that rewrites the same checkpoint.
    let before = std::fs::read(&ckpt).unwrap();
    ok(&[
        "train",
        "--config",
        p(&run_dir.join("config.toml")),
        "--seed",
        "1",
        "--resume",
        p(&run_dir.join("checkpoints/epoch-0002.ckpt")),
    ]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
}

#[test]
fn seed_is_mandatory_for_train() {
    let out = run(&["train", "--epochs=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let out = run(&["train", "--seed", "1", "--no-such-key=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = run(&["train", "--seed", "1", "--epochs=5", "--sampling-start-epoch=9", "--train-data=x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let out = run(&["eval", "--checkpoint", p(&missing), "--data", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"{\"format\":\"nope\"}\n").unwrap();
    let out = run(&["infer", "--checkpoint", p(&bad), "--image", p(&missing), "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["train", "--seed", "1", &format!("--train-data={}", p(&tmp.path().join("absent")))]);
    assert_eq!(out.status.code(), Some(3));
}
