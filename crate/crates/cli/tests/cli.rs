use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bcp_core::datakit::{load_volume, VolumeData};

const BIN: &str = env!("CARGO_BIN_EXE_bcp-lab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("BCP_LAB_THREADS", "1")
        .output()
        .expect("spawn bcp-lab")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_inputs(dir: &Path) {
    fs::write(
        dir.join("spec.json"),
        r#"{"n_labeled": 4, "n_unlabeled": 4, "n_val": 2, "n_test": 2, "shape": [16, 16], "seed": 5}"#,
    )
    .unwrap();
    fs::write(
        dir.join("config.json"),
        r#"{"net": {"in_channels": 1, "num_classes": 3, "base_width": 2, "depth": 2, "seed": 1},
            "pretrain_iters": 4, "selftrain_iters": 4, "batch_labeled": 2, "batch_unlabeled": 2,
            "log_every": 2, "checkpoint_every": 2}"#,
    )
    .unwrap();
}

#[test]
fn full_pipeline_produces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_inputs(d);
    let (data, pre, run_dir) = (d.join("data"), d.join("pre"), d.join("run"));
    ok(&["gen-data", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);
    ok(&["pretrain", "--config", p(&d.join("config.json")), "--data", p(&data), "--out", p(&pre)]);
    assert!(pre.join("final.ckpt").exists() && pre.join("pretrain_loss.csv").exists());
    ok(&[
        "train",
        "--config",
        p(&d.join("config.json")),
        "--data",
        p(&data),
        "--init",
        p(&pre.join("final.ckpt")),
        "--out",
        p(&run_dir),
    ]);
    for f in ["config.json", "metrics.csv", "final.ckpt", "step_000002.ckpt"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    let csv = d.join("eval.csv");
    ok(&["eval", "--checkpoint", p(&run_dir.join("final.ckpt")), "--data", p(&data), "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("volume_id,class,dice,jaccard,hd95,asd"));
    // 2 test volumes x 2 foreground classes
    assert_eq!(lines.count(), 4);

    let diag = d.join("diag.csv");
    ok(&["diagnose", "--checkpoint", p(&run_dir.join("final.ckpt")), "--data", p(&data), "--out", p(&diag)]);
    assert_eq!(fs::read_to_string(&diag).unwrap().lines().count(), 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let image = manifest["records"][0]["image"].as_str().unwrap();
    let pred = d.join("pred.u8");
    ok(&[
        "predict",
        "--checkpoint",
        p(&run_dir.join("final.ckpt")),
        "--input",
        p(&data.join(image)),
        "--out",
        p(&pred),
    ]);
    match load_volume(&pred).unwrap() {
        VolumeData::U8 { shape, data } => {
            assert_eq!(shape, vec![16, 16]);
            assert!(data.iter().all(|&c| c < 3));
        }
        other => panic!("expected labels, got {:?}", other.dtype()),
    }

    for (src, name) in [
        (run_dir.join("metrics.csv"), "m.svg"),
        (pre.join("pretrain_loss.csv"), "l.svg"),
        (csv.clone(), "e.svg"),
    ] {
        ok(&["plot", "--metrics", p(&src), "--out", p(&d.join(name))]);
        let svg = fs::read_to_string(d.join(name)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<path d=\"M"), "{name}");
    }
}

#[test]
fn degenerate_baseline_toggles_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_inputs(d);
    let data = d.join("data");
    ok(&["gen-data", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);
    ok(&[
        "train",
        "--config",
        p(&d.join("config.json")),
        "--data",
        p(&data),
        "--out",
        p(&d.join("run")),
        "--no-bcp",
        "--no-lcc",
        "--pretrain",
        "none",
    ]);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(snap["mixer_mode"], "none");
    assert_eq!(snap["use_lcc"], false);
    assert_eq!(snap["pretrain_mode"], "none");
}

#[test]
fn commands_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_inputs(d);
    let (data, spec) = (d.join("data"), d.join("spec.json"));
    let args = ["gen-data", "--spec", p(&spec), "--out", p(&data)];
    ok(&args);
    let first = fs::read(data.join("manifest.json")).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(data.join("manifest.json")).unwrap());
    let cfg = d.join("config.json");
    let (a, b) = (d.join("a"), d.join("b"));
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&a)]);
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&b)]);
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&b)]);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_inputs(d);

    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", p(d), "--out", p(&d.join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let first: serde_json::Value = serde_json::from_str(err.lines().next().unwrap()).unwrap();
    assert_eq!(first["code"], 2);
    assert!(err.contains("Usage:"), "{err}");

    fs::write(d.join("bad.json"), r#"{"selftrain_iters": 3, "unknown_knob": 1}"#).unwrap();
    let out = run(&["train", "--config", p(&d.join("bad.json")), "--data", p(d), "--out", p(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_knob"));

    // a corrupt checkpoint is a data error
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    fs::write(d.join("img.f32"), b"").unwrap();
    let out = run(&[
        "predict",
        "--checkpoint",
        p(&d.join("junk.ckpt")),
        "--input",
        p(&d.join("img.f32")),
        "--out",
        p(&d.join("o.u8")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");

    let out = Command::new(BIN)
        .args(["gen-data", "--out", p(&d.join("g"))])
        .env("BCP_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_every_flag_with_defaults() {
    for (sub, flags) in [
        ("gen-data", &["--spec", "--out"][..]),
        ("pretrain", &["--config", "--data", "--out", "--pretrain"][..]),
        (
            "train",
            &["--config", "--data", "--init", "--resume", "--out", "--no-bcp", "--no-lcc", "--pretrain", "--mixer"][..],
        ),
        ("eval", &["--checkpoint", "--data", "--split", "--out"][..]),
        ("diagnose", &["--checkpoint", "--data", "--out", "--features"][..]),
        ("predict", &["--checkpoint", "--input", "--out"][..]),
        ("plot", &["--metrics", "--out", "--kind", "--columns"][..]),
    ] {
        let help = ok(&[sub, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
    assert!(ok(&["eval", "--help"]).contains("[default: test]"));
    assert!(ok(&["diagnose", "--help"]).contains("[default: logit]"));
}
