use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "data.foam.height=16",
    "--set",
    "data.foam.width=16",
    "--set",
    "data.foam.cells=3",
    "--set",
    "data.train=6",
    "--set",
    "data.augmentations=0",
];

fn hmrf(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmrf"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hmrf(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn generate_train_segment_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut gen = vec!["gen-data", "--set", "data.val=1", "--set", "data.test=3"];
    gen.extend(TINY);
    ok(&data, &gen);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("resolved_config.json").exists());

    let run = dir.path().join("run");
    let data_arg = data.to_str().unwrap();
    ok(&run, &["train", "--data", data_arg, "--epochs", "1", "--set", "train.batch_size=2"]);
    for file in ["model.ckpt", "train_log.csv", "timing.csv", "resolved_config.json"] {
        assert!(run.join(file).exists(), "{file}");
    }

    let seg = dir.path().join("seg");
    let test_images = data.join("test/images");
    let ckpt = run.join("model.ckpt");
    ok(&seg, &["segment", "--checkpoint", ckpt.to_str().unwrap(), "--images", test_images.to_str().unwrap()]);
    assert_eq!(std::fs::read_dir(seg.join("labels")).unwrap().count(), 3);

    let eval = dir.path().join("eval");
    let labels = seg.join("labels");
    let printed = ok(&eval, &["evaluate", "--truth", labels.to_str().unwrap(), "--pred", labels.to_str().unwrap()]);
    assert_eq!(printed.trim().parse::<f64>().unwrap(), 1.0);
    assert!(eval.join("report.csv").exists() && eval.join("summary.json").exists());
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hmrf(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(hmrf(dir.path(), &["gen-data", "--set", "train.bogus=1"]).status.code(), Some(1));
    assert_eq!(hmrf(dir.path(), &["gen-data", "--set", "no_equals_sign"]).status.code(), Some(1));
    let missing = dir.path().join("missing.ckpt");
    let o = hmrf(dir.path(), &["segment", "--checkpoint", missing.to_str().unwrap(), "--images", "."]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = hmrf(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("baseline-emicm"));
}

#[test]
fn overrides_land_in_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data", "--seed", "9", "--set", "data.val=0", "--set", "data.test=1"];
    args.extend(TINY);
    ok(dir.path(), &args);
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["settings"]["data"]["foam"]["height"], 16);
    assert_eq!(snap["settings"]["train"]["seed"], 9);
}
