use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn zsl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsl"))
        .args(args)
        .env("ZSL_DATA_DIR", dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn zsl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = zsl(dir, args);
    assert_eq!(
        code(&out),
        0,
        "zsl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

const SYNTH: &[&str] = &[
    "synth",
    "--classes",
    "10",
    "--per-class",
    "12",
    "--image-dim",
    "24",
    "--text-dim",
    "12",
    "--sem-dim",
    "8",
    "--noise",
    "0.02",
    "--seed",
    "3",
];
const TRAIN: &[&str] = &[
    "train",
    "--semantic-activation",
    "linear",
    "--epochs",
    "40",
    "--batch",
    "16",
    "--seed",
    "5",
];

/// Synthetic data split 7 seen / 3 unseen.
fn prepared() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), SYNTH);
    ok(dir.path(), &["split", "--unseen", "3", "--seed", "2"]);
    dir
}

fn trained() -> TempDir {
    let dir = prepared();
    ok(dir.path(), TRAIN);
    dir
}

#[test]
fn synth_writes_four_files() {
    let dir = TempDir::new().unwrap();
    let out = ok(
        dir.path(),
        &[
            "synth",
            "--classes",
            "20",
            "--per-class",
            "30",
            "--noise",
            "0",
        ],
    );
    assert!(out.contains("20 classes"));
    for f in [
        "images.zslf",
        "texts.zslf",
        "class_vectors.zslf",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 600);
}

#[test]
fn synth_zero_classes_is_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&zsl(dir.path(), &["synth", "--classes", "0"])), 2);
}

#[test]
fn split_is_reproducible_and_bounded() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), SYNTH);
    let out = ok(dir.path(), &["split", "--unseen", "3", "--seed", "7"]);
    assert!(out.contains("seen=7 unseen=3"), "{out}");
    let first = fs::read(dir.path().join("split.json")).unwrap();
    ok(dir.path(), &["split", "--unseen", "3", "--seed", "7"]);
    assert_eq!(fs::read(dir.path().join("split.json")).unwrap(), first);
    assert_eq!(code(&zsl(dir.path(), &["split", "--unseen", "10"])), 2);
    assert_eq!(code(&zsl(dir.path(), &["split", "--unseen", "0"])), 2);
}

#[test]
fn split_with_missing_inputs_is_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&zsl(dir.path(), &["split", "--unseen", "3"])), 2);
}

#[test]
fn zero_epochs_gives_empty_history() {
    let dir = prepared();
    ok(dir.path(), &["train", "--epochs", "0"]);
    let log = fs::read_to_string(dir.path().join("run/history.log")).unwrap();
    assert!(log.is_empty());
    assert!(dir.path().join("run/model.zslc").is_file());
}

#[test]
fn training_is_deterministic() {
    let dir = prepared();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = TRAIN.to_vec();
    args.truncate(TRAIN.len() - 6); // drop --epochs 40 --batch 16 --seed 5
    args.extend(["--epochs", "5", "--batch", "16", "--seed", "5", "--out"]);
    let log_a = ok(dir.path(), &[&args[..], &[a.to_str().unwrap()]].concat());
    let log_b = ok(dir.path(), &[&args[..], &[b.to_str().unwrap()]].concat());
    let lines: Vec<&str> = log_a.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines
        .iter()
        .all(|l| l.contains(" loss=") && l.contains(" top1=")));
    assert_eq!(sha(&a.join("model.zslc")), sha(&b.join("model.zslc")));
    assert_eq!(sha(&a.join("best.zslc")), sha(&b.join("best.zslc")));
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .filter(|l| l.starts_with("epoch="))
            .map(|l| l.split(" secs=").next().unwrap().to_owned())
            .collect()
    };
    assert_eq!(strip(&log_a), strip(&log_b));
}

#[test]
fn divergence_exits_numeric() {
    let dir = prepared();
    let out = zsl(
        dir.path(),
        &[
            "train",
            "--semantic-activation",
            "linear",
            "--lr",
            "1e6",
            "--epochs",
            "20",
            "--patience",
            "0",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn eval_reports_both_modes() {
    let dir = trained();
    let text = ok(dir.path(), &["eval", "--ks", "1,3"]);
    assert!(
        text.contains("unseen_only") && text.contains("all_classes"),
        "{text}"
    );
    assert!(text.contains("top-1") && text.contains("top-3"));

    let json = ok(dir.path(), &["eval", "--ks", "1,3", "--format", "json"]);
    let v: Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["n"], 36);
    assert_eq!(v["config"]["candidate_mode"], "unseen_only");
    assert_eq!(v["modes"]["unseen_only"]["accuracy"]["top3"], 1.0);
    let t1 = v["accuracy"]["top1"].as_f64().unwrap();
    let all1 = v["modes"]["all_classes"]["accuracy"]["top1"]
        .as_f64()
        .unwrap();
    assert!(t1 >= all1);

    let again = ok(
        dir.path(),
        &["eval", "--ks", "1,3", "--format", "json", "--brute-force"],
    );
    let w: Value = serde_json::from_str(&again).unwrap();
    assert_eq!(v["samples"], w["samples"]);
    assert_eq!(v["accuracy"], w["accuracy"]);
}

#[test]
fn eval_json_is_reproducible() {
    let dir = trained();
    let path = dir.path().join("report.json");
    let args = [
        "eval",
        "--ks",
        "1,3",
        "--format",
        "json",
        "--out",
        path.to_str().unwrap(),
    ];
    ok(dir.path(), &args);
    let first = fs::read(&path).unwrap();
    ok(dir.path(), &args);
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn default_ks_exceed_small_candidate_set() {
    let dir = trained();
    // three unseen classes cannot support top-5
    assert_eq!(code(&zsl(dir.path(), &["eval"])), 2);
}

#[test]
fn seen_protocol_with_repeats() {
    let dir = trained();
    let text = ok(
        dir.path(),
        &[
            "eval",
            "--mode",
            "seen",
            "--ks",
            "1,5",
            "--holdout",
            "0.3",
            "--seed",
            "7",
            "--epochs",
            "20",
        ],
    );
    assert!(text.contains("seen_only"), "{text}");
    let json = ok(
        dir.path(),
        &[
            "eval",
            "--mode",
            "seen",
            "--ks",
            "1,5",
            "--seed",
            "7",
            "--epochs",
            "5",
            "--repeats",
            "2",
            "--format",
            "json",
        ],
    );
    let v: Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["repeats"].as_array().unwrap().len(), 2);
    // 12 per class, 7 classes: round(3.6) = 4 held out per class
    assert_eq!(v["repeats"][0]["n"], 28);
    assert!(v["summary"]["seen_only"]["top1"]["mean"].is_number());
    assert_eq!(
        code(&zsl(dir.path(), &["eval", "--ks", "1", "--repeats", "2"])),
        2
    );
}

#[test]
fn missing_checkpoint_exits_four() {
    let dir = prepared();
    let out = zsl(dir.path(), &["eval", "--ks", "1"]);
    assert_eq!(code(&out), 4);
    let out = zsl(
        dir.path(),
        &[
            "predict",
            "--image-id",
            "x",
            "--checkpoint",
            "/nonexistent.zslc",
        ],
    );
    assert_eq!(code(&out), 4);
}

#[test]
fn mismatched_checkpoint_exits_four() {
    let dir = trained();
    let other = TempDir::new().unwrap();
    ok(
        other.path(),
        &[
            "synth",
            "--classes",
            "10",
            "--per-class",
            "4",
            "--image-dim",
            "20",
        ],
    );
    ok(other.path(), &["split", "--unseen", "3"]);
    let ckpt = dir.path().join("run/model.zslc");
    let out = zsl(
        other.path(),
        &["eval", "--ks", "1", "--checkpoint", ckpt.to_str().unwrap()],
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(dir.path().join("junk.zslc"), b"not a checkpoint").unwrap();
    let junk = dir.path().join("junk.zslc");
    let out = zsl(
        dir.path(),
        &["eval", "--ks", "1", "--checkpoint", junk.to_str().unwrap()],
    );
    assert_eq!(code(&out), 4);
}

fn first_seen_sample(dir: &Path) -> (String, String) {
    let split: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("split.json")).unwrap()).unwrap();
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let seen: Vec<&str> = split["seen"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let s = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| seen.contains(&s["class_label"].as_str().unwrap()))
        .unwrap();
    (
        s["image_id"].as_str().unwrap().into(),
        s["class_label"].as_str().unwrap().into(),
    )
}

#[test]
fn predict_ranks_true_label() {
    let dir = trained();
    let (image, label) = first_seen_sample(dir.path());
    let out = ok(dir.path(), &["predict", "--image-id", &image, "--k", "5"]);
    let labels: Vec<&str> = out.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(labels.len(), 5);
    assert!(labels.contains(&label.as_str()), "{out}");
    let dists: Vec<f64> = out
        .lines()
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(dists.windows(2).all(|w| w[0] <= w[1]));

    let one = ok(dir.path(), &["predict", "--image-id", &image, "--k", "1"]);
    assert_eq!(one.lines().count(), 1);
    assert_eq!(
        code(&zsl(
            dir.path(),
            &["predict", "--image-id", &image, "--k", "0"]
        )),
        2
    );
    assert_eq!(
        code(&zsl(
            dir.path(),
            &["predict", "--image-id", "no_such_image"]
        )),
        2
    );
    assert_eq!(
        code(&zsl(
            dir.path(),
            &["predict", "--image-id", &image, "--text-id", "no_such_doc"]
        )),
        2
    );
}

#[test]
fn predict_from_raw_vectors() {
    let dir = trained();
    let image = vec!["0.1"; 24].join(",");
    let text = ["-0.2"; 12].join(",");
    let out = ok(
        dir.path(),
        &[
            "predict",
            "--image-vector",
            &image,
            "--text-vector",
            &text,
            "--k",
            "3",
            "--candidates",
            "unseen",
            "--format",
            "json",
        ],
    );
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 3);
    let short = ["0.1"; 5].join(",");
    let out = zsl(
        dir.path(),
        &["predict", "--image-vector", &short, "--text-vector", &text],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--seed", "3"]);
    let value: f64 = out
        .split_whitespace()
        .find_map(|t| t.strip_prefix("max_rel_err="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(value < 1e-4);
    ok(dir.path(), &["gradcheck", "--seed", "4", "--batch-stats"]);
}

#[test]
fn locked_output_dir_is_refused() {
    let dir = TempDir::new().unwrap();
    let lock = File::create(dir.path().join(".zsl.lock")).unwrap();
    lock.lock().unwrap();
    assert_eq!(code(&zsl(dir.path(), &["synth"])), 2);
    lock.unlock().unwrap();
    ok(dir.path(), &["synth"]);
}
