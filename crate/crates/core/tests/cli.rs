use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use calib_ensemble::cli::{EvaluationSummary, HeadsManifest, MetaSidecar};
use calib_ensemble::data::FeatureDataset;
use calib_ensemble::heads::LinearHead;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib-ensemble"))
        .current_dir(dir)
        .env_remove("CALIB_ENSEMBLE_JOBS")
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
    String::from_utf8(out.stdout).unwrap()
}

fn gen_small(dir: &Path) {
    ok(
        dir,
        &[
            "gen",
            "--kind",
            "clusters",
            "--classes",
            "4",
            "--dim",
            "6",
            "--n",
            "800",
            "--sep",
            "6",
            "--noise",
            "0.2",
            "--seed",
            "7",
            "--out",
            "data",
        ],
    );
}

const TRAIN: &[&str] = &[
    "--train",
    "data/train.fds",
    "--seed",
    "7",
    "-m",
    "3",
    "--head-epochs",
    "15",
];

#[test]
fn gen_writes_two_loadable_deterministic_files() {
    let dir = TempDir::new().unwrap();
    let args = [
        "gen",
        "--kind",
        "clusters",
        "--classes",
        "10",
        "--dim",
        "32",
        "--n",
        "5000",
        "--sep",
        "8",
        "--noise",
        "0.2",
        "--seed",
        "7",
        "--out",
    ];
    ok(dir.path(), &[&args[..], &["a"]].concat());
    ok(dir.path(), &[&args[..], &["b"]].concat());
    let train = FeatureDataset::load(dir.path().join("a/train.fds")).unwrap();
    let test = FeatureDataset::load(dir.path().join("a/test.fds")).unwrap();
    assert_eq!(train.len() + test.len(), 5000);
    assert_eq!((train.dim(), train.classes()), (32, 10));
    for f in ["train.fds", "test.fds"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn invalid_noise_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["gen", "--noise", "1.5", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        run(dir.path(), &["evaluate", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["train-meta", "--meta-kinds", "XL"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_heads_writes_files_and_histories() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    ok(
        dir.path(),
        &[&["train-heads"], TRAIN, &["--out", "a", "--jobs", "2"]].concat(),
    );
    ok(
        dir.path(),
        &[&["train-heads"], TRAIN, &["--out", "b"]].concat(),
    );
    let manifest: HeadsManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/heads.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.heads.len(), 3);
    for (i, rec) in manifest.heads.iter().enumerate() {
        assert_eq!(rec.seed, 7 + 1 + i as u64);
        assert!(!rec.history.is_empty());
        let name = format!("head_{i}.hdw");
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(&name)).unwrap());
        let head = LinearHead::from_bytes(&a).unwrap();
        assert_eq!((head.input_dim(), head.classes()), (6, 4));
    }
}

#[test]
fn diverging_head_exits_with_training_code() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    let out = run(
        dir.path(),
        &[&["train-heads"], TRAIN, &["--head-lr", "1e300"]].concat(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head 0"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_meta_without_heads_lists_missing_files() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    let out = run(dir.path(), &[&["train-meta"], TRAIN].concat());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("head_0.hdw") && err.contains("head_2.hdw"),
        "{err}"
    );
}

#[test]
fn slpc_file_size_and_single_epoch_history() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    ok(dir.path(), &[&["train-heads"], TRAIN].concat());
    let meta = [
        &["train-meta"],
        TRAIN,
        &["--meta-kinds", "SLpC,DL", "--meta-epochs", "1"],
    ]
    .concat();
    ok(dir.path(), &meta);
    let bytes = fs::read(dir.path().join("out/meta_SLpC.mmd")).unwrap();
    let (c, m) = (4, 3);
    assert_eq!(bytes.len(), 4 + 1 + 4 + 4 + 4 + 4 + 8 + 4 * c * (m + 1));
    let sidecar: MetaSidecar =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/meta_DL.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar.history.len(), 1);
    assert_eq!(sidecar.seed, 7 + 2000 + 1);

    let first = fs::read(dir.path().join("out/meta_DL.mmd")).unwrap();
    ok(dir.path(), &meta);
    assert_eq!(first, fs::read(dir.path().join("out/meta_DL.mmd")).unwrap());
}

#[test]
fn heads_only_evaluation_and_report() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    ok(dir.path(), &[&["train-heads"], TRAIN].concat());
    ok(
        dir.path(),
        &[
            "evaluate",
            "--test",
            "data/test.fds",
            "-m",
            "3",
            "--no-meta",
            "--bins",
            "10",
        ],
    );
    let text = fs::read_to_string(dir.path().join("out/summary.json")).unwrap();
    let summary: EvaluationSummary = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = summary.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Head 1", "Head 2", "Head 3", "Avg.", "Vot."]);
    assert_eq!(summary.config.bins, 10);
    assert_eq!(summary.rows[0].params, 6 * 4 + 4);
    assert_eq!(summary.rows[3].params, 3 * (6 * 4 + 4));
    for r in &summary.rows {
        let csv = fs::read_to_string(dir.path().join("out").join(&r.reliability_csv)).unwrap();
        assert_eq!(csv.lines().count(), 11);
    }

    let table = ok(dir.path(), &["report", "out/summary.json"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["Name", "Acc", "ECE", "MCE", "Params"]);
    assert!(lines[4].starts_with("Avg.") && lines[5].starts_with("Vot."));
    assert_eq!(table, ok(dir.path(), &["report", "out/summary.json"]));
}

#[test]
fn full_evaluation_row_count() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    ok(dir.path(), &[&["train-heads"], TRAIN].concat());
    ok(
        dir.path(),
        &[
            &["train-meta"],
            TRAIN,
            &["--meta-epochs", "2", "--meta-input", "logits"],
        ]
        .concat(),
    );
    ok(
        dir.path(),
        &[
            "evaluate",
            "--test",
            "data/test.fds",
            "-m",
            "3",
            "--seed",
            "7",
        ],
    );
    let summary: EvaluationSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.rows.len(), 3 + 2 + 4);
    let sl = summary.row("SL").unwrap();
    assert_eq!(sl.params, 3 * 28 + (12 * 4 + 4));
}

#[test]
fn miscalibrated_pass_through_head_reports_twenty_percent() {
    let dir = TempDir::new().unwrap();
    ok(
        dir.path(),
        &[
            "gen",
            "--kind",
            "miscal",
            "--n",
            "10000",
            "--classes",
            "10",
            "--confidence",
            "0.8",
            "--accuracy",
            "0.6",
            "--seed",
            "3",
            "--out",
            "fx",
        ],
    );
    ok(
        dir.path(),
        &[
            "evaluate",
            "--test",
            "fx/labels.fds",
            "--probs",
            "fx/probs.prb",
            "--no-meta",
            "--out",
            "ev",
        ],
    );
    let summary: EvaluationSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev/summary.json")).unwrap())
            .unwrap();
    let head = summary.row("Head 1").unwrap();
    assert!((head.ece - 20.0).abs() <= 2.0, "ECE {}%", head.ece);
    assert_eq!(summary.rows.len(), 3);
}

#[test]
fn malformed_summary_is_format_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.json"), "{\"rows\": [").unwrap();
    let out = run(dir.path(), &["report", "s.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

#[test]
fn jobs_env_var_is_validated() {
    let dir = TempDir::new().unwrap();
    gen_small(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_calib-ensemble"))
        .current_dir(dir.path())
        .env("CALIB_ENSEMBLE_JOBS", "0")
        .args([&["train-heads"], TRAIN].concat())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
