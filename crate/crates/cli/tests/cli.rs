use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_trajdistill");

const TINY: &str = r#"seed = 1
out_dir = "run"
checkpoint_every = 3

[dataset]
format = "raw_tensor"
train = "train.rawt"
test = "test.rawt"
classes = 3

[model]
arch = "mlp"
depth = 1
width = 8

[buffer]
experts = 2
epochs = 3
batch_size = 128

[distill]
iterations = 8
max_step = 3
retrain_points = 1

[eval]
runs = 2
epochs = 4
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with(dir: &Path, args: &[&str], code: i32, needle: &str) {
    let out = run(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(stderr.contains(needle), "{args:?}: expected {needle:?} in {stderr}");
}

/// A directory with the toy data, a tiny config and a trajectory buffer.
fn workspace(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen-toy", "--out", "."]);
    fs::write(dir.path().join("tiny.toml"), config).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "buffer"]);
    dir
}

fn rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn pipeline_writes_expected_counts() {
    let config = TINY.replace(
        "[eval]\n",
        "[eval]\nmodels = [{ arch = \"mlp\", depth = 1, width = 8 }, { arch = \"convnet_d\", depth = 1, width = 4 }]\n",
    );
    let ws = workspace(&config);
    let dir = ws.path();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/buffer_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experts"], 2);
    assert_eq!(manifest["steps"], 3);
    assert_eq!(manifest["final_accuracy"].as_array().unwrap().len(), 2);

    ok(dir, &["--config", "tiny.toml", "distill"]);
    let metrics = rows(dir.join("run/metrics.csv"));
    assert_eq!(metrics.len(), 8);
    assert_eq!(metrics[0][0], "1");
    assert_eq!(metrics[7][0], "8");
    assert!(dir.join("run/synthetic.synd").is_file());
    assert!(dir.join("run/checkpoint.dsck").is_file());

    ok(dir, &["--config", "tiny.toml", "eval"]);
    let runs = rows(dir.join("run/eval_runs.csv"));
    assert_eq!(runs.len(), 4);
    let summary = rows(dir.join("run/eval_summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0][0], "mlp");
    assert_eq!(summary[1][0], "convnet_d");
    // Every row carries the same config hash as the metrics log.
    assert!(summary.iter().all(|r| r.last() == metrics[0].last()));
}

#[test]
fn reruns_are_byte_identical() {
    let ws = workspace(TINY);
    let dir = ws.path();
    ok(dir, &["--config", "tiny.toml", "--out", "b", "buffer"]);
    assert_eq!(
        fs::read(dir.join("run/trajectories.tjbf")).unwrap(),
        fs::read(dir.join("b/trajectories.tjbf")).unwrap()
    );
    ok(dir, &["--config", "tiny.toml", "distill"]);
    ok(
        dir,
        &["--config", "tiny.toml", "--out", "b", "--threads", "1", "distill"],
    );
    for f in ["metrics.csv", "synthetic.synd"] {
        assert_eq!(
            fs::read(dir.join("run").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = workspace(TINY);
    let dir = ws.path();
    ok(dir, &["--config", "tiny.toml", "distill"]);
    ok(
        dir,
        &[
            "--config",
            "tiny.toml",
            "--out",
            "r",
            "distill",
            "run/trajectories.tjbf",
            "--halt-after",
            "4",
        ],
    );
    assert_eq!(rows(dir.join("r/metrics.csv")).len(), 4);
    ok(
        dir,
        &[
            "--config",
            "tiny.toml",
            "--out",
            "r",
            "distill",
            "run/trajectories.tjbf",
            "--resume",
        ],
    );
    for f in ["metrics.csv", "synthetic.synd"] {
        assert_eq!(
            fs::read(dir.join("run").join(f)).unwrap(),
            fs::read(dir.join("r").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn input_problems_exit_with_code_two() {
    let ws = workspace(TINY);
    let dir = ws.path();

    fs::write(dir.join("missing.toml"), TINY.replace("train.rawt", "nowhere.rawt")).unwrap();
    fails_with(dir, &["--config", "missing.toml", "buffer"], 2, "dataset.train");

    fs::write(dir.join("long.toml"), TINY.replace("max_step = 3", "max_step = 4")).unwrap();
    fails_with(dir, &["--config", "long.toml", "distill"], 2, "max_step");

    fs::write(dir.join("typo.toml"), TINY.replace("iterations", "iteratons")).unwrap();
    fails_with(dir, &["--config", "typo.toml", "distill"], 2, "iteratons");

    fs::write(dir.join("notest.toml"), TINY.replace("test = \"test.rawt\"\n", "")).unwrap();
    ok(dir, &["--config", "tiny.toml", "distill"]);
    fails_with(dir, &["--config", "notest.toml", "eval"], 2, "dataset.test");

    let mut bytes = fs::read(dir.join("run/synthetic.synd")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(dir.join("corrupt.synd"), bytes).unwrap();
    fails_with(
        dir,
        &["--config", "tiny.toml", "eval", "corrupt.synd"],
        2,
        "corrupt.synd",
    );

    fails_with(
        dir,
        &["--config", "tiny.toml", "distill", "train.rawt"],
        2,
        "train.rawt",
    );
    fails_with(dir, &["buffer"], 2, "--config");
}

const HEADER: &str = "iteration,t,start,expert,matching_loss,overlap_loss,mmd,eta,event,config_hash\n";

#[test]
fn report_aggregates_per_iteration() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(
        d.join("a.csv"),
        format!("{HEADER}1,1,0,0,1.0,-2.0,0.5,0.01,snapshot,aa\n2,1,0,1,0.5,-3.0,0.25,0.02,,aa\n3,2,0,0,0.25,-4.0,1.0,0.03,retrain,aa\n"),
    )
    .unwrap();
    fs::write(
        d.join("b.csv"),
        format!(
            "{HEADER}1,1,0,1,3.0,-1.0,1.5,0.03,,bb\n2,1,0,0,1.5,-2.0,0.75,0.04,,bb\n3,2,0,1,0.75,-6.0,2.0,0.05,,bb\n"
        ),
    )
    .unwrap();
    ok(d, &["report", "a.csv", "b.csv", "--out", "rep"]);
    let text = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,t,runs,matching_loss_mean,matching_loss_min,matching_loss_max,\
         overlap_loss_mean,overlap_loss_min,overlap_loss_max,mmd_mean,mmd_min,mmd_max,\
         eta_mean,eta_min,eta_max,config_hashes"
    );
    let got: Vec<Vec<String>> = rows(d.join("rep/report.csv"));
    assert_eq!(got.len(), 3);
    let num = |s: &str| s.parse::<f64>().unwrap();
    // Iteration 1: matching (1 + 3) / 2 = 2, overlap (-2 - 1) / 2 = -1.5,
    // mmd (0.5 + 1.5) / 2 = 1, eta (0.01 + 0.03) / 2 = 0.02.
    assert_eq!(&got[0][..3], ["1", "1", "2"]);
    assert_eq!(num(&got[0][3]), 2.0);
    assert_eq!((num(&got[0][4]), num(&got[0][5])), (1.0, 3.0));
    assert_eq!(num(&got[0][6]), -1.5);
    assert_eq!((num(&got[0][7]), num(&got[0][8])), (-2.0, -1.0));
    assert_eq!(num(&got[0][9]), 1.0);
    assert!((num(&got[0][12]) - 0.02).abs() < 1e-15);
    // Iteration 3: overlap (-4 - 6) / 2 = -5, mmd (1 + 2) / 2 = 1.5.
    assert_eq!(got[2][1], "2");
    assert_eq!(num(&got[2][6]), -5.0);
    assert_eq!((num(&got[2][7]), num(&got[2][8])), (-6.0, -4.0));
    assert_eq!(num(&got[2][9]), 1.5);
    assert_eq!(got[2][15], "aa;bb");
}

#[test]
fn report_rejects_other_schemas() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("a.csv"), format!("{HEADER}1,1,0,0,1.0,-2.0,0.5,0.01,,aa\n")).unwrap();
    fs::write(d.join("runs.csv"), "model,depth,width,run\nmlp,1,8,0\n").unwrap();
    fails_with(d, &["report", "a.csv", "runs.csv"], 2, "not a metrics file");
    fails_with(d, &["report", "absent.csv"], 2, "absent.csv");
}
