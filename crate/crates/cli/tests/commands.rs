use std::path::Path;
use std::process::{Command, Output, Stdio};

use switchfold::checkpoint::MtrnnCheckpoint;
use switchfold::mtrnn::StateTrace;
use switchfold::pipeline::{Dataset, RolloutReport};
use switchfold::taskworld::{StepCounts, SubtaskId};
use switchfold_cli::TraceRecord;

const TINY: &str = r#"
[cae]
frame_stride = 40
holdout_every = 3

[cae.spec]
input_size = 64
channels = [3, 2, 2, 2]
dense = [4]
feature_dim = 10
batch_norm = [true, true, true]

[cae.train]
epochs = 1

[data]
train_positions = [1]

[mtrnn]
cf_count = 8
cs_count = 4
checkpoint_every = 2

[mtrnn.train]
max_epochs = 3
"#;

fn switchfold(dir: &Path, args: &[&str], stdin: &str) -> Output {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_switchfold"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--artifacts")
        .arg(dir.join("artifacts"))
        .args(args)
        .env_remove("SWITCHFOLD_ARTIFACTS")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), config).unwrap();
    dir
}

#[test]
fn stages_run_in_order_and_are_deterministic() {
    let dir = workspace(TINY);
    let art = dir.path().join("artifacts");

    let out = switchfold(dir.path(), &["train", "--stage", "mtrnn"], "");
    assert_eq!(code(&out), 3, "mtrnn before cae: {}", stderr(&out));
    assert!(stderr(&out).contains("train --stage cae"));

    let out = switchfold(dir.path(), &["train", "--stage", "cae"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(art.join("cae.ckpt").exists() && art.join("cae-loss.json").exists());
    assert!(stderr(&out).contains("resolved config"));

    let out = switchfold(dir.path(), &["gen-data", "--patterns", "CABE"], "");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("illegal"), "{}", stderr(&out));

    let out = switchfold(dir.path(), &["gen-data", "--positions", "1,3,4,6"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(Dataset::load(&art.join("dataset.bin")).unwrap().samples.len(), 12);
    assert!(art.join("normalization.json").exists());
    let out = switchfold(dir.path(), &["gen-data", "--positions", "1"], "");
    assert_eq!(code(&out), 0);
    assert_eq!(Dataset::load(&art.join("dataset.bin")).unwrap().samples.len(), 3);

    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = switchfold(dir.path(), &["--seed", "7", "train", "--stage", "mtrnn"], "");
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        runs.push(std::fs::read(art.join("mtrnn.ckpt")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    assert!(art.join("checkpoints/mtrnn-000002.ckpt").exists());
    assert!(art.join("mtrnn-loss.json").exists());

    let out = switchfold(dir.path(), &["train", "--stage", "mtrnn", "--epochs", "0"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(MtrnnCheckpoint::load(&art.join("mtrnn.ckpt")).unwrap().training.epochs, 0);

    let out = switchfold(dir.path(), &["rollout", "--pattern", "4", "--position", "2", "--schedule", "L,R,U,L"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = RolloutReport::load(&art.join("reports/rollout-BACE-p2-s0.json")).unwrap();
    assert_eq!(report.branches.len(), 4);
    assert!(art.join("traces/BACE-p2-s0.json").exists());

    let out = switchfold(dir.path(), &["rollout", "--pattern", "9", "--position", "2"], "");
    assert_eq!(code(&out), 2);
    let out = switchfold(dir.path(), &["rollout", "--position", "2", "--schedule", "L,R,X"], "");
    assert_eq!(code(&out), 2);

    let frames = dir.path().join("frames");
    let out = switchfold(
        dir.path(),
        &["rollout", "--position", "3", "--interactive", "--frames", frames.to_str().unwrap(), "--frame-stride", "60"],
        "what\nl\nr\nu\nl\n",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("unknown instruction"));
    let report = RolloutReport::load(&art.join("reports/rollout-free-p3-s0.json")).unwrap();
    assert_eq!(report.branches.len(), 4);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 5);

    let out = switchfold(dir.path(), &["rollout", "--position", "3", "--interactive"], "l\n");
    assert_eq!(code(&out), 1, "closed input aborts the rollout");

    let out = switchfold(dir.path(), &["evaluate", "--trials", "1"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(art.join("reports/evaluation-test.json").exists());
}

#[test]
fn bad_configs_are_usage_errors() {
    let dir = workspace("[mtrnn]\ncf_count = 8\nbogus = 1\n");
    let out = switchfold(dir.path(), &["evaluate"], "");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));

    let dir = workspace("[data]\ntrain_positions = [7]\n");
    assert_eq!(code(&switchfold(dir.path(), &["evaluate"], "")), 2);

    let dir = workspace("");
    assert_eq!(code(&switchfold(dir.path(), &["rollout", "--pattern", "4", "--position", "2"], "")), 3);
    assert_eq!(code(&switchfold(dir.path(), &["train", "--stage", "bogus"], "")), 2);
}

#[test]
fn artifacts_env_applies_without_the_flag() {
    let dir = workspace("");
    let root = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_switchfold"))
        .args(["analyze"])
        .env("SWITCHFOLD_ARTIFACTS", &root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("from-env"), "{}", stderr(&out));
}

fn synthetic_trace(phase: f64) -> StateTrace {
    let n = StepCounts::DESK.subtask_len() * 4;
    let row = |t: usize, a: f64, b: f64| vec![(t as f64 * a + phase).sin(), (t as f64 * b).cos(), t as f64 / n as f64];
    StateTrace {
        cf: (0..n).map(|t| row(t, 0.3, 0.11)).collect(),
        cs: (0..n).map(|t| row(t, 0.01, 0.02)).collect(),
        outputs: vec![vec![0.0]; n],
        phases: (0..n).map(|t| StepCounts::DESK.phase_at(t)).collect(),
    }
}

#[test]
fn analyze_writes_metrics_and_plot_data() {
    let dir = workspace("");
    let traces = dir.path().join("artifacts/traces");
    let out = switchfold(dir.path(), &["analyze"], "");
    assert_eq!(code(&out), 3, "no traces yet");

    std::fs::create_dir_all(&traces).unwrap();
    for (i, phase) in [0.0, 0.7].into_iter().enumerate() {
        let record = TraceRecord {
            label: format!("BACE@{}", i + 1),
            steps: StepCounts::DESK,
            subtasks: [SubtaskId::B, SubtaskId::A, SubtaskId::C, SubtaskId::E].map(Some).to_vec(),
            trace: synthetic_trace(phase),
        };
        std::fs::write(traces.join(format!("t{i}.json")), serde_json::to_string(&record).unwrap()).unwrap();
    }
    let out = switchfold(dir.path(), &["analyze"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("attractor ratio"));
    assert!(stdout.contains("Cs by subtask: 4 groups"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("artifacts/analysis/metrics.json")).unwrap()).unwrap();
    assert!(metrics["attractor"]["ratio"].as_f64().unwrap() >= 0.0);
    assert_eq!(metrics["cf_by_instruction"]["groups"].as_array().unwrap().len(), 3);
    let plots: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("artifacts/analysis/plot-data.json")).unwrap()).unwrap();
    assert_eq!(plots["cf"]["series"].as_array().unwrap().len(), 2);
    assert_eq!(plots["cs_means"].as_array().unwrap().len(), 8);

    let unlabelled = TraceRecord {
        label: "free@3".into(),
        steps: StepCounts::DESK,
        subtasks: vec![None; 4],
        trace: synthetic_trace(0.2),
    };
    let path = dir.path().join("free.json");
    std::fs::write(&path, serde_json::to_string(&unlabelled).unwrap()).unwrap();
    assert_eq!(code(&switchfold(dir.path(), &["analyze", path.to_str().unwrap()], "")), 2);
}
