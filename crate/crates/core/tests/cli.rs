use std::path::Path;
use std::process::{Command, Output};

fn seqrelax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrelax")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.txt");
    std::fs::write(
        &path,
        "seq_len = 3\ndataset_size = 200\nheldout_size = 50\neval_batch_size = 100\nbatch_size = 20\n\
         adversarial_epochs = 2\ngen_embed = 4\ngen_hidden = 6\ndisc_embed = 4\ndisc_hidden = 6\ncv_channels = 3\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_requested_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.txt");
    let status = seqrelax(&["gen-data", "--n", "10000", "--seq-len", "5", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10000);
    assert!(text.lines().all(|l| l.len() == 5));
}

#[test]
fn unknown_estimator_is_a_usage_error() {
    let out = seqrelax(&["train", "--estimator", "gumbel"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn identical_train_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = seqrelax(&["train", "--estimator", "relax", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("config.txt").exists());
        assert!(out_dir.join("model.ckpt").exists());
        metrics.push(std::fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(String::from_utf8_lossy(&metrics[0]).lines().count(), 4);
}

#[test]
fn lambda_sweep_writes_one_directory_per_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = seqrelax(&[
        "train", "--estimator", "rebar", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap(), "--lambda-sweep",
        "0.5,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("lambda_0.5/metrics.csv").exists());
    assert!(out_dir.join("lambda_2/metrics.csv").exists());
}

#[test]
fn oracle_check_prints_a_report() {
    let out = seqrelax(&[
        "oracle-check", "--estimator", "reinforce", "--vocab", "2", "--seq-len", "2", "--trials", "2000", "--batch-size",
        "500",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("embedding[0]"));
    assert!(text.contains("within |z|<3"));
}
