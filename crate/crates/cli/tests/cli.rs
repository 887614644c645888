use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn amrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amrnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in {stdout}"));
    PathBuf::from(line)
}

fn only_subdir(base: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(base).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

const TINY: &[&str] = &[
    "--hidden",
    "8",
    "--redundancy",
    "2",
    "--set",
    "n_train=40",
    "--set",
    "n_dev=20",
    "--set",
    "n_test=20",
    "--set",
    "max_steps=6",
    "--set",
    "eval_interval=3",
    "--set",
    "batch_size=10",
    "--set",
    "embed_dim=4",
    "--set",
    "kv_pairs=3",
];

#[test]
fn help_succeeds() {
    let out = amrnn(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "eval", "heatmap", "autoencode", "noise-bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    let bad_runs: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["train", "--arch", "lstm"],
        vec!["train", "--task", "mnist"],
        vec!["train", "--out-dir", out_dir, "--set", "nonsense=1"],
        vec!["train", "--out-dir", out_dir, "--set", "hidden"],
        vec!["eval", "--out-dir", out_dir],
        vec!["train", "--config", "/nonexistent/dir/cfg.txt"],
    ];
    for args in bad_runs {
        assert_eq!(amrnn(&args).status.code(), Some(2), "args {args:?}");
    }
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "hidden = many\n").unwrap();
    let out = amrnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:1"));
}

#[test]
fn noise_bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amrnn(&[
        "noise-bench",
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "--set",
        "noise_dims=16",
        "--set",
        "noise_items=1,4",
        "--set",
        "noise_redundancy=1,2",
        "--set",
        "noise_trials=5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let csv = fs::read_to_string(dir.join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(dir.join("config.txt").is_file());
    assert!(dir.join("summary.txt").is_file());
}

#[test]
fn train_then_eval_and_heatmap_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("train");
    let mut args = vec!["train", "--task", "kv", "--arch", "dual-am-gru", "--seed", "4"];
    args.extend(["--out-dir", base.to_str().unwrap()]);
    args.extend(TINY);
    let out = amrnn(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_subdir(&base);
    assert_eq!(run_dir(&out), dir);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("step,train_loss,dev_loss,dev_acc,lr")
    );
    let ckpt = dir.join("model.ckpt");
    assert!(ckpt.is_file());
    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(summary.contains("test_acc = "), "{summary}");

    let ckpt_arg = format!("checkpoint={}", ckpt.display());
    for sub in ["eval", "heatmap"] {
        let sub_base = tmp.path().join(sub);
        let mut args = vec![sub, "--task", "kv", "--arch", "dual-am-gru", "--seed", "4"];
        args.extend(["--out-dir", sub_base.to_str().unwrap(), "--set", &ckpt_arg]);
        args.extend(TINY);
        let out = amrnn(&args);
        assert!(out.status.success(), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
        let dir = only_subdir(&sub_base);
        if sub == "heatmap" {
            let heat = fs::read_to_string(dir.join("heatmap_0000.csv")).unwrap();
            // header row plus one row per hypothesis token
            assert_eq!(heat.lines().count(), 2);
            assert_eq!(heat.lines().next().unwrap().split(',').count(), 1 + 6);
        } else {
            let s = fs::read_to_string(dir.join("summary.txt")).unwrap();
            assert!(s.contains("test_count = 20"), "{s}");
        }
    }
}

#[test]
fn checkpoint_from_other_architecture_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("train");
    let mut args = vec!["train", "--task", "kv", "--arch", "gru"];
    args.extend(["--out-dir", base.to_str().unwrap()]);
    args.extend(TINY);
    assert!(amrnn(&args).status.success());
    let ckpt = only_subdir(&base).join("model.ckpt");
    let ckpt_arg = format!("checkpoint={}", ckpt.display());
    let mut args = vec!["eval", "--task", "kv", "--arch", "dual-am-gru"];
    args.extend(["--out-dir", tmp.path().to_str().unwrap(), "--set", &ckpt_arg]);
    args.extend(TINY);
    let out = amrnn(&args);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn autoencode_logs_collapse_and_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amrnn(&[
        "autoencode",
        "--task",
        "copy",
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "--hidden",
        "8",
        "--redundancy",
        "2",
        "--set",
        "vocab_size=8",
        "--set",
        "seq_len=5",
        "--set",
        "n_train=30",
        "--set",
        "n_dev=20",
        "--set",
        "n_test=10",
        "--set",
        "max_steps=4",
        "--set",
        "collapse_interval=2",
        "--set",
        "batch_size=10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,train_loss,dev_loss,dev_acc,lr,collapse");
    assert_eq!(lines.len(), 1 + 3);
    let heat = fs::read_to_string(dir.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 5);
}

#[test]
fn same_seed_runs_never_share_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "noise-bench",
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "--set",
        "noise_dims=8",
        "--set",
        "noise_items=1",
        "--set",
        "noise_redundancy=1",
        "--set",
        "noise_trials=2",
    ];
    let a = run_dir(&amrnn(&args));
    let b = run_dir(&amrnn(&args));
    assert_ne!(a, b);
    assert_eq!(
        fs::read(a.join("noise.csv")).unwrap(),
        fs::read(b.join("noise.csv")).unwrap()
    );
}
