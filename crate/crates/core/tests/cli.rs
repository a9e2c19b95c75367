use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use mdm_lab::cli::{parse_pairs, RunConfig};
use mdm_lab::denoiser::{encode_checkpoint, load_checkpoint};
use mdm_lab::diffusion::{init_params, TrainingExample};
use mdm_lab::io::read_jsonl;

const BIN: &str = env!("CARGO_BIN_EXE_mdm-lab");

const TINY: &str = "\
# small enough to run in seconds
task = arith
max_operand = 9
gen_budget = 4
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
corpus_size = 200
steps = 200
batch_size = 16
pretrain_lr = 0.01
train_instances = 50
eval_instances = 12
queries_per_update = 4
group_size = 4
lr = 0.001
updates = 6
save_every = 1
";

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn mdm-lab")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Pretrain once and return the run directory.
fn pretrained(root: &Path, threads: &str) -> PathBuf {
    let cfg = write_config(root, "pre.cfg", "");
    let out = root.join(format!("pre{threads}"));
    ok(&["pretrain", "--config", s(&cfg), "--out-dir", s(&out), "--threads", threads]);
    out
}

/// CSV text with the wall-clock columns removed.
fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "steps = 3\n").unwrap();
    let out = run(&["pretrain", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`task`"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "learning_rate = 0.1\n");
    let out = run(&["pretrain", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn diverging_pretraining_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "init_std = 1e300\n");
    let out = run(&["pretrain", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "seed = 5\n");
    let out = dir.path().join("o");
    ok(&["pretrain", "--config", s(&cfg), "--out-dir", s(&out), "--steps", "0"]);
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    let rc = RunConfig::resolve(&parse_pairs(&echo).unwrap()).unwrap();
    let want = encode_checkpoint(&init_params(rc.model, 5).unwrap());
    assert_eq!(fs::read(out.join("checkpoints/final.ckpt")).unwrap(), want);
}

#[test]
fn pretraining_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrained(dir.path(), "1");
    let b = pretrained(dir.path(), "3");
    for f in ["checkpoints/final.ckpt", "logs/pretrain.csv", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("logs/pretrain.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(csv.starts_with("step,loss,t_mean\n"));

    let corpus = read_jsonl::<TrainingExample>(&a.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.len(), 200);
    assert!(corpus.iter().all(|e| !e.prompt.is_empty() && !e.response.is_empty()));
}

#[test]
fn zero_updates_returns_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let base = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "rl.cfg", "");
    let out = dir.path().join("rl");
    ok(&["rl-train", "--config", s(&cfg), "--checkpoint", s(&base), "--out-dir", s(&out), "--updates", "0"]);
    assert_eq!(fs::read(out.join("checkpoints/final.ckpt")).unwrap(), fs::read(&base).unwrap());
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("updates = 0\n"));
}

#[test]
fn rl_outputs_do_not_depend_on_threads_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let base = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "rl.cfg", "");
    let go = |out: &Path, threads: &str, extra: &[&str]| {
        let mut args = vec!["rl-train", "--config", s(&cfg), "--checkpoint", s(&base), "--out-dir", s(out), "--threads", threads];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    go(&a, "1", &[]);
    go(&b, "2", &[]);

    // Stop after 3 of 6 updates, then resume with the full budget.
    let c = dir.path().join("c");
    go(&c, "1", &["--updates", "3"]);
    assert_eq!(fs::read_to_string(c.join("checkpoints/latest/updates_done")).unwrap(), "3");
    let out = run(&["rl-train", "--config", s(&cfg), "--checkpoint", s(&base), "--out-dir", s(&c), "--resume", "--set", "seed=1"]);
    assert_eq!(out.status.code(), Some(2), "changed settings refuse to resume");
    go(&c, "2", &["--resume"]);

    for other in [&b, &c] {
        for f in ["checkpoints/final.ckpt", "checkpoints/latest/model.ckpt", "checkpoints/latest/optimizer.json", "traces/rollouts.jsonl"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(other.join(f)).unwrap(), "{f} in {}", other.display());
        }
        let ma = fs::read_to_string(a.join("logs/metrics.csv")).unwrap();
        let mo = fs::read_to_string(other.join("logs/metrics.csv")).unwrap();
        assert_eq!(without_timing(&ma), without_timing(&mo));
        assert_eq!(ma.lines().count(), 7);
    }
    assert_ne!(fs::read(a.join("checkpoints/final.ckpt")).unwrap(), fs::read(&base).unwrap());
}

#[test]
fn killed_run_resumes_to_the_uninterrupted_result() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let base = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "rl.cfg", "");
    let args = |out: &Path| {
        vec![
            "rl-train".to_string(),
            "--config".into(),
            s(&cfg).into(),
            "--checkpoint".into(),
            s(&base).into(),
            "--out-dir".into(),
            s(out).into(),
            "--updates".into(),
            "60".into(),
            "--set".into(),
            "queries_per_update=32".into(),
        ]
    };
    let full = dir.path().join("full");
    ok(&args(&full).iter().map(String::as_str).collect::<Vec<_>>());

    let cut = dir.path().join("cut");
    let mut child = Command::new(BIN).args(args(&cut)).stdout(Stdio::null()).spawn().unwrap();
    let marker = cut.join("checkpoints/latest/updates_done");
    let t0 = Instant::now();
    while !marker.exists() && t0.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().ok();
    child.wait().unwrap();
    assert!(marker.exists() || cut.join("checkpoints/latest.old/updates_done").exists());

    let mut resume = args(&cut);
    resume.push("--resume".into());
    ok(&resume.iter().map(String::as_str).collect::<Vec<_>>());
    for f in ["checkpoints/final.ckpt", "traces/rollouts.jsonl"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f}");
    }
    let mf = fs::read_to_string(full.join("logs/metrics.csv")).unwrap();
    let mc = fs::read_to_string(cut.join("logs/metrics.csv")).unwrap();
    assert_eq!(without_timing(&mf), without_timing(&mc));
}

#[test]
fn eval_emits_tables_that_analyze_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let ck = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "ev.cfg", "temperature = 0.6\n");
    let ev = dir.path().join("eval");
    ok(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out-dir", s(&ev), "--modes", "ar,confidence", "--n", "8",
        "--k", "1,2,4,8",
    ]);
    let passk = fs::read_to_string(ev.join("logs/passk.csv")).unwrap();
    assert!(passk.starts_with("mode,problem_id,n,c,pass@1,pass@2,pass@4,pass@8\n"));
    assert_eq!(passk.lines().filter(|l| l.starts_with("ar,")).count(), 12);
    assert_eq!(passk.lines().filter(|l| l.starts_with("confidence,")).count(), 12);
    let cov = fs::read_to_string(ev.join("logs/coverage.csv")).unwrap();
    assert_eq!(cov.lines().count(), 5);
    let ent = fs::read_to_string(ev.join("logs/entropy.csv")).unwrap();
    assert_eq!(ent.lines().count(), 3);
    for m in ["ar", "confidence"] {
        assert!(ev.join(format!("traces/{m}.jsonl")).exists());
    }

    let an = dir.path().join("analyzed");
    ok(&["analyze", "--run", s(&ev), "--out-dir", s(&an)]);
    for f in ["passk.csv", "coverage.csv", "entropy.csv", "bypass_tokens.csv", "summary.csv"] {
        assert_eq!(
            fs::read(ev.join("logs").join(f)).unwrap(),
            fs::read(an.join("logs").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn greedy_single_sample_eval_is_plain_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let ck = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "ev.cfg", "");
    let ev = dir.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out-dir", s(&ev), "--modes", "ar", "--temperature", "0", "--n", "1"]);
    let summary = fs::read_to_string(ev.join("logs/summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "ar");
    assert_eq!(row[1], row[3], "accuracy equals Pass@1");
    assert_eq!(row[2], "1");
}

#[test]
fn gamma_sweep_writes_one_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let ck = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "ev.cfg", "eb_gammas = 0,0.5,2\n");
    let ev = dir.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out-dir", s(&ev), "--mode", "eb_parallel", "--eb-gamma", "sweep"]);
    let sweep = fs::read_to_string(ev.join("logs/eb_sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "gamma,accuracy,tokens_per_step");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,") && lines[1].ends_with(",1"));
}

#[test]
fn decode_writes_samples_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let ck = pre.join("checkpoints/final.ckpt");
    let cfg = write_config(dir.path(), "d.cfg", "");
    let out = dir.path().join("dec");
    ok(&["decode", "--config", s(&cfg), "--checkpoint", s(&ck), "--out-dir", s(&out), "--mode", "margin", "--n", "2", "--temperature", "1"]);
    let samples = fs::read_to_string(out.join("logs/samples_margin.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 12 * 2);
    let traces = fs::read_to_string(out.join("traces/margin.jsonl")).unwrap();
    assert!(traces.lines().next().unwrap().contains("\"margin\""));
    assert_eq!(traces.lines().count(), 1 + 12 * 2 * 4);
    assert!(load_checkpoint(&ck).is_ok());
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrained(dir.path(), "1");
    let ck = pre.join("checkpoints/final.ckpt");
    let out = run(&["eval", "--task", "dag-path", "--checkpoint", s(&ck), "--out-dir", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
