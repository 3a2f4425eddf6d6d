use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn sidrec(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidrec"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn config_typo_exits_1_with_suggestion() {
    let d = tempfile::tempdir().unwrap();
    let o = sidrec(d.path(), &["--set", "rl.klcoef=0.1", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("rl.klcoef") && e.contains("rl.kl_coef"), "{e}");
}

#[test]
fn stale_prerequisites_exit_1_naming_the_stage() {
    let d = tempfile::tempdir().unwrap();
    let o = sidrec(d.path(), &["quantize"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sidrec synth"), "{}", stderr(&o));

    assert!(sidrec(d.path(), &["synth"]).status.success());
    let o = sidrec(d.path(), &["--set", "dataset.synth.n_items=50", "quantize"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rerun `sidrec synth`"), "{}", stderr(&o));

    assert!(sidrec(d.path(), &["quantize"]).status.success());
    std::fs::write(d.path().join("data/catalog.jsonl"), "").unwrap();
    let o = sidrec(d.path(), &["build-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("stale prerequisite") && e.contains("sidrec synth"), "{e}");
}

#[test]
fn report_without_eval_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let o = sidrec(d.path(), &["report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sidrec evaluate"), "{}", stderr(&o));
}

#[test]
fn full_runs_are_reproducible_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = sidrec(d.path(), &["all"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let artifacts = [
        "quantizer/quantizer.ckpt",
        "quantizer/sid_map.jsonl",
        "corpus/alignment.jsonl",
        "policy/aligned.ckpt",
        "policy/activated.ckpt",
        "policy/rl.ckpt",
        "rl/metrics.jsonl",
        "eval/summary.json",
        "eval/bestofn.json",
        "report/report.json",
        "report/reward_vs_step.csv",
        "report/length_vs_step.csv",
        "report/metric_vs_n.csv",
        "manifest.json",
    ];
    for rel in artifacts {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel} differs between identical runs");
    }

    // one CSV row per RL step
    let csv = String::from_utf8(read(a.path(), "report/reward_vs_step.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,mean_reward,mean_r_sr,invalid_rate,mean_reasoning_len,kl"));
    assert_eq!(csv.lines().count(), 1 + 4);

    // report is idempotent
    let before = read(a.path(), "report/report.json");
    assert!(sidrec(a.path(), &["report"]).status.success());
    assert_eq!(before, read(a.path(), "report/report.json"));

    // drop the final checkpoint and resume from the one before it
    std::fs::remove_file(a.path().join("rl/checkpoints/step-00004.ckpt")).unwrap();
    let o = sidrec(a.path(), &["rl-train", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for rel in ["rl/metrics.jsonl", "policy/rl.ckpt", "rl/checkpoints/step-00004.ckpt"] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel} differs after resume");
    }

    // a different seed changes the artifacts
    let c = tempfile::tempdir().unwrap();
    assert!(sidrec(c.path(), &["--seed", "2", "synth"]).status.success());
    assert_ne!(read(a.path(), "data/interactions.jsonl"), read(c.path(), "data/interactions.jsonl"));
}

#[test]
fn lock_blocks_a_second_process() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join(".lock"), "1").unwrap();
    let o = sidrec(d.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}
