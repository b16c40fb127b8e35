use std::path::Path;
use std::process::{Command, Output};

use gdsd_lab::output::{read_checkpoint, read_records, MetricsRecord};

fn lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdsd-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("GDSD_LAB_THREADS", "2")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# short run\ncommand = train\ntask.id = copy_reverse\ntrainer.objective = gdsd_tlc\ntrainer.steps = 9\ntrainer.checkpoint_every = 4\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = lab(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--emit-plot-data",
            "--seed",
            "3",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let records: Vec<MetricsRecord> = read_records(&out.join("metrics.ndjson")).unwrap();
    assert_eq!(
        records.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=9).collect::<Vec<_>>()
    );
    assert!(records.iter().all(|r| r.wall_time.is_none()));
    assert_eq!(records.iter().filter(|r| r.old_refreshed).count(), 1);

    let echo = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(echo.contains("seed = 3\n"));
    assert!(echo.contains("trainer.steps = 9\n"));
    assert!(echo.contains("trainer.psi = 10.0\n"));

    let reward = std::fs::read_to_string(out.join("reward.csv")).unwrap();
    assert_eq!(reward.lines().count(), 10);
    assert!(std::fs::read_to_string(out.join("loss.csv"))
        .unwrap()
        .starts_with("step,loss_total\n"));

    let ckpts = out.join("checkpoints");
    assert_eq!(
        read_checkpoint(&ckpts.join("step_000004.json"))
            .unwrap()
            .step,
        4
    );
    assert_eq!(
        read_checkpoint(&ckpts.join("step_000008.json"))
            .unwrap()
            .step,
        8
    );
    assert_eq!(read_checkpoint(&ckpts.join("final.json")).unwrap().step, 9);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["steps_completed"], 9);
}

#[test]
fn echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = lab(
        &[
            "train",
            "--set",
            "trainer.steps=5",
            "--set",
            "task.id=mini_countdown",
            "--set",
            "trainer.objective=ppo_elbo",
        ],
        &a,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lab(
        &["--config", a.join("config.resolved").to_str().unwrap()],
        &b,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |d: &Path| std::fs::read(d.join("metrics.ndjson")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn wall_time_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(
        &[
            "train",
            "--set",
            "trainer.steps=2",
            "--set",
            "output.wall_time=true",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let records: Vec<MetricsRecord> = read_records(&dir.path().join("metrics.ndjson")).unwrap();
    assert!(records
        .iter()
        .all(|r| r.wall_time.is_some_and(|t| t >= 0.0)));
}

#[test]
fn invalid_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\n# comment\ntrainer.beta = 1.5\n").unwrap();
    let o = lab(
        &["--config", cfg.to_str().unwrap()],
        &dir.path().join("out"),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("bad.cfg:3") && err.contains("trainer.beta"),
        "{err}"
    );

    let o = lab(
        &["train", "--set", "trainer.nope=1"],
        &dir.path().join("out"),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"));

    let o = lab(&["dance"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failing_run_exits_nonzero_and_keeps_logs() {
    let dir = tempfile::tempdir().unwrap();
    // psi * A can exceed the exp overflow guard once advantages reach 0.5.
    let o = lab(
        &[
            "train",
            "--set",
            "trainer.objective=awelbo",
            "--set",
            "trainer.psi=1000",
            "--set",
            "trainer.steps=50",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["status"], "aborted");
    assert!(summary["error"].as_str().unwrap().contains("exp"));
    let done = summary["steps_completed"].as_u64().unwrap();
    let records: Vec<MetricsRecord> = read_records(&dir.path().join("metrics.ndjson")).unwrap();
    assert_eq!(records.len() as u64, done);
}

#[test]
fn tim_writes_one_row_per_completion() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["tim", "--set", "tim.samples=500"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = read_records(&dir.path().join("tim.ndjson")).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["completion"].as_array().unwrap().len(), 2);
        assert!(r["ratio_bias"].is_f64());
    }
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert!(
        (s["mean_abs_bias"].as_f64().unwrap() - gdsd_lab::verify::TIM_FIXTURE_MEAN_ABS_BIAS).abs()
            < 1e-12
    );
}

#[test]
fn verify_passes_with_reduced_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(
        &[
            "verify",
            "--set",
            "verify.mc_draws=1000",
            "--set",
            "verify.rollouts=20000",
        ],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}\n{}", stderr(&o));
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    let checks: Vec<serde_json::Value> = read_records(&dir.path().join("verify.ndjson")).unwrap();
    assert!(checks.len() >= 10);
    assert!(checks.iter().all(|c| c["passed"] == true));
}
