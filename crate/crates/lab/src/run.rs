//! Command dispatch: `train`, `verify` and `tim`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use gdsd_core::oracles::{tim_fixture, tim_report, TimRecord, TIM_FIXTURE_SEED};
use gdsd_core::rng::substream;
use gdsd_core::trainer::{run_step, Executor, TrainState};
use serde::Serialize;

use crate::config::{self, Command, ConfigError, Entry, Origin, RunConfig};
use crate::output::{
    checkpoint_path, write_checkpoint, write_json, write_plot_data, Checkpoint, MetricsRecord,
    RecordWriter,
};
use crate::verify::{self, window_gain};

/// Everything the command line can say about a run.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub command: Option<String>,
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub emit_plot_data: bool,
}

/// Resolves the configuration: file first, then `--set` overrides, then the
/// positional command, `--seed` and `--out`.
pub fn load(inv: &Invocation) -> Result<RunConfig, ConfigError> {
    let mut entries = match &inv.config {
        Some(p) => config::parse_file(p)?,
        None => Vec::new(),
    };
    for s in &inv.sets {
        entries.push(config::parse_override(s)?);
    }
    let flag = |key: &str, value: String, name: &'static str| Entry {
        key: key.into(),
        value,
        origin: Origin::Flag(name),
    };
    if let Some(c) = &inv.command {
        entries.push(flag("command", c.clone(), "command"));
    }
    if let Some(s) = inv.seed {
        entries.push(flag("seed", s.to_string(), "--seed"));
    }
    if let Some(o) = &inv.out {
        entries.push(flag("out", o.display().to_string(), "--out"));
    }
    if inv.emit_plot_data {
        entries.push(flag("output.plot_data", "true".into(), "--emit-plot-data"));
    }
    config::resolve(&entries)
}

/// Runs the configured command. `Ok(false)` means the command completed but
/// a verification failed.
pub fn run<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<bool> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    std::fs::write(cfg.out.join("config.resolved"), config::echo(cfg))?;
    match cfg.command {
        Command::Train => run_train(cfg, exec).map(|_| true),
        Command::Verify => run_verify(cfg, exec),
        Command::Tim => run_tim(cfg).map(|_| true),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub command: &'static str,
    pub status: &'static str,
    pub error: Option<String>,
    pub task: &'static str,
    pub objective: &'static str,
    pub seed: u64,
    pub steps_completed: u64,
    pub refreshes: u64,
    pub first_window_reward: f64,
    pub last_window_reward: f64,
    pub reward_gain: f64,
    pub final_loss_total: Option<f64>,
}

fn window_means(rewards: &[f64]) -> (f64, f64) {
    let w = 20.min(rewards.len()).max(1);
    let mean = |s: &[f64]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    (
        mean(&rewards[..w.min(rewards.len())]),
        mean(&rewards[rewards.len().saturating_sub(w)..]),
    )
}

pub fn run_train<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<TrainSummary> {
    let t = &cfg.train;
    let ckpt_dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut metrics = RecordWriter::create(&cfg.out.join("metrics.ndjson"))?;
    let mut records: Vec<MetricsRecord> = Vec::with_capacity(t.steps as usize);
    let start = Instant::now();
    let mut state = TrainState::new(t)?;
    let mut failure: Option<anyhow::Error> = None;
    for _ in 0..t.steps {
        let m = match run_step(&mut state, t, exec) {
            Ok(m) => m,
            Err(e) => {
                failure = Some(anyhow::Error::new(e).context(format!("step {}", state.step() + 1)));
                break;
            }
        };
        let rec = MetricsRecord::new(&m, cfg.wall_time.then(|| start.elapsed().as_secs_f64()));
        metrics.write(&rec)?;
        records.push(rec);
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save(&checkpoint_path(&ckpt_dir, m.step), &state, cfg)?;
        }
        if m.step % 50 == 0 || m.step == t.steps {
            eprintln!(
                "step {:>5}  reward {:.4}  loss {:.4e}",
                m.step, m.mean_reward, m.loss_total
            );
        }
    }
    metrics.flush()?;
    save(&ckpt_dir.join("final.json"), &state, cfg)?;
    if cfg.plot_data {
        write_plot_data(&cfg.out, &records)?;
    }
    let rewards: Vec<f64> = records.iter().map(|r| r.mean_reward).collect();
    let (first, last) = window_means(&rewards);
    let summary = TrainSummary {
        command: "train",
        status: if failure.is_some() {
            "aborted"
        } else {
            "completed"
        },
        error: failure.as_ref().map(|e| format!("{e:#}")),
        task: t.task.id.name(),
        objective: t.objective.name(),
        seed: t.seed,
        steps_completed: state.step(),
        refreshes: state.refreshes(),
        first_window_reward: first,
        last_window_reward: last,
        reward_gain: window_gain(&rewards),
        final_loss_total: records.last().map(|r| r.loss_total),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn save(path: &Path, state: &TrainState, cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = Checkpoint {
        step: state.step(),
        objective: cfg.train.objective.name().into(),
        params: state.theta().params().as_slice().to_vec(),
    };
    write_checkpoint(path, &ckpt)
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    command: &'static str,
    passed: usize,
    failed: usize,
    failed_checks: Vec<&'a str>,
}

pub fn run_verify<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<bool> {
    let mut w = RecordWriter::create(&cfg.out.join("verify.ndjson"))?;
    let mut io: anyhow::Result<()> = Ok(());
    let results = verify::run_all(cfg.seed, &cfg.verify, exec, |r| {
        println!("{}", r.line());
        if io.is_ok() {
            io = w.write(r).and_then(|_| w.flush());
        }
    });
    io?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    write_json(
        &cfg.out.join("summary.json"),
        &VerifySummary {
            command: "verify",
            passed: results.len() - failed.len(),
            failed: failed.len(),
            failed_checks: failed.clone(),
        },
    )?;
    Ok(failed.is_empty())
}

/// One row of `tim.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimRow {
    pub completion: Vec<u32>,
    pub log_pi_rm_old: f64,
    pub log_likelihood_old: f64,
    pub elbo_mean: f64,
    pub elbo_std: f64,
    pub elbo_exact_old: f64,
    pub log_pi_rm_theta: f64,
    pub elbo_exact_theta: f64,
    pub ratio_bias: f64,
}

impl From<&TimRecord> for TimRow {
    fn from(r: &TimRecord) -> Self {
        Self {
            completion: r.completion.clone(),
            log_pi_rm_old: r.log_pi_rm_old,
            log_likelihood_old: r.log_likelihood_old,
            elbo_mean: r.elbo_mean,
            elbo_std: r.elbo_std,
            elbo_exact_old: r.elbo_exact_old,
            log_pi_rm_theta: r.log_pi_rm_theta,
            elbo_exact_theta: r.elbo_exact_theta,
            ratio_bias: r.ratio_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimSummaryFile {
    pub command: &'static str,
    pub fixture_seed: u64,
    pub elbo_k: usize,
    pub elbo_samples: usize,
    pub mean_abs_bias: f64,
    pub max_abs_bias: f64,
    pub max_elbo_excess_se: f64,
}

pub fn run_tim(cfg: &RunConfig) -> anyhow::Result<TimSummaryFile> {
    let (inst, theta, sched) = tim_fixture()?;
    let mut rng = substream(cfg.seed, &[TIM_FIXTURE_SEED]);
    let report = tim_report(&inst, &theta, &sched, cfg.tim.k, cfg.tim.samples, &mut rng)?;
    let mut w = RecordWriter::create(&cfg.out.join("tim.ndjson"))?;
    for r in &report.records {
        w.write(&TimRow::from(r))?;
    }
    w.flush()?;
    let s = TimSummaryFile {
        command: "tim",
        fixture_seed: TIM_FIXTURE_SEED,
        elbo_k: cfg.tim.k,
        elbo_samples: cfg.tim.samples,
        mean_abs_bias: report.summary.mean_abs_bias,
        max_abs_bias: report.summary.max_abs_bias,
        max_elbo_excess_se: report.summary.max_elbo_excess_se,
    };
    write_json(&cfg.out.join("summary.json"), &s)?;
    println!(
        "mean |ratio bias| {:.6e}, max {:.6e}, max ELBO excess {:.2} SE",
        s.mean_abs_bias, s.max_abs_bias, s.max_elbo_excess_se
    );
    Ok(s)
}
