//! Acceptance criteria 1-11, one PASS/FAIL line each. Run with
//! `cargo test -p gdsd-lab --test acceptance -- --nocapture` to see the
//! report.

use gdsd_lab::config::{Command, RunConfig, VerifyParams};
use gdsd_lab::exec::RayonExecutor;
use gdsd_lab::run::run;
use gdsd_lab::verify::{self, CheckResult};

const SEED: u64 = 0;

fn criterion_11(exec: &RayonExecutor) -> CheckResult {
    let start = std::time::Instant::now();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut bytes = Vec::new();
    let pools = [
        exec,
        &RayonExecutor::new(Some(1)).unwrap(),
        &RayonExecutor::new(Some(3)).unwrap(),
    ];
    for (dir, pool) in dirs.iter().zip(pools) {
        let mut cfg = RunConfig {
            command: Command::Train,
            out: dir.path().to_path_buf(),
            seed: 7,
            ..RunConfig::default()
        };
        cfg.train.seed = 7;
        cfg.train.steps = 30;
        assert!(run(&cfg, pool).unwrap());
        bytes.push(std::fs::read(dir.path().join("metrics.ndjson")).unwrap());
    }
    let lines = bytes[0].iter().filter(|&&b| b == b'\n').count();
    let same = bytes.iter().all(|b| *b == bytes[0]) && lines == 30;
    CheckResult {
        name: "determinism",
        criterion: Some(11),
        passed: same,
        cases: bytes.len(),
        worst: if same { 0.0 } else { 1.0 },
        limit: 0.0,
        detail: format!(
            "3 train runs (pool threads {}, 1, 3), {} records, metrics files {}",
            exec.threads(),
            lines,
            if same { "byte-identical" } else { "differ" }
        ),
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[test]
fn acceptance_criteria() {
    let exec = RayonExecutor::from_env().unwrap();
    let p = VerifyParams::default();
    assert_eq!(
        (p.mc_draws, p.rollouts, p.dynamics_steps),
        (10_000, 100_000, 500)
    );
    let mut results = vec![
        verify::teacher_correctness(SEED),
        verify::tlc_equivalence(SEED),
        verify::prop2_gradient_alignment(SEED),
        verify::kl_decomposition(SEED),
        verify::gradient_integrity(SEED, 20),
        verify::elbo_lower_bound(SEED, p.mc_draws),
        verify::sampler_exactness(SEED, p.rollouts),
        verify::tim_bias(),
    ];
    results[0].passed &= results[0].seconds < 10.0;
    let (dynamics, runs) = verify::rl_dynamics(p.dynamics_steps, &exec);
    results.push(dynamics);
    results.push(verify::psi_monotonicity(SEED));
    results.push(criterion_11(&exec));

    println!();
    for r in &results {
        println!("{}", r.line());
    }
    for r in &runs {
        println!(
            "      {} seed {}: gain {:.4} (need >= {}), {:.1}s",
            r.objective.name(),
            r.seed,
            r.gain,
            r.required,
            r.seconds
        );
    }
    let criteria: Vec<u8> = results.iter().filter_map(|r| r.criterion).collect();
    assert_eq!(criteria, (1..=11).collect::<Vec<u8>>());
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.line())
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
