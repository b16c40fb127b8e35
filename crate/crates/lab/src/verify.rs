//! Numerical verification suites. Each check compares a production code path
//! with a brute-force oracle on enumerable instances and reports its worst
//! case against a fixed limit.

use std::time::Instant;

use gdsd_core::decoder::{decode, rm_exact_log_prob, DecodeSchedule, Selection};
use gdsd_core::denoiser::{denoiser_logits, elbo_estimate, Family, PolicySnapshot, PolicyTag};
use gdsd_core::mdm::{
    sample_times, MaskedSequence, MaskingConfig, TimeSampler, TokenSequence, WeightSchedule,
};
use gdsd_core::numerics::{
    compare_gradients, fd_grad5, grad, grad_with_aux, math, Differentiable, GradVector, Real,
};
use gdsd_core::objectives::{
    reverse_kl_loss_exact, teacher_logits, tlc_row, GdsdParams, LossForm, Mode,
};
use gdsd_core::oracles::{
    brute_force_log_partition, brute_force_partition_in_order, brute_force_teacher, exact_elbo,
    exact_log_likelihood, exp_weighted_elbo_objective, forward_kl_objective,
    log_mixture_normalizer, mirror_ascent, random_theta, regularized_objective,
    reverse_kl_decomposition, sequence_centralized, tim_fixture, tim_report, EnumerableInstance,
    LikelihoodMode, TIM_FIXTURE_SEED,
};
use gdsd_core::rng::{substream, Stream};
use gdsd_core::tasks::TaskId;
use gdsd_core::trainer::{
    train, view_outputs, CompletionLoss, Executor, Objective, Sequential, TrainConfig,
};
use rand::Rng;
use serde::Serialize;

use crate::config::VerifyParams;

/// Mean absolute ratio bias of the mismatch fixture, computed by the exact
/// oracle in [`tim_fixture_bias`] and frozen here.
pub const TIM_FIXTURE_MEAN_ABS_BIAS: f64 = 1.990_480_587_370_270_5e-2;

/// Step of the five-point central differences in gradient checks.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor of the per-coordinate relative gradient error, as a
/// fraction of the largest gradient entry (at least 1).
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest per-coordinate relative error between two gradients.
pub fn grad_rel_err(a: &GradVector, b: &GradVector) -> f64 {
    let scale = a
        .as_slice()
        .iter()
        .chain(b.as_slice())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    compare_gradients(a, b, GRAD_FLOOR * scale).max_rel_err
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    /// Acceptance criterion number, for the checks that have one.
    pub criterion: Option<u8>,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub limit: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    /// One-line summary, e.g. for a console.
    pub fn line(&self) -> String {
        let tag = self
            .criterion
            .map_or(String::new(), |c| format!("[{c:>2}] "));
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{verdict} {tag}{}: {} ({:.2}s)",
            self.name, self.detail, self.seconds
        )
    }
}

struct Outcome {
    passed: bool,
    cases: usize,
    worst: f64,
    limit: f64,
    detail: String,
}

fn timed(
    name: &'static str,
    criterion: Option<u8>,
    f: impl FnOnce() -> anyhow::Result<Outcome>,
) -> CheckResult {
    let start = Instant::now();
    let r = f();
    let seconds = start.elapsed().as_secs_f64();
    match r {
        Ok(o) => CheckResult {
            name,
            criterion,
            passed: o.passed,
            cases: o.cases,
            worst: o.worst,
            limit: o.limit,
            detail: o.detail,
            seconds,
        },
        Err(e) => CheckResult {
            name,
            criterion,
            passed: false,
            cases: 0,
            worst: f64::NAN,
            limit: f64::NAN,
            detail: format!("error: {e:#}"),
            seconds,
        },
    }
}

fn at_most(cases: usize, worst: f64, limit: f64, what: &str) -> Outcome {
    Outcome {
        passed: worst <= limit,
        cases,
        worst,
        limit,
        detail: format!("{what} {worst:.3e} over {cases} cases (limit {limit:.0e})"),
    }
}

const SUITE: u64 = 0x5eed;

fn rng_for(seed: u64, check: u64, case: u64) -> Stream {
    substream(seed, &[SUITE, check, case])
}

/// A random enumerable instance with a random advantage table.
pub struct Case {
    pub inst: EnumerableInstance,
    pub a: Vec<f64>,
    pub psi: f64,
    pub beta: f64,
}

impl Case {
    pub fn random(
        v: u32,
        n_c: usize,
        context_free: bool,
        psi: f64,
        beta: f64,
        rng: &mut Stream,
    ) -> anyhow::Result<Self> {
        let prompt = [rng.random_range(0..v)];
        let inst = if context_free {
            EnumerableInstance::context_free(v, &prompt, n_c, 2.0, rng)?
        } else {
            EnumerableInstance::random(v, &prompt, n_c, 2.0, rng)?
        };
        let a = (0..inst.completions().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self { inst, a, psi, beta })
    }

    pub fn advantage(&self) -> impl Fn(&TokenSequence) -> f64 + '_ {
        move |x| self.inst.index_of(x).map_or(f64::NAN, |i| self.a[i])
    }

    /// Masked inputs with at least one masked position.
    pub fn masked_inputs(&self) -> anyhow::Result<Vec<MaskedSequence>> {
        Ok(self
            .inst
            .masked_inputs()?
            .into_iter()
            .filter(|x| !x.masked_positions().is_empty())
            .collect())
    }
}

const PSIS: [f64; 3] = [0.0, 1.0, 10.0];
const BETAS: [f64; 3] = [0.0, 0.1, 1.0];

/// The instances shared by the teacher and centralization checks: `V = 3`,
/// `N_c = 2`, every combination of `psi` and `beta` in turn.
pub fn teacher_cases(seed: u64, n: usize) -> anyhow::Result<Vec<Case>> {
    (0..n)
        .map(|i| {
            let psi = PSIS[i % 3];
            let beta = BETAS[(i / 3) % 3];
            Case::random(3, 2, false, psi, beta, &mut rng_for(seed, 1, i as u64))
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let z = math::logsumexp(x);
    x.iter().map(|v| (v - z).exp()).collect()
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sequence scores of the per-completion teachers on the completions
/// consistent with `x_t`.
fn teacher_scores(
    c: &Case,
    x_t: &MaskedSequence,
    idx: &[usize],
    mode: Mode,
) -> anyhow::Result<Vec<f64>> {
    let old = denoiser_logits(c.inst.old(), x_t)?;
    let rf = denoiser_logits(c.inst.reference(), x_t)?;
    idx.iter()
        .map(|&i| {
            let x0 = &c.inst.completions()[i];
            let t = teacher_logits(&old, &rf, c.a[i], c.psi, c.beta, mode)?;
            Ok(t.sequence_score(x0)?)
        })
        .collect()
}

pub fn teacher_correctness(seed: u64) -> CheckResult {
    timed("teacher_correctness", Some(1), || {
        let (mut worst, mut inputs) = (0.0f64, 0);
        let cases = teacher_cases(seed, 54)?;
        for c in &cases {
            for x_t in c.masked_inputs()? {
                let bt = brute_force_teacher(&c.inst, &x_t, &c.advantage(), c.psi, c.beta)?;
                for mode in [Mode::Direct, Mode::Tlc] {
                    let p = softmax(&teacher_scores(c, &x_t, &bt.completions, mode)?);
                    worst = worst.max(max_abs_diff(&p, &bt.probs));
                }
                inputs += 1;
            }
        }
        let mut o = at_most(cases.len(), worst, 1e-10, "max abs probability error");
        o.detail
            .push_str(&format!(", {inputs} masked inputs, both modes"));
        Ok(o)
    })
}

pub fn tlc_equivalence(seed: u64) -> CheckResult {
    timed("tlc_equivalence", Some(2), || {
        let mut worst = 0.0f64;
        let cases = teacher_cases(seed, 54)?;
        for c in &cases {
            for x_t in c.masked_inputs()? {
                let idx = c.inst.consistent(&x_t)?;
                for policy in [c.inst.old(), c.inst.reference()] {
                    let out = denoiser_logits(policy, &x_t)?;
                    let rows: Vec<(usize, Vec<f64>)> = x_t
                        .masked_positions()
                        .iter()
                        .map(|&n| (n, tlc_row(out.row(n))))
                        .collect();
                    let token_level: Vec<f64> = idx
                        .iter()
                        .map(|&i| {
                            let x0 = c.inst.completions()[i].tokens();
                            rows.iter().map(|(n, r)| r[x0[*n] as usize]).sum()
                        })
                        .collect();
                    worst = worst.max(max_abs_diff(
                        &token_level,
                        &sequence_centralized(&c.inst, &out, &x_t)?,
                    ));
                }
                let direct = centered(&teacher_scores(c, &x_t, &idx, Mode::Direct)?);
                let tlc = centered(&teacher_scores(c, &x_t, &idx, Mode::Tlc)?);
                worst = worst.max(max_abs_diff(&direct, &tlc));
            }
        }
        Ok(at_most(
            cases.len(),
            worst,
            1e-10,
            "max abs centralized-score difference",
        ))
    })
}

struct Prop2<'a> {
    case: &'a Case,
    forward: bool,
}

impl Differentiable for Prop2<'_> {
    fn eval<S: Real>(&self, params: &[S]) -> gdsd_core::Result<S> {
        let c = self.case;
        let adv = c.advantage();
        if self.forward {
            forward_kl_objective(
                &c.inst,
                params,
                &adv,
                c.psi,
                c.beta,
                TimeSampler::Grid,
                WeightSchedule::InvT,
            )
        } else {
            exp_weighted_elbo_objective(
                &c.inst,
                params,
                &adv,
                c.psi,
                c.beta,
                TimeSampler::Grid,
                WeightSchedule::InvT,
            )
        }
    }
}

pub fn prop2_gradient_alignment(seed: u64) -> CheckResult {
    timed("forward_kl_vs_weighted_elbo", Some(3), || {
        let n = 24;
        let mut worst = f64::INFINITY;
        for i in 0..n {
            let mut rng = rng_for(seed, 3, i as u64);
            let (v, n_c) = if i % 2 == 0 { (3, 2) } else { (2, 3) };
            let c = Case::random(
                v,
                n_c,
                true,
                [1.0, 5.0, 10.0][i % 3],
                [0.0, 0.1, 0.5][(i / 3) % 3],
                &mut rng,
            )?;
            let theta = random_theta(&c.inst, 1.0, &mut rng)?;
            let (_, gf) = grad(
                &Prop2 {
                    case: &c,
                    forward: true,
                },
                theta.params(),
            )?;
            let (_, ge) = grad(
                &Prop2 {
                    case: &c,
                    forward: false,
                },
                theta.params(),
            )?;
            worst = worst.min(compare_gradients(&gf, &ge, GRAD_FLOOR).cosine);
        }
        Ok(Outcome {
            passed: worst > 0.999,
            cases: n,
            worst,
            limit: 0.999,
            detail: format!("min gradient cosine {worst:.12} over {n} instances (limit > 0.999)"),
        })
    })
}

pub fn kl_decomposition(seed: u64) -> CheckResult {
    timed("reverse_kl_decomposition", Some(4), || {
        let n = 30;
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut rng = rng_for(seed, 4, i as u64);
            let c = Case::random(3, 2, false, PSIS[i % 3], BETAS[(i / 3) % 3], &mut rng)?;
            let theta = random_theta(&c.inst, 1.5, &mut rng)?;
            for x_t in c.masked_inputs()? {
                let d =
                    reverse_kl_decomposition(&c.inst, &theta, &c.advantage(), c.psi, c.beta, &x_t)?;
                worst = worst.max((d.direct - d.sum()).abs());
            }
        }
        Ok(at_most(n, worst, 1e-10, "max |direct - decomposition|"))
    })
}

#[derive(Clone, Copy)]
enum ExactObjective {
    ReverseKl,
    ForwardKl,
    WeightedElbo,
    Elbo,
}

struct ExactLoss<'a> {
    case: &'a Case,
    which: ExactObjective,
    x_t: &'a MaskedSequence,
}

impl Differentiable for ExactLoss<'_> {
    fn eval<S: Real>(&self, params: &[S]) -> gdsd_core::Result<S> {
        let c = self.case;
        let adv = c.advantage();
        let (g, w) = (TimeSampler::Grid, WeightSchedule::InvT);
        match self.which {
            ExactObjective::ReverseKl => {
                reverse_kl_loss_exact(&c.inst, params, &adv, c.psi, c.beta, self.x_t)
            }
            ExactObjective::ForwardKl => {
                forward_kl_objective(&c.inst, params, &adv, c.psi, c.beta, g, w)
            }
            ExactObjective::WeightedElbo => {
                exp_weighted_elbo_objective(&c.inst, params, &adv, c.psi, c.beta, g, w)
            }
            ExactObjective::Elbo => {
                exact_elbo(c.inst.spec(), params, &c.inst.completions()[0], g, w)
            }
        }
    }
}

/// Reverse-mode against central differences for every training objective
/// (both GDSD loss forms) and every exact oracle objective.
pub fn gradient_integrity(seed: u64, points: usize) -> CheckResult {
    timed("gradient_integrity", Some(5), || {
        let mut worst = 0.0f64;
        let mut per: Vec<String> = Vec::new();
        let mut cfg = TrainConfig::for_task(TaskId::CopyReverse);
        cfg.task.copy_len = 3;
        cfg.task.copy_vocab = 4;
        cfg.family = Family::Mlp {
            hidden: 5,
            pos_features: 4,
        };
        let spec = cfg.spec()?;
        let vocab = cfg.task.vocab();
        let trainer_objectives: Vec<(Objective, LossForm)> = Objective::ALL
            .iter()
            .map(|&o| (o, LossForm::Practical))
            .chain([
                (Objective::GdsdDirect, LossForm::TeacherMatch),
                (Objective::GdsdTlc, LossForm::TeacherMatch),
            ])
            .collect();
        for (k, &(objective, form)) in trainer_objectives.iter().enumerate() {
            let mut w = 0.0f64;
            for i in 0..points {
                let mut rng = rng_for(seed, 50 + k as u64, i as u64);
                let theta = spec.init_params(1.0, &mut rng)?;
                let old =
                    PolicySnapshot::new(spec, spec.init_params(1.0, &mut rng)?, PolicyTag::Old)?;
                let rf =
                    PolicySnapshot::new(spec, spec.init_params(1.0, &mut rng)?, PolicyTag::Ref)?;
                let toks: Vec<u32> = (0..spec.seq_len())
                    .map(|_| rng.random_range(0..vocab.size() as u32))
                    .collect();
                let x0 = TokenSequence::new(toks, spec.prompt_len(), vocab)?;
                let advantage = rng.random_range(-1.0..1.0);
                let masking = MaskingConfig {
                    coupled: true,
                    ..MaskingConfig::default()
                };
                let samples = sample_times(&x0, 2, &masking, &mut rng)?;
                let (old_o, ref_o) = (view_outputs(&old, &samples)?, view_outputs(&rf, &samples)?);
                let mode = if objective == Objective::GdsdDirect {
                    Mode::Direct
                } else {
                    Mode::Tlc
                };
                let loss = CompletionLoss {
                    objective,
                    gdsd: Some(GdsdParams {
                        psi: cfg.psi,
                        beta: [0.0, 0.05, 0.5][i % 3],
                        mode,
                        form,
                    }),
                    psi: cfg.psi,
                    epsilon: cfg.epsilon,
                    spec: &spec,
                    x0: &x0,
                    advantage,
                    samples: &samples,
                    old: &old_o,
                    reference: &ref_o,
                };
                let (_, g, _) = grad_with_aux(&loss, &theta)?;
                let fd = fd_grad5(|p| loss.value(p), &theta, FD_STEP)?;
                w = w.max(grad_rel_err(&g, &fd));
            }
            let form_name = if form == LossForm::TeacherMatch {
                "/teacher_match"
            } else {
                ""
            };
            per.push(format!("{}{form_name} {w:.1e}", objective.name()));
            worst = worst.max(w);
        }
        let exact = [
            (ExactObjective::ReverseKl, "reverse_kl"),
            (ExactObjective::ForwardKl, "forward_kl"),
            (ExactObjective::WeightedElbo, "weighted_elbo"),
            (ExactObjective::Elbo, "exact_elbo"),
        ];
        for (k, &(which, name)) in exact.iter().enumerate() {
            let mut w = 0.0f64;
            for i in 0..points {
                let mut rng = rng_for(seed, 60 + k as u64, i as u64);
                let c = Case::random(
                    3,
                    2,
                    matches!(
                        which,
                        ExactObjective::ForwardKl | ExactObjective::WeightedElbo
                    ),
                    [1.0, 5.0][i % 2],
                    0.1,
                    &mut rng,
                )?;
                let theta = random_theta(&c.inst, 1.0, &mut rng)?;
                let inputs = c.masked_inputs()?;
                let x_t = &inputs[rng.random_range(0..inputs.len())];
                let loss = ExactLoss {
                    case: &c,
                    which,
                    x_t,
                };
                let (_, g) = grad(&loss, theta.params())?;
                let fd = fd_grad5(|p| loss.eval::<f64>(p), theta.params(), FD_STEP)?;
                w = w.max(grad_rel_err(&g, &fd));
            }
            per.push(format!("{name} {w:.1e}"));
            worst = worst.max(w);
        }
        let objectives = trainer_objectives.len() + exact.len();
        Ok(Outcome {
            passed: worst < 1e-4,
            cases: points * objectives,
            worst,
            limit: 1e-4,
            detail: format!(
                "max relative error {worst:.3e}, {points} points for each of {objectives} objectives (limit 1e-4) [{}]",
                per.join(", ")
            ),
        })
    })
}

/// Exact log-likelihood minus the mean of `draws` single-sample ELBO
/// estimates, in standard errors, for every completion of `policies` random
/// policies, with plain and coupled masks.
pub fn elbo_lower_bound(seed: u64, draws: usize) -> CheckResult {
    timed("elbo_lower_bound", Some(6), || {
        let n = 10;
        let mut worst = f64::INFINITY;
        let mut tested = 0;
        for i in 0..n {
            let mut rng = rng_for(seed, 6, i as u64);
            let (v, n_c) = if i % 2 == 0 { (3, 2) } else { (2, 3) };
            let c = Case::random(v, n_c, false, 0.0, 0.0, &mut rng)?;
            let policy = c.inst.old();
            for x0 in c.inst.completions() {
                let ll = exact_log_likelihood(policy, x0, LikelihoodMode::FullEnumeration)?;
                for coupled in [false, true] {
                    let cfg = MaskingConfig {
                        coupled,
                        ..MaskingConfig::elbo()
                    };
                    let est = (0..draws)
                        .map(|_| elbo_estimate(policy, x0, 1, &cfg, &mut rng))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mean = est.iter().sum::<f64>() / draws as f64;
                    let var = est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                        / (draws - 1) as f64;
                    let se = (var / draws as f64).sqrt();
                    let z = if se > 0.0 {
                        (ll - mean) / se
                    } else if ll >= mean - 1e-12 {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    worst = worst.min(z);
                    tested += 1;
                }
            }
        }
        Ok(Outcome {
            passed: worst >= -3.0,
            cases: n,
            worst,
            limit: -3.0,
            detail: format!(
                "min (log-likelihood - mean ELBO) {worst:.2} SE over {n} policies, {tested} completion/mask pairs, {draws} draws each (limit -3)"
            ),
        })
    })
}

/// Schedules checked against the exact sampler distribution.
pub fn sampler_schedules() -> [DecodeSchedule; 3] {
    [
        DecodeSchedule {
            steps: 2,
            selection: Selection::Random,
            block_size: None,
            temperature: 1.0,
        },
        DecodeSchedule {
            steps: 2,
            selection: Selection::LowConfidence,
            block_size: None,
            temperature: 0.9,
        },
        DecodeSchedule {
            steps: 2,
            selection: Selection::LowConfidence,
            block_size: None,
            temperature: 1.0,
        },
    ]
}

/// Total-variation distance between `rollouts` decodes and the exact
/// distribution of the schedule, on a random `V = 2`, `N_c = 2` policy.
pub fn sampler_tv(seed: u64, rollouts: usize, sched: &DecodeSchedule) -> anyhow::Result<f64> {
    let mut rng = rng_for(seed, 7, 0);
    let inst = EnumerableInstance::random(2, &[], 2, 1.5, &mut rng)?;
    let policy = inst.old();
    let exact: Vec<f64> = inst
        .completions()
        .iter()
        .map(|x| rm_exact_log_prob(policy, x, sched).map(f64::exp))
        .collect::<Result<_, _>>()?;
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..rollouts {
        let r = decode(policy, &[], sched, &mut rng)?;
        let i = inst
            .index_of(&r.completion)
            .ok_or_else(|| anyhow::anyhow!("decoded sequence outside the space"))?;
        counts[i] += 1;
    }
    Ok(0.5
        * counts
            .iter()
            .zip(&exact)
            .map(|(&n, p)| (n as f64 / rollouts as f64 - p).abs())
            .sum::<f64>())
}

pub fn sampler_exactness(seed: u64, rollouts: usize) -> CheckResult {
    timed("sampler_exactness", Some(7), || {
        let mut tvs = Vec::new();
        for s in sampler_schedules() {
            tvs.push(sampler_tv(seed, rollouts, &s)?);
        }
        let worst = tvs.iter().copied().fold(0.0, f64::max);
        let mut o = at_most(tvs.len(), worst, 1e-2, "max total variation");
        o.detail
            .push_str(&format!(", {rollouts} rollouts per schedule"));
        Ok(o)
    })
}

/// Mean absolute ratio bias of the mismatch fixture from exact quantities.
pub fn tim_fixture_bias() -> anyhow::Result<f64> {
    let (inst, theta, sched) = tim_fixture()?;
    let mut rng = substream(TIM_FIXTURE_SEED, &[SUITE]);
    Ok(tim_report(&inst, &theta, &sched, 1, 2, &mut rng)?
        .summary
        .mean_abs_bias)
}

pub fn tim_bias() -> CheckResult {
    timed("tim_bias", Some(8), || {
        let b = tim_fixture_bias()?;
        let err = (b - TIM_FIXTURE_MEAN_ABS_BIAS).abs();
        Ok(Outcome {
            passed: b > 0.0 && err <= 1e-9,
            cases: 1,
            worst: err,
            limit: 1e-9,
            detail: format!("mean |ratio bias| {b:.15} vs frozen {TIM_FIXTURE_MEAN_ABS_BIAS:.15}, diff {err:.1e} (limit 1e-9)"),
        })
    })
}

/// Mean reward of the last 20 steps minus that of the first 20.
pub fn window_gain(rewards: &[f64]) -> f64 {
    let w = 20.min(rewards.len());
    if w == 0 {
        return 0.0;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&rewards[rewards.len() - w..]) - mean(&rewards[..w])
}

pub struct DynamicsRun {
    pub objective: Objective,
    pub seed: u64,
    pub gain: f64,
    pub required: f64,
    pub seconds: f64,
}

/// Default copy-reverse training run; returns per-step mean rewards.
pub fn dynamics_run<E: Executor>(
    objective: Objective,
    seed: u64,
    steps: u64,
    exec: &E,
) -> anyhow::Result<(Vec<f64>, f64)> {
    let mut cfg = TrainConfig::for_task(TaskId::CopyReverse);
    cfg.objective = objective;
    cfg.seed = seed;
    cfg.steps = steps;
    let start = Instant::now();
    let mut rewards = Vec::with_capacity(steps as usize);
    train(&cfg, exec, |_, m| {
        rewards.push(m.mean_reward);
        Ok(())
    })?;
    Ok((rewards, start.elapsed().as_secs_f64()))
}

pub const DYNAMICS_SEEDS: [u64; 3] = [0, 1, 2];
pub const DYNAMICS_TARGETS: [(Objective, f64); 2] =
    [(Objective::GdsdTlc, 0.2), (Objective::GdsdDirect, 0.15)];
/// Per-run time budget in seconds.
pub const DYNAMICS_BUDGET: f64 = 300.0;

pub fn rl_dynamics<E: Executor>(steps: u64, exec: &E) -> (CheckResult, Vec<DynamicsRun>) {
    let mut runs = Vec::new();
    let r = timed("rl_dynamics", Some(9), || {
        let mut worst = f64::INFINITY;
        let mut ok = true;
        for (objective, required) in DYNAMICS_TARGETS {
            for seed in DYNAMICS_SEEDS {
                let (rewards, seconds) = dynamics_run(objective, seed, steps, exec)?;
                let gain = window_gain(&rewards);
                ok &= gain >= required && seconds < DYNAMICS_BUDGET;
                worst = worst.min(gain - required);
                runs.push(DynamicsRun {
                    objective,
                    seed,
                    gain,
                    required,
                    seconds,
                });
            }
        }
        let parts: Vec<String> = runs
            .iter()
            .map(|r| {
                format!(
                    "{} seed {} gain {:.3} ({:.0}s)",
                    r.objective.name(),
                    r.seed,
                    r.gain,
                    r.seconds
                )
            })
            .collect();
        Ok(Outcome {
            passed: ok,
            cases: runs.len(),
            worst,
            limit: 0.0,
            detail: format!("{steps} steps; {}", parts.join("; ")),
        })
    });
    (r, runs)
}

pub fn psi_monotonicity(seed: u64) -> CheckResult {
    timed("psi_monotonicity", Some(10), || {
        let n = 24;
        let psis = [0.0, 1.0, 5.0, 10.0];
        let mut worst = f64::INFINITY;
        for i in 0..n {
            let mut rng = rng_for(seed, 10, i as u64);
            let c = Case::random(3, 2, false, 0.0, [0.0, 0.1, 0.5, 1.0][i % 4], &mut rng)?;
            let best = (0..c.a.len())
                .max_by(|&x, &y| c.a[x].total_cmp(&c.a[y]))
                .unwrap_or(0);
            if c.a.iter().filter(|&&v| v == c.a[best]).count() != 1 {
                anyhow::bail!("instance {i} has a tied best advantage");
            }
            let full = MaskedSequence::fully_masked(c.inst.prompt(), 2, c.inst.spec().vocab())?;
            let mut prev = None;
            for psi in psis {
                let p = brute_force_teacher(&c.inst, &full, &c.advantage(), psi, c.beta)?
                    .prob_of(best)
                    .ok_or_else(|| anyhow::anyhow!("best completion missing"))?;
                if let Some(q) = prev {
                    worst = worst.min(p - q);
                }
                prev = Some(p);
            }
        }
        Ok(Outcome {
            passed: worst > 0.0,
            cases: n,
            worst,
            limit: 0.0,
            detail: format!("min mass increase {worst:.3e} across psi in {psis:?} over {n} instances (must be > 0)"),
        })
    })
}

/// Metrics of a short training run, serialized the way `train` writes them.
pub fn metrics_bytes<E: Executor>(cfg: &TrainConfig, exec: &E) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    train(cfg, exec, |_, m| {
        let rec = crate::output::MetricsRecord::new(m, None);
        out.extend(
            serde_json::to_vec(&rec)
                .map_err(|e| gdsd_core::Error::InvalidArgument(e.to_string()))?,
        );
        out.push(b'\n');
        Ok(())
    })?;
    Ok(out)
}

pub fn determinism<E: Executor>(exec: &E) -> CheckResult {
    timed("determinism", Some(11), || {
        let mut cfg = TrainConfig::for_task(TaskId::CopyReverse);
        cfg.steps = 12;
        cfg.seed = 11;
        let a = metrics_bytes(&cfg, &Sequential)?;
        let b = metrics_bytes(&cfg, exec)?;
        let c = metrics_bytes(&cfg, exec)?;
        let same = a == b && b == c;
        Ok(Outcome {
            passed: same,
            cases: 3,
            worst: if same { 0.0 } else { 1.0 },
            limit: 0.0,
            detail: format!(
                "{} steps, {} metric bytes, sequential and pooled runs {}",
                cfg.steps,
                a.len(),
                if same { "identical" } else { "differ" }
            ),
        })
    })
}

/// Mirror ascent on the regularized objective reaches the brute-force
/// teacher, which scores at least as well as any perturbation of it.
pub fn teacher_optimality(seed: u64) -> CheckResult {
    timed("teacher_optimality", None, || {
        let n = 12;
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut rng = rng_for(seed, 12, i as u64);
            let c = Case::random(
                3,
                2,
                false,
                [1.0, 3.0][i % 2],
                [0.1, 0.5, 0.9][i % 3],
                &mut rng,
            )?;
            let adv = c.advantage();
            for x_t in c.masked_inputs()? {
                let bt = brute_force_teacher(&c.inst, &x_t, &adv, c.psi, c.beta)?;
                let p = mirror_ascent(&c.inst, &x_t, &adv, c.psi, c.beta, 0.5, 400)?;
                worst = worst.max(max_abs_diff(&p, &bt.probs));
                let best = regularized_objective(&c.inst, &bt.probs, &x_t, &adv, c.psi, c.beta)?;
                let mut q: Vec<f64> = bt
                    .probs
                    .iter()
                    .map(|v| v * rng.random_range(0.5..1.5))
                    .collect();
                let z: f64 = q.iter().sum();
                q.iter_mut().for_each(|v| *v /= z);
                if regularized_objective(&c.inst, &q, &x_t, &adv, c.psi, c.beta)? > best + 1e-12 {
                    anyhow::bail!("a perturbed distribution beats the teacher");
                }
            }
        }
        Ok(at_most(n, worst, 1e-6, "max |mirror ascent - teacher|"))
    })
}

/// Partition function is order independent and the teacher's log-normalizer
/// equals `log Z_t` minus the log-normalizer of the old/ref mixture.
pub fn partition_consistency(seed: u64) -> CheckResult {
    timed("partition_consistency", None, || {
        let mut worst = 0.0f64;
        let cases = teacher_cases(seed ^ 0xabc, 18)?;
        for c in &cases {
            let adv = c.advantage();
            for x_t in c.masked_inputs()? {
                let log_z = brute_force_log_partition(&c.inst, &x_t, &adv, c.psi, c.beta)?;
                let m = c.inst.consistent(&x_t)?.len();
                let rev: Vec<usize> = (0..m).rev().collect();
                let z_rev =
                    brute_force_partition_in_order(&c.inst, &x_t, &adv, c.psi, c.beta, &rev)?;
                worst = worst.max((z_rev.ln() - log_z).abs());
                let bt = brute_force_teacher(&c.inst, &x_t, &adv, c.psi, c.beta)?;
                let log_c = log_mixture_normalizer(&c.inst, &x_t, c.beta)?;
                worst = worst.max((bt.a_t - (log_z - log_c)).abs());
            }
        }
        Ok(at_most(
            cases.len(),
            worst,
            1e-10,
            "max log-partition discrepancy",
        ))
    })
}

/// Every check, in criterion order. The training-dynamics check runs only
/// when `params.dynamics` is set.
pub fn run_all<E: Executor>(
    seed: u64,
    params: &VerifyParams,
    exec: &E,
    mut on_result: impl FnMut(&CheckResult),
) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        on_result(&r);
        out.push(r);
    };
    push(teacher_correctness(seed));
    push(tlc_equivalence(seed));
    push(prop2_gradient_alignment(seed));
    push(kl_decomposition(seed));
    push(gradient_integrity(seed, 20));
    push(elbo_lower_bound(seed, params.mc_draws));
    push(sampler_exactness(seed, params.rollouts));
    push(tim_bias());
    if params.dynamics {
        push(rl_dynamics(params.dynamics_steps, exec).0);
    }
    push(psi_monotonicity(seed));
    push(determinism(exec));
    push(teacher_optimality(seed));
    push(partition_consistency(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_gain_uses_twenty_step_windows() {
        let mut r = vec![0.0; 20];
        r.extend(vec![0.5; 60]);
        r.extend(vec![1.0; 20]);
        assert_eq!(window_gain(&r), 1.0);
        assert_eq!(window_gain(&[0.2, 0.4]), 0.0);
        assert_eq!(window_gain(&[]), 0.0);
    }

    #[test]
    fn fixture_bias_is_reproducible() {
        assert_eq!(tim_fixture_bias().unwrap(), tim_fixture_bias().unwrap());
    }

    #[test]
    fn cases_are_seeded() {
        let a = teacher_cases(3, 4).unwrap();
        let b = teacher_cases(3, 4).unwrap();
        let c = teacher_cases(4, 4).unwrap();
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.a == y.a && x.inst.old().params() == y.inst.old().params()));
        assert!(a.iter().zip(&c).any(|(x, y)| x.a != y.a));
        let combos: Vec<(f64, f64)> = teacher_cases(0, 9)
            .unwrap()
            .iter()
            .map(|c| (c.psi, c.beta))
            .collect();
        for psi in PSIS {
            for beta in BETAS {
                assert!(combos.contains(&(psi, beta)));
            }
        }
    }
}
