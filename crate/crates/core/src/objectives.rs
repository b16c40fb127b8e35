//! Training losses: guided-teacher construction, token-level logit
//! centralization, the GDSD matching losses, and the advantage-weighted ELBO,
//! PG/PPO-with-ELBO and exact reverse-KL baselines.
//!
//! Old and reference outputs are plain `f64` and enter every loss as
//! constants; only the current policy's outputs may carry derivatives.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::{weighted_log_prob, DenoiserOutput, DenoiserSpec, PolicySnapshot};
use crate::error::{invalid, Error, Result};
use crate::mdm::{MaskedSequence, TimeSample, TokenSequence};
use crate::numerics::{log_softmax, math, sum, Real};
use crate::oracles::{brute_force_teacher, EnumerableInstance};

/// Largest `psi * A` accepted by the exponentially weighted ELBO.
pub const MAX_EXP_ARG: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageRecord {
    pub reward: f64,
    pub advantage: f64,
    pub group: u64,
}

/// Group-relative advantages `r_i - mean(r)`, without scaling.
pub fn compute_advantages(rewards: &[f64], group: u64) -> Result<Vec<AdvantageRecord>> {
    if rewards.len() < 2 {
        return Err(invalid(format!("group size {} < 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteValue { what: "reward" });
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards
        .iter()
        .map(|&reward| AdvantageRecord {
            reward,
            advantage: reward - mean,
            group,
        })
        .collect())
}

/// Subtracts the vocabulary mean from a row.
pub fn tlc_row<S: Real>(row: &[S]) -> Vec<S> {
    let mean = sum(row.iter().copied()) / row.len() as f64;
    row.iter().map(|&x| x - mean).collect()
}

/// Token-level logit centralization of every row.
pub fn tlc<S: Real>(out: &DenoiserOutput<S>) -> DenoiserOutput<S> {
    out.map_rows(tlc_row)
}

/// How a row of logits becomes per-token scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Normalized log-softmax.
    Direct,
    /// Centralized logits; equal to centralized log-softmax.
    #[default]
    Tlc,
}

pub fn token_scores<S: Real>(row: &[S], mode: Mode) -> Vec<S> {
    match mode {
        Mode::Direct => log_softmax(row),
        Mode::Tlc => tlc_row(row),
    }
}

/// Where the advantage shift goes inside the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Spread {
    /// `psi * A / M` added to every entry of every supervised row.
    #[default]
    Uniform,
    /// `psi * A / M` added only to the entry of the realized token.
    RealizedToken,
}

/// Per-masked-position teacher scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    positions: Vec<usize>,
    rows: Vec<Vec<f64>>,
    pub mode: Mode,
    pub psi: f64,
    pub beta: f64,
}

impl TeacherTarget {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn row(&self, n: usize) -> Option<&[f64]> {
        self.positions
            .iter()
            .position(|&p| p == n)
            .map(|i| self.rows[i].as_slice())
    }

    /// `sum_n target[n][x0[n]]` over the supervised positions.
    pub fn sequence_score(&self, x0: &TokenSequence) -> Result<f64> {
        let mut s = 0.0;
        for (&n, row) in self.positions.iter().zip(&self.rows) {
            let tok = *x0.tokens().get(n).ok_or(Error::PositionOutOfRange {
                position: n,
                len: x0.len(),
            })?;
            s += row[tok as usize];
        }
        Ok(s)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

fn check_masks<S: Real>(what: &str, a: &DenoiserOutput<S>, b: &DenoiserOutput) -> Result<()> {
    if a.masked_positions() != b.masked_positions()
        || a.seq_len() != b.seq_len()
        || a.vocab_size() != b.vocab_size()
    {
        return Err(Error::MaskMismatch(format!(
            "{what} output was computed on a different masked input"
        )));
    }
    Ok(())
}

/// Guided teacher with the advantage spread uniformly over masked rows.
pub fn teacher_logits(
    old: &DenoiserOutput,
    reference: &DenoiserOutput,
    advantage: f64,
    psi: f64,
    beta: f64,
    mode: Mode,
) -> Result<TeacherTarget> {
    build_teacher(
        old,
        reference,
        advantage,
        psi,
        beta,
        mode,
        Spread::Uniform,
        None,
    )
}

/// Guided teacher with an explicit spreading rule; `RealizedToken` needs the
/// clean sequence the advantage belongs to.
#[allow(clippy::too_many_arguments)]
pub fn teacher_logits_with(
    old: &DenoiserOutput,
    reference: &DenoiserOutput,
    advantage: f64,
    psi: f64,
    beta: f64,
    mode: Mode,
    spread: Spread,
    x0: &TokenSequence,
) -> Result<TeacherTarget> {
    build_teacher(old, reference, advantage, psi, beta, mode, spread, Some(x0))
}

#[allow(clippy::too_many_arguments)]
fn build_teacher(
    old: &DenoiserOutput,
    reference: &DenoiserOutput,
    advantage: f64,
    psi: f64,
    beta: f64,
    mode: Mode,
    spread: Spread,
    x0: Option<&TokenSequence>,
) -> Result<TeacherTarget> {
    check_beta(beta)?;
    check_masks("reference", reference, old)?;
    let positions = old.masked_positions().to_vec();
    let shift = if positions.is_empty() {
        0.0
    } else {
        psi * advantage / positions.len() as f64
    };
    let mut rows = Vec::with_capacity(positions.len());
    for &n in &positions {
        let lo = token_scores(old.row(n), mode);
        let lr = token_scores(reference.row(n), mode);
        let mut row: Vec<f64> = lo
            .iter()
            .zip(&lr)
            .map(|(o, r)| (1.0 - beta) * o + beta * r)
            .collect();
        match spread {
            Spread::Uniform => row.iter_mut().for_each(|x| *x += shift),
            Spread::RealizedToken => {
                let x0 =
                    x0.ok_or_else(|| invalid("realized-token spreading needs the clean sequence"))?;
                row[x0.tokens()[n] as usize] += shift;
            }
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: "teacher logits",
            });
        }
        rows.push(row);
    }
    Ok(TeacherTarget {
        positions,
        rows,
        mode,
        psi,
        beta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossForm {
    /// `(log-ratio to old - psi A)^2 + beta/(1-beta) (log-ratio to ref)^2`.
    #[default]
    Practical,
    /// `(score_theta - teacher score)^2` with the geometric old/ref teacher.
    TeacherMatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdsdParams {
    pub psi: f64,
    pub beta: f64,
    pub mode: Mode,
    pub form: LossForm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<S = f64> {
    pub total: S,
    pub match_term: S,
    pub reg_term: S,
    /// View weights applied to the masked-token sums.
    pub weights: Vec<f64>,
}

impl<S: Real> LossBreakdown<S> {
    /// Term-wise mean of several breakdowns.
    pub fn mean(parts: Vec<LossBreakdown<S>>) -> Result<Self> {
        if parts.is_empty() {
            return Err(invalid("no loss terms to average"));
        }
        let k = parts.len() as f64;
        let total = sum(parts.iter().map(|p| p.total)) / k;
        let match_term = sum(parts.iter().map(|p| p.match_term)) / k;
        let reg_term = sum(parts.iter().map(|p| p.reg_term)) / k;
        let weights = parts.into_iter().flat_map(|p| p.weights).collect();
        Ok(LossBreakdown {
            total,
            match_term,
            reg_term,
            weights,
        })
    }

    pub fn values(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            total: self.total.value(),
            match_term: self.match_term.value(),
            reg_term: self.reg_term.value(),
            weights: self.weights.clone(),
        }
    }
}

/// `sum_views weight * sum_{n masked} score(x0[n])` for one policy.
fn weighted_score<S: Real>(
    outs: &[DenoiserOutput<S>],
    sample: &TimeSample,
    x0: &TokenSequence,
    mode: Mode,
) -> S {
    let mut terms = Vec::new();
    for (out, view) in outs.iter().zip(&sample.views) {
        if view.weight == 0.0 {
            continue;
        }
        for &n in view.x_t.masked_positions() {
            let s = token_scores(out.row(n), mode)[x0.tokens()[n] as usize];
            terms.push(s * view.weight);
        }
    }
    sum(terms)
}

fn check_views<S: Real>(
    theta: &[DenoiserOutput<S>],
    old: &[DenoiserOutput],
    reference: &[DenoiserOutput],
    sample: &TimeSample,
) -> Result<()> {
    let v = sample.views.len();
    if theta.len() != v || old.len() != v || reference.len() != v {
        return Err(Error::MaskMismatch(format!(
            "expected {v} outputs per policy, got {}/{}/{}",
            theta.len(),
            old.len(),
            reference.len()
        )));
    }
    for (i, view) in sample.views.iter().enumerate() {
        if theta[i].masked_positions() != view.x_t.masked_positions() {
            return Err(Error::MaskMismatch(
                "theta output does not match its masked view".into(),
            ));
        }
        check_masks("old", &theta[i], &old[i])?;
        check_masks("reference", &theta[i], &reference[i])?;
    }
    Ok(())
}

/// GDSD loss for one time sample; `theta`, `old` and `reference` hold one
/// output per view of `sample`.
pub fn gdsd_loss<S: Real>(
    theta: &[DenoiserOutput<S>],
    old: &[DenoiserOutput],
    reference: &[DenoiserOutput],
    sample: &TimeSample,
    x0: &TokenSequence,
    advantage: f64,
    p: &GdsdParams,
) -> Result<LossBreakdown<S>> {
    check_beta(p.beta)?;
    check_views(theta, old, reference, sample)?;
    let l_theta = weighted_score(theta, sample, x0, p.mode);
    let l_old = weighted_score(old, sample, x0, p.mode);
    let l_ref = weighted_score(reference, sample, x0, p.mode);
    let psi_a = p.psi * advantage;
    let weights = sample.views.iter().map(|v| v.weight).collect();
    match p.form {
        LossForm::Practical => {
            if p.beta >= 1.0 {
                return Err(invalid("the practical form needs beta < 1"));
            }
            let match_term = (l_theta - (l_old + psi_a)).square();
            let reg_term = (l_theta - l_ref).square();
            let total = match_term + reg_term * (p.beta / (1.0 - p.beta));
            Ok(LossBreakdown {
                total,
                match_term,
                reg_term,
                weights,
            })
        }
        LossForm::TeacherMatch => {
            let target = (1.0 - p.beta) * l_old + p.beta * l_ref + psi_a;
            let match_term = (l_theta - target).square();
            Ok(LossBreakdown {
                total: match_term,
                match_term,
                reg_term: S::cst(0.0),
                weights,
            })
        }
    }
}

fn exp_weight(psi: f64, advantage: f64) -> Result<f64> {
    let arg = psi * advantage;
    if arg > MAX_EXP_ARG {
        return Err(Error::ExpOverflow(arg));
    }
    Ok(math::exp(arg))
}

/// `exp(psi A) * (-ELBO)` on fixed time samples; the weight is a constant.
pub fn awelbo_loss<S: Real>(
    spec: &DenoiserSpec,
    params: &[S],
    x0: &TokenSequence,
    advantage: f64,
    psi: f64,
    samples: &[TimeSample],
) -> Result<S> {
    let w = exp_weight(psi, advantage)?;
    let elbo = crate::denoiser::elbo_on_samples(spec, params, x0, samples)?;
    Ok(-elbo * w)
}

/// Mean over time samples of the weighted masked-token log-probability,
/// given outputs indexed `[sample][view]`.
fn elbo_from_outputs<S: Real>(
    outs: &[Vec<DenoiserOutput<S>>],
    samples: &[TimeSample],
    x0: &TokenSequence,
) -> Result<S> {
    if outs.len() != samples.len() || samples.is_empty() {
        return Err(Error::MaskMismatch(
            "one output set per time sample is required".into(),
        ));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for (o, s) in outs.iter().zip(samples) {
        terms.push(weighted_log_prob(o, s, x0)?);
    }
    Ok(sum(terms) / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgVariant {
    Pg,
    Ppo,
}

/// PG or PPO with ELBO surrogates on shared time samples. Outputs are
/// indexed `[sample][view]`.
pub fn pg_ppo_elbo_loss<S: Real>(
    theta: &[Vec<DenoiserOutput<S>>],
    old: &[Vec<DenoiserOutput>],
    samples: &[TimeSample],
    x0: &TokenSequence,
    advantage: f64,
    epsilon: f64,
    variant: PgVariant,
) -> Result<S> {
    if theta.len() != samples.len() || old.len() != samples.len() {
        return Err(Error::MaskMismatch(
            "one output set per time sample is required".into(),
        ));
    }
    for ((t, o), s) in theta.iter().zip(old).zip(samples) {
        if t.len() != s.views.len() || o.len() != s.views.len() {
            return Err(Error::MaskMismatch(
                "one output per view is required".into(),
            ));
        }
        for ((a, b), v) in t.iter().zip(o).zip(&s.views) {
            if a.masked_positions() != v.x_t.masked_positions() {
                return Err(Error::MaskMismatch(
                    "theta output does not match its masked view".into(),
                ));
            }
            check_masks("old", a, b)?;
        }
    }
    match variant {
        PgVariant::Pg => {
            let l_theta = elbo_from_outputs(theta, samples, x0)?;
            let l_old = elbo_from_outputs(old, samples, x0)?;
            Ok(-(l_theta - l_old).exp() * advantage)
        }
        PgVariant::Ppo => {
            if !(epsilon >= 0.0) {
                return Err(invalid(format!("clip epsilon {epsilon} must be >= 0")));
            }
            let k = samples.len() as f64;
            let mut terms = Vec::with_capacity(x0.completion_len());
            for n in x0.completion_positions() {
                let tok = x0.tokens()[n];
                let mut lt = Vec::new();
                let mut lo = 0.0;
                for ((t, o), s) in theta.iter().zip(old).zip(samples) {
                    for ((a, b), v) in t.iter().zip(o).zip(&s.views) {
                        if v.weight != 0.0 && v.x_t.is_masked(n) {
                            lt.push(
                                crate::denoiser::token_log_prob(a.row(n), tok) * (v.weight / k),
                            );
                            lo += crate::denoiser::token_log_prob(b.row(n), tok) * v.weight / k;
                        }
                    }
                }
                let ratio = (sum(lt) - lo).exp();
                let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
                terms.push((ratio * advantage).min(clipped * advantage));
            }
            Ok(-sum(terms))
        }
    }
}

/// Exact `KL(p_theta(.|x_t) || p*(.|x_t))` by enumeration, with `theta`
/// parameters in the instance's tabular shape.
pub fn reverse_kl_loss_exact<S: Real, F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    theta: &[S],
    advantage_fn: F,
    psi: f64,
    beta: f64,
    x_t: &MaskedSequence,
) -> Result<S> {
    let teacher = brute_force_teacher(inst, x_t, &advantage_fn, psi, beta)?;
    let log_p = inst.conditional_log_probs(theta, x_t)?;
    let mut terms = Vec::with_capacity(log_p.len());
    for (lp, &q) in log_p.iter().zip(&teacher.probs) {
        terms.push(lp.exp() * (*lp - math::ln(q)));
    }
    Ok(sum(terms))
}

/// Convenience for tests and tools: the exact reverse KL at a snapshot.
pub fn reverse_kl_at<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    theta: &PolicySnapshot,
    advantage_fn: F,
    psi: f64,
    beta: f64,
    x_t: &MaskedSequence,
) -> Result<f64> {
    reverse_kl_loss_exact(
        inst,
        theta.params().as_slice(),
        advantage_fn,
        psi,
        beta,
        x_t,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{denoiser_logits, DenoiserSpec, Family, PolicyTag};
    use crate::mdm::{sample_time, MaskRule, MaskingConfig, Vocabulary};
    use crate::numerics::ParamVector;
    use crate::rng::stream;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn advantage_examples() {
        let a = |r: &[f64]| {
            compute_advantages(r, 0)
                .unwrap()
                .iter()
                .map(|x| x.advantage)
                .collect::<Vec<_>>()
        };
        assert_eq!(a(&[1.0, 0.0]), vec![0.5, -0.5]);
        assert_eq!(a(&[0.5, 0.5, 0.5]), vec![0.0, 0.0, 0.0]);
        assert_eq!(a(&[2.0, 1.0, 0.0]), vec![1.0, 0.0, -1.0]);
        assert!(compute_advantages(&[1.0], 0).is_err());
    }

    #[test]
    fn tlc_row_example() {
        assert_eq!(tlc_row(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(r in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            let s: f64 = compute_advantages(&r, 3).unwrap().iter().map(|a| a.advantage).sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn tlc_is_idempotent_and_shift_invariant(
            row in proptest::collection::vec(-20.0f64..20.0, 2..10),
            c in -100.0f64..100.0,
        ) {
            let once = tlc_row(&row);
            let twice = tlc_row(&once);
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            for ((a, b), s) in once.iter().zip(&twice).zip(tlc_row(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((a - s).abs() < 1e-9);
            }
        }
    }

    struct Fixture {
        spec: DenoiserSpec,
        theta: PolicySnapshot,
        old: PolicySnapshot,
        reference: PolicySnapshot,
        x0: TokenSequence,
    }

    fn random_policy(spec: DenoiserSpec, seed: u64, tag: PolicyTag) -> PolicySnapshot {
        let mut rng = stream(seed);
        let p = (0..spec.num_params())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        PolicySnapshot::new(spec, ParamVector::new(p).unwrap(), tag).unwrap()
    }

    fn fixture(seed: u64) -> Fixture {
        let vocab = Vocabulary::new(3).unwrap();
        let spec = DenoiserSpec::new(vocab, 1, 2, Family::Tabular).unwrap();
        Fixture {
            spec,
            theta: random_policy(spec, seed, PolicyTag::Theta),
            old: random_policy(spec, seed + 1, PolicyTag::Old),
            reference: random_policy(spec, seed + 2, PolicyTag::Ref),
            x0: TokenSequence::join(&[1], &[2, 0], vocab).unwrap(),
        }
    }

    fn outputs(p: &PolicySnapshot, s: &TimeSample) -> Vec<DenoiserOutput> {
        s.views
            .iter()
            .map(|v| denoiser_logits(p, &v.x_t).unwrap())
            .collect()
    }

    #[test]
    fn teacher_trivial_cases() {
        let f = fixture(1);
        let x_t = MaskedSequence::fully_masked(&[1], 2, f.spec.vocab()).unwrap();
        let old = denoiser_logits(&f.old, &x_t).unwrap();
        let reference = denoiser_logits(&f.reference, &x_t).unwrap();
        let t = teacher_logits(&old, &reference, 0.7, 0.0, 0.0, Mode::Direct).unwrap();
        for n in [1, 2] {
            let want = log_softmax(old.row(n));
            assert!(t
                .row(n)
                .unwrap()
                .iter()
                .zip(&want)
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let t = teacher_logits(&old, &reference, 0.0, 10.0, 1.0, Mode::Tlc).unwrap();
        for n in [1, 2] {
            let want = tlc_row(reference.row(n));
            assert!(t
                .row(n)
                .unwrap()
                .iter()
                .zip(&want)
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
        assert!(teacher_logits(&old, &reference, 0.0, 1.0, 1.5, Mode::Tlc).is_err());
    }

    #[test]
    fn spreading_rules_agree_on_the_realized_sequence() {
        let f = fixture(2);
        let x_t = MaskedSequence::fully_masked(&[1], 2, f.spec.vocab()).unwrap();
        let old = denoiser_logits(&f.old, &x_t).unwrap();
        let reference = denoiser_logits(&f.reference, &x_t).unwrap();
        let u = teacher_logits(&old, &reference, 0.4, 10.0, 0.1, Mode::Direct).unwrap();
        let r = teacher_logits_with(
            &old,
            &reference,
            0.4,
            10.0,
            0.1,
            Mode::Direct,
            Spread::RealizedToken,
            &f.x0,
        )
        .unwrap();
        assert!(
            (u.sequence_score(&f.x0).unwrap() - r.sequence_score(&f.x0).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn self_match_is_zero() {
        let f = fixture(3);
        let same = f.old.snapshot_as(PolicyTag::Theta);
        let s = sample_time(
            &f.x0,
            &MaskingConfig {
                coupled: true,
                ..Default::default()
            },
            &mut stream(4),
        )
        .unwrap();
        for mode in [Mode::Direct, Mode::Tlc] {
            for form in [LossForm::Practical, LossForm::TeacherMatch] {
                let p = GdsdParams {
                    psi: 10.0,
                    beta: 0.1,
                    mode,
                    form,
                };
                let l = gdsd_loss(
                    &outputs(&same, &s),
                    &outputs(&f.old, &s),
                    &outputs(&f.old, &s),
                    &s,
                    &f.x0,
                    0.0,
                    &p,
                )
                .unwrap();
                assert_eq!(l.total, 0.0);
            }
        }
    }

    #[test]
    fn satisfied_target_has_zero_match_term() {
        let f = fixture(4);
        let x_t = MaskedSequence::from_positions(&f.x0, 0.5, &[2], MaskRule::ExactCount).unwrap();
        let s = TimeSample::single(x_t);
        let th = outputs(&f.theta, &s);
        let ol = outputs(&f.old, &s);
        let ratio = seq_lp(&th[0], &f.x0) - seq_lp(&ol[0], &f.x0);
        let p = GdsdParams {
            psi: 2.0,
            beta: 0.0,
            mode: Mode::Direct,
            form: LossForm::Practical,
        };
        let l = gdsd_loss(
            &th,
            &ol,
            &outputs(&f.reference, &s),
            &s,
            &f.x0,
            ratio / 2.0,
            &p,
        )
        .unwrap();
        assert!(l.match_term.abs() < 1e-24);
    }

    fn seq_lp(out: &DenoiserOutput, x0: &TokenSequence) -> f64 {
        crate::denoiser::seq_log_prob(out, x0, out.masked_positions()).unwrap()
    }

    #[test]
    fn practical_breakdown_invariant_and_beta_one() {
        let f = fixture(5);
        let s = sample_time(&f.x0, &MaskingConfig::default(), &mut stream(1)).unwrap();
        let (th, ol, rf) = (
            outputs(&f.theta, &s),
            outputs(&f.old, &s),
            outputs(&f.reference, &s),
        );
        let p = GdsdParams {
            psi: 10.0,
            beta: 0.2,
            mode: Mode::Tlc,
            form: LossForm::Practical,
        };
        let l = gdsd_loss(&th, &ol, &rf, &s, &f.x0, 0.3, &p).unwrap();
        assert!((l.total - (l.match_term + 0.25 * l.reg_term)).abs() < 1e-12);
        let p1 = GdsdParams { beta: 1.0, ..p };
        assert!(gdsd_loss(&th, &ol, &rf, &s, &f.x0, 0.3, &p1).is_err());
        assert!(gdsd_loss(
            &th,
            &ol,
            &rf,
            &s,
            &f.x0,
            0.3,
            &GdsdParams {
                form: LossForm::TeacherMatch,
                ..p1
            }
        )
        .is_ok());
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let f = fixture(6);
        let a = TimeSample::single(
            MaskedSequence::from_positions(&f.x0, 0.5, &[1], MaskRule::ExactCount).unwrap(),
        );
        let b = TimeSample::single(
            MaskedSequence::from_positions(&f.x0, 0.5, &[2], MaskRule::ExactCount).unwrap(),
        );
        let p = GdsdParams {
            psi: 1.0,
            beta: 0.1,
            mode: Mode::Direct,
            form: LossForm::Practical,
        };
        let r = gdsd_loss(
            &outputs(&f.theta, &a),
            &outputs(&f.old, &b),
            &outputs(&f.reference, &a),
            &a,
            &f.x0,
            0.0,
            &p,
        );
        assert!(matches!(r, Err(Error::MaskMismatch(_))));
    }

    #[test]
    fn tlc_loss_ignores_per_position_shifts() {
        let f = fixture(7);
        let s = sample_time(
            &f.x0,
            &MaskingConfig {
                coupled: true,
                ..Default::default()
            },
            &mut stream(2),
        )
        .unwrap();
        let p = GdsdParams {
            psi: 10.0,
            beta: 0.05,
            mode: Mode::Tlc,
            form: LossForm::Practical,
        };
        let (th, ol, rf) = (
            outputs(&f.theta, &s),
            outputs(&f.old, &s),
            outputs(&f.reference, &s),
        );
        let base = gdsd_loss(&th, &ol, &rf, &s, &f.x0, 0.4, &p).unwrap().total;
        let c = [3.0, -7.0, 12.5];
        let shift = |o: &[DenoiserOutput]| {
            o.iter()
                .map(|x| {
                    let mut x = x.clone();
                    x.shift_rows(&c);
                    x
                })
                .collect::<Vec<_>>()
        };
        let shifted = gdsd_loss(&shift(&th), &shift(&ol), &shift(&rf), &s, &f.x0, 0.4, &p)
            .unwrap()
            .total;
        assert!((base - shifted).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn awelbo_trivial_weights() {
        let f = fixture(8);
        let samples =
            crate::mdm::sample_times(&f.x0, 3, &MaskingConfig::default(), &mut stream(5)).unwrap();
        let params = f.theta.params().as_slice();
        let elbo = crate::denoiser::elbo_on_samples(&f.spec, params, &f.x0, &samples).unwrap();
        assert_eq!(
            awelbo_loss(&f.spec, params, &f.x0, 0.0, 10.0, &samples).unwrap(),
            -elbo
        );
        assert_eq!(
            awelbo_loss(&f.spec, params, &f.x0, 3.0, 0.0, &samples).unwrap(),
            -elbo
        );
        assert!(matches!(
            awelbo_loss(&f.spec, params, &f.x0, 6.0, 10.0, &samples),
            Err(Error::ExpOverflow(_))
        ));
    }

    #[test]
    fn unit_ratio_baselines() {
        let f = fixture(9);
        let samples = crate::mdm::sample_times(
            &f.x0,
            2,
            &MaskingConfig {
                coupled: true,
                ..Default::default()
            },
            &mut stream(6),
        )
        .unwrap();
        let outs: Vec<Vec<DenoiserOutput>> = samples.iter().map(|s| outputs(&f.old, s)).collect();
        let a = 0.37;
        let pg = pg_ppo_elbo_loss(&outs, &outs, &samples, &f.x0, a, 0.2, PgVariant::Pg).unwrap();
        assert_eq!(pg, -a);
        let ppo = pg_ppo_elbo_loss(&outs, &outs, &samples, &f.x0, a, 0.2, PgVariant::Ppo).unwrap();
        assert!((ppo + 2.0 * a).abs() < 1e-15);
    }
}
