//! Brute-force ground truth on instances small enough to enumerate every
//! completion: partition functions, the normalized guided teacher, exact
//! likelihoods and ELBO expectations, and the training-inference mismatch
//! report.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::decoder::{rm_exact_log_prob, DecodeSchedule, Selection};
use crate::denoiser::{
    denoiser_logits, elbo_estimate, DenoiserOutput, DenoiserSpec, Family, PolicySnapshot, PolicyTag,
};
use crate::error::{invalid, Error, Result};
use crate::mdm::{
    count_law, MaskRule, MaskedSequence, MaskingConfig, TimeSampler, Token, TokenSequence,
    Vocabulary, WeightSchedule,
};
use crate::numerics::{log_softmax, math, sum, ParamVector, Real};

pub const MAX_VOCAB: usize = 4;
pub const MAX_COMPLETION: usize = 4;
pub const MAX_SPACE: usize = 256;

/// Tabular old and reference policies over a completion space small enough
/// to list.
#[derive(Clone, Debug)]
pub struct EnumerableInstance {
    prompt: Vec<Token>,
    spec: DenoiserSpec,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    space: Vec<TokenSequence>,
}

impl EnumerableInstance {
    pub fn new(prompt: &[Token], old: PolicySnapshot, reference: PolicySnapshot) -> Result<Self> {
        let spec = *old.spec();
        if *reference.spec() != spec {
            return Err(invalid("old and reference policies differ in shape"));
        }
        if spec.family() != Family::Tabular {
            return Err(invalid("enumerable instances need tabular policies"));
        }
        let (v, n_c) = (spec.vocab().size(), spec.completion_len());
        if v > MAX_VOCAB || n_c > MAX_COMPLETION || v.pow(n_c as u32) > MAX_SPACE {
            return Err(Error::TooLarge(format!(
                "completion space V^N_c = {v}^{n_c}; limits are V <= {MAX_VOCAB}, N_c <= {MAX_COMPLETION}, \
                 |X| <= {MAX_SPACE}"
            )));
        }
        if prompt.len() != spec.prompt_len() {
            return Err(invalid(format!(
                "prompt length {} but policies expect {}",
                prompt.len(),
                spec.prompt_len()
            )));
        }
        let space = (0..v.pow(n_c as u32))
            .map(|i| TokenSequence::join(prompt, &digits(i, v, n_c), spec.vocab()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt: prompt.to_vec(),
            spec,
            old,
            reference,
            space,
        })
    }

    /// Independent uniform(-scale, scale) logits for old and reference.
    pub fn random<R: Rng + ?Sized>(
        v: u32,
        prompt: &[Token],
        n_c: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = DenoiserSpec::new(Vocabulary::new(v)?, prompt.len(), n_c, Family::Tabular)?;
        let old = random_tabular(spec, scale, PolicyTag::Old, rng)?;
        let reference = random_tabular(spec, scale, PolicyTag::Ref, rng)?;
        Self::new(prompt, old, reference)
    }

    /// Old and reference whose rows ignore the context, so every conditional
    /// is the restriction of one product distribution.
    pub fn context_free<R: Rng + ?Sized>(
        v: u32,
        prompt: &[Token],
        n_c: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = DenoiserSpec::new(Vocabulary::new(v)?, prompt.len(), n_c, Family::Tabular)?;
        let old = context_free_tabular(spec, scale, PolicyTag::Old, rng)?;
        let reference = context_free_tabular(spec, scale, PolicyTag::Ref, rng)?;
        Self::new(prompt, old, reference)
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn old(&self) -> &PolicySnapshot {
        &self.old
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    /// Every completion, prompt included, in lexicographic order of the
    /// completion read little-endian.
    pub fn completions(&self) -> &[TokenSequence] {
        &self.space
    }

    pub fn index_of(&self, x0: &TokenSequence) -> Option<usize> {
        self.space.iter().position(|c| c == x0)
    }

    /// Indices of completions agreeing with the unmasked tokens of `x_t`.
    pub fn consistent(&self, x_t: &MaskedSequence) -> Result<Vec<usize>> {
        self.check_input(x_t)?;
        Ok((0..self.space.len())
            .filter(|&i| x_t.is_consistent_with(&self.space[i]))
            .collect())
    }

    fn check_input(&self, x_t: &MaskedSequence) -> Result<()> {
        if x_t.len() != self.spec.seq_len()
            || x_t.prompt_len() != self.spec.prompt_len()
            || x_t.tokens()[..x_t.prompt_len()] != self.prompt[..]
        {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "sequence of length {} with the instance prompt",
                    self.spec.seq_len()
                ),
                got: format!("length {}", x_t.len()),
            });
        }
        Ok(())
    }

    /// `log p(x0 | x_t)` under tabular `params` for each consistent
    /// completion, in [`Self::consistent`] order.
    pub fn conditional_log_probs<S: Real>(
        &self,
        params: &[S],
        x_t: &MaskedSequence,
    ) -> Result<Vec<S>> {
        let out = self.spec.logits(params, x_t)?;
        let rows: Vec<(usize, Vec<S>)> = x_t
            .masked_positions()
            .iter()
            .map(|&n| (n, log_softmax(out.row(n))))
            .collect();
        Ok(self
            .consistent(x_t)?
            .into_iter()
            .map(|i| {
                sum(rows
                    .iter()
                    .map(|(n, r)| r[self.space[i].tokens()[*n] as usize]))
            })
            .collect())
    }

    /// Every masked input over the instance: each completion mask together
    /// with each assignment of the unmasked completion tokens.
    pub fn masked_inputs(&self) -> Result<Vec<MaskedSequence>> {
        let n_c = self.spec.completion_len();
        let n_p = self.prompt.len();
        let mut out = Vec::new();
        for mask in 0u32..(1 << n_c) {
            let positions: Vec<usize> = (0..n_c)
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| n_p + j)
                .collect();
            let t = positions.len() as f64 / n_c as f64;
            for x0 in &self.space {
                // One representative per assignment of the visible tokens.
                let visible_is_canonical = positions.iter().all(|&n| x0.tokens()[n] == 0);
                if visible_is_canonical {
                    out.push(MaskedSequence::from_positions(
                        x0,
                        t,
                        &positions,
                        MaskRule::ExactCount,
                    )?);
                }
            }
        }
        Ok(out)
    }
}

fn digits(mut i: usize, v: usize, n: usize) -> Vec<Token> {
    (0..n)
        .map(|_| {
            let d = (i % v) as Token;
            i /= v;
            d
        })
        .collect()
}

fn random_tabular<R: Rng + ?Sized>(
    spec: DenoiserSpec,
    scale: f64,
    tag: PolicyTag,
    rng: &mut R,
) -> Result<PolicySnapshot> {
    let p = (0..spec.num_params())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    PolicySnapshot::new(spec, ParamVector::new(p)?, tag)
}

fn context_free_tabular<R: Rng + ?Sized>(
    spec: DenoiserSpec,
    scale: f64,
    tag: PolicyTag,
    rng: &mut R,
) -> Result<PolicySnapshot> {
    let block = spec.seq_len() * spec.vocab().size();
    let rows: Vec<f64> = (0..block)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    let contexts = spec.num_params() / block;
    let p = (0..contexts).flat_map(|_| rows.iter().copied()).collect();
    PolicySnapshot::new(spec, ParamVector::new(p)?, tag)
}

/// Random tabular parameters shaped like the instance's policies.
pub fn random_theta<R: Rng + ?Sized>(
    inst: &EnumerableInstance,
    scale: f64,
    rng: &mut R,
) -> Result<PolicySnapshot> {
    random_tabular(inst.spec, scale, PolicyTag::Theta, rng)
}

/// `theta` with seeded Gaussian noise of standard deviation `sigma` on every
/// parameter.
pub fn perturbed<R: Rng + ?Sized>(
    policy: &PolicySnapshot,
    sigma: f64,
    rng: &mut R,
) -> Result<PolicySnapshot> {
    let normal =
        Normal::new(0.0, sigma).map_err(|e| invalid(format!("noise scale {sigma}: {e}")))?;
    let p = policy
        .params()
        .as_slice()
        .iter()
        .map(|&x| x + normal.sample(rng))
        .collect();
    PolicySnapshot::new(*policy.spec(), ParamVector::new(p)?, PolicyTag::Theta)
}

/// Per consistent completion: `(1-beta) log p_old + beta log p_ref + psi A`.
fn guided_log_terms<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta {beta} outside [0, 1]")));
    }
    let idx = inst.consistent(x_t)?;
    let lo = inst.conditional_log_probs(inst.old.params().as_slice(), x_t)?;
    let lr = inst.conditional_log_probs(inst.reference.params().as_slice(), x_t)?;
    let base: Vec<f64> = lo
        .iter()
        .zip(&lr)
        .map(|(o, r)| (1.0 - beta) * o + beta * r)
        .collect();
    let mut guided = Vec::with_capacity(idx.len());
    for (&i, b) in idx.iter().zip(&base) {
        let a = advantage_fn(&inst.space[i]);
        if !a.is_finite() {
            return Err(Error::NonFiniteValue { what: "advantage" });
        }
        guided.push(b + psi * a);
    }
    Ok((idx, base, guided))
}

/// `log Z_t`, summed in log space.
pub fn brute_force_log_partition<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
) -> Result<f64> {
    let (_, _, g) = guided_log_terms(inst, x_t, advantage_fn, psi, beta)?;
    Ok(math::logsumexp(&g))
}

/// `Z_t = sum_{x0 consistent} p_old^(1-beta) p_ref^beta exp(psi A)`.
pub fn brute_force_partition<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
) -> Result<f64> {
    brute_force_log_partition(inst, x_t, advantage_fn, psi, beta).map(math::exp)
}

/// `Z_t` as a plain sum of exponentials visited in `order`, a permutation
/// of the consistent completions.
pub fn brute_force_partition_in_order<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
    order: &[usize],
) -> Result<f64> {
    let (idx, _, g) = guided_log_terms(inst, x_t, advantage_fn, psi, beta)?;
    let mut seen = alloc::vec![false; idx.len()];
    let mut z = 0.0;
    for &k in order {
        if k >= idx.len() || seen[k] {
            return Err(invalid(
                "order is not a permutation of the consistent completions",
            ));
        }
        seen[k] = true;
        z += math::exp(g[k]);
    }
    if seen.iter().any(|s| !s) {
        return Err(invalid(
            "order is not a permutation of the consistent completions",
        ));
    }
    Ok(z)
}

/// The normalized guided teacher on the completions consistent with `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteTeacher {
    /// Indices into [`EnumerableInstance::completions`].
    pub completions: Vec<usize>,
    pub probs: Vec<f64>,
    /// Normalized geometric mixture `p_old^ref(x0 | x_t)`.
    pub base: Vec<f64>,
    /// `log E_{p_old^ref}[exp(psi A)]`.
    pub a_t: f64,
}

impl BruteTeacher {
    pub fn prob_of(&self, index: usize) -> Option<f64> {
        self.completions
            .iter()
            .position(|&i| i == index)
            .map(|k| self.probs[k])
    }
}

pub fn brute_force_teacher<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
) -> Result<BruteTeacher> {
    let (idx, base, guided) = guided_log_terms(inst, x_t, advantage_fn, psi, beta)?;
    let log_c = math::logsumexp(&base);
    let log_base: Vec<f64> = base.iter().map(|b| b - log_c).collect();
    let tilted: Vec<f64> = log_base
        .iter()
        .zip(&guided)
        .zip(&base)
        .map(|((lb, g), b)| lb + (g - b))
        .collect();
    let a_t = math::logsumexp(&tilted);
    let probs = tilted.iter().map(|x| math::exp(x - a_t)).collect();
    Ok(BruteTeacher {
        completions: idx,
        probs,
        base: log_base.iter().map(|&x| math::exp(x)).collect(),
        a_t,
    })
}

/// `log sum_{x0 consistent} p_old^(1-beta) p_ref^beta`, the normalizer of the
/// geometric mixture.
pub fn log_mixture_normalizer(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    beta: f64,
) -> Result<f64> {
    let (_, base, _) = guided_log_terms(inst, x_t, &|_: &TokenSequence| 0.0, 0.0, beta)?;
    Ok(math::logsumexp(&base))
}

/// Sequence-level centralization by enumeration: the summed raw logits of
/// each consistent completion minus their mean over the consistent set.
pub fn sequence_centralized(
    inst: &EnumerableInstance,
    out: &DenoiserOutput,
    x_t: &MaskedSequence,
) -> Result<Vec<f64>> {
    let idx = inst.consistent(x_t)?;
    let scores: Vec<f64> = idx
        .iter()
        .map(|&i| {
            x_t.masked_positions()
                .iter()
                .map(|&n| out.row(n)[inst.space[i].tokens()[n] as usize])
                .sum()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(scores.iter().map(|s| s - mean).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LikelihoodMode {
    /// The distribution of a given decoding schedule.
    Schedule(DecodeSchedule),
    /// Random order, one token per step, temperature 1.
    FullEnumeration,
}

/// Exact `log` marginal probability of `x0` under the reverse process.
pub fn exact_log_likelihood(
    policy: &PolicySnapshot,
    x0: &TokenSequence,
    mode: LikelihoodMode,
) -> Result<f64> {
    let sched = match mode {
        LikelihoodMode::Schedule(s) => s,
        LikelihoodMode::FullEnumeration => {
            DecodeSchedule::random_order(policy.spec().completion_len())
        }
    };
    rm_exact_log_prob(policy, x0, &sched)
}

/// Largest completion length accepted by [`exact_elbo`].
pub const MAX_EXACT_ELBO_COMPLETION: usize = 12;

/// Expectation of the ELBO estimator over time and mask draws, by summing
/// over every mask.
pub fn exact_elbo<S: Real>(
    spec: &DenoiserSpec,
    params: &[S],
    x0: &TokenSequence,
    sampler: TimeSampler,
    weight: WeightSchedule,
) -> Result<S> {
    let n_c = x0.completion_len();
    if n_c > MAX_EXACT_ELBO_COMPLETION {
        return Err(Error::TooLarge(format!(
            "exact ELBO needs N_c <= {MAX_EXACT_ELBO_COMPLETION}, got {n_c}"
        )));
    }
    let law = count_law(n_c, sampler, weight);
    let masks = masks_by_count(x0.prompt_len(), n_c);
    let mut terms = Vec::new();
    for (m, p, w) in law {
        let coef = p * w / masks[m].len() as f64;
        for positions in &masks[m] {
            let x_t = MaskedSequence::from_positions(
                x0,
                m as f64 / n_c as f64,
                positions,
                MaskRule::ExactCount,
            )?;
            let out = spec.logits(params, &x_t)?;
            for &n in positions {
                terms.push(log_softmax(out.row(n))[x0.tokens()[n] as usize] * coef);
            }
        }
    }
    Ok(sum(terms))
}

fn masks_by_count(n_p: usize, n_c: usize) -> Vec<Vec<Vec<usize>>> {
    let mut by = alloc::vec![Vec::new(); n_c + 1];
    for mask in 0u32..(1 << n_c) {
        let pos: Vec<usize> = (0..n_c)
            .filter(|j| mask & (1 << j) != 0)
            .map(|j| n_p + j)
            .collect();
        by[pos.len()].push(pos);
    }
    by
}

/// Forward-KL distillation to the guided teacher, averaged over masked
/// inputs drawn from the tilted data distribution. The data marginal of each
/// masked input is read off the teacher at the fully masked input, which is
/// the tilted sequence distribution when old and reference ignore context.
pub fn forward_kl_objective<S: Real, F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    theta: &[S],
    advantage_fn: &F,
    psi: f64,
    beta: f64,
    sampler: TimeSampler,
    weight: WeightSchedule,
) -> Result<S> {
    let n_c = inst.spec.completion_len();
    let full = MaskedSequence::fully_masked(&inst.prompt, n_c, inst.spec.vocab())?;
    let global = brute_force_teacher(inst, &full, advantage_fn, psi, beta)?;
    let law = count_law(n_c, sampler, weight);
    let mut terms = Vec::new();
    for x_t in inst.masked_inputs()? {
        let m = x_t.masked_positions().len();
        if m == 0 {
            continue;
        }
        let (_, p, w) = law[m - 1];
        let n_masks = binomial(n_c, m);
        let teacher = brute_force_teacher(inst, &x_t, advantage_fn, psi, beta)?;
        let marginal: f64 = teacher
            .completions
            .iter()
            .map(|&i| global.prob_of(i).unwrap_or(0.0))
            .sum();
        if marginal == 0.0 {
            continue;
        }
        let lp = inst.conditional_log_probs(theta, &x_t)?;
        let coef = p * w / n_masks * marginal;
        for (l, &q) in lp.iter().zip(&teacher.probs) {
            if q > 0.0 {
                terms.push((-*l + math::ln(q)) * (q * coef));
            }
        }
    }
    Ok(sum(terms))
}

/// `sum_x0 p_old^ref(x0) exp(psi A(x0)) * (-exact ELBO_theta(x0))`, with
/// `p_old^ref` taken at the fully masked input.
pub fn exp_weighted_elbo_objective<S: Real, F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    theta: &[S],
    advantage_fn: &F,
    psi: f64,
    beta: f64,
    sampler: TimeSampler,
    weight: WeightSchedule,
) -> Result<S> {
    let full =
        MaskedSequence::fully_masked(&inst.prompt, inst.spec.completion_len(), inst.spec.vocab())?;
    let t = brute_force_teacher(inst, &full, advantage_fn, psi, beta)?;
    let mut terms = Vec::with_capacity(t.completions.len());
    for (&i, &b) in t.completions.iter().zip(&t.base) {
        let x0 = &inst.space[i];
        let w = b * math::exp(psi * advantage_fn(x0));
        terms.push(-exact_elbo(&inst.spec, theta, x0, sampler, weight)? * w);
    }
    Ok(sum(terms))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Reverse KL to the guided teacher split into a reward term, the
/// log-partition baseline and the old/reference regularizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlDecomposition {
    pub direct: f64,
    /// `-psi E_theta[A]`.
    pub reward: f64,
    /// `log Z_t`.
    pub baseline: f64,
    /// `(1-beta) E_theta[log p_theta - log p_old] + beta E_theta[log p_theta - log p_ref]`.
    pub regularization: f64,
}

impl KlDecomposition {
    pub fn sum(&self) -> f64 {
        self.reward + self.baseline + self.regularization
    }
}

pub fn reverse_kl_decomposition<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    theta: &PolicySnapshot,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
    x_t: &MaskedSequence,
) -> Result<KlDecomposition> {
    let direct = crate::objectives::reverse_kl_loss_exact(
        inst,
        theta.params().as_slice(),
        advantage_fn,
        psi,
        beta,
        x_t,
    )?;
    let idx = inst.consistent(x_t)?;
    let lt = inst.conditional_log_probs(theta.params().as_slice(), x_t)?;
    let lo = inst.conditional_log_probs(inst.old.params().as_slice(), x_t)?;
    let lr = inst.conditional_log_probs(inst.reference.params().as_slice(), x_t)?;
    let (mut reward, mut reg) = (0.0, 0.0);
    for k in 0..idx.len() {
        let p = math::exp(lt[k]);
        reward -= p * psi * advantage_fn(&inst.space[idx[k]]);
        reg += p * ((1.0 - beta) * (lt[k] - lo[k]) + beta * (lt[k] - lr[k]));
    }
    let baseline = brute_force_log_partition(inst, x_t, advantage_fn, psi, beta)?;
    Ok(KlDecomposition {
        direct,
        reward,
        baseline,
        regularization: reg,
    })
}

/// `E_p[psi A] - (1-beta) KL(p || p_old) - beta KL(p || p_ref)` for a
/// distribution `p` over the completions consistent with `x_t`.
pub fn regularized_objective<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    p: &[f64],
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
) -> Result<f64> {
    let idx = inst.consistent(x_t)?;
    if p.len() != idx.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} probabilities", idx.len()),
            got: format!("{}", p.len()),
        });
    }
    let lo = inst.conditional_log_probs(inst.old.params().as_slice(), x_t)?;
    let lr = inst.conditional_log_probs(inst.reference.params().as_slice(), x_t)?;
    let mut j = 0.0;
    for k in 0..idx.len() {
        if p[k] > 0.0 {
            let lp = math::ln(p[k]);
            j += p[k]
                * (psi * advantage_fn(&inst.space[idx[k]])
                    - (1.0 - beta) * (lp - lo[k])
                    - beta * (lp - lr[k]));
        }
    }
    Ok(j)
}

/// Exponentiated-gradient ascent on [`regularized_objective`] from the
/// uniform distribution.
pub fn mirror_ascent<F: Fn(&TokenSequence) -> f64>(
    inst: &EnumerableInstance,
    x_t: &MaskedSequence,
    advantage_fn: &F,
    psi: f64,
    beta: f64,
    step: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    let idx = inst.consistent(x_t)?;
    let lo = inst.conditional_log_probs(inst.old.params().as_slice(), x_t)?;
    let lr = inst.conditional_log_probs(inst.reference.params().as_slice(), x_t)?;
    let mut logp = alloc::vec![-math::ln(idx.len() as f64); idx.len()];
    for _ in 0..iters {
        let g: Vec<f64> = (0..idx.len())
            .map(|k| {
                psi * advantage_fn(&inst.space[idx[k]])
                    - (1.0 - beta) * (logp[k] - lo[k])
                    - beta * (logp[k] - lr[k])
                    - 1.0
            })
            .collect();
        let next: Vec<f64> = logp.iter().zip(&g).map(|(l, g)| l + step * g).collect();
        let z = math::logsumexp(&next);
        logp = next.iter().map(|x| x - z).collect();
    }
    Ok(logp.iter().map(|&x| math::exp(x)).collect())
}

/// One completion's row in a [`TimReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct TimRecord {
    pub completion: Vec<Token>,
    /// Exact log-probability under the decoding schedule, old policy.
    pub log_pi_rm_old: f64,
    /// Exact log-likelihood of the random-order reverse process, old policy.
    pub log_likelihood_old: f64,
    /// Mean and standard deviation of Monte-Carlo ELBO estimates, old policy.
    pub elbo_mean: f64,
    pub elbo_std: f64,
    pub elbo_exact_old: f64,
    pub log_pi_rm_theta: f64,
    pub elbo_exact_theta: f64,
    /// `(ELBO_theta - ELBO_old) - (log pi_rm_theta - log pi_rm_old)`.
    pub ratio_bias: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimSummary {
    /// Mean absolute ratio bias with completions drawn from the old sampler.
    pub mean_abs_bias: f64,
    pub max_abs_bias: f64,
    /// Largest `ELBO mean - exact log-likelihood` in standard errors.
    pub max_elbo_excess_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimReport {
    pub records: Vec<TimRecord>,
    pub summary: TimSummary,
}

/// Training-inference mismatch between ELBO ratios and sampler ratios for
/// `theta` against the instance's old policy. `samples` Monte-Carlo ELBO
/// estimates with `k` time samples each are drawn per completion.
pub fn tim_report<R: Rng + ?Sized>(
    inst: &EnumerableInstance,
    theta: &PolicySnapshot,
    sched: &DecodeSchedule,
    k: usize,
    samples: usize,
    rng: &mut R,
) -> Result<TimReport> {
    if *theta.spec() != inst.spec {
        return Err(invalid("theta differs in shape from the instance"));
    }
    if samples < 2 {
        return Err(invalid("at least two ELBO samples are needed for a spread"));
    }
    let cfg = MaskingConfig::elbo();
    let mut records = Vec::with_capacity(inst.space.len());
    let (mut mean_abs, mut max_abs, mut max_excess) = (0.0, 0.0f64, f64::NEG_INFINITY);
    for x0 in &inst.space {
        let log_pi_rm_old = rm_exact_log_prob(&inst.old, x0, sched)?;
        let log_pi_rm_theta = rm_exact_log_prob(theta, x0, sched)?;
        let log_likelihood_old =
            exact_log_likelihood(&inst.old, x0, LikelihoodMode::FullEnumeration)?;
        let ests = (0..samples)
            .map(|_| elbo_estimate(&inst.old, x0, k, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let elbo_mean = ests.iter().sum::<f64>() / samples as f64;
        let var = ests
            .iter()
            .map(|e| (e - elbo_mean) * (e - elbo_mean))
            .sum::<f64>()
            / (samples - 1) as f64;
        let elbo_std = math::sqrt(var);
        let elbo_exact_old = exact_elbo(
            &inst.spec,
            inst.old.params().as_slice(),
            x0,
            cfg.sampler,
            cfg.weight,
        )?;
        let elbo_exact_theta = exact_elbo(
            &inst.spec,
            theta.params().as_slice(),
            x0,
            cfg.sampler,
            cfg.weight,
        )?;
        let ratio_bias = (elbo_exact_theta - elbo_exact_old) - (log_pi_rm_theta - log_pi_rm_old);
        mean_abs += math::exp(log_pi_rm_old) * ratio_bias.abs();
        max_abs = max_abs.max(ratio_bias.abs());
        let se = elbo_std / math::sqrt(samples as f64);
        if se > 0.0 {
            max_excess = max_excess.max((elbo_mean - log_likelihood_old) / se);
        } else if elbo_mean > log_likelihood_old + 1e-12 {
            max_excess = f64::INFINITY;
        }
        records.push(TimRecord {
            completion: x0.completion().to_vec(),
            log_pi_rm_old,
            log_likelihood_old,
            elbo_mean,
            elbo_std,
            elbo_exact_old,
            log_pi_rm_theta,
            elbo_exact_theta,
            ratio_bias,
        });
    }
    Ok(TimReport {
        records,
        summary: TimSummary {
            mean_abs_bias: mean_abs,
            max_abs_bias: max_abs,
            max_elbo_excess_se: max_excess,
        },
    })
}

/// Seeds of the fixed mismatch fixture.
pub const TIM_FIXTURE_SEED: u64 = 2024;

/// The fixed mismatch fixture: `V = 2`, `N_c = 2`, random tabular old
/// policy, theta = old plus Gaussian noise with `sigma = 0.1`, decoded with
/// low-confidence selection in two steps at temperature 0.9.
pub fn tim_fixture() -> Result<(EnumerableInstance, PolicySnapshot, DecodeSchedule)> {
    let mut rng = crate::rng::substream(TIM_FIXTURE_SEED, &[crate::rng::label::INIT]);
    let inst = EnumerableInstance::random(2, &[], 2, 1.5, &mut rng)?;
    let mut noise = crate::rng::substream(TIM_FIXTURE_SEED, &[crate::rng::label::NOISE]);
    let theta = perturbed(inst.old(), 0.1, &mut noise)?;
    let sched = DecodeSchedule {
        steps: 2,
        selection: Selection::LowConfidence,
        block_size: None,
        temperature: 0.9,
    };
    Ok((inst, theta, sched))
}

/// Exact logits of a snapshot at the fully masked input, for reports.
pub fn fully_masked_logits(
    inst: &EnumerableInstance,
    policy: &PolicySnapshot,
) -> Result<DenoiserOutput> {
    let full =
        MaskedSequence::fully_masked(&inst.prompt, inst.spec.completion_len(), inst.spec.vocab())?;
    denoiser_logits(policy, &full)
}
