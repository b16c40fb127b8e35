//! Iterative re-masking decoders and the exact distribution they induce.
//!
//! Each step evaluates the denoiser once, samples a token at every masked
//! position of the active block, keeps a scheduled number of them and
//! re-masks the rest. With blocks, blocks are completed left to right.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::denoiser::{denoiser_logits, PolicySnapshot};
use crate::error::{invalid, Error, Result};
use crate::mdm::{MaskedSequence, Token, TokenSequence};
use crate::numerics::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Keep the positions whose sampled token is most probable; ties go to
    /// the lowest position.
    LowConfidence,
    /// Keep a uniformly random subset.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSchedule {
    pub steps: usize,
    pub selection: Selection,
    pub block_size: Option<usize>,
    /// Sampling temperature; `0` decodes greedily.
    pub temperature: f64,
}

/// One decoding step of a validated schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedStep {
    /// Masked fraction of the completion when the step starts.
    pub t: f64,
    /// Completion-relative block `[start, end)`.
    pub block: (usize, usize),
    /// Positions finalized by this step.
    pub count: usize,
}

impl DecodeSchedule {
    /// Random order, one token per step, no blocks, temperature 1: the
    /// discretized reverse process of the denoiser itself.
    pub fn random_order(completion_len: usize) -> Self {
        Self {
            steps: completion_len,
            selection: Selection::Random,
            block_size: None,
            temperature: 1.0,
        }
    }

    /// Rollout defaults: low-confidence selection, temperature 0.9, half as
    /// many steps as tokens and blocks of a quarter of the completion. Blocks
    /// are dropped when the completion or the steps cannot be split evenly.
    pub fn rollout_default(completion_len: usize) -> Self {
        let steps = (completion_len / 2).max(1);
        let block = completion_len / 4;
        let fits = block >= 1
            && completion_len.is_multiple_of(block)
            && steps.is_multiple_of(completion_len / block)
            && steps / (completion_len / block) <= block;
        Self {
            steps,
            selection: Selection::LowConfidence,
            block_size: if fits { Some(block) } else { None },
            temperature: 0.9,
        }
    }

    pub fn plan(&self, completion_len: usize) -> Result<Vec<PlannedStep>> {
        if self.steps == 0 {
            return Err(Error::InvalidSchedule(
                "at least one step is required".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        let block = self.block_size.unwrap_or(completion_len);
        if block == 0 || !completion_len.is_multiple_of(block) {
            return Err(Error::InvalidSchedule(format!(
                "block size {block} must divide completion length {completion_len}"
            )));
        }
        let blocks = completion_len / block;
        if !self.steps.is_multiple_of(blocks) {
            return Err(Error::InvalidSchedule(format!(
                "{} steps cannot be split evenly over {blocks} blocks",
                self.steps
            )));
        }
        let per_block = self.steps / blocks;
        if per_block > block {
            return Err(Error::InvalidSchedule(format!(
                "{per_block} steps per block exceed block size {block}"
            )));
        }
        let mut plan = Vec::with_capacity(self.steps);
        let mut remaining = completion_len;
        for b in 0..blocks {
            for j in 0..per_block {
                let count = (j + 1) * block / per_block - j * block / per_block;
                plan.push(PlannedStep {
                    t: remaining as f64 / completion_len as f64,
                    block: (b * block, (b + 1) * block),
                    count,
                });
                remaining -= count;
            }
        }
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub positions: Vec<usize>,
    pub tokens: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub completion: TokenSequence,
    pub schedule: DecodeSchedule,
    pub steps: Vec<StepRecord>,
}

/// Token distribution used for sampling at temperature `tau`.
fn sampling_probs(row: &[f64], tau: f64) -> Vec<f64> {
    if tau == 0.0 {
        let best = argmax(row);
        return (0..row.len())
            .map(|i| if i == best { 1.0 } else { 0.0 })
            .collect();
    }
    let scaled: Vec<f64> = row.iter().map(|x| x / tau).collect();
    let lse = math::logsumexp(&scaled);
    scaled.iter().map(|x| math::exp(x - lse)).collect()
}

/// Untempered probabilities; confidence is read from these.
fn softmax(row: &[f64]) -> Vec<f64> {
    sampling_probs(row, 1.0)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total: last token with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Positions kept by low-confidence selection: `count` highest confidences,
/// ties to the lowest position.
fn most_confident(candidates: &[usize], confidence: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .partial_cmp(&confidence[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(candidates[a].cmp(&candidates[b]))
    });
    let mut kept: Vec<usize> = order[..count].iter().map(|&i| candidates[i]).collect();
    kept.sort_unstable();
    kept
}

fn block_candidates(x: &MaskedSequence, step: &PlannedStep) -> Vec<usize> {
    let (lo, hi) = (x.prompt_len() + step.block.0, x.prompt_len() + step.block.1);
    x.masked_positions()
        .iter()
        .copied()
        .filter(|&n| n >= lo && n < hi)
        .collect()
}

/// Samples a completion of `prompt` from `policy` under `sched`.
pub fn decode<R: Rng + ?Sized>(
    policy: &PolicySnapshot,
    prompt: &[Token],
    sched: &DecodeSchedule,
    rng: &mut R,
) -> Result<Rollout> {
    let spec = policy.spec();
    let n_c = spec.completion_len();
    let plan = sched.plan(n_c)?;
    let mut x = MaskedSequence::fully_masked(prompt, n_c, spec.vocab())?;
    let mut records = Vec::with_capacity(plan.len());
    for step in &plan {
        let out = denoiser_logits(policy, &x)?;
        let cand = block_candidates(&x, step);
        let mut tokens = Vec::with_capacity(cand.len());
        let mut confidence = Vec::with_capacity(cand.len());
        for &n in &cand {
            let probs = sampling_probs(out.row(n), sched.temperature);
            let tok = sample_index(&probs, rng);
            confidence.push(softmax(out.row(n))[tok]);
            tokens.push(tok as Token);
        }
        let kept = match sched.selection {
            Selection::LowConfidence => most_confident(&cand, &confidence, step.count),
            Selection::Random => {
                let mut k: Vec<usize> = index::sample(rng, cand.len(), step.count)
                    .into_iter()
                    .map(|i| cand[i])
                    .collect();
                k.sort_unstable();
                k
            }
        };
        let mut rec = StepRecord {
            positions: Vec::with_capacity(kept.len()),
            tokens: Vec::new(),
        };
        for &n in &kept {
            let i = cand
                .iter()
                .position(|&c| c == n)
                .expect("kept position is a candidate");
            x.reveal(n, tokens[i])?;
            rec.positions.push(n);
            rec.tokens.push(tokens[i]);
        }
        records.push(rec);
    }
    let completion = TokenSequence::new(x.tokens().to_vec(), prompt.len(), spec.vocab())?;
    Ok(Rollout {
        completion,
        schedule: *sched,
        steps: records,
    })
}

/// Enumeration limits for the exact sampler distribution.
pub const MAX_EXACT_VOCAB: usize = 4;
pub const MAX_EXACT_COMPLETION: usize = 4;
pub const MAX_EXACT_STEPS: usize = 4;

/// Exact `log pi_rm(x0)`: the log-probability that `decode` returns `x0`,
/// summed over every selection set and every sampled-then-discarded token.
pub fn rm_exact_log_prob(
    policy: &PolicySnapshot,
    x0: &TokenSequence,
    sched: &DecodeSchedule,
) -> Result<f64> {
    let spec = policy.spec();
    let (v, n_c) = (spec.vocab().size(), spec.completion_len());
    if v > MAX_EXACT_VOCAB || n_c > MAX_EXACT_COMPLETION || sched.steps > MAX_EXACT_STEPS {
        return Err(Error::TooLarge(format!(
            "exact sampler enumeration needs V <= {MAX_EXACT_VOCAB}, N_c <= {MAX_EXACT_COMPLETION}, \
             T <= {MAX_EXACT_STEPS}; got V = {v}, N_c = {n_c}, T = {}",
            sched.steps
        )));
    }
    if x0.len() != spec.seq_len() || x0.prompt_len() != spec.prompt_len() {
        return Err(invalid("clean sequence does not match the policy shape"));
    }
    let plan = sched.plan(n_c)?;
    let x = MaskedSequence::fully_masked(x0.prompt(), n_c, spec.vocab())?;
    let p = reach_prob(policy, x0, sched, &plan, 0, &x)?;
    Ok(math::ln(p))
}

fn reach_prob(
    policy: &PolicySnapshot,
    x0: &TokenSequence,
    sched: &DecodeSchedule,
    plan: &[PlannedStep],
    k: usize,
    x: &MaskedSequence,
) -> Result<f64> {
    let Some(step) = plan.get(k) else {
        return Ok(1.0);
    };
    let out = denoiser_logits(policy, x)?;
    let cand = block_candidates(x, step);
    let probs: Vec<Vec<f64>> = cand
        .iter()
        .map(|&n| sampling_probs(out.row(n), sched.temperature))
        .collect();
    let conf: Vec<Vec<f64>> = cand.iter().map(|&n| softmax(out.row(n))).collect();
    let target: Vec<usize> = cand.iter().map(|&n| x0.tokens()[n] as usize).collect();
    let v = policy.spec().vocab().size();
    let m = cand.len();
    let mut total = 0.0;
    for subset in subsets_of_size(m, step.count) {
        let keep_p: f64 = subset.iter().map(|&i| probs[i][target[i]]).product();
        if keep_p == 0.0 {
            continue;
        }
        let select_p = match sched.selection {
            Selection::Random => 1.0 / binomial(m, step.count),
            Selection::LowConfidence => {
                // Marginalize the tokens sampled at positions that get re-masked.
                let rest: Vec<usize> = (0..m).filter(|i| !subset.contains(i)).collect();
                let mut acc = 0.0;
                for assign in 0..v.pow(rest.len() as u32) {
                    let mut tok = target.clone();
                    let mut a = assign;
                    let mut w = 1.0;
                    for &i in &rest {
                        tok[i] = a % v;
                        a /= v;
                        w *= probs[i][tok[i]];
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let c: Vec<f64> = (0..m).map(|i| conf[i][tok[i]]).collect();
                    let kept = most_confident(&cand, &c, step.count);
                    if kept.iter().zip(&subset).all(|(&n, &i)| n == cand[i]) {
                        acc += w;
                    }
                }
                acc
            }
        };
        if select_p == 0.0 {
            continue;
        }
        let mut next = x.clone();
        for &i in &subset {
            next.reveal(cand[i], target[i] as Token)?;
        }
        total += keep_p * select_p * reach_prob(policy, x0, sched, plan, k + 1, &next)?;
    }
    Ok(total)
}

/// Index subsets of `0..n` with `k` elements, each sorted ascending.
fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1u32 << n))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|&i| m & (1 << i) != 0).collect())
        .collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserSpec, Family, PolicyTag};
    use crate::mdm::Vocabulary;
    use crate::numerics::ParamVector;
    use crate::rng::stream;
    use alloc::vec;

    fn tabular(v: u32, n_p: usize, n_c: usize, seed: u64, scale: f64) -> PolicySnapshot {
        let spec =
            DenoiserSpec::new(Vocabulary::new(v).unwrap(), n_p, n_c, Family::Tabular).unwrap();
        let mut rng = stream(seed);
        let p = (0..spec.num_params())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        PolicySnapshot::new(spec, ParamVector::new(p).unwrap(), PolicyTag::Old).unwrap()
    }

    fn all_completions(v: u32, prompt: &[Token], n_c: usize) -> Vec<TokenSequence> {
        let vocab = Vocabulary::new(v).unwrap();
        (0..(v as usize).pow(n_c as u32))
            .map(|mut i| {
                let c: Vec<Token> = (0..n_c)
                    .map(|_| {
                        let t = (i % v as usize) as Token;
                        i /= v as usize;
                        t
                    })
                    .collect();
                TokenSequence::join(prompt, &c, vocab).unwrap()
            })
            .collect()
    }

    #[test]
    fn plan_counts_sum_to_completion() {
        let s = DecodeSchedule {
            steps: 4,
            selection: Selection::LowConfidence,
            block_size: Some(2),
            temperature: 0.9,
        };
        let plan = s.plan(8).unwrap();
        assert_eq!(plan.iter().map(|p| p.count).sum::<usize>(), 8);
        assert_eq!(plan[3].block, (6, 8));
        let s = DecodeSchedule {
            steps: 3,
            selection: Selection::Random,
            block_size: None,
            temperature: 1.0,
        };
        assert_eq!(
            s.plan(7)
                .unwrap()
                .iter()
                .map(|p| p.count)
                .collect::<Vec<_>>(),
            vec![2, 2, 3]
        );
        assert!(DecodeSchedule {
            block_size: Some(3),
            ..s
        }
        .plan(8)
        .is_err());
        assert!(DecodeSchedule { steps: 9, ..s }.plan(8).is_err());
        assert!(DecodeSchedule { steps: 0, ..s }.plan(8).is_err());
        assert!(DecodeSchedule {
            temperature: -1.0,
            ..s
        }
        .plan(8)
        .is_err());
        assert_eq!(DecodeSchedule::rollout_default(8).block_size, Some(2));
        for n in 1..=16 {
            assert!(
                DecodeSchedule::rollout_default(n).plan(n).is_ok(),
                "N_c = {n}"
            );
        }
    }

    #[test]
    fn every_position_finalized_once_and_schedule_respected() {
        let spec = DenoiserSpec::new(
            Vocabulary::new(6).unwrap(),
            3,
            8,
            Family::Mlp {
                hidden: 8,
                pos_features: 4,
            },
        )
        .unwrap();
        let p = PolicySnapshot::new(
            spec,
            spec.init_params(1.0, &mut stream(1)).unwrap(),
            PolicyTag::Old,
        )
        .unwrap();
        let sched = DecodeSchedule::rollout_default(8);
        let plan = sched.plan(8).unwrap();
        for seed in 0..20 {
            let r = decode(&p, &[1, 2, 3], &sched, &mut stream(seed)).unwrap();
            let mut seen: Vec<usize> = r.steps.iter().flat_map(|s| s.positions.clone()).collect();
            for (rec, step) in r.steps.iter().zip(&plan) {
                assert_eq!(rec.positions.len(), step.count);
                assert!(rec
                    .positions
                    .iter()
                    .all(|&n| n >= 3 + step.block.0 && n < 3 + step.block.1));
            }
            seen.sort_unstable();
            assert_eq!(seen, (3..11).collect::<Vec<_>>());
            for rec in &r.steps {
                for (&n, &t) in rec.positions.iter().zip(&rec.tokens) {
                    assert_eq!(r.completion.tokens()[n], t);
                }
            }
        }
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let p = tabular(3, 0, 3, 4, 2.0);
        let sched = DecodeSchedule {
            steps: 3,
            selection: Selection::LowConfidence,
            block_size: None,
            temperature: 0.0,
        };
        let a = decode(&p, &[], &sched, &mut stream(1)).unwrap();
        let b = decode(&p, &[], &sched, &mut stream(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_random_selection_is_uniform() {
        let spec = DenoiserSpec::new(Vocabulary::new(3).unwrap(), 0, 3, Family::Tabular).unwrap();
        let p = PolicySnapshot::new(
            spec,
            ParamVector::zeros(spec.num_params()).unwrap(),
            PolicyTag::Old,
        )
        .unwrap();
        let sched = DecodeSchedule {
            steps: 2,
            selection: Selection::Random,
            block_size: None,
            temperature: 1.0,
        };
        for x0 in all_completions(3, &[], 3) {
            let lp = rm_exact_log_prob(&p, &x0, &sched).unwrap();
            assert!((lp - 3.0 * math::ln(1.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_matches_fully_masked_log_prob() {
        let p = tabular(3, 1, 2, 8, 1.5);
        let sched = DecodeSchedule {
            steps: 1,
            selection: Selection::LowConfidence,
            block_size: None,
            temperature: 1.0,
        };
        let x_t = MaskedSequence::fully_masked(&[2], 2, p.spec().vocab()).unwrap();
        let out = denoiser_logits(&p, &x_t).unwrap();
        for x0 in all_completions(3, &[2], 2) {
            let lp = rm_exact_log_prob(&p, &x0, &sched).unwrap();
            let direct = crate::denoiser::seq_log_prob(&out, &x0, &[1, 2]).unwrap();
            assert!((lp - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_distribution_normalizes() {
        let cases = [
            (
                2,
                0,
                2,
                DecodeSchedule {
                    steps: 2,
                    selection: Selection::Random,
                    block_size: None,
                    temperature: 1.0,
                },
            ),
            (
                3,
                0,
                3,
                DecodeSchedule {
                    steps: 2,
                    selection: Selection::LowConfidence,
                    block_size: None,
                    temperature: 0.7,
                },
            ),
            (
                2,
                1,
                4,
                DecodeSchedule {
                    steps: 4,
                    selection: Selection::LowConfidence,
                    block_size: Some(2),
                    temperature: 1.0,
                },
            ),
            (
                4,
                0,
                2,
                DecodeSchedule {
                    steps: 2,
                    selection: Selection::LowConfidence,
                    block_size: None,
                    temperature: 0.0,
                },
            ),
        ];
        for (i, (v, n_p, n_c, sched)) in cases.into_iter().enumerate() {
            let p = tabular(v, n_p, n_c, 20 + i as u64, 2.0);
            let prompt: Vec<Token> = (0..n_p as Token).collect();
            let total: f64 = all_completions(v, &prompt, n_c)
                .iter()
                .map(|x0| math::exp(rm_exact_log_prob(&p, x0, &sched).unwrap()))
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "case {i}: {total}");
        }
    }

    #[test]
    fn rejects_non_enumerable_instances() {
        let spec = DenoiserSpec::new(Vocabulary::new(5).unwrap(), 0, 2, Family::Tabular).unwrap();
        let p = PolicySnapshot::new(
            spec,
            ParamVector::zeros(spec.num_params()).unwrap(),
            PolicyTag::Old,
        )
        .unwrap();
        let x0 = all_completions(5, &[], 2).remove(0);
        assert!(matches!(
            rm_exact_log_prob(&p, &x0, &DecodeSchedule::random_order(2)),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn low_confidence_empirical_matches_exact() {
        let p = tabular(2, 0, 3, 31, 2.0);
        let sched = DecodeSchedule {
            steps: 3,
            selection: Selection::LowConfidence,
            block_size: None,
            temperature: 0.8,
        };
        let comps = all_completions(2, &[], 3);
        let n = 40_000;
        let mut counts = vec![0usize; comps.len()];
        let mut rng = stream(77);
        for _ in 0..n {
            let r = decode(&p, &[], &sched, &mut rng).unwrap();
            counts[comps.iter().position(|c| *c == r.completion).unwrap()] += 1;
        }
        let tv: f64 = comps
            .iter()
            .zip(&counts)
            .map(|(c, &k)| {
                (k as f64 / n as f64 - math::exp(rm_exact_log_prob(&p, c, &sched).unwrap())).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.015, "tv = {tv}");
    }
}
