//! Sequences, the forward masking process and time sampling.
//!
//! Only completion positions are ever masked; prompt tokens stay visible.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::math;

pub type Token = u32;

/// Real tokens are `0..size`; the mask token is `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn mask_id(&self) -> Token {
        self.size
    }

    pub fn contains(&self, t: Token) -> bool {
        t < self.size
    }
}

/// A clean sequence `x0`: prompt followed by completion.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    prompt_len: usize,
    vocab: Vocabulary,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, prompt_len: usize, vocab: Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(invalid(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(invalid(format!(
                "token {t} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(Self {
            tokens,
            prompt_len,
            vocab,
        })
    }

    /// Prompt and completion concatenated.
    pub fn join(prompt: &[Token], completion: &[Token], vocab: Vocabulary) -> Result<Self> {
        let mut tokens = Vec::with_capacity(prompt.len() + completion.len());
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(completion);
        Self::new(tokens, prompt.len(), vocab)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[Token] {
        &self.tokens[..self.prompt_len]
    }

    pub fn completion(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }

    pub fn completion_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn completion_positions(&self) -> core::ops::Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }
}

/// Rule mapping a diffusion time to a set of masked completion positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskRule {
    /// Exactly `round(t * N_c)` positions, uniformly without replacement.
    #[default]
    ExactCount,
    /// Each completion position independently with probability `t`.
    Bernoulli,
}

/// Number of positions the exact-count rule masks at time `t`.
pub fn mask_count(t: f64, completion_len: usize) -> usize {
    math::round(t * completion_len as f64) as usize
}

/// A partially masked sequence `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    tokens: Vec<Token>,
    prompt_len: usize,
    t: f64,
    masked: Vec<usize>,
    rule: MaskRule,
    vocab: Vocabulary,
}

impl MaskedSequence {
    /// Masks `positions` of `x0` (sorted, deduplicated, completion-only).
    pub fn from_positions(
        x0: &TokenSequence,
        t: f64,
        positions: &[usize],
        rule: MaskRule,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("diffusion time {t} outside [0, 1]")));
        }
        let mut masked = positions.to_vec();
        masked.sort_unstable();
        masked.dedup();
        let mut tokens = x0.tokens.clone();
        for &n in &masked {
            if n >= tokens.len() {
                return Err(Error::PositionOutOfRange {
                    position: n,
                    len: tokens.len(),
                });
            }
            if n < x0.prompt_len {
                return Err(invalid(format!("prompt position {n} cannot be masked")));
            }
            tokens[n] = x0.vocab.mask_id();
        }
        if rule == MaskRule::ExactCount && masked.len() != mask_count(t, x0.completion_len()) {
            return Err(invalid(format!(
                "{} masked positions inconsistent with t = {t} over {} completion tokens",
                masked.len(),
                x0.completion_len()
            )));
        }
        Ok(Self {
            tokens,
            prompt_len: x0.prompt_len,
            t,
            masked,
            rule,
            vocab: x0.vocab,
        })
    }

    /// Prompt followed by `completion_len` mask tokens, at `t = 1`.
    pub fn fully_masked(
        prompt: &[Token],
        completion_len: usize,
        vocab: Vocabulary,
    ) -> Result<Self> {
        if let Some(&t) = prompt.iter().find(|&&t| !vocab.contains(t)) {
            return Err(invalid(format!("prompt token {t} outside vocabulary")));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend(core::iter::repeat_n(vocab.mask_id(), completion_len));
        let masked = (prompt.len()..prompt.len() + completion_len).collect();
        Ok(Self {
            tokens,
            prompt_len: prompt.len(),
            t: 1.0,
            masked,
            rule: MaskRule::ExactCount,
            vocab,
        })
    }

    /// Writes `token` at a masked position, unmasking it. `t` follows the
    /// remaining masked fraction.
    pub fn reveal(&mut self, position: usize, token: Token) -> Result<()> {
        if !self.vocab.contains(token) {
            return Err(invalid(format!("token {token} outside vocabulary")));
        }
        let i = self
            .masked
            .binary_search(&position)
            .map_err(|_| invalid(format!("position {position} is not masked")))?;
        self.masked.remove(i);
        self.tokens[position] = token;
        let n_c = self.completion_len();
        self.t = if n_c == 0 {
            0.0
        } else {
            self.masked.len() as f64 / n_c as f64
        };
        Ok(())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn completion_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Sorted masked positions.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_masked(&self, n: usize) -> bool {
        self.masked.binary_search(&n).is_ok()
    }

    pub fn rule(&self) -> MaskRule {
        self.rule
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    /// Whether `x0` agrees with every unmasked position.
    pub fn is_consistent_with(&self, x0: &TokenSequence) -> bool {
        x0.len() == self.len()
            && x0.prompt_len == self.prompt_len
            && self
                .tokens
                .iter()
                .zip(&x0.tokens)
                .all(|(&a, &b)| a == self.vocab.mask_id() || a == b)
    }
}

/// Samples `x_t ~ q(. | x0)`.
pub fn forward_mask<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: f64,
    rule: MaskRule,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    let n_c = x0.completion_len();
    let offset = x0.prompt_len;
    let positions: Vec<usize> = match rule {
        MaskRule::ExactCount => index::sample(rng, n_c, mask_count(t, n_c))
            .into_iter()
            .map(|i| i + offset)
            .collect(),
        MaskRule::Bernoulli => (0..n_c)
            .filter(|_| rng.random::<f64>() < t)
            .map(|i| i + offset)
            .collect(),
    };
    MaskedSequence::from_positions(x0, t, &positions, rule)
}

/// The masked sequence whose masked completion positions are the complement
/// of `m`'s, at time `1 - t`. Needs the clean sequence to restore the tokens
/// `m` hides.
pub fn complementary_mask(m: &MaskedSequence, x0: &TokenSequence) -> Result<MaskedSequence> {
    if !m.is_consistent_with(x0) {
        return Err(Error::MaskMismatch(
            "clean sequence disagrees with the masked one".into(),
        ));
    }
    let positions: Vec<usize> = (m.prompt_len..m.len())
        .filter(|&n| !m.is_masked(n))
        .collect();
    let t = 1.0 - m.t;
    let consistent = mask_count(m.t, m.completion_len()) == m.masked.len();
    if m.rule == MaskRule::ExactCount
        && consistent
        && mask_count(t, m.completion_len()) != positions.len()
    {
        return Err(invalid(format!(
            "complement of t = {} violates the count rule at t' = {t}",
            m.t
        )));
    }
    // Bernoulli masks never promise a count.
    MaskedSequence::from_positions(x0, t, &positions, m.rule)
}

/// Per-time weight applied to masked-token log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightSchedule {
    #[default]
    InvT,
    Constant,
}

impl WeightSchedule {
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            WeightSchedule::InvT => 1.0 / t,
            WeightSchedule::Constant => 1.0,
        }
    }
}

/// How diffusion times are drawn for ELBO-style estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeSampler {
    /// `t = m / N_c` with `m` uniform on `1..=N_c`. Under the exact-count rule
    /// and `1/t` weights this is an unbiased estimate of the any-order
    /// autoregressive log-likelihood average, hence a lower bound on the
    /// random-order sampler's log-likelihood.
    #[default]
    Grid,
    /// `t ~ U(0, 1)`, redrawn until at least one position is masked.
    Continuous,
}

/// Complete recipe for drawing masked views of a clean sequence.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MaskingConfig {
    pub sampler: TimeSampler,
    pub rule: MaskRule,
    pub weight: WeightSchedule,
    /// Pair every mask with its complement.
    pub coupled: bool,
}

impl MaskingConfig {
    /// Plain ELBO estimation: no coupling.
    pub fn elbo() -> Self {
        Self::default()
    }
}

/// One masked input and the coefficient on its masked-token log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskView {
    pub x_t: MaskedSequence,
    pub weight: f64,
}

/// All views drawn for one time sample (one, or two when coupled).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSample {
    pub t: f64,
    pub views: Vec<MaskView>,
}

impl TimeSample {
    /// A single view with unit weight.
    pub fn single(x_t: MaskedSequence) -> Self {
        Self {
            t: x_t.t(),
            views: alloc::vec![MaskView { x_t, weight: 1.0 }],
        }
    }
}

const MAX_REDRAWS: usize = 10_000;

/// Draws one time sample for `x0`. Draws that would mask nothing are
/// redrawn, so every sample supervises at least one token.
pub fn sample_time<R: Rng + ?Sized>(
    x0: &TokenSequence,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<TimeSample> {
    let n_c = x0.completion_len();
    if n_c == 0 {
        return Err(invalid("cannot mask an empty completion"));
    }
    let mut draws = 0;
    let x_t = loop {
        draws += 1;
        if draws > MAX_REDRAWS {
            return Err(invalid("could not draw a non-empty mask"));
        }
        let t = match cfg.sampler {
            TimeSampler::Grid => rng.random_range(1..=n_c) as f64 / n_c as f64,
            TimeSampler::Continuous => {
                let t: f64 = rng.random();
                if cfg.rule == MaskRule::ExactCount && mask_count(t, n_c) == 0 {
                    continue;
                }
                t
            }
        };
        let x_t = forward_mask(x0, t, cfg.rule, rng)?;
        if !x_t.masked_positions().is_empty() {
            break x_t;
        }
    };
    let t = x_t.t();
    let mut views = Vec::with_capacity(2);
    if cfg.coupled {
        // A full mask has an empty complement; it then keeps its whole weight
        // so the pair stays an unbiased estimate of the uncoupled sum.
        let comp = complementary_mask(&x_t, x0)?;
        let (w, w_comp) = if comp.masked_positions().is_empty() {
            (cfg.weight.weight(t), 0.0)
        } else {
            (
                cfg.weight.weight(t) / 2.0,
                cfg.weight.weight(comp.t()) / 2.0,
            )
        };
        views.push(MaskView { weight: w, x_t });
        views.push(MaskView {
            weight: w_comp,
            x_t: comp,
        });
    } else {
        views.push(MaskView {
            weight: cfg.weight.weight(t),
            x_t,
        });
    }
    Ok(TimeSample { t, views })
}

/// `k` independent time samples.
pub fn sample_times<R: Rng + ?Sized>(
    x0: &TokenSequence,
    k: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<Vec<TimeSample>> {
    if k == 0 {
        return Err(invalid("need at least one time sample"));
    }
    (0..k).map(|_| sample_time(x0, cfg, rng)).collect()
}

/// Exact law of the masked-position count under a sampler: entries
/// `(m, P(m), E[w(t) | m])` for `m = 1..=N_c`. Given `m`, the masked set is
/// uniform over subsets of size `m`.
pub fn count_law(
    completion_len: usize,
    sampler: TimeSampler,
    weight: WeightSchedule,
) -> Vec<(usize, f64, f64)> {
    let n = completion_len as f64;
    match sampler {
        TimeSampler::Grid => (1..=completion_len)
            .map(|m| (m, 1.0 / n, weight.weight(m as f64 / n)))
            .collect(),
        TimeSampler::Continuous => {
            let t0 = 0.5 / n;
            (1..=completion_len)
                .map(|m| {
                    let lo = ((m as f64 - 0.5) / n).max(t0);
                    let hi = ((m as f64 + 0.5) / n).min(1.0);
                    let w = match weight {
                        WeightSchedule::InvT => math::ln(hi / lo) / (hi - lo),
                        WeightSchedule::Constant => 1.0,
                    };
                    (m, (hi - lo) / (1.0 - t0), w)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use alloc::vec;

    fn seq(n_p: usize, n_c: usize) -> TokenSequence {
        let v = Vocabulary::new(4).unwrap();
        let toks = (0..n_p + n_c).map(|i| (i % 4) as Token).collect();
        TokenSequence::new(toks, n_p, v).unwrap()
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(1).is_err());
        let v = Vocabulary::new(3).unwrap();
        assert_eq!(v.mask_id(), 3);
        assert!(!v.contains(v.mask_id()));
        assert!(TokenSequence::new(vec![0, 3], 0, v).is_err());
        assert!(TokenSequence::new(vec![0, 1], 3, v).is_err());
    }

    #[test]
    fn endpoints_mask_nothing_or_everything() {
        let x0 = seq(2, 6);
        let mut rng = stream(1);
        let m0 = forward_mask(&x0, 0.0, MaskRule::ExactCount, &mut rng).unwrap();
        assert!(m0.masked_positions().is_empty());
        let m1 = forward_mask(&x0, 1.0, MaskRule::ExactCount, &mut rng).unwrap();
        assert_eq!(m1.masked_positions(), &[2, 3, 4, 5, 6, 7]);
        assert_eq!(&m1.tokens()[..2], x0.prompt());
        assert!(forward_mask(&x0, 1.5, MaskRule::ExactCount, &mut rng).is_err());
        assert!(forward_mask(&x0, -0.1, MaskRule::ExactCount, &mut rng).is_err());
    }

    #[test]
    fn half_mask_frequencies() {
        let x0 = seq(0, 8);
        let mut counts = [0usize; 8];
        let trials = 10_000;
        for s in 0..trials {
            let m = forward_mask(&x0, 0.5, MaskRule::ExactCount, &mut stream(s)).unwrap();
            assert_eq!(m.masked_positions().len(), 4);
            for &n in m.masked_positions() {
                counts[n] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn complement_of_explicit_mask() {
        let x0 = seq(0, 4);
        let m = MaskedSequence::from_positions(&x0, 0.5, &[0, 1], MaskRule::ExactCount).unwrap();
        let c = complementary_mask(&m, &x0).unwrap();
        assert_eq!(c.masked_positions(), &[2, 3]);
        assert_eq!(c.tokens()[0], x0.tokens()[0]);
        assert!((c.t() - 0.5).abs() < 1e-15);

        let full =
            MaskedSequence::from_positions(&x0, 1.0, &[0, 1, 2, 3], MaskRule::ExactCount).unwrap();
        let c = complementary_mask(&full, &x0).unwrap();
        assert!(c.masked_positions().is_empty());
        assert_eq!(c.t(), 0.0);
    }

    #[test]
    fn complement_rejects_count_violations() {
        // round(0.625 * 4) = 3 but round(0.375 * 4) = 2 while the complement has 1.
        let x0 = seq(0, 4);
        let m =
            MaskedSequence::from_positions(&x0, 0.625, &[0, 1, 2], MaskRule::ExactCount).unwrap();
        assert!(complementary_mask(&m, &x0).is_err());
    }

    #[test]
    fn mask_views_never_touch_the_prompt() {
        let x0 = seq(3, 5);
        let cfg = MaskingConfig {
            coupled: true,
            ..Default::default()
        };
        let mut rng = stream(9);
        for _ in 0..200 {
            let s = sample_time(&x0, &cfg, &mut rng).unwrap();
            assert_eq!(s.views.len(), 2);
            assert!(!s.views[0].x_t.masked_positions().is_empty());
            for v in &s.views {
                assert!(v.x_t.masked_positions().iter().all(|&n| n >= 3));
                assert_eq!(&v.x_t.tokens()[..3], x0.prompt());
            }
        }
    }

    #[test]
    fn count_law_is_a_distribution() {
        for sampler in [TimeSampler::Grid, TimeSampler::Continuous] {
            for n_c in 1..7 {
                let total: f64 = count_law(n_c, sampler, WeightSchedule::InvT)
                    .iter()
                    .map(|e| e.1)
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuous_count_law_matches_sampling() {
        let x0 = seq(0, 3);
        let cfg = MaskingConfig {
            sampler: TimeSampler::Continuous,
            ..Default::default()
        };
        let law = count_law(3, TimeSampler::Continuous, WeightSchedule::InvT);
        let mut rng = stream(3);
        let trials = 40_000;
        let mut mean_w = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let s = sample_time(&x0, &cfg, &mut rng).unwrap();
            let m = s.views[0].x_t.masked_positions().len();
            counts[m] += 1;
            mean_w[m] += s.views[0].weight;
        }
        for &(m, p, w) in &law {
            let f = counts[m] as f64 / trials as f64;
            assert!((f - p).abs() < 0.01, "m={m}: {f} vs {p}");
            assert!((mean_w[m] / counts[m] as f64 - w).abs() / w < 0.02);
        }
    }

    proptest::proptest! {
        #[test]
        fn complement_partitions_the_completion(seed in 0u64..10_000, n_c in 1usize..9, n_p in 0usize..3) {
            let x0 = seq(n_p, n_c);
            let mut rng = stream(seed);
            let m = sample_time(&x0, &MaskingConfig::default(), &mut rng).unwrap().views.remove(0).x_t;
            let c = complementary_mask(&m, &x0).unwrap();
            let mut all: Vec<usize> = m.masked_positions().iter().chain(c.masked_positions()).copied().collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (n_p..n_p + n_c).collect::<Vec<_>>());
            proptest::prop_assert!(m.masked_positions().iter().all(|n| !c.is_masked(*n)));
        }
    }
}
