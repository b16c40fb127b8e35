//! Denoiser families and the quantities computed from their logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::mdm::{
    sample_times, MaskedSequence, MaskingConfig, TimeSample, Token, TokenSequence, Vocabulary,
};
use crate::numerics::{log_softmax, math, sum, ParamVector, Real};

/// Largest number of distinct tabular contexts, `(V + 1)^N`.
pub const MAX_TABULAR_CONTEXTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// One free logits row per (masked context, position).
    Tabular,
    /// One-hot inputs plus sinusoidal position features through one tanh
    /// hidden layer, read out by a per-position head.
    Mlp { hidden: usize, pos_features: usize },
}

/// Shape and family shared by every snapshot of one policy family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    vocab: Vocabulary,
    seq_len: usize,
    prompt_len: usize,
    family: Family,
}

impl DenoiserSpec {
    pub fn new(
        vocab: Vocabulary,
        prompt_len: usize,
        completion_len: usize,
        family: Family,
    ) -> Result<Self> {
        let seq_len = prompt_len + completion_len;
        if completion_len == 0 {
            return Err(invalid("completion length must be positive"));
        }
        match family {
            Family::Tabular => {
                let base = vocab.size() + 1;
                let mut contexts: usize = 1;
                for _ in 0..seq_len {
                    contexts = contexts.saturating_mul(base);
                }
                if contexts > MAX_TABULAR_CONTEXTS {
                    return Err(Error::TooLarge(format!(
                        "tabular family needs (V+1)^N = {base}^{seq_len} <= {MAX_TABULAR_CONTEXTS} contexts"
                    )));
                }
            }
            Family::Mlp {
                hidden,
                pos_features,
            } => {
                if hidden == 0 {
                    return Err(invalid("mlp hidden width must be positive"));
                }
                if pos_features % 2 != 0 {
                    return Err(invalid("position feature count must be even"));
                }
            }
        }
        Ok(Self {
            vocab,
            seq_len,
            prompt_len,
            family,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn completion_len(&self) -> usize {
        self.seq_len - self.prompt_len
    }

    pub fn family(&self) -> Family {
        self.family
    }

    fn contexts(&self) -> usize {
        (self.vocab.size() + 1).pow(self.seq_len as u32)
    }

    pub fn num_params(&self) -> usize {
        let (n, v) = (self.seq_len, self.vocab.size());
        match self.family {
            Family::Tabular => self.contexts() * n * v,
            Family::Mlp {
                hidden,
                pos_features,
            } => {
                let l = MlpLayout::new(n, v, hidden, pos_features);
                l.total
            }
        }
    }

    /// Parameters for a fresh policy. Tabular tables start at zero (the
    /// uniform denoiser); MLP weights are Gaussian with std `scale`, the
    /// output heads ten times smaller.
    pub fn init_params<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<ParamVector> {
        match self.family {
            Family::Tabular => ParamVector::zeros(self.num_params()),
            Family::Mlp {
                hidden,
                pos_features,
            } => {
                let l = MlpLayout::new(self.seq_len, self.vocab.size(), hidden, pos_features);
                let normal = Normal::new(0.0, scale.max(0.0))
                    .map_err(|_| invalid("init scale must be finite"))?;
                let head = Normal::new(0.0, scale.max(0.0) / 10.0)
                    .map_err(|_| invalid("init scale must be finite"))?;
                let mut p = vec![0.0; l.total];
                for x in &mut p[l.tok..l.b1] {
                    *x = normal.sample(rng);
                }
                for x in &mut p[l.out..l.bout] {
                    *x = head.sample(rng);
                }
                ParamVector::new(p)
            }
        }
    }

    fn check_input(&self, x_t: &MaskedSequence) -> Result<()> {
        if x_t.len() != self.seq_len
            || x_t.prompt_len() != self.prompt_len
            || x_t.vocab() != self.vocab
        {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "N = {} (prompt {}), V = {}",
                    self.seq_len,
                    self.prompt_len,
                    self.vocab.size()
                ),
                got: format!(
                    "N = {} (prompt {}), V = {}",
                    x_t.len(),
                    x_t.prompt_len(),
                    x_t.vocab().size()
                ),
            });
        }
        Ok(())
    }

    /// Raw logits for every position in one evaluation. Rows at unmasked
    /// positions carry no supervision; the MLP leaves them at zero.
    pub fn logits<S: Real>(&self, params: &[S], x_t: &MaskedSequence) -> Result<DenoiserOutput<S>> {
        self.check_input(x_t)?;
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.num_params()),
                got: format!("{} parameters", params.len()),
            });
        }
        let (n, v) = (self.seq_len, self.vocab.size());
        let logits = match self.family {
            Family::Tabular => {
                let base = v + 1;
                let ctx = x_t
                    .tokens()
                    .iter()
                    .rev()
                    .fold(0usize, |acc, &tok| acc * base + tok as usize);
                let start = ctx * n * v;
                params[start..start + n * v].to_vec()
            }
            Family::Mlp {
                hidden,
                pos_features,
            } => {
                let l = MlpLayout::new(n, v, hidden, pos_features);
                let mut pre: Vec<S> = params[l.b1..l.b1 + hidden].to_vec();
                for (j, &tok) in x_t.tokens().iter().enumerate() {
                    let e = l.tok + (j * (v + 1) + tok as usize) * hidden;
                    for (h, p) in pre.iter_mut().enumerate() {
                        *p = *p + params[e + h];
                    }
                }
                let mut out = vec![S::cst(0.0); n * v];
                for &pos in x_t.masked_positions() {
                    let feats = position_features(pos, pos_features);
                    let hid: Vec<S> = (0..hidden)
                        .map(|h| {
                            let w =
                                &params[l.pos + h * pos_features..l.pos + (h + 1) * pos_features];
                            let shift = sum(w.iter().zip(&feats).map(|(&w, &f)| w * f));
                            (pre[h] + shift).tanh()
                        })
                        .collect();
                    for tok in 0..v {
                        let w = &params[l.out + (pos * v + tok) * hidden..][..hidden];
                        let dot = sum(w.iter().zip(&hid).map(|(&w, &h)| w * h));
                        out[pos * v + tok] = dot + params[l.bout + pos * v + tok];
                    }
                }
                out
            }
        };
        Ok(DenoiserOutput {
            logits,
            vocab_size: v,
            masked: x_t.masked_positions().to_vec(),
            source: None,
        })
    }
}

/// Offsets of the MLP blocks inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct MlpLayout {
    tok: usize,
    b1: usize,
    pos: usize,
    out: usize,
    bout: usize,
    total: usize,
}

impl MlpLayout {
    fn new(n: usize, v: usize, hidden: usize, pos_features: usize) -> Self {
        let tok = 0;
        let b1 = tok + n * (v + 1) * hidden;
        let pos = b1 + hidden;
        let out = pos + hidden * pos_features;
        let bout = out + n * v * hidden;
        let total = bout + n * v;
        Self {
            tok,
            b1,
            pos,
            out,
            bout,
            total,
        }
    }
}

fn position_features(pos: usize, count: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(count);
    for i in 0..count / 2 {
        let freq = math::pow(10_000.0, -(2.0 * i as f64) / count as f64);
        f.push(math::sin(pos as f64 * freq));
        f.push(math::cos(pos as f64 * freq));
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyTag {
    Theta,
    Old,
    Ref,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    spec: DenoiserSpec,
    params: ParamVector,
    frozen: bool,
    tag: PolicyTag,
}

impl PolicySnapshot {
    /// Old and reference snapshots are always frozen.
    pub fn new(spec: DenoiserSpec, params: ParamVector, tag: PolicyTag) -> Result<Self> {
        if params.len() != spec.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", spec.num_params()),
                got: format!("{} parameters", params.len()),
            });
        }
        Ok(Self {
            spec,
            params,
            frozen: tag != PolicyTag::Theta,
            tag,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn tag(&self) -> PolicyTag {
        self.tag
    }

    /// Frozen copy under a new tag.
    pub fn snapshot_as(&self, tag: PolicyTag) -> Self {
        Self {
            spec: self.spec,
            params: self.params.clone(),
            frozen: tag != PolicyTag::Theta,
            tag,
        }
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamVector> {
        if self.frozen {
            return Err(invalid(format!("{:?} snapshot is frozen", self.tag)));
        }
        Ok(&mut self.params)
    }
}

/// Per-position raw logits, `N x V`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput<S = f64> {
    logits: Vec<S>,
    vocab_size: usize,
    masked: Vec<usize>,
    source: Option<PolicyTag>,
}

impl<S: Real> DenoiserOutput<S> {
    pub fn row(&self, n: usize) -> &[S] {
        &self.logits[n * self.vocab_size..(n + 1) * self.vocab_size]
    }

    pub fn seq_len(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Masked positions of the input this output was computed on.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked
    }

    pub fn source(&self) -> Option<PolicyTag> {
        self.source
    }

    /// Applies `f` to every row; `f` must preserve the row length.
    pub fn map_rows(&self, mut f: impl FnMut(&[S]) -> Vec<S>) -> DenoiserOutput<S> {
        let mut logits = Vec::with_capacity(self.logits.len());
        for n in 0..self.seq_len() {
            let r = f(self.row(n));
            assert_eq!(
                r.len(),
                self.vocab_size,
                "row map changed the vocabulary size"
            );
            logits.extend(r);
        }
        DenoiserOutput {
            logits,
            vocab_size: self.vocab_size,
            masked: self.masked.clone(),
            source: self.source,
        }
    }

    /// Adds `c[n]` to every entry of row `n`.
    pub fn shift_rows(&mut self, c: &[f64]) {
        for (n, &cn) in c.iter().enumerate() {
            for x in &mut self.logits[n * self.vocab_size..(n + 1) * self.vocab_size] {
                *x = *x + cn;
            }
        }
    }
}

/// Logits of `policy` on `x_t`.
pub fn denoiser_logits(policy: &PolicySnapshot, x_t: &MaskedSequence) -> Result<DenoiserOutput> {
    let mut out = policy.spec.logits(policy.params.as_slice(), x_t)?;
    out.source = Some(policy.tag);
    Ok(out)
}

/// `sum_{n in positions} log softmax(logits[n])[x0[n]]`.
pub fn seq_log_prob<S: Real>(
    out: &DenoiserOutput<S>,
    x0: &TokenSequence,
    positions: &[usize],
) -> Result<S> {
    if x0.len() != out.seq_len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", out.seq_len()),
            got: format!("length {}", x0.len()),
        });
    }
    let mut terms = Vec::with_capacity(positions.len());
    for &n in positions {
        if n >= out.seq_len() {
            return Err(Error::PositionOutOfRange {
                position: n,
                len: out.seq_len(),
            });
        }
        terms.push(token_log_prob(out.row(n), x0.tokens()[n]));
    }
    Ok(sum(terms))
}

pub(crate) fn token_log_prob<S: Real>(row: &[S], token: Token) -> S {
    log_softmax(row)[token as usize]
}

/// `sum_views weight * log p(x0 at masked positions | x_t)` for one time
/// sample, with one logits output per view.
pub(crate) fn weighted_log_prob<S: Real>(
    outs: &[DenoiserOutput<S>],
    sample: &TimeSample,
    x0: &TokenSequence,
) -> Result<S> {
    let mut terms = Vec::with_capacity(outs.len());
    for (out, view) in outs.iter().zip(&sample.views) {
        if view.weight == 0.0 {
            continue;
        }
        terms.push(seq_log_prob(out, x0, view.x_t.masked_positions())? * view.weight);
    }
    Ok(sum(terms))
}

/// ELBO on fixed time samples: the mean over samples of the weighted
/// masked-token log-probability.
pub fn elbo_on_samples<S: Real>(
    spec: &DenoiserSpec,
    params: &[S],
    x0: &TokenSequence,
    samples: &[TimeSample],
) -> Result<S> {
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let outs = s
            .views
            .iter()
            .map(|v| spec.logits(params, &v.x_t))
            .collect::<Result<Vec<_>>>()?;
        terms.push(weighted_log_prob(&outs, s, x0)?);
    }
    Ok(sum(terms) / samples.len() as f64)
}

/// Monte-Carlo ELBO with `k` time samples.
pub fn elbo_estimate<R: Rng + ?Sized>(
    policy: &PolicySnapshot,
    x0: &TokenSequence,
    k: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<f64> {
    let samples = sample_times(x0, k, cfg, rng)?;
    elbo_on_samples(&policy.spec, policy.params.as_slice(), x0, &samples)
}
