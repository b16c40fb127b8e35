//! The RL loop: group rollouts under the old policy, group advantages, masked
//! views shared by all three policies, one loss per completion, a clipped
//! momentum step, and an old-policy refresh every `mu` steps.
//!
//! Randomness is drawn from substreams keyed by `(seed, label, step, ...)`,
//! and per-completion work is reduced in a fixed order, so results do not
//! depend on how an [`Executor`] schedules the work.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::decoder::{decode, DecodeSchedule};
use crate::denoiser::{
    denoiser_logits, DenoiserOutput, DenoiserSpec, Family, PolicySnapshot, PolicyTag,
};
use crate::error::{invalid, Error, Result};
use crate::mdm::{sample_times, MaskingConfig, TimeSample, TokenSequence};
use crate::numerics::{grad_with_aux, math, sum, DifferentiableWithAux, ParamVector, Real};
use crate::objectives::{
    awelbo_loss, compute_advantages, gdsd_loss, pg_ppo_elbo_loss, AdvantageRecord, GdsdParams,
    LossBreakdown, LossForm, Mode, PgVariant,
};
use crate::rng::{label, stream, substream};
use crate::tasks::{Task, TaskId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    GdsdDirect,
    GdsdTlc,
    Awelbo,
    PgElbo,
    PpoElbo,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::GdsdDirect,
        Objective::GdsdTlc,
        Objective::Awelbo,
        Objective::PgElbo,
        Objective::PpoElbo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::GdsdDirect => "gdsd_direct",
            Objective::GdsdTlc => "gdsd_tlc",
            Objective::Awelbo => "awelbo",
            Objective::PgElbo => "pg_elbo",
            Objective::PpoElbo => "ppo_elbo",
        }
    }

    fn needs_old(&self) -> bool {
        !matches!(self, Objective::Awelbo)
    }

    fn needs_ref(&self) -> bool {
        matches!(self, Objective::GdsdDirect | Objective::GdsdTlc)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| invalid(format!("unknown objective '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub psi: f64,
    pub beta: f64,
    /// PPO clip range.
    pub epsilon: f64,
    /// Time samples per completion.
    pub mc_samples: usize,
    /// Old-policy refresh period in steps.
    pub mu: u64,
    pub group_size: usize,
    /// Prompts per step.
    pub batch_prompts: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Linear learning-rate warmup length; 0 disables it.
    pub warmup_steps: u64,
    pub max_grad_norm: f64,
    pub steps: u64,
    pub seed: u64,
    pub task: Task,
    pub family: Family,
    /// Scale of the initial parameters.
    pub init_scale: f64,
    pub decode: DecodeSchedule,
    pub masking: MaskingConfig,
    pub loss_form: LossForm,
}

impl TrainConfig {
    /// Defaults for a task: `psi = 10`, `beta = 1e-3`, `epsilon = 0.2`,
    /// `K = 2`, `mu = 8`, `G = 6`, max grad norm 0.2, coupled masks with
    /// `1/t` weights, and the rollout decoding defaults.
    pub fn for_task(id: TaskId) -> Self {
        let task = Task::new(id);
        Self {
            objective: Objective::GdsdTlc,
            psi: 10.0,
            beta: 1e-3,
            epsilon: 0.2,
            mc_samples: 2,
            mu: 8,
            group_size: 6,
            batch_prompts: 4,
            lr: 0.5,
            momentum: 0.9,
            warmup_steps: 0,
            max_grad_norm: 0.2,
            steps: 500,
            seed: 0,
            task,
            family: Family::Mlp {
                hidden: 48,
                pos_features: 8,
            },
            init_scale: 0.5,
            decode: DecodeSchedule::rollout_default(task.completion_len()),
            masking: MaskingConfig {
                coupled: true,
                ..MaskingConfig::default()
            },
            loss_form: LossForm::Practical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let bad = |m: &str| Err(invalid(m));
        if self.mu < 1 {
            return bad("mu must be >= 1");
        }
        if self.group_size < 2 {
            return bad("group size must be >= 2");
        }
        if self.batch_prompts < 1 {
            return bad("need at least one prompt per step");
        }
        if self.mc_samples < 1 {
            return bad("need at least one time sample");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max grad norm must be > 0");
        }
        if !(self.psi >= 0.0 && self.psi.is_finite()) {
            return bad("psi must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must be in [0, 1]");
        }
        if self.beta == 1.0 && self.loss_form == LossForm::Practical && self.objective.needs_ref() {
            return bad("the practical GDSD form needs beta < 1");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init scale must be >= 0");
        }
        self.decode.plan(self.task.completion_len())?;
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<DenoiserSpec> {
        DenoiserSpec::new(
            self.task.vocab(),
            self.task.prompt_len(),
            self.task.completion_len(),
            self.family,
        )
    }

    fn gdsd_params(&self) -> Option<GdsdParams> {
        let mode = match self.objective {
            Objective::GdsdDirect => Mode::Direct,
            Objective::GdsdTlc => Mode::Tlc,
            _ => return None,
        };
        Some(GdsdParams {
            psi: self.psi,
            beta: self.beta,
            mode,
            form: self.loss_form,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    step: u64,
    theta: PolicySnapshot,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    velocity: Vec<f64>,
    refreshes: u64,
}

impl TrainState {
    /// Initial state: theta, old and reference all equal the seeded
    /// initialization.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec()?;
        let params = spec.init_params(cfg.init_scale, &mut substream(cfg.seed, &[label::INIT]))?;
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: DenoiserSpec, params: ParamVector) -> Result<Self> {
        let theta = PolicySnapshot::new(spec, params, PolicyTag::Theta)?;
        Ok(Self {
            step: 0,
            old: theta.snapshot_as(PolicyTag::Old),
            reference: theta.snapshot_as(PolicyTag::Ref),
            velocity: alloc::vec![0.0; spec.num_params()],
            theta,
            refreshes: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn theta(&self) -> &PolicySnapshot {
        &self.theta
    }

    pub fn old(&self) -> &PolicySnapshot {
        &self.old
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Replaces theta's parameters, e.g. when resuming from a checkpoint.
    pub fn set_theta(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.theta.params().len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.theta.params().len()),
                got: format!("{}", params.len()),
            });
        }
        *self.theta.params_mut()? = params;
        Ok(())
    }
}

/// Runs independent indexed jobs and returns their results in index order.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: TokenSequence,
    /// Full sequences, prompt included.
    pub completions: Vec<TokenSequence>,
    pub advantages: Vec<AdvantageRecord>,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> f64 {
        self.advantages.iter().map(|a| a.reward).sum::<f64>() / self.advantages.len() as f64
    }
}

/// `g` decodes of `prompt` under the old policy, scored by `task`. Each
/// decode uses its own stream seeded from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group<R: Rng + ?Sized, E: Executor>(
    state: &TrainState,
    task: &Task,
    prompt: &TokenSequence,
    g: usize,
    sched: &DecodeSchedule,
    group_id: u64,
    rng: &mut R,
    exec: &E,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(invalid(format!("group size {g} < 2")));
    }
    let seeds: Vec<u64> = (0..g).map(|_| rng.next_u64()).collect();
    let completions = exec.map(g, |i| {
        let r = decode(&state.old, prompt.tokens(), sched, &mut stream(seeds[i]))?;
        Ok(r.completion)
    })?;
    let rewards = completions
        .iter()
        .map(|c| task.reward(c.prompt(), c.completion()))
        .collect::<Result<Vec<_>>>()?;
    let advantages = compute_advantages(&rewards, group_id)?;
    Ok(RolloutGroup {
        prompt: prompt.clone(),
        completions,
        advantages,
    })
}

/// One completion's loss as a function of theta, with the old and reference
/// outputs precomputed on the same masked views.
pub struct CompletionLoss<'a> {
    pub objective: Objective,
    pub gdsd: Option<GdsdParams>,
    pub psi: f64,
    pub epsilon: f64,
    pub spec: &'a DenoiserSpec,
    pub x0: &'a TokenSequence,
    pub advantage: f64,
    pub samples: &'a [TimeSample],
    /// `[sample][view]`; empty when the objective does not use them.
    pub old: &'a [Vec<DenoiserOutput>],
    pub reference: &'a [Vec<DenoiserOutput>],
}

/// Outputs of `policy` on every view of every sample.
pub fn view_outputs(
    policy: &PolicySnapshot,
    samples: &[TimeSample],
) -> Result<Vec<Vec<DenoiserOutput>>> {
    samples
        .iter()
        .map(|s| {
            s.views
                .iter()
                .map(|v| denoiser_logits(policy, &v.x_t))
                .collect()
        })
        .collect()
}

impl DifferentiableWithAux for CompletionLoss<'_> {
    type Aux = LossBreakdown<f64>;

    fn eval_aux<S: Real>(&self, params: &[S]) -> Result<(S, LossBreakdown<f64>)> {
        let theta_outs = || -> Result<Vec<Vec<DenoiserOutput<S>>>> {
            self.samples
                .iter()
                .map(|s| {
                    s.views
                        .iter()
                        .map(|v| self.spec.logits(params, &v.x_t))
                        .collect()
                })
                .collect()
        };
        match self.objective {
            Objective::GdsdDirect | Objective::GdsdTlc => {
                let p = self
                    .gdsd
                    .ok_or_else(|| invalid("GDSD parameters missing"))?;
                let th = theta_outs()?;
                let mut parts = Vec::with_capacity(self.samples.len());
                for (k, s) in self.samples.iter().enumerate() {
                    parts.push(gdsd_loss(
                        &th[k],
                        &self.old[k],
                        &self.reference[k],
                        s,
                        self.x0,
                        self.advantage,
                        &p,
                    )?);
                }
                let b = LossBreakdown::mean(parts)?;
                let v = b.values();
                Ok((b.total, v))
            }
            Objective::Awelbo => {
                let l = awelbo_loss(
                    self.spec,
                    params,
                    self.x0,
                    self.advantage,
                    self.psi,
                    self.samples,
                )?;
                Ok((l, plain(l.value(), self.samples)))
            }
            Objective::PgElbo | Objective::PpoElbo => {
                let variant = if self.objective == Objective::PgElbo {
                    PgVariant::Pg
                } else {
                    PgVariant::Ppo
                };
                let th = theta_outs()?;
                let l = pg_ppo_elbo_loss(
                    &th,
                    self.old,
                    self.samples,
                    self.x0,
                    self.advantage,
                    self.epsilon,
                    variant,
                )?;
                Ok((l, plain(l.value(), self.samples)))
            }
        }
    }
}

fn plain(v: f64, samples: &[TimeSample]) -> LossBreakdown<f64> {
    LossBreakdown {
        total: v,
        match_term: v,
        reg_term: 0.0,
        weights: samples
            .iter()
            .flat_map(|s| s.views.iter().map(|w| w.weight))
            .collect(),
    }
}

impl CompletionLoss<'_> {
    pub fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.eval_aux(params)?.0)
    }
}

/// Scales `g` down to norm `max` if it is longer; returns the pre-clip norm.
pub fn clip_gradient(g: &mut [f64], max: f64) -> f64 {
    let norm = math::sqrt(g.iter().map(|x| x * x).sum());
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step number after the update, starting at 1.
    pub step: u64,
    pub mean_reward: f64,
    pub loss_total: f64,
    pub loss_match: f64,
    pub loss_reg: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub old_refreshed: bool,
}

/// One gradient update on completed groups. On any error the state is left
/// untouched.
pub fn train_step<R: Rng + ?Sized, E: Executor>(
    state: &mut TrainState,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
    rng: &mut R,
    exec: &E,
) -> Result<StepMetrics> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(invalid("learning rate must be finite and >= 0"));
    }
    let jobs: Vec<(&TokenSequence, f64)> = groups
        .iter()
        .flat_map(|g| {
            g.completions
                .iter()
                .zip(&g.advantages)
                .map(|(c, a)| (c, a.advantage))
        })
        .collect();
    if jobs.is_empty() {
        return Err(invalid("no completions to train on"));
    }
    let seeds: Vec<u64> = (0..jobs.len()).map(|_| rng.next_u64()).collect();
    let spec = *state.theta.spec();
    let st = &*state;
    let results = exec.map(jobs.len(), |i| {
        let (x0, advantage) = jobs[i];
        let samples = sample_times(x0, cfg.mc_samples, &cfg.masking, &mut stream(seeds[i]))?;
        let old = if cfg.objective.needs_old() {
            view_outputs(&st.old, &samples)?
        } else {
            Vec::new()
        };
        let reference = if cfg.objective.needs_ref() {
            view_outputs(&st.reference, &samples)?
        } else {
            Vec::new()
        };
        let loss = CompletionLoss {
            objective: cfg.objective,
            gdsd: cfg.gdsd_params(),
            psi: cfg.psi,
            epsilon: cfg.epsilon,
            spec: &spec,
            x0,
            advantage,
            samples: &samples,
            old: &old,
            reference: &reference,
        };
        let (_, g, b) = grad_with_aux(&loss, st.theta.params())?;
        Ok((g, b))
    })?;
    let n = results.len() as f64;
    let mut g = alloc::vec![0.0; spec.num_params()];
    for (gi, _) in &results {
        for (acc, x) in g.iter_mut().zip(gi.as_slice()) {
            *acc += x / n;
        }
    }
    let mean = |f: fn(&LossBreakdown<f64>) -> f64| sum(results.iter().map(|(_, b)| f(b))) / n;
    let (loss_total, loss_match, loss_reg) = (
        mean(|b| b.total),
        mean(|b| b.match_term),
        mean(|b| b.reg_term),
    );
    if !loss_total.is_finite() {
        return Err(Error::NonFiniteValue { what: "batch loss" });
    }
    let grad_norm = clip_gradient(&mut g, cfg.max_grad_norm);
    let velocity: Vec<f64> = state
        .velocity
        .iter()
        .zip(&g)
        .map(|(v, g)| cfg.momentum * v + g)
        .collect();
    let lr = if cfg.warmup_steps > 0 {
        cfg.lr * ((state.step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        cfg.lr
    };
    let mut params = state.theta.params().clone();
    params.add_scaled(&velocity, -lr)?;
    state.theta.params_mut()?.clone_from(&params);
    state.velocity = velocity;
    state.step += 1;
    let mean_reward = sum(groups
        .iter()
        .flat_map(|g| g.advantages.iter().map(|a| a.reward)))
        / n;
    Ok(StepMetrics {
        step: state.step,
        mean_reward,
        loss_total,
        loss_match,
        loss_reg,
        grad_norm,
        old_refreshed: false,
    })
}

/// Copies theta into old. Allowed only at steps divisible by `mu`.
pub fn refresh_old(state: &mut TrainState, cfg: &TrainConfig) -> Result<()> {
    if cfg.mu == 0 || !state.step.is_multiple_of(cfg.mu) {
        return Err(Error::OffSchedule {
            step: state.step,
            mu: cfg.mu,
        });
    }
    state.old = state.theta.snapshot_as(PolicyTag::Old);
    state.refreshes += 1;
    Ok(())
}

/// Rollouts, update and scheduled refresh for the next step. Prompts,
/// rollouts and masks come from substreams of `cfg.seed` keyed by the step.
pub fn run_step<E: Executor>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    exec: &E,
) -> Result<StepMetrics> {
    let s = state.step;
    let mut groups = Vec::with_capacity(cfg.batch_prompts);
    for b in 0..cfg.batch_prompts as u64 {
        let prompt = cfg
            .task
            .sample_prompt(&mut substream(cfg.seed, &[label::PROMPT, s, b]))?;
        let mut rng = substream(cfg.seed, &[label::ROLLOUT, s, b]);
        groups.push(rollout_group(
            state,
            &cfg.task,
            &prompt,
            cfg.group_size,
            &cfg.decode,
            b,
            &mut rng,
            exec,
        )?);
    }
    let mut m = train_step(
        state,
        &groups,
        cfg,
        &mut substream(cfg.seed, &[label::MASK, s]),
        exec,
    )?;
    if state.step.is_multiple_of(cfg.mu) {
        refresh_old(state, cfg)?;
        m.old_refreshed = true;
    }
    Ok(m)
}

/// Runs `cfg.steps` steps from a fresh state, handing every step's metrics
/// to `on_step`; stops at the first error.
pub fn train<E: Executor>(
    cfg: &TrainConfig,
    exec: &E,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    for _ in 0..cfg.steps {
        let m = run_step(&mut state, cfg, exec)?;
        on_step(&state, &m)?;
    }
    Ok(state)
}
