//! Run configuration: flat `key = value` files, command-line overrides and
//! the resolved echo written next to every run.
//!
//! ```text
//! # comments start with '#'
//! command = train
//! task.id = copy_reverse
//! trainer.psi = 10.0
//! ```
//!
//! Every key has a default. Keys not listed in [`KEYS`] are rejected, as are
//! keys repeated within one file. Overrides from `--set` are applied after
//! the file in the order given.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gdsd_core::decoder::{DecodeSchedule, Selection};
use gdsd_core::denoiser::Family;
use gdsd_core::mdm::{MaskRule, TimeSampler, WeightSchedule};
use gdsd_core::objectives::LossForm;
use gdsd_core::tasks::TaskId;
use gdsd_core::trainer::TrainConfig;

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line { file: String, line: usize },
    Set(String),
    Flag(&'static str),
    Resolved,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line { file, line } => write!(f, "{file}:{line}"),
            Origin::Set(s) => write!(f, "--set {s}"),
            Origin::Flag(name) => write!(f, "{name}"),
            Origin::Resolved => f.write_str("resolved configuration"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub origin: Origin,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{}: key '{}': {}", self.origin, k, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Verify,
    Tim,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Verify => "verify",
            Command::Tim => "tim",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Command::Train),
            "verify" => Ok(Command::Verify),
            "tim" => Ok(Command::Tim),
            _ => Err(format!(
                "unknown command '{s}' (expected train, verify or tim)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyParams {
    /// Monte-Carlo ELBO draws per completion in the lower-bound check.
    pub mc_draws: usize,
    /// Decodes per schedule in the sampler check.
    pub rollouts: usize,
    /// Also run the end-to-end training dynamics check (slow).
    pub dynamics: bool,
    pub dynamics_steps: u64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            mc_draws: 10_000,
            rollouts: 100_000,
            dynamics: false,
            dynamics_steps: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimParams {
    /// Time samples per ELBO estimate.
    pub k: usize,
    /// ELBO estimates per completion.
    pub samples: usize,
}

impl Default for TimParams {
    fn default() -> Self {
        Self {
            k: 2,
            samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainConfig,
    /// Steps between parameter checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Record elapsed seconds in metrics. Off by default so that metrics
    /// files are reproducible byte for byte.
    pub wall_time: bool,
    pub plot_data: bool,
    pub verify: VerifyParams,
    pub tim: TimParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Train,
            seed: 0,
            out: PathBuf::from("runs/default"),
            train: TrainConfig::for_task(TaskId::CopyReverse),
            checkpoint_every: 100,
            wall_time: false,
            plot_data: false,
            verify: VerifyParams::default(),
            tim: TimParams::default(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "command",
    "seed",
    "out",
    "task.id",
    "task.copy_vocab",
    "task.copy_len",
    "task.sudoku_empty",
    "model.family",
    "model.hidden",
    "model.pos_features",
    "model.init_scale",
    "trainer.objective",
    "trainer.psi",
    "trainer.beta",
    "trainer.epsilon",
    "trainer.mc_samples",
    "trainer.mu",
    "trainer.group_size",
    "trainer.batch_prompts",
    "trainer.lr",
    "trainer.momentum",
    "trainer.warmup_steps",
    "trainer.max_grad_norm",
    "trainer.steps",
    "trainer.loss_form",
    "trainer.checkpoint_every",
    "decode.steps",
    "decode.selection",
    "decode.block_size",
    "decode.temperature",
    "masking.sampler",
    "masking.rule",
    "masking.weight",
    "masking.coupled",
    "output.wall_time",
    "output.plot_data",
    "verify.mc_draws",
    "verify.rollouts",
    "verify.dynamics",
    "verify.dynamics_steps",
    "tim.k",
    "tim.samples",
];

pub fn parse_str(text: &str, file: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries: Vec<Entry> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line {
            file: file.to_string(),
            line: i + 1,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let entry = split_entry(line, origin.clone())?;
        if let Some(first) = seen.get(&entry.key) {
            return Err(ConfigError {
                origin,
                key: Some(entry.key),
                message: format!("duplicate key, first set on line {first}"),
            });
        }
        seen.insert(entry.key.clone(), i + 1);
        entries.push(entry);
    }
    Ok(entries)
}

pub fn parse_file(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        origin: Origin::Line {
            file: path.display().to_string(),
            line: 0,
        },
        key: None,
        message: format!("cannot read config: {e}"),
    })?;
    parse_str(&text, &path.display().to_string())
}

/// A `--set key=value` override.
pub fn parse_override(s: &str) -> Result<Entry, ConfigError> {
    split_entry(s.trim(), Origin::Set(s.to_string()))
}

fn split_entry(line: &str, origin: Origin) -> Result<Entry, ConfigError> {
    let Some((k, v)) = line.split_once('=') else {
        return Err(ConfigError {
            origin,
            key: None,
            message: format!("expected 'key = value', got '{line}'"),
        });
    };
    let (key, value) = (k.trim(), v.trim());
    if key.is_empty() || key.contains(char::is_whitespace) {
        return Err(ConfigError {
            origin,
            key: None,
            message: format!("malformed key '{key}'"),
        });
    }
    if value.is_empty() {
        return Err(ConfigError {
            origin,
            key: Some(key.to_string()),
            message: "missing value".into(),
        });
    }
    Ok(Entry {
        key: key.to_string(),
        value: value.to_string(),
        origin,
    })
}

#[derive(Default)]
struct Draft {
    family: Option<String>,
    hidden: Option<usize>,
    pos_features: Option<usize>,
    decode_steps: Option<usize>,
    selection: Option<Selection>,
    block_size: Option<Option<usize>>,
    temperature: Option<f64>,
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("invalid value '{v}': {e}"))
}

fn real(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if !x.is_finite() {
        return Err(format!("value '{v}' is not finite"));
    }
    Ok(x)
}

fn at_least<T: PartialOrd + fmt::Display + Copy>(x: T, lo: T) -> Result<T, String> {
    if x < lo {
        return Err(format!("must be >= {lo}, got {x}"));
    }
    Ok(x)
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("invalid value '{v}' (expected true or false)")),
    }
}

fn enumerated<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("invalid value '{v}' (expected one of {})", names.join(", "))
        })
}

const SELECTIONS: &[(&str, Selection)] = &[
    ("low_confidence", Selection::LowConfidence),
    ("random", Selection::Random),
];
const FORMS: &[(&str, LossForm)] = &[
    ("practical", LossForm::Practical),
    ("teacher_match", LossForm::TeacherMatch),
];
const SAMPLERS: &[(&str, TimeSampler)] = &[
    ("grid", TimeSampler::Grid),
    ("continuous", TimeSampler::Continuous),
];
const RULES: &[(&str, MaskRule)] = &[
    ("exact_count", MaskRule::ExactCount),
    ("bernoulli", MaskRule::Bernoulli),
];
const WEIGHTS: &[(&str, WeightSchedule)] = &[
    ("inv_t", WeightSchedule::InvT),
    ("constant", WeightSchedule::Constant),
];

fn name_of<T: PartialEq>(x: T, options: &[(&'static str, T)]) -> &'static str {
    options
        .iter()
        .find(|(_, t)| *t == x)
        .map(|(n, _)| *n)
        .unwrap_or("?")
}

fn apply(cfg: &mut RunConfig, d: &mut Draft, key: &str, v: &str) -> Result<(), String> {
    let t = &mut cfg.train;
    match key {
        "command" => cfg.command = v.parse()?,
        "seed" => cfg.seed = num(v)?,
        "out" => cfg.out = PathBuf::from(v),
        "task.id" => {}
        "task.copy_vocab" => t.task.copy_vocab = at_least(num(v)?, 2)?,
        "task.copy_len" => t.task.copy_len = at_least(num(v)?, 1)?,
        "task.sudoku_empty" => t.task.sudoku_empty = at_least(num(v)?, 4)?,
        "model.family" => {
            d.family = Some(enumerated(v, &[("mlp", "mlp"), ("tabular", "tabular")])?.to_string())
        }
        "model.hidden" => d.hidden = Some(at_least(num(v)?, 1)?),
        "model.pos_features" => d.pos_features = Some(num(v)?),
        "model.init_scale" => t.init_scale = at_least(real(v)?, 0.0)?,
        "trainer.objective" => t.objective = v.parse().map_err(|e| format!("{e}"))?,
        "trainer.psi" => t.psi = at_least(real(v)?, 0.0)?,
        "trainer.beta" => {
            let b = real(v)?;
            if !(0.0..=1.0).contains(&b) {
                return Err(format!("must be in [0, 1], got {b}"));
            }
            t.beta = b;
        }
        "trainer.epsilon" => t.epsilon = at_least(real(v)?, 0.0)?,
        "trainer.mc_samples" => t.mc_samples = at_least(num(v)?, 1)?,
        "trainer.mu" => t.mu = at_least(num(v)?, 1)?,
        "trainer.group_size" => t.group_size = at_least(num(v)?, 2)?,
        "trainer.batch_prompts" => t.batch_prompts = at_least(num(v)?, 1)?,
        "trainer.lr" => {
            let lr = real(v)?;
            if lr <= 0.0 {
                return Err(format!("must be > 0, got {lr}"));
            }
            t.lr = lr;
        }
        "trainer.momentum" => {
            let m = real(v)?;
            if !(0.0..1.0).contains(&m) {
                return Err(format!("must be in [0, 1), got {m}"));
            }
            t.momentum = m;
        }
        "trainer.warmup_steps" => t.warmup_steps = num(v)?,
        "trainer.max_grad_norm" => {
            let g = real(v)?;
            if g <= 0.0 {
                return Err(format!("must be > 0, got {g}"));
            }
            t.max_grad_norm = g;
        }
        "trainer.steps" => t.steps = num(v)?,
        "trainer.loss_form" => t.loss_form = enumerated(v, FORMS)?,
        "trainer.checkpoint_every" => cfg.checkpoint_every = num(v)?,
        "decode.steps" => d.decode_steps = Some(at_least(num(v)?, 1)?),
        "decode.selection" => d.selection = Some(enumerated(v, SELECTIONS)?),
        "decode.block_size" => {
            d.block_size = Some(if v == "none" {
                None
            } else {
                Some(at_least(num(v)?, 1)?)
            });
        }
        "decode.temperature" => d.temperature = Some(at_least(real(v)?, 0.0)?),
        "masking.sampler" => t.masking.sampler = enumerated(v, SAMPLERS)?,
        "masking.rule" => t.masking.rule = enumerated(v, RULES)?,
        "masking.weight" => t.masking.weight = enumerated(v, WEIGHTS)?,
        "masking.coupled" => t.masking.coupled = boolean(v)?,
        "output.wall_time" => cfg.wall_time = boolean(v)?,
        "output.plot_data" => cfg.plot_data = boolean(v)?,
        "verify.mc_draws" => cfg.verify.mc_draws = at_least(num(v)?, 2)?,
        "verify.rollouts" => cfg.verify.rollouts = at_least(num(v)?, 1)?,
        "verify.dynamics" => cfg.verify.dynamics = boolean(v)?,
        "verify.dynamics_steps" => cfg.verify.dynamics_steps = at_least(num(v)?, 1)?,
        "tim.k" => cfg.tim.k = at_least(num(v)?, 1)?,
        "tim.samples" => cfg.tim.samples = at_least(num(v)?, 2)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Builds a configuration from entries; later entries win.
pub fn resolve(entries: &[Entry]) -> Result<RunConfig, ConfigError> {
    let mut last: BTreeMap<&str, &Entry> = BTreeMap::new();
    for e in entries {
        if !KEYS.contains(&e.key.as_str()) {
            return Err(ConfigError {
                origin: e.origin.clone(),
                key: Some(e.key.clone()),
                message: "unknown key".into(),
            });
        }
        last.insert(e.key.as_str(), e);
    }
    let fail = |e: &Entry, message: String| ConfigError {
        origin: e.origin.clone(),
        key: Some(e.key.clone()),
        message,
    };
    let id = match last.get("task.id") {
        Some(e) => e
            .value
            .parse::<TaskId>()
            .map_err(|err| fail(e, format!("{err}")))?,
        None => TaskId::CopyReverse,
    };
    let mut cfg = RunConfig {
        train: TrainConfig::for_task(id),
        ..RunConfig::default()
    };
    let mut draft = Draft::default();
    for key in KEYS {
        if let Some(e) = last.get(key) {
            apply(&mut cfg, &mut draft, key, &e.value).map_err(|m| fail(e, m))?;
        }
    }
    let t = &mut cfg.train;
    let (hidden, pos) = match t.family {
        Family::Mlp {
            hidden,
            pos_features,
        } => (hidden, pos_features),
        Family::Tabular => (48, 8),
    };
    t.family = match draft.family.as_deref() {
        Some("tabular") => Family::Tabular,
        _ => Family::Mlp {
            hidden: draft.hidden.unwrap_or(hidden),
            pos_features: draft.pos_features.unwrap_or(pos),
        },
    };
    let base = DecodeSchedule::rollout_default(t.task.completion_len());
    t.decode = DecodeSchedule {
        steps: draft.decode_steps.unwrap_or(base.steps),
        selection: draft.selection.unwrap_or(base.selection),
        block_size: draft.block_size.unwrap_or(base.block_size),
        temperature: draft.temperature.unwrap_or(base.temperature),
    };
    t.seed = cfg.seed;
    t.validate().map_err(|e| ConfigError {
        origin: Origin::Resolved,
        key: None,
        message: e.to_string(),
    })?;
    Ok(cfg)
}

/// Every key with its effective value, in [`KEYS`] order. Parsing the echo
/// gives back the same configuration.
pub fn echo(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let (family, hidden, pos) = match t.family {
        Family::Mlp {
            hidden,
            pos_features,
        } => ("mlp", hidden, pos_features),
        Family::Tabular => ("tabular", 48, 8),
    };
    let block = t
        .decode
        .block_size
        .map_or("none".to_string(), |b| b.to_string());
    let values: Vec<String> = vec![
        cfg.command.name().into(),
        cfg.seed.to_string(),
        cfg.out.display().to_string(),
        t.task.id.name().into(),
        t.task.copy_vocab.to_string(),
        t.task.copy_len.to_string(),
        t.task.sudoku_empty.to_string(),
        family.into(),
        hidden.to_string(),
        pos.to_string(),
        fmt_real(t.init_scale),
        t.objective.name().into(),
        fmt_real(t.psi),
        fmt_real(t.beta),
        fmt_real(t.epsilon),
        t.mc_samples.to_string(),
        t.mu.to_string(),
        t.group_size.to_string(),
        t.batch_prompts.to_string(),
        fmt_real(t.lr),
        fmt_real(t.momentum),
        t.warmup_steps.to_string(),
        fmt_real(t.max_grad_norm),
        t.steps.to_string(),
        name_of(t.loss_form, FORMS).into(),
        cfg.checkpoint_every.to_string(),
        t.decode.steps.to_string(),
        name_of(t.decode.selection, SELECTIONS).into(),
        block,
        fmt_real(t.decode.temperature),
        name_of(t.masking.sampler, SAMPLERS).into(),
        name_of(t.masking.rule, RULES).into(),
        name_of(t.masking.weight, WEIGHTS).into(),
        t.masking.coupled.to_string(),
        cfg.wall_time.to_string(),
        cfg.plot_data.to_string(),
        cfg.verify.mc_draws.to_string(),
        cfg.verify.rollouts.to_string(),
        cfg.verify.dynamics.to_string(),
        cfg.verify.dynamics_steps.to_string(),
        cfg.tim.k.to_string(),
        cfg.tim.samples.to_string(),
    ];
    debug_assert_eq!(values.len(), KEYS.len());
    let mut s = String::from("# resolved configuration\n");
    for (k, v) in KEYS.iter().zip(values) {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}
