//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Values come from defaults, then an optional file, then command-line
//! flags, each layer overriding the previous one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use commformer_core::envs::{DiagConfig, EnvSpec, GridConfig};
use commformer_core::trainer::{GraphMode, RunSetup, TargetRule, TrainConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub agents: Option<usize>,
    pub sparsity: f64,
    pub k: Option<usize>,
    /// Stage-1 env-step budget.
    pub steps: u64,
    /// Stage-2 env-step budget; defaults to `steps`.
    pub stage2_steps: Option<u64>,
    pub seed: u64,
    pub stage: StageSel,
    pub dyn_gate: bool,
    pub hidden: usize,
    pub blocks: usize,
    pub dtype: Dtype,
    pub checkpoint_every: u64,
    /// Greedy evaluation episodes recorded in the manifest at run end.
    pub eval_episodes: usize,
    pub stage1_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub grid_size: Option<usize>,
    pub vision: Option<usize>,
    pub max_steps: Option<usize>,
    pub step_penalty: Option<f64>,
    pub captures: Option<usize>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "pp".into(),
            agents: None,
            sparsity: 0.4,
            k: None,
            steps: 1_000_000,
            stage2_steps: None,
            seed: 1,
            stage: StageSel::One,
            dyn_gate: false,
            hidden: 64,
            blocks: 1,
            dtype: Dtype::F64,
            checkpoint_every: 10,
            eval_episodes: 100,
            stage1_checkpoint: None,
            out: None,
            grid_size: None,
            vision: None,
            max_steps: None,
            step_penalty: None,
            captures: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>, ConfigError>
where
    V::Err: std::fmt::Display,
{
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (k, v) in parse_pairs(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "env" => self.env = value.to_string(),
            "agents" => self.agents = optional(key, value)?,
            "sparsity" => self.sparsity = parse(key, value)?,
            "k" => self.k = optional(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "stage2.steps" => self.stage2_steps = optional(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "stage" => {
                self.stage = match value {
                    "1" => StageSel::One,
                    "2" => StageSel::Two,
                    "both" => StageSel::Both,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected 1, 2 or both".into(),
                        })
                    }
                }
            }
            "dyn_gate" => self.dyn_gate = parse_bool(key, value)?,
            "model.hidden" => self.hidden = parse(key, value)?,
            "model.blocks" => self.blocks = parse(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected f32 or f64".into(),
                        })
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "stage1_checkpoint" => self.stage1_checkpoint = optional(key, value)?,
            "out" => self.out = optional(key, value)?,
            "env.grid_size" => self.grid_size = optional(key, value)?,
            "env.vision" => self.vision = optional(key, value)?,
            "env.max_steps" => self.max_steps = optional(key, value)?,
            "env.step_penalty" => self.step_penalty = optional(key, value)?,
            "env.captures" => self.captures = optional(key, value)?,
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.gae_lambda" => t.gae_lambda = parse(key, value)?,
            "train.ppo_clip" => t.ppo_clip = parse(key, value)?,
            "train.ppo_epochs" => t.ppo_epochs = parse(key, value)?,
            "train.minibatches" => t.minibatches = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.alpha_lr" => t.alpha_lr = parse(key, value)?,
            "train.gate_lr" => t.gate_lr = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.entropy_coef" => t.entropy_coef = parse(key, value)?,
            "train.max_grad_norm" => t.max_grad_norm = parse(key, value)?,
            "train.use_huber" => t.use_huber = parse_bool(key, value)?,
            "train.huber_delta" => t.huber_delta = parse(key, value)?,
            "train.target" => {
                t.target = match value {
                    "ema" => TargetRule::Ema { tau: 0.005 },
                    "hard" => TargetRule::Hard { period: 10 },
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected ema or hard".into(),
                        })
                    }
                }
            }
            "train.target_tau" => match &mut t.target {
                TargetRule::Ema { tau } => *tau = parse(key, value)?,
                TargetRule::Hard { .. } => {
                    return Err(ConfigError::Invalid(
                        "train.target_tau needs train.target = ema".into(),
                    ))
                }
            },
            "train.target_period" => match &mut t.target {
                TargetRule::Hard { period } => *period = parse(key, value)?,
                TargetRule::Ema { .. } => {
                    return Err(ConfigError::Invalid(
                        "train.target_period needs train.target = hard".into(),
                    ))
                }
            },
            "train.train_split" => t.train_split = parse(key, value)?,
            "train.workers" => t.n_workers = parse(key, value)?,
            "train.rollout_len" => t.rollout_len = parse(key, value)?,
            "train.gumbel_tau" => t.gumbel_tau = parse(key, value)?,
            "train.gate_tau" => t.gate_tau = parse(key, value)?,
            "train.gate_open_bias" => t.gate_open_bias = parse(key, value)?,
            "train.gate_penalty" => t.gate_penalty = parse(key, value)?,
            "train.recurrent_gate" => t.recurrent_gate = parse_bool(key, value)?,
            "train.clamp_gates_open" => t.clamp_gates_open = parse_bool(key, value)?,
            "train.freeze_backbone" => t.freeze_backbone = parse_bool(key, value)?,
            "train.graph" => {
                t.graph = match value {
                    "learned" => GraphMode::Learned,
                    "identity" => GraphMode::Identity,
                    "full" => GraphMode::Full,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected learned, identity or full".into(),
                        })
                    }
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Canonical `key = value` listing; feeding it back through
    /// [`RunConfig::set`] reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        fn opt<V: ToString>(v: &Option<V>) -> String {
            v.as_ref()
                .map_or_else(|| "none".to_string(), ToString::to_string)
        }
        let t = &self.train;
        let mut p: Vec<(&str, String)> = vec![
            ("env", self.env.clone()),
            ("agents", opt(&self.agents)),
            ("sparsity", self.sparsity.to_string()),
            ("k", opt(&self.k)),
            ("steps", self.steps.to_string()),
            ("stage2.steps", opt(&self.stage2_steps)),
            ("seed", self.seed.to_string()),
            (
                "stage",
                match self.stage {
                    StageSel::One => "1",
                    StageSel::Two => "2",
                    StageSel::Both => "both",
                }
                .into(),
            ),
            ("dyn_gate", self.dyn_gate.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("model.blocks", self.blocks.to_string()),
            (
                "dtype",
                match self.dtype {
                    Dtype::F32 => "f32",
                    Dtype::F64 => "f64",
                }
                .into(),
            ),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            (
                "stage1_checkpoint",
                opt(&self
                    .stage1_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())),
            ),
            ("env.grid_size", opt(&self.grid_size)),
            ("env.vision", opt(&self.vision)),
            ("env.max_steps", opt(&self.max_steps)),
            ("env.step_penalty", opt(&self.step_penalty)),
            ("env.captures", opt(&self.captures)),
            ("train.gamma", t.gamma.to_string()),
            ("train.gae_lambda", t.gae_lambda.to_string()),
            ("train.ppo_clip", t.ppo_clip.to_string()),
            ("train.ppo_epochs", t.ppo_epochs.to_string()),
            ("train.minibatches", t.minibatches.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.alpha_lr", t.alpha_lr.to_string()),
            ("train.gate_lr", t.gate_lr.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.entropy_coef", t.entropy_coef.to_string()),
            ("train.max_grad_norm", t.max_grad_norm.to_string()),
            ("train.use_huber", t.use_huber.to_string()),
            ("train.huber_delta", t.huber_delta.to_string()),
        ];
        match t.target {
            TargetRule::Ema { tau } => {
                p.push(("train.target", "ema".into()));
                p.push(("train.target_tau", tau.to_string()));
            }
            TargetRule::Hard { period } => {
                p.push(("train.target", "hard".into()));
                p.push(("train.target_period", period.to_string()));
            }
        }
        p.extend([
            ("train.train_split", t.train_split.to_string()),
            ("train.workers", t.n_workers.to_string()),
            ("train.rollout_len", t.rollout_len.to_string()),
            ("train.gumbel_tau", t.gumbel_tau.to_string()),
            ("train.gate_tau", t.gate_tau.to_string()),
            ("train.gate_open_bias", t.gate_open_bias.to_string()),
            ("train.gate_penalty", t.gate_penalty.to_string()),
            ("train.recurrent_gate", t.recurrent_gate.to_string()),
            ("train.clamp_gates_open", t.clamp_gates_open.to_string()),
            ("train.freeze_backbone", t.freeze_backbone.to_string()),
            ("train.graph", t.graph.name().to_string()),
        ]);
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The listing written next to a run. The output directory is left
    /// out so that moving a run does not change its identity.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`RunConfig::render`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn env_spec(&self) -> Result<EnvSpec, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        let mut spec = EnvSpec::by_name(&self.env).map_err(|e| invalid(e.to_string()))?;
        match &mut spec {
            EnvSpec::Pp(g) | EnvSpec::Pcp(g) => {
                self.apply_grid(g)?;
            }
            EnvSpec::Diag(DiagConfig { n_agents }) => {
                if let Some(a) = self.agents {
                    *n_agents = a;
                }
                if self
                    .grid_size
                    .or(self.vision)
                    .or(self.max_steps)
                    .or(self.captures)
                    .is_some()
                    || self.step_penalty.is_some()
                {
                    return Err(invalid("env.* grid settings do not apply to diag".into()));
                }
            }
        }
        Ok(spec)
    }

    fn apply_grid(&self, g: &mut GridConfig) -> Result<(), ConfigError> {
        if let Some(c) = self.captures {
            g.n_captures = c;
        }
        if let Some(a) = self.agents {
            if a < g.n_captures {
                return Err(ConfigError::Invalid(format!(
                    "{a} agents cannot include {} capture agents",
                    g.n_captures
                )));
            }
            g.n_predators = a - g.n_captures;
        }
        if let Some(v) = self.grid_size {
            g.grid_size = v;
        }
        if let Some(v) = self.vision {
            g.vision = v;
        }
        if let Some(v) = self.max_steps {
            g.max_steps = v;
        }
        if let Some(v) = self.step_penalty {
            g.step_penalty = v;
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<RunSetup, ConfigError> {
        let setup = RunSetup {
            env: self.env_spec()?,
            sparsity: self.sparsity,
            k: self.k,
            hidden: self.hidden,
            blocks: self.blocks,
            seed: self.seed,
            train: self.train.clone(),
        };
        setup
            .train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(setup)
    }

    pub fn stage2_budget(&self) -> u64 {
        self.stage2_steps.unwrap_or(self.steps)
    }
}
