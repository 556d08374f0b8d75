use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum TargetRule {
    /// `target <- (1 - tau) target + tau online` after every inner step.
    Ema { tau: f64 },
    /// Copy every `period` iterations.
    Hard { period: u64 },
}

/// Where the communication graph comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Top-`k` of the learned adjacency logits.
    #[default]
    Learned,
    /// Self-loops only; the adjacency logits are never updated.
    Identity,
    /// Every pair connected; the adjacency logits are never updated.
    Full,
}

impl GraphMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Identity => "identity",
            Self::Full => "full",
        }
    }
}

/// Optimisation settings. Defaults follow the common hyper-parameter table
/// with the predator-prey row for epochs and clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    /// Shuffled minibatches per epoch; each gets one inner and one outer step.
    pub minibatches: usize,
    /// Encoder/decoder learning rate.
    pub lr: f64,
    /// Adjacency-logit learning rate.
    pub alpha_lr: f64,
    /// Gate-network learning rate (stage 2 upper level).
    pub gate_lr: f64,
    pub adam_eps: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub use_huber: bool,
    pub huber_delta: f64,
    pub target: TargetRule,
    /// Fraction of each iteration's episodes used for the inner step.
    pub train_split: f64,
    /// Parallel environments stepped in lockstep.
    pub n_workers: usize,
    /// Steps each worker collects per iteration.
    pub rollout_len: usize,
    /// Gumbel-softmax temperature for graph sampling.
    pub gumbel_tau: f64,
    pub gate_tau: f64,
    /// Initial bias of the "open" gate logit.
    pub gate_open_bias: f64,
    /// Optional weight on the mean open gate (communication cost).
    pub gate_penalty: f64,
    pub recurrent_gate: bool,
    /// Stage 2: keep every gate open (reduces to the static graph).
    pub clamp_gates_open: bool,
    /// Stage 2: skip the encoder/decoder updates.
    pub freeze_backbone: bool,
    /// Fixed graphs turn off the adjacency search (ablations).
    pub graph: GraphMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_clip: 0.05,
            ppo_epochs: 10,
            minibatches: 1,
            lr: 5e-4,
            alpha_lr: 1e-2,
            gate_lr: 5e-4,
            adam_eps: 1e-5,
            entropy_coef: 0.01,
            max_grad_norm: 10.0,
            use_huber: true,
            huber_delta: 10.0,
            target: TargetRule::Ema { tau: 0.005 },
            train_split: 0.5,
            n_workers: 32,
            rollout_len: 100,
            gumbel_tau: 1.0,
            gate_tau: 1.0,
            gate_open_bias: 1.0,
            gate_penalty: 0.0,
            recurrent_gate: false,
            clamp_gates_open: false,
            freeze_backbone: false,
            graph: GraphMode::Learned,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if self.ppo_clip.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("ppo_clip must be positive, got {}", self.ppo_clip));
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return bad(format!(
                "train_split must be in (0, 1), got {}",
                self.train_split
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("alpha_lr", self.alpha_lr),
            ("gate_lr", self.gate_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.n_workers == 0
            || self.rollout_len == 0
            || self.ppo_epochs == 0
            || self.minibatches == 0
        {
            return bad(
                "n_workers, rollout_len, ppo_epochs and minibatches must be at least 1".into(),
            );
        }
        if self.gumbel_tau <= 0.0
            || self.gate_tau <= 0.0
            || self.huber_delta <= 0.0
            || self.max_grad_norm <= 0.0
        {
            return bad("temperatures, huber_delta and max_grad_norm must be positive".into());
        }
        match self.target {
            TargetRule::Ema { tau } if !(0.0..=1.0).contains(&tau) => {
                bad(format!("EMA tau must be in [0, 1], got {tau}"))
            }
            TargetRule::Hard { period: 0 } => bad("hard target period must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range() {
        for cfg in [
            TrainConfig {
                gamma: 1.0,
                ..Default::default()
            },
            TrainConfig {
                ppo_clip: 0.0,
                ..Default::default()
            },
            TrainConfig {
                train_split: 1.0,
                ..Default::default()
            },
            TrainConfig {
                target: TargetRule::Hard { period: 0 },
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
