//! Cooperative environments with a shared team reward.

mod diag;
mod grid;

use serde::{Deserialize, Serialize};

pub use diag::{DiagConfig, DiagEnv};
pub use grid::{AgentClass, GridConfig, GridEnv, GridState, Move};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Step at which the last agent finished, or the step count so far when
    /// some agent is still active.
    pub steps_taken: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// `N * obs_dim`, agent-major.
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A cooperative multi-agent environment.
pub trait Env: Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Starts a new episode; the placement is a function of `seed` alone.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
    /// `N * n_actions` availability flags for the current state.
    fn available(&self) -> Vec<bool>;
}

/// Environment selection by name plus its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Pp(GridConfig),
    Pcp(GridConfig),
    Diag(DiagConfig),
}

impl EnvSpec {
    /// Defaults for `pp`, `pcp` or `diag`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pp" => Ok(Self::Pp(GridConfig::predator_prey())),
            "pcp" => Ok(Self::Pcp(GridConfig::predator_capture_prey())),
            "diag" => Ok(Self::Diag(DiagConfig::default())),
            other => Err(Error::Config(format!(
                "unknown environment `{other}` (expected pp, pcp or diag)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Pp(_) => "pp",
            Self::Pcp(_) => "pcp",
            Self::Diag(_) => "diag",
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Self::Pp(c) | Self::Pcp(c) => c.n_predators + c.n_captures,
            Self::Diag(c) => c.n_agents,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        Ok(match self {
            Self::Pp(c) | Self::Pcp(c) => Box::new(GridEnv::new(c.clone())?),
            Self::Diag(c) => Box::new(DiagEnv::new(c.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in ["pp", "pcp", "diag"] {
            let spec = EnvSpec::by_name(name).unwrap();
            assert_eq!(spec.name(), name);
            let env = spec.build().unwrap();
            assert_eq!(env.n_agents(), spec.n_agents());
        }
        assert!(matches!(EnvSpec::by_name("smac"), Err(Error::Config(_))));
    }
}
