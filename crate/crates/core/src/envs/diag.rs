//! One-step task where only agent 0 sees a goal bit and agent 1 is paid for
//! matching it, so agent 1 must receive from agent 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, StepInfo, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub n_agents: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { n_agents: 3 }
    }
}

pub struct DiagEnv {
    n: usize,
    goal: usize,
    over: bool,
}

impl DiagEnv {
    pub fn new(cfg: DiagConfig) -> Result<Self> {
        if !(2..=4).contains(&cfg.n_agents) {
            return Err(Error::Config(format!(
                "diag needs 2 to 4 agents, got {}",
                cfg.n_agents
            )));
        }
        Ok(Self {
            n: cfg.n_agents,
            goal: 0,
            over: false,
        })
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    fn joint_obs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.obs_dim()];
        let w = self.obs_dim();
        out[self.goal] = 1.0;
        for i in 0..self.n {
            out[i * w + 2 + i] = 1.0;
        }
        out
    }
}

impl Env for DiagEnv {
    fn n_agents(&self) -> usize {
        self.n
    }

    /// Goal one-hot (zero except for agent 0) plus agent-id one-hot.
    fn obs_dim(&self) -> usize {
        2 + self.n
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.goal = rng.random_range(0..2);
        self.over = false;
        self.joint_obs()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if actions.len() != self.n {
            return Err(Error::Config(format!(
                "expected {} actions, got {}",
                self.n,
                actions.len()
            )));
        }
        if let Some((agent, &action)) = actions.iter().enumerate().find(|&(_, &a)| a >= 2) {
            return Err(Error::Action { agent, action });
        }
        if self.over {
            return Err(Error::Config("episode is over; call reset".into()));
        }
        self.over = true;
        let success = actions[1] == self.goal;
        Ok(StepResult {
            obs: self.joint_obs(),
            reward: if success { 1.0 } else { 0.0 },
            done: true,
            info: StepInfo {
                steps_taken: 1,
                success,
            },
        })
    }

    fn available(&self) -> Vec<bool> {
        vec![true; self.n * 2]
    }
}
