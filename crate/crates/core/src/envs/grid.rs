//! Predator-prey on a square grid, with an optional capture class.
//!
//! Predators finish by standing on the prey cell. Capture agents have no
//! sensor field and finish only by issuing `capture` on the prey cell. The
//! prey never moves and agents may share cells.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, StepInfo, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub grid_size: usize,
    pub n_predators: usize,
    pub n_captures: usize,
    pub vision: usize,
    pub max_steps: usize,
    /// Reward added per still-active agent per step.
    pub step_penalty: f64,
}

impl GridConfig {
    pub fn predator_prey() -> Self {
        Self {
            grid_size: 5,
            n_predators: 3,
            n_captures: 0,
            vision: 1,
            max_steps: 20,
            step_penalty: -0.05,
        }
    }

    pub fn predator_capture_prey() -> Self {
        Self {
            n_predators: 2,
            n_captures: 1,
            ..Self::predator_prey()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!(
                "grid size must be at least 2, got {}",
                self.grid_size
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.n_predators + self.n_captures == 0 {
            return Err(Error::Config(
                "grid environment needs at least one agent".into(),
            ));
        }
        if self.n_predators + self.n_captures + 1 > self.grid_size * self.grid_size {
            return Err(Error::Config(format!(
                "{}x{} grid cannot hold {} agents and a prey on distinct cells",
                self.grid_size,
                self.grid_size,
                self.n_predators + self.n_captures
            )));
        }
        if !self.step_penalty.is_finite() {
            return Err(Error::Config("step penalty must be finite".into()));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        (2 * self.vision + 1) * (2 * self.vision + 1)
    }

    pub fn obs_dim(&self) -> usize {
        self.window() + 2 + 2
    }

    pub fn n_actions(&self) -> usize {
        if self.n_captures > 0 {
            6
        } else {
            5
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentClass {
    Predator,
    Capture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Capture,
}

impl Move {
    pub fn from_index(a: usize) -> Option<Self> {
        [
            Self::Up,
            Self::Down,
            Self::Left,
            Self::Right,
            Self::Stay,
            Self::Capture,
        ]
        .get(a)
        .copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    /// `(row, col)` per agent.
    pub positions: Vec<(usize, usize)>,
    pub classes: Vec<AgentClass>,
    pub prey: (usize, usize),
    pub finished: Vec<bool>,
    pub step: usize,
    /// Step at which the last agent finished.
    pub finished_at: Option<usize>,
}

pub struct GridEnv {
    cfg: GridConfig,
    state: GridState,
}

impl GridEnv {
    pub fn new(cfg: GridConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_predators + cfg.n_captures;
        let classes = (0..n)
            .map(|i| {
                if i < cfg.n_predators {
                    AgentClass::Predator
                } else {
                    AgentClass::Capture
                }
            })
            .collect();
        let state = GridState {
            positions: vec![(0, 0); n],
            classes,
            prey: (0, 0),
            finished: vec![false; n],
            step: 0,
            finished_at: None,
        };
        let mut env = Self { cfg, state };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    /// Replaces the state, e.g. to set up a specific situation.
    pub fn set_state(&mut self, state: GridState) -> Result<()> {
        let g = self.cfg.grid_size;
        let n = self.n_agents();
        let inside = |&(r, c): &(usize, usize)| r < g && c < g;
        if state.positions.len() != n
            || state.finished.len() != n
            || state.classes != self.state.classes
            || !state.positions.iter().all(inside)
            || !inside(&state.prey)
        {
            return Err(Error::Config("state does not fit this environment".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let s = &self.state;
        let (r, c) = s.positions[agent];
        let mut out = Vec::with_capacity(cfg.obs_dim());
        let v = cfg.vision as isize;
        let blind = s.classes[agent] == AgentClass::Capture;
        for dr in -v..=v {
            for dc in -v..=v {
                let seen =
                    (r as isize + dr, c as isize + dc) == (s.prey.0 as isize, s.prey.1 as isize);
                out.push(if seen && !blind { 1.0 } else { 0.0 });
            }
        }
        let scale = (cfg.grid_size - 1) as f64;
        out.push(r as f64 / scale);
        out.push(c as f64 / scale);
        match s.classes[agent] {
            AgentClass::Predator => out.extend([1.0, 0.0]),
            AgentClass::Capture => out.extend([0.0, 1.0]),
        }
        out
    }

    fn joint_obs(&self) -> Vec<f64> {
        (0..self.n_agents()).flat_map(|i| self.observe(i)).collect()
    }

    fn apply(&self, pos: (usize, usize), m: Move) -> (usize, usize) {
        let last = self.cfg.grid_size - 1;
        let (r, c) = pos;
        match m {
            Move::Up => (r.saturating_sub(1), c),
            Move::Down => ((r + 1).min(last), c),
            Move::Left => (r, c.saturating_sub(1)),
            Move::Right => (r, (c + 1).min(last)),
            Move::Stay | Move::Capture => (r, c),
        }
    }

    fn allowed(&self, agent: usize, m: Move) -> bool {
        m != Move::Capture || self.state.classes[agent] == AgentClass::Capture
    }
}

impl Env for GridEnv {
    fn n_agents(&self) -> usize {
        self.cfg.n_predators + self.cfg.n_captures
    }

    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }

    fn n_actions(&self) -> usize {
        self.cfg.n_actions()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.cfg.grid_size;
        let n = self.n_agents();
        let cells = sample(&mut rng, g * g, n + 1).into_vec();
        let s = &mut self.state;
        s.positions = cells[..n].iter().map(|&x| (x / g, x % g)).collect();
        s.prey = (cells[n] / g, cells[n] % g);
        s.finished = vec![false; n];
        s.step = 0;
        s.finished_at = None;
        self.joint_obs()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        let n = self.n_agents();
        if actions.len() != n {
            return Err(Error::Config(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        let mut moves = Vec::with_capacity(n);
        for (agent, &a) in actions.iter().enumerate() {
            match Move::from_index(a).filter(|&m| a < self.n_actions() && self.allowed(agent, m)) {
                Some(m) => moves.push(m),
                None => return Err(Error::Action { agent, action: a }),
            }
        }
        if self.state.finished_at.is_some() || self.state.step >= self.cfg.max_steps {
            return Err(Error::Config("episode is over; call reset".into()));
        }
        self.state.step += 1;
        for (agent, &m) in moves.iter().enumerate() {
            if self.state.finished[agent] {
                continue;
            }
            let pos = self.apply(self.state.positions[agent], m);
            self.state.positions[agent] = pos;
            let on_prey = pos == self.state.prey;
            self.state.finished[agent] = match self.state.classes[agent] {
                AgentClass::Predator => on_prey,
                AgentClass::Capture => on_prey && m == Move::Capture,
            };
        }
        let active = self.state.finished.iter().filter(|&&f| !f).count();
        let reward = self.cfg.step_penalty * active as f64;
        let success = active == 0;
        if success {
            self.state.finished_at = Some(self.state.step);
        }
        let done = success || self.state.step >= self.cfg.max_steps;
        Ok(StepResult {
            obs: self.joint_obs(),
            reward,
            done,
            info: StepInfo {
                steps_taken: self.state.step,
                success,
            },
        })
    }

    fn available(&self) -> Vec<bool> {
        let a = self.n_actions();
        let mut out = Vec::with_capacity(self.n_agents() * a);
        for agent in 0..self.n_agents() {
            for idx in 0..a {
                out.push(Move::from_index(idx).is_some_and(|m| self.allowed(agent, m)));
            }
        }
        out
    }
}
