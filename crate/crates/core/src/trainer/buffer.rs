use crate::diffmath::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Mean of per-agent values.
pub fn joint_value<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return shape_err("joint value of zero agents");
    }
    Ok(values.iter().copied().sum::<T>() / T::c(values.len() as f64))
}

/// Generalised advantage estimates over one contiguous stream.
///
/// `values[t]` is the joint value of step `t`; `bootstrap` is the value of
/// the state after the last step and is ignored when that step is terminal.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return shape_err(format!(
            "GAE inputs differ in length: {n}, {}, {}",
            values.len(),
            dones.len()
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to mean 0 and scales to unit (population) standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for x in xs {
        *x = (*x - mean) / std;
    }
}

/// Gate decisions recorded during a stage-2 rollout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateTrace<T> {
    /// `M * N * 2` Gumbel noise.
    pub noise: Vec<T>,
    /// `M * N`
    pub open: Vec<bool>,
    /// `M * N * hidden` previous-step gate features (recurrent variant).
    pub prev: Vec<T>,
}

/// One worker's trajectory, time-ordered.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Joint value after the last step (under the rollout parameters).
    pub bootstrap: f64,
}

/// Transitions of one iteration, stored worker after worker.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer<T> {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub gate_hidden: usize,
    pub obs: Vec<T>,
    pub next_obs: Vec<T>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<T>,
    pub values: Vec<T>,
    pub avail: Vec<bool>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Episode number within the iteration, counted worker-major.
    pub episode: Vec<usize>,
    pub segments: Vec<Segment>,
    pub gates: Option<GateTrace<T>>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        gate_hidden: Option<usize>,
    ) -> Self {
        Self {
            n_agents,
            obs_dim,
            n_actions,
            gate_hidden: gate_hidden.unwrap_or(0),
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            avail: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            episode: Vec::new(),
            segments: Vec::new(),
            gates: gate_hidden.map(|_| GateTrace::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.episode.last().map_or(0, |e| e + 1)
    }

    /// Joint value per transition.
    pub fn joint_values(&self) -> Result<Vec<f64>> {
        self.values
            .chunks(self.n_agents)
            .map(|v| joint_value(v).map(Scalar::f64))
            .collect()
    }

    /// Un-normalised joint advantages, segment by segment.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
        let jv = self.joint_values()?;
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            let r = s.start..s.start + s.len;
            let (adv, _) = compute_gae(
                &self.rewards[r.clone()],
                &jv[r.clone()],
                &self.dones[r],
                s.bootstrap,
                gamma,
                lambda,
            )?;
            out.extend(adv);
        }
        if out.len() != self.len() {
            return shape_err("segments do not cover the buffer");
        }
        Ok(out)
    }

    /// Transition indices of the first `split` fraction of episodes and of
    /// the rest.
    pub fn split(&self, split: f64) -> (Vec<usize>, Vec<usize>) {
        let episodes = self.n_episodes();
        let cut = ((episodes as f64 * split).round() as usize).clamp(1.min(episodes), episodes);
        (0..self.len()).partition(|&t| self.episode[t] < cut)
    }

    /// Gathers a training batch; `adv` is indexed like the buffer.
    pub fn batch(&self, idx: &[usize], adv: &[f64]) -> Result<Batch<T>> {
        let (n, d, a) = (self.n_agents, self.obs_dim, self.n_actions);
        let b = idx.len();
        let rows = |src: &[T], w: usize| -> Vec<T> {
            idx.iter()
                .flat_map(|&t| src[t * w..(t + 1) * w].iter().copied())
                .collect()
        };
        let gates = match &self.gates {
            Some(g) => {
                let h = self.gate_hidden;
                let prev: Vec<T> = if g.prev.is_empty() {
                    Vec::new()
                } else {
                    rows(&g.prev, n * h)
                };
                Some(GateBatch {
                    noise: Tensor::new(&[b, n, 2], rows(&g.noise, n * 2))?,
                    open: idx
                        .iter()
                        .flat_map(|&t| g.open[t * n..(t + 1) * n].iter().copied())
                        .collect(),
                    prev: if prev.is_empty() {
                        None
                    } else {
                        Some(Tensor::new(&[b, n, h], prev)?)
                    },
                })
            }
            None => None,
        };
        Ok(Batch {
            obs: Tensor::new(&[b, n, d], rows(&self.obs, n * d))?,
            next_obs: Tensor::new(&[b, n, d], rows(&self.next_obs, n * d))?,
            actions: idx
                .iter()
                .flat_map(|&t| self.actions[t * n..(t + 1) * n].iter().copied())
                .collect(),
            avail: idx
                .iter()
                .flat_map(|&t| self.avail[t * n * a..(t + 1) * n * a].iter().copied())
                .collect(),
            old_log_probs: rows(&self.log_probs, n),
            advantages: idx.iter().map(|&t| T::c(adv[t])).collect(),
            rewards: idx.iter().map(|&t| self.rewards[t]).collect(),
            dones: idx.iter().map(|&t| self.dones[t]).collect(),
            gates,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateBatch<T> {
    pub noise: Tensor<T>,
    pub open: Vec<bool>,
    pub prev: Option<Tensor<T>>,
}

/// Materialised subset of a buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B, N, obs_dim]`
    pub obs: Tensor<T>,
    pub next_obs: Tensor<T>,
    /// `B * N`
    pub actions: Vec<usize>,
    /// `B * N * A`
    pub avail: Vec<bool>,
    /// `B * N`
    pub old_log_probs: Vec<T>,
    /// `B`, already normalised.
    pub advantages: Vec<T>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub gates: Option<GateBatch<T>>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}
