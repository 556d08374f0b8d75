use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::buffer::{joint_value, normalize, Batch, RolloutBuffer, Segment};
use super::config::{GraphMode, TargetRule, TrainConfig};
use super::losses::{decoder_loss, encoder_loss, td_targets};
use super::optim::{clip_grad_norm, ema_update, Adam, NamedGrads};
use crate::commgraph::{
    apply_dynamic_gate, argmax_khot, gate_edges, gumbel, sample_khot_gumbel, st_edges, CommGraph,
    KhotSample, SparsitySpec, ALPHA_PARAM,
};
use crate::diffmath::{normal, Binding, Graph, ParameterStore, Scalar, Tensor, Var};
use crate::envs::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::gating::{
    draw_from_noise, gate_forward, gate_logits, inference_gates, init_gates, replay_gates,
    GateDims, GATE_PREFIX,
};
use crate::relformer::{
    act_autoregressive, decode_policy, encode, init_decoder, init_encoder, ActMode, InitGains,
    ModelDims,
};
use crate::seeding::stream;

/// Everything needed to build a trainer from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSetup {
    pub env: EnvSpec,
    pub sparsity: f64,
    /// Per-row edge budget; overrides the one derived from `sparsity`.
    pub k: Option<usize>,
    pub hidden: usize,
    pub blocks: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Graph search: adjacency logits are the upper-level variable.
    One,
    /// Dynamic gating on the fixed learned graph.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }
}

/// Scalar pieces of a training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub encoder: Var,
    pub decoder: Var,
    pub entropy: Var,
}

fn common_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &ModelDims,
    batch: &Batch<T>,
    targets: &Tensor<T>,
    edges: Var,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let obs = g.constant(batch.obs.clone());
    let enc = encode(g, p, dims, obs, edges)?;
    let huber = cfg.use_huber.then(|| T::c(cfg.huber_delta));
    let encoder = encoder_loss(g, enc.values, targets, huber)?;
    let policy = decode_policy(
        g,
        p,
        dims,
        enc.reps,
        &batch.actions,
        edges,
        Some(&batch.avail),
    )?;
    let dec = decoder_loss(
        g,
        &policy,
        &batch.actions,
        &batch.old_log_probs,
        &batch.advantages,
        cfg.ppo_clip,
        cfg.entropy_coef,
    )?;
    let total = g.add(encoder, dec.loss)?;
    Ok(LossParts {
        total,
        encoder,
        decoder: dec.loss,
        entropy: dec.entropy,
    })
}

/// Stage-1 loss `L_encoder + L_decoder` on one batch, with the graph drawn
/// by `sample` and straight-through gradients into `graph.alpha`.
pub fn stage1_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &ModelDims,
    batch: &Batch<T>,
    targets: &Tensor<T>,
    sample: &KhotSample<T>,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let n = dims.n_agents;
    let alpha = p.get(ALPHA_PARAM)?;
    let e = st_edges(g, alpha, sample)?;
    let e = g.reshape(e, &[1, n, n])?;
    common_loss(g, p, dims, batch, targets, e, cfg)
}

/// Stage-2 loss on the fixed graph `base`, gated by the recorded decisions
/// in `batch.gates` (no gating when absent).
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &ModelDims,
    gate_dims: &GateDims,
    batch: &Batch<T>,
    targets: &Tensor<T>,
    base: &CommGraph,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let n = dims.n_agents;
    let base = g.constant(base.to_tensor::<T>().reshaped(&[1, n, n])?);
    let Some(gb) = &batch.gates else {
        return common_loss(g, p, dims, batch, targets, base, cfg);
    };
    let obs = g.constant(batch.obs.clone());
    let prev = gb.prev.as_ref().map(|t| g.constant(t.clone()));
    let (logits, _) = gate_logits(g, p, gate_dims, obs, prev)?;
    let h = replay_gates(g, logits, &gb.noise, cfg.gate_tau, &gb.open)?;
    let edges = gate_edges(g, base, h)?;
    let mut parts = common_loss(g, p, dims, batch, targets, edges, cfg)?;
    if cfg.gate_penalty > 0.0 {
        let m = g.mean(h);
        let pen = g.scale(m, T::c(cfg.gate_penalty));
        parts.total = g.add(parts.total, pen)?;
    }
    Ok(parts)
}

/// Shuffles `idx` and deals it into `parts` near-equal contiguous chunks.
/// A single part keeps the original order.
fn minibatches(idx: &[usize], parts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if parts <= 1 {
        return vec![idx.to_vec()];
    }
    let mut v = idx.to_vec();
    v.shuffle(rng);
    let (q, r) = (v.len() / parts, v.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for j in 0..parts {
        let len = q + usize::from(j < r);
        out.push(v[at..at + len].to_vec());
        at += len;
    }
    out
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub stage: u8,
    pub env_steps: u64,
    /// Episodes that finished during this iteration's rollouts.
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub mean_steps_taken: Option<f64>,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    /// Pre-clip gradient norms of the last update of each parameter group.
    pub grad_norms: BTreeMap<String, f64>,
    pub gate_open_fraction: f64,
    pub alpha_snapshot_ref: String,
}

/// Adjacency logits and the execution graph after an iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub iteration: u64,
    pub stage: u8,
    pub alpha: Vec<Vec<f64>>,
    pub graph: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutput {
    pub record: IterationRecord,
    pub snapshot: AlphaSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps_taken: f64,
    pub mean_return: f64,
    pub gate_open_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
struct EpisodeStat {
    ret: f64,
    success: bool,
    steps: usize,
}

struct Trace<T> {
    obs: Vec<T>,
    next_obs: Vec<T>,
    actions: Vec<usize>,
    log_probs: Vec<T>,
    values: Vec<T>,
    avail: Vec<bool>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episode: Vec<usize>,
    noise: Vec<T>,
    open: Vec<bool>,
    prev: Vec<T>,
}

impl<T> Default for Trace<T> {
    fn default() -> Self {
        Self {
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            avail: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            episode: Vec::new(),
            noise: Vec::new(),
            open: Vec::new(),
            prev: Vec::new(),
        }
    }
}

struct Collected<T> {
    buffer: RolloutBuffer<T>,
    episodes: Vec<EpisodeStat>,
    open_fraction: f64,
}

fn cast<T: Scalar>(xs: &[f64]) -> impl Iterator<Item = T> + '_ {
    xs.iter().map(|&x| T::c(x))
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("dec.")
}

/// Alternating bi-level PPO trainer.
pub struct Trainer<T: Scalar> {
    setup: RunSetup,
    dims: ModelDims,
    gate_dims: GateDims,
    spec: SparsitySpec,
    params: ParameterStore<T>,
    target: ParameterStore<T>,
    opt_backbone: Adam<T>,
    opt_alpha: Adam<T>,
    opt_gate: Adam<T>,
    stage: Stage,
    iteration: u64,
    env_steps: u64,
    envs: Vec<Box<dyn Env>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(setup: RunSetup) -> Result<Self> {
        setup.train.validate()?;
        if setup.hidden == 0 || setup.blocks == 0 {
            return Err(Error::Config(
                "hidden size and block count must be positive".into(),
            ));
        }
        let envs = (0..setup.train.n_workers)
            .map(|_| setup.env.build())
            .collect::<Result<Vec<_>>>()?;
        let probe = &envs[0];
        let n = probe.n_agents();
        let dims = ModelDims {
            n_agents: n,
            obs_dim: probe.obs_dim(),
            n_actions: probe.n_actions(),
            hidden: setup.hidden,
            blocks: setup.blocks,
        };
        let gate_dims = GateDims {
            n_agents: n,
            obs_dim: dims.obs_dim,
            hidden: setup.hidden,
            recurrent: setup.train.recurrent_gate,
        };
        let spec = match setup.k {
            Some(k) => SparsitySpec::with_k(k, n)?,
            None => SparsitySpec::new(setup.sparsity, n)?,
        };
        let mut rng = stream(setup.seed, "init", &[]);
        let gains = InitGains::default();
        let mut params = init_encoder::<T>(&dims, &gains, &mut rng)?;
        params.merge(&init_decoder(&dims, &gains, &mut rng)?);
        params.insert(ALPHA_PARAM, normal(&[n, n], 0.01, &mut rng))?;
        let target = params.with_prefix("enc.");
        let t = &setup.train;
        Ok(Self {
            opt_backbone: Adam::new(t.lr, t.adam_eps),
            opt_alpha: Adam::new(t.alpha_lr, t.adam_eps),
            opt_gate: Adam::new(t.gate_lr, t.adam_eps),
            setup,
            dims,
            gate_dims,
            spec,
            params,
            target,
            stage: Stage::One,
            iteration: 0,
            env_steps: 0,
            envs,
        })
    }

    pub fn setup(&self) -> &RunSetup {
        &self.setup
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn gate_dims(&self) -> &GateDims {
        &self.gate_dims
    }

    pub fn sparsity(&self) -> &SparsitySpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn target(&self) -> &ParameterStore<T> {
        &self.target
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn alpha(&self) -> Result<&Tensor<T>> {
        self.params.get(ALPHA_PARAM)
    }

    /// Deterministic execution graph: top-`k` adjacency logits per row,
    /// or the fixed graph of an ablation.
    pub fn graph(&self) -> Result<CommGraph> {
        match self.setup.train.graph {
            GraphMode::Learned => argmax_khot(self.alpha()?, &self.spec),
            GraphMode::Identity => Ok(CommGraph::identity(self.dims.n_agents)),
            GraphMode::Full => Ok(CommGraph::full(self.dims.n_agents)),
        }
    }

    pub fn has_gates(&self) -> bool {
        self.params.names().any(|n| n.starts_with(GATE_PREFIX))
    }

    /// Switches to gate training on the current graph, creating gate
    /// networks when none exist.
    pub fn begin_stage2(&mut self) -> Result<()> {
        if !self.has_gates() {
            let mut rng = stream(self.setup.seed, "gate-init", &[]);
            let gates =
                init_gates::<T>(&self.gate_dims, self.setup.train.gate_open_bias, &mut rng)?;
            self.params.merge(&gates);
        }
        self.stage = Stage::Two;
        Ok(())
    }

    fn gating_active(&self) -> bool {
        self.stage == Stage::Two && !self.setup.train.clamp_gates_open
    }

    /// One rollout plus `ppo_epochs` rounds of (inner step, outer step).
    pub fn run_iteration(&mut self) -> Result<IterationOutput> {
        let it = self.iteration;
        let collected = self.collect(it)?;
        let (enc_loss, dec_loss, grad_norms) = self.update(&collected.buffer, it)?;
        self.iteration += 1;
        if let TargetRule::Hard { period } = self.setup.train.target {
            if self.iteration.is_multiple_of(period) {
                self.target = self.params.with_prefix("enc.");
            }
        }
        let eps = &collected.episodes;
        let count = eps.len();
        let mean = |f: &dyn Fn(&EpisodeStat) -> f64| {
            (count > 0).then(|| eps.iter().map(f).sum::<f64>() / count as f64)
        };
        let record = IterationRecord {
            iteration: it,
            stage: self.stage.number(),
            env_steps: self.env_steps,
            episodes: count,
            mean_return: mean(&|e| e.ret),
            success_rate: mean(&|e| if e.success { 1.0 } else { 0.0 }),
            mean_steps_taken: mean(&|e| e.steps as f64),
            encoder_loss: enc_loss,
            decoder_loss: dec_loss,
            grad_norms,
            gate_open_fraction: collected.open_fraction,
            alpha_snapshot_ref: format!("alpha_snapshots.jsonl#{it}"),
        };
        let snapshot = AlphaSnapshot {
            iteration: it,
            stage: self.stage.number(),
            alpha: self.alpha()?.rows_f64(),
            graph: self.graph()?.rows(),
        };
        Ok(IterationOutput { record, snapshot })
    }

    fn collect(&mut self, it: u64) -> Result<Collected<T>> {
        let cfg = self.setup.train.clone();
        let seed = self.setup.seed;
        let w_n = self.envs.len();
        let ModelDims {
            n_agents: n,
            obs_dim: d,
            n_actions: a,
            ..
        } = self.dims;
        let h = self.gate_dims.hidden;
        let gating = self.gating_active();
        let recurrent = gating && self.gate_dims.recurrent;
        let base = self.graph()?;
        let base_t = base.to_tensor::<T>().reshaped(&[1, n, n])?;

        let mut env_rngs: Vec<ChaCha8Rng> = (0..w_n)
            .map(|w| stream(seed, "env", &[it, w as u64]))
            .collect();
        let mut act_rngs: Vec<ChaCha8Rng> = (0..w_n)
            .map(|w| stream(seed, "act", &[it, w as u64]))
            .collect();
        let mut gate_rngs: Vec<ChaCha8Rng> = (0..w_n)
            .map(|w| stream(seed, "gate", &[it, w as u64]))
            .collect();

        let mut traces: Vec<Trace<T>> = (0..w_n).map(|_| Trace::default()).collect();
        let mut obs: Vec<Vec<f64>> = self
            .envs
            .iter_mut()
            .zip(&mut env_rngs)
            .map(|(e, r)| e.reset(r.random()))
            .collect();
        let mut prev = vec![vec![T::zero(); n * h]; w_n];
        let mut ep_index = vec![0usize; w_n];
        let mut ep_return = vec![0.0; w_n];
        let mut episodes = Vec::new();
        let (mut open_count, mut gate_count) = (0usize, 0usize);

        for _ in 0..cfg.rollout_len {
            let obs_t = Tensor::new(
                &[w_n, n, d],
                obs.iter().flat_map(|o| cast::<T>(o)).collect(),
            )?;
            let avail: Vec<bool> = self.envs.iter().flat_map(|e| e.available()).collect();
            let mut gate_rec = None;
            let edges = if gating {
                let prev_t = if recurrent {
                    Some(Tensor::new(&[w_n, n, h], prev.concat())?)
                } else {
                    None
                };
                let (logits, feats) =
                    gate_forward(&self.params, &self.gate_dims, &obs_t, prev_t.as_ref())?;
                let noise: Vec<T> = gate_rngs
                    .iter_mut()
                    .flat_map(|r| (0..n * 2).map(|_| T::c(gumbel(r))).collect::<Vec<_>>())
                    .collect();
                let draw =
                    draw_from_noise(&logits, &Tensor::new(&[w_n, n, 2], noise)?, cfg.gate_tau)?;
                let mut e = Vec::with_capacity(w_n * n * n);
                for w in 0..w_n {
                    e.extend(
                        apply_dynamic_gate(&base, &draw.open[w * n..(w + 1) * n])?
                            .to_tensor::<T>()
                            .into_data(),
                    );
                }
                open_count += draw.open.iter().filter(|&&o| o).count();
                gate_count += draw.open.len();
                gate_rec = Some((draw, feats));
                Tensor::new(&[w_n, n, n], e)?
            } else {
                base_t.clone()
            };
            let acted = act_autoregressive(
                &self.params,
                &self.dims,
                &obs_t,
                &edges,
                Some(&avail),
                ActMode::Sample,
                &mut act_rngs,
            )?;
            for w in 0..w_n {
                let res = self.envs[w].step(&acted.actions[w * n..(w + 1) * n])?;
                let tr = &mut traces[w];
                tr.obs.extend(cast::<T>(&obs[w]));
                tr.next_obs.extend(cast::<T>(&res.obs));
                tr.actions
                    .extend_from_slice(&acted.actions[w * n..(w + 1) * n]);
                tr.log_probs
                    .extend_from_slice(&acted.log_probs[w * n..(w + 1) * n]);
                tr.values
                    .extend_from_slice(&acted.values[w * n..(w + 1) * n]);
                tr.avail
                    .extend_from_slice(&avail[w * n * a..(w + 1) * n * a]);
                tr.rewards.push(res.reward);
                tr.dones.push(res.done);
                tr.episode.push(ep_index[w]);
                if let Some((draw, feats)) = &gate_rec {
                    tr.noise
                        .extend_from_slice(&draw.noise.data()[w * n * 2..(w + 1) * n * 2]);
                    tr.open.extend_from_slice(&draw.open[w * n..(w + 1) * n]);
                    if recurrent {
                        tr.prev.extend_from_slice(&prev[w]);
                        prev[w].copy_from_slice(&feats.data()[w * n * h..(w + 1) * n * h]);
                    }
                }
                ep_return[w] += res.reward;
                if res.done {
                    episodes.push(EpisodeStat {
                        ret: ep_return[w],
                        success: res.info.success,
                        steps: res.info.steps_taken,
                    });
                    ep_return[w] = 0.0;
                    ep_index[w] += 1;
                    obs[w] = self.envs[w].reset(env_rngs[w].random());
                    prev[w].iter_mut().for_each(|x| *x = T::zero());
                } else {
                    obs[w] = res.obs;
                }
            }
        }
        self.env_steps += (w_n * cfg.rollout_len) as u64;

        // values of the states after the last step, for truncated streams
        let final_obs = Tensor::new(
            &[w_n, n, d],
            obs.iter().flat_map(|o| cast::<T>(o)).collect(),
        )?;
        let boot = self.values(&self.params, &final_obs, &base_t)?;

        let mut buffer = RolloutBuffer::new(n, d, a, gating.then_some(h));
        let mut offset = 0;
        for (w, tr) in traces.into_iter().enumerate() {
            let start = buffer.len();
            let len = tr.rewards.len();
            let bootstrap = joint_value(&boot.data()[w * n..(w + 1) * n])?.f64();
            buffer.segments.push(Segment {
                start,
                len,
                bootstrap,
            });
            let count = tr.episode.last().map_or(0, |e| e + 1);
            buffer.episode.extend(tr.episode.iter().map(|e| e + offset));
            offset += count;
            buffer.obs.extend(tr.obs);
            buffer.next_obs.extend(tr.next_obs);
            buffer.actions.extend(tr.actions);
            buffer.log_probs.extend(tr.log_probs);
            buffer.values.extend(tr.values);
            buffer.avail.extend(tr.avail);
            buffer.rewards.extend(tr.rewards);
            buffer.dones.extend(tr.dones);
            if let Some(g) = buffer.gates.as_mut() {
                g.noise.extend(tr.noise);
                g.open.extend(tr.open);
                g.prev.extend(tr.prev);
            }
        }
        let open_fraction = if gate_count == 0 {
            1.0
        } else {
            open_count as f64 / gate_count as f64
        };
        Ok(Collected {
            buffer,
            episodes,
            open_fraction,
        })
    }

    /// Encoder values `[B, N]` with constant parameters.
    fn values(
        &self,
        params: &ParameterStore<T>,
        obs: &Tensor<T>,
        edges: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let o = g.constant(obs.clone());
        let e = g.constant(edges.clone());
        let enc = encode(&mut g, &p, &self.dims, o, e)?;
        Ok(g.value(enc.values).clone())
    }

    /// TD targets under the target encoder on the execution graph.
    fn targets(&self, batch: &Batch<T>, base: &CommGraph) -> Result<Tensor<T>> {
        let n = self.dims.n_agents;
        let edges = base.to_tensor::<T>().reshaped(&[1, n, n])?;
        let next = self.values(&self.target, &batch.next_obs, &edges)?;
        td_targets(&batch.rewards, &batch.dones, &next, self.setup.train.gamma)
    }

    /// Loss values and gradients of the parameters selected by `trainable`.
    fn pass(
        &self,
        batch: &Batch<T>,
        base: &CommGraph,
        draw: [u64; 3],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(f64, f64, NamedGrads<T>)> {
        let cfg = &self.setup.train;
        let targets = self.targets(batch, base)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, trainable);
        let parts = match self.stage {
            Stage::One if cfg.graph != GraphMode::Learned => stage2_loss(
                &mut g,
                &p,
                &self.dims,
                &self.gate_dims,
                batch,
                &targets,
                base,
                cfg,
            )?,
            Stage::One => {
                let mut rng = stream(self.setup.seed, "sampler", &draw);
                let sample =
                    sample_khot_gumbel(self.alpha()?, &self.spec, cfg.gumbel_tau, &mut rng)?;
                stage1_loss(&mut g, &p, &self.dims, batch, &targets, &sample, cfg)?
            }
            Stage::Two => stage2_loss(
                &mut g,
                &p,
                &self.dims,
                &self.gate_dims,
                batch,
                &targets,
                base,
                cfg,
            )?,
        };
        let grads = g.backward(parts.total)?;
        let mut named = Vec::new();
        for (name, v) in p.iter().filter(|(name, _)| trainable(name)) {
            let t = match grads.get(v) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.params.get(name)?.shape()),
            };
            named.push((name.to_string(), t));
        }
        Ok((
            g.value(parts.encoder).item().f64(),
            g.value(parts.decoder).item().f64(),
            named,
        ))
    }

    fn update(
        &mut self,
        buffer: &RolloutBuffer<T>,
        it: u64,
    ) -> Result<(f64, f64, BTreeMap<String, f64>)> {
        let cfg = self.setup.train.clone();
        let mut adv = buffer.advantages(cfg.gamma, cfg.gae_lambda)?;
        let (train_idx, val_idx) = buffer.split(cfg.train_split);
        for idx in [&train_idx, &val_idx] {
            let mut part: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            normalize(&mut part);
            for (&i, v) in idx.iter().zip(part) {
                adv[i] = v;
            }
        }
        let base = self.graph()?;
        let run_inner = !(self.stage == Stage::Two && cfg.freeze_backbone);
        let run_outer = match self.stage {
            Stage::One => cfg.graph == GraphMode::Learned,
            Stage::Two => !cfg.clamp_gates_open,
        };
        let upper: fn(&str) -> bool = match self.stage {
            Stage::One => |n| n == ALPHA_PARAM,
            Stage::Two => |n| n.starts_with(GATE_PREFIX),
        };
        let upper_name = match self.stage {
            Stage::One => "alpha",
            Stage::Two => "gate",
        };
        let mb = cfg.minibatches;

        let mut norms = BTreeMap::new();
        let (mut enc_sum, mut dec_sum, mut passes) = (0.0, 0.0, 0usize);
        let (mut enc_outer, mut dec_outer, mut outer_passes) = (0.0, 0.0, 0usize);
        for epoch in 0..cfg.ppo_epochs as u64 {
            let mut rng = stream(self.setup.seed, "minibatch", &[it, epoch]);
            let train_parts = minibatches(&train_idx, mb, &mut rng);
            let val_parts = minibatches(&val_idx, mb, &mut rng);
            for j in 0..mb {
                let key = epoch * mb as u64 + j as u64;
                if run_inner && !train_parts[j].is_empty() {
                    let train = buffer.batch(&train_parts[j], &adv)?;
                    let (el, dl, mut grads) =
                        self.pass(&train, &base, [it, key, 0], &is_backbone)?;
                    let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm)?;
                    self.opt_backbone.update(&mut self.params, &grads)?;
                    if let TargetRule::Ema { tau } = cfg.target {
                        ema_update(&mut self.target, &self.params, tau)?;
                    }
                    norms.insert("backbone".to_string(), norm);
                    enc_sum += el;
                    dec_sum += dl;
                    passes += 1;
                }
                if run_outer && !val_parts[j].is_empty() {
                    let val = buffer.batch(&val_parts[j], &adv)?;
                    let (el, dl, mut grads) = self.pass(&val, &base, [it, key, 1], &upper)?;
                    let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm)?;
                    match self.stage {
                        Stage::One => self.opt_alpha.update(&mut self.params, &grads)?,
                        Stage::Two => self.opt_gate.update(&mut self.params, &grads)?,
                    }
                    norms.insert(upper_name.to_string(), norm);
                    enc_outer += el;
                    dec_outer += dl;
                    outer_passes += 1;
                }
            }
        }
        if passes > 0 {
            Ok((enc_sum / passes as f64, dec_sum / passes as f64, norms))
        } else {
            let k = outer_passes.max(1) as f64;
            Ok((enc_outer / k, dec_outer / k, norms))
        }
    }

    /// Evaluation on fresh environments with the execution graph, optionally
    /// gated by the inference-mode gates. `mode` picks greedy or sampled
    /// actions; sampling draws from per-episode streams of `seed`.
    pub fn evaluate(
        &self,
        episodes: usize,
        use_gates: bool,
        mode: ActMode,
        seed: u64,
    ) -> Result<EvalSummary> {
        if use_gates && !self.has_gates() {
            return Err(Error::Config(
                "gated evaluation needs trained gate networks".into(),
            ));
        }
        let ModelDims {
            n_agents: n,
            obs_dim: d,
            ..
        } = self.dims;
        let h = self.gate_dims.hidden;
        let base = self.graph()?;
        let mut rng = stream(seed, "eval", &[]);
        let width = self.setup.train.n_workers.clamp(1, 64);
        let mut stats = Vec::with_capacity(episodes);
        let (mut open_count, mut gate_count) = (0usize, 0usize);
        while stats.len() < episodes {
            let slots = width.min(episodes - stats.len());
            let first = stats.len() as u64;
            let mut act_rngs: Vec<ChaCha8Rng> = (0..slots as u64)
                .map(|s| stream(seed, "eval_act", &[first + s]))
                .collect();
            let mut envs = (0..slots)
                .map(|_| self.setup.env.build())
                .collect::<Result<Vec<_>>>()?;
            let mut obs: Vec<Vec<f64>> = envs.iter_mut().map(|e| e.reset(rng.random())).collect();
            let mut prev = vec![vec![T::zero(); n * h]; slots];
            let mut ret = vec![0.0; slots];
            let mut fin: Vec<Option<EpisodeStat>> = vec![None; slots];
            loop {
                let live: Vec<usize> = (0..slots).filter(|&s| fin[s].is_none()).collect();
                if live.is_empty() {
                    break;
                }
                let b = live.len();
                let obs_t = Tensor::new(
                    &[b, n, d],
                    live.iter().flat_map(|&s| cast::<T>(&obs[s])).collect(),
                )?;
                let avail: Vec<bool> = live.iter().flat_map(|&s| envs[s].available()).collect();
                let edges = if use_gates {
                    let prev_t = if self.gate_dims.recurrent {
                        Some(Tensor::new(
                            &[b, n, h],
                            live.iter().flat_map(|&s| prev[s].iter().copied()).collect(),
                        )?)
                    } else {
                        None
                    };
                    let (logits, feats) =
                        gate_forward(&self.params, &self.gate_dims, &obs_t, prev_t.as_ref())?;
                    let open = inference_gates(&logits);
                    open_count += open.iter().filter(|&&o| o).count();
                    gate_count += open.len();
                    let mut e = Vec::with_capacity(b * n * n);
                    for (r, &s) in live.iter().enumerate() {
                        e.extend(
                            apply_dynamic_gate(&base, &open[r * n..(r + 1) * n])?
                                .to_tensor::<T>()
                                .into_data(),
                        );
                        prev[s].copy_from_slice(&feats.data()[r * n * h..(r + 1) * n * h]);
                    }
                    Tensor::new(&[b, n, n], e)?
                } else {
                    base.to_tensor::<T>().reshaped(&[1, n, n])?
                };
                let mut live_rngs: Vec<ChaCha8Rng> = match mode {
                    ActMode::Sample => live.iter().map(|&s| act_rngs[s].clone()).collect(),
                    ActMode::Greedy => Vec::new(),
                };
                let acted = act_autoregressive(
                    &self.params,
                    &self.dims,
                    &obs_t,
                    &edges,
                    Some(&avail),
                    mode,
                    &mut live_rngs,
                )?;
                for (r, &s) in live.iter().enumerate().take(live_rngs.len()) {
                    act_rngs[s] = live_rngs[r].clone();
                }
                for (r, &s) in live.iter().enumerate() {
                    let res = envs[s].step(&acted.actions[r * n..(r + 1) * n])?;
                    ret[s] += res.reward;
                    obs[s] = res.obs;
                    if res.done {
                        fin[s] = Some(EpisodeStat {
                            ret: ret[s],
                            success: res.info.success,
                            steps: res.info.steps_taken,
                        });
                    }
                }
            }
            stats.extend(fin.into_iter().flatten());
        }
        let k = stats.len().max(1) as f64;
        Ok(EvalSummary {
            episodes: stats.len(),
            success_rate: stats.iter().filter(|e| e.success).count() as f64 / k,
            mean_steps_taken: stats.iter().map(|e| e.steps as f64).sum::<f64>() / k,
            mean_return: stats.iter().map(|e| e.ret).sum::<f64>() / k,
            gate_open_fraction: if gate_count == 0 {
                1.0
            } else {
                open_count as f64 / gate_count as f64
            },
        })
    }

    /// Everything needed to resume: parameters, target encoder, optimiser
    /// moments (as tensors) and counters (as metadata).
    pub fn state(&self) -> Result<(ParameterStore<T>, BTreeMap<String, Value>)> {
        let mut s = ParameterStore::new();
        for (name, t) in self.params.iter() {
            s.insert(format!("params/{name}"), t.clone())?;
        }
        for (name, t) in self.target.iter() {
            s.insert(format!("target/{name}"), t.clone())?;
        }
        let opts = [
            ("backbone", &self.opt_backbone),
            ("alpha", &self.opt_alpha),
            ("gate", &self.opt_gate),
        ];
        let mut steps = serde_json::Map::new();
        for (label, opt) in opts {
            for (name, t) in opt.m.iter() {
                s.insert(format!("opt/{label}/m/{name}"), t.clone())?;
            }
            for (name, t) in opt.v.iter() {
                s.insert(format!("opt/{label}/v/{name}"), t.clone())?;
            }
            steps.insert(label.to_string(), json!(opt.steps));
        }
        let mut meta = BTreeMap::new();
        meta.insert("iteration".to_string(), json!(self.iteration));
        meta.insert("env_steps".to_string(), json!(self.env_steps));
        meta.insert("stage".to_string(), json!(self.stage.number()));
        meta.insert("optimizer_steps".to_string(), Value::Object(steps));
        meta.insert("setup".to_string(), serde_json::to_value(&self.setup)?);
        Ok((s, meta))
    }

    /// Rebuilds a trainer from [`Trainer::state`] output.
    pub fn from_state(
        setup: RunSetup,
        store: &ParameterStore<T>,
        meta: &BTreeMap<String, Value>,
    ) -> Result<Self> {
        let mut tr = Self::new(setup)?;
        let counter = |key: &str| -> Result<u64> {
            meta.get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{key}`")))
        };
        tr.iteration = counter("iteration")?;
        tr.env_steps = counter("env_steps")?;
        tr.stage = match counter("stage")? {
            1 => Stage::One,
            2 => Stage::Two,
            other => return Err(Error::Checkpoint(format!("unknown stage {other}"))),
        };
        let mut params = ParameterStore::new();
        let mut target = ParameterStore::new();
        for (name, t) in store.iter() {
            if let Some(rest) = name.strip_prefix("params/") {
                params.insert(rest, t.clone())?;
            } else if let Some(rest) = name.strip_prefix("target/") {
                target.insert(rest, t.clone())?;
            }
        }
        for (name, fresh) in tr.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != fresh.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, the configuration expects {:?}",
                    got.shape(),
                    fresh.shape()
                )));
            }
        }
        tr.params = params;
        tr.target = target;
        let steps = meta.get("optimizer_steps").and_then(Value::as_object);
        for (label, opt) in [
            ("backbone", &mut tr.opt_backbone),
            ("alpha", &mut tr.opt_alpha),
            ("gate", &mut tr.opt_gate),
        ] {
            opt.steps = steps
                .and_then(|s| s.get(label))
                .and_then(Value::as_u64)
                .unwrap_or(0);
            for (name, t) in store.iter() {
                if let Some(rest) = name.strip_prefix(&format!("opt/{label}/m/")) {
                    opt.m.set(rest, t.clone());
                } else if let Some(rest) = name.strip_prefix(&format!("opt/{label}/v/")) {
                    opt.v.set(rest, t.clone());
                }
            }
        }
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::DiagConfig;

    fn setup(workers: usize) -> RunSetup {
        RunSetup {
            env: EnvSpec::Diag(DiagConfig::default()),
            sparsity: 0.4,
            k: Some(1),
            hidden: 8,
            blocks: 1,
            seed: 5,
            train: TrainConfig {
                n_workers: workers,
                rollout_len: 4,
                ppo_epochs: 2,
                ..Default::default()
            },
        }
    }

    #[test]
    fn iteration_is_reproducible() {
        let mut a = Trainer::<f64>::new(setup(2)).unwrap();
        let mut b = Trainer::<f64>::new(setup(2)).unwrap();
        for _ in 0..2 {
            assert_eq!(a.run_iteration().unwrap(), b.run_iteration().unwrap());
        }
        assert_eq!(a.params(), b.params());
        assert_eq!(a.env_steps(), 16);
    }

    #[test]
    fn row_budget_survives_updates() {
        let mut t = Trainer::<f64>::new(setup(2)).unwrap();
        for _ in 0..3 {
            let out = t.run_iteration().unwrap();
            for (i, row) in out.snapshot.graph.iter().enumerate() {
                assert_eq!(row[i], 1);
                assert_eq!(row.iter().sum::<u8>(), 2);
            }
        }
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let mut a = Trainer::<f64>::new(setup(1)).unwrap();
        a.run_iteration().unwrap();
        let (store, meta) = a.state().unwrap();
        let mut b = Trainer::<f64>::from_state(setup(1), &store, &meta).unwrap();
        assert_eq!(a.run_iteration().unwrap(), b.run_iteration().unwrap());
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn stage_two_logs_gates() {
        let mut t = Trainer::<f64>::new(setup(2)).unwrap();
        t.begin_stage2().unwrap();
        let out = t.run_iteration().unwrap();
        assert_eq!(out.record.stage, 2);
        assert!(out.record.grad_norms.contains_key("gate"));
        assert!((0.0..=1.0).contains(&out.record.gate_open_fraction));
        let s = t.evaluate(5, true, ActMode::Greedy, 1).unwrap();
        assert_eq!(s.episodes, 5);
    }
}
