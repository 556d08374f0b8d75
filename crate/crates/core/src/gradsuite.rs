//! Finite-difference checks of the differentiable pieces, from single
//! primitives up to the complete training losses.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commgraph::{
    gate_edges, gumbel_noise, khot_from_noise, st_edges, KhotSample, SparsitySpec, ALPHA_PARAM,
};
use crate::diffmath::{
    gradcheck, normal, Binding, GradcheckReport, Graph, ParameterStore, Tensor, Var,
};
use crate::error::Result;
use crate::gating::{
    draw_from_noise, gate_forward, gate_logits, init_gates, st_gates, GateDims, GateDraw,
};
use crate::relformer::{decode_policy, encode, init_decoder, init_encoder, InitGains, ModelDims};
use crate::trainer::{stage1_loss, stage2_loss, Batch, GateBatch, TrainConfig};

/// Central-difference step used by the suite.
pub const SUITE_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradcheckReport,
    pub seconds: f64,
}

/// Stronger-than-training initial gains so that no gradient hides under
/// the comparison floor.
fn check_gains() -> InitGains {
    InitGains {
        hidden: 1.0,
        output: 1.0,
        embedding_std: 0.5,
    }
}

/// A complete stage-1 objective on random data: parameters, one batch,
/// TD targets and a fixed graph sample.
#[derive(Clone, Debug)]
pub struct Stage1Check {
    pub dims: ModelDims,
    pub params: ParameterStore<f64>,
    pub batch: Batch<f64>,
    pub targets: Tensor<f64>,
    pub sample: KhotSample<f64>,
    pub cfg: TrainConfig,
}

fn random_batch(dims: &ModelDims, batch: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let (n, d, a) = (dims.n_agents, dims.obs_dim, dims.n_actions);
    // the last action of every other agent is unavailable
    let avail: Vec<bool> = (0..batch * n * a)
        .map(|i| !(i % a == a - 1 && (i / a) % 2 == 1))
        .collect();
    let actions = (0..batch * n)
        .map(|slot| {
            let open = if slot % 2 == 1 { a - 1 } else { a };
            rng.random_range(0..open)
        })
        .collect();
    Batch {
        obs: normal(&[batch, n, d], 1.0, rng),
        next_obs: normal(&[batch, n, d], 1.0, rng),
        actions,
        avail,
        old_log_probs: Vec::new(),
        advantages: normal::<f64>(&[batch], 1.0, rng).into_data(),
        rewards: (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dones: (0..batch).map(|t| t % 3 == 2).collect(),
        gates: None,
    }
}

/// Old log-probabilities: the current ones, shifted by up to 0.3 so that
/// both sides of the clip are exercised.
fn old_log_probs(
    params: &ParameterStore<f64>,
    dims: &ModelDims,
    batch: &Batch<f64>,
    edges: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let obs = g.constant(batch.obs.clone());
    let e = g.constant(edges.clone());
    let enc = encode(&mut g, &p, dims, obs, e)?;
    let pol = decode_policy(
        &mut g,
        &p,
        dims,
        enc.reps,
        &batch.actions,
        e,
        Some(&batch.avail),
    )?;
    let lp = g.gather_last(pol.log_probs, &batch.actions)?;
    Ok(g.value(lp)
        .data()
        .iter()
        .map(|&x| x + rng.random_range(-0.3..0.3))
        .collect())
}

impl Stage1Check {
    pub fn new(seed: u64, n_agents: usize, batch: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            n_agents,
            obs_dim: 5,
            n_actions: 4,
            hidden: 8,
            blocks: 1,
        };
        let mut params = init_encoder::<f64>(&dims, &check_gains(), &mut rng)?;
        params.merge(&init_decoder(&dims, &check_gains(), &mut rng)?);
        params.insert(ALPHA_PARAM, normal(&[n_agents, n_agents], 1.0, &mut rng))?;
        let spec = SparsitySpec::with_k(1, n_agents)?;
        let noise = gumbel_noise(&[n_agents, n_agents], &mut rng);
        let sample = khot_from_noise(params.get(ALPHA_PARAM)?, &spec, &noise, 1.0)?;
        let mut b = random_batch(&dims, batch, &mut rng);
        let edges = sample
            .graph
            .to_tensor::<f64>()
            .reshaped(&[1, n_agents, n_agents])?;
        b.old_log_probs = old_log_probs(&params, &dims, &b, &edges, &mut rng)?;
        let targets = normal(&[batch, n_agents], 1.0, &mut rng);
        let cfg = TrainConfig {
            ppo_clip: 0.2,
            huber_delta: 1.0,
            ..TrainConfig::default()
        };
        Ok(Self {
            dims,
            params,
            batch: b,
            targets,
            sample,
            cfg,
        })
    }

    pub fn loss(&self, g: &mut Graph<f64>, p: &Binding) -> Result<Var> {
        Ok(stage1_loss(
            g,
            p,
            &self.dims,
            &self.batch,
            &self.targets,
            &self.sample,
            &self.cfg,
        )?
        .total)
    }

    pub fn gradcheck(&self, step: f64, tol: f64) -> Result<GradcheckReport> {
        gradcheck(|g, p| self.loss(g, p), &self.params, step, tol)
    }
}

/// Stage-2 objectives on a fixed graph.
///
/// The training pass replays recorded gate decisions with the relaxation
/// re-evaluated at the current logits, so its gate gradient is a
/// straight-through surrogate, not a derivative of the forward value.
/// The loss is therefore checked with respect to the backbone, and the
/// gate networks are checked through [`st_gates`] with a fixed reference.
struct Stage2Check {
    base: Stage1Check,
    gate_dims: GateDims,
    gates: ParameterStore<f64>,
    batch: Batch<f64>,
    draw: GateDraw<f64>,
    prev: Tensor<f64>,
    cfg: TrainConfig,
}

impl Stage2Check {
    fn new(seed: u64) -> Result<Self> {
        let base = Stage1Check::new(seed, 3, 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let gate_dims = GateDims {
            n_agents: 3,
            obs_dim: base.dims.obs_dim,
            hidden: 6,
            recurrent: true,
        };
        let gates = init_gates::<f64>(&gate_dims, 0.0, &mut rng)?;
        let b = base.batch.len();
        let prev = normal(&[b, 3, gate_dims.hidden], 1.0, &mut rng);
        let mut all = base.params.clone();
        all.merge(&gates);
        let (logits, _) = gate_forward(&all, &gate_dims, &base.batch.obs, Some(&prev))?;
        let draw = draw_from_noise(&logits, &gumbel_noise(&[b, 3, 2], &mut rng), 4.0)?;
        let mut batch = base.batch.clone();
        batch.gates = Some(GateBatch {
            noise: draw.noise.clone(),
            open: draw.open.clone(),
            prev: Some(prev.clone()),
        });
        let cfg = TrainConfig {
            gate_penalty: 0.1,
            ..base.cfg.clone()
        };
        Ok(Self {
            base,
            gate_dims,
            gates,
            batch,
            draw,
            prev,
            cfg,
        })
    }

    fn backbone(&self) -> Result<GradcheckReport> {
        gradcheck(
            |g, p| {
                let mut all = p.clone();
                all.extend(self.gates.bind(g, |_| false));
                let parts = stage2_loss(
                    g,
                    &all,
                    &self.base.dims,
                    &self.gate_dims,
                    &self.batch,
                    &self.base.targets,
                    &self.base.sample.graph,
                    &self.cfg,
                )?;
                Ok(parts.total)
            },
            &self.base.params,
            SUITE_STEP,
            SUITE_TOL,
        )
    }

    fn gate_path(&self) -> Result<GradcheckReport> {
        let n = self.base.dims.n_agents;
        gradcheck(
            |g, p| {
                let mut all = p.clone();
                all.extend(self.base.params.bind(g, |_| false));
                let obs = g.constant(self.batch.obs.clone());
                let prev = g.constant(self.prev.clone());
                let (logits, _) = gate_logits(g, &all, &self.gate_dims, obs, Some(prev))?;
                let h = st_gates(g, logits, &self.draw)?;
                let edges = g.constant(
                    self.base
                        .sample
                        .graph
                        .to_tensor::<f64>()
                        .reshaped(&[1, n, n])?,
                );
                let edges = gate_edges(g, edges, h)?;
                let enc = encode(g, &all, &self.base.dims, obs, edges)?;
                let v = g.square(enc.values);
                let v = g.mean(v);
                let m = g.mean(h);
                g.add(v, m)
            },
            &self.gates,
            SUITE_STEP,
            SUITE_TOL,
        )
    }
}

type Primitive = fn(&mut Graph<f64>, &Binding) -> Result<Var>;

/// Parameter names and shapes of one primitive check.
type Shapes = &'static [(&'static str, &'static [usize])];

fn primitives() -> Vec<(&'static str, Shapes, Primitive)> {
    fn x(p: &Binding) -> Result<Var> {
        p.get("x")
    }
    vec![
        ("matmul", &[("x", &[2, 3, 4]), ("w", &[4, 2])], |g, p| {
            let y = g.matmul(x(p)?, p.get("w")?)?;
            let y = g.square(y);
            Ok(g.sum(y))
        }),
        (
            "batched_matmul_transpose",
            &[("x", &[2, 3, 4]), ("w", &[2, 3, 4])],
            |g, p| {
                let wt = g.transpose_last(p.get("w")?)?;
                let y = g.matmul(x(p)?, wt)?;
                let y = g.gelu(y);
                Ok(g.sum(y))
            },
        ),
        (
            "broadcast_arith",
            &[("x", &[2, 3]), ("w", &[1, 3])],
            |g, p| {
                let a = g.mul(x(p)?, p.get("w")?)?;
                let b = g.sub(a, p.get("w")?)?;
                let c = g.add_scalar(b, 0.5);
                let c = g.exp(c);
                let c = g.scale(c, 0.3);
                Ok(g.mean(c))
            },
        ),
        ("layer_norm", &[("x", &[3, 5])], |g, p| {
            let y = g.layer_norm(x(p)?)?;
            let w = g.constant(Tensor::from_f64(&[1, 5], &[0.3, -1.0, 2.0, 0.5, 1.5])?);
            let y = g.mul(y, w)?;
            let y = g.square(y);
            Ok(g.sum(y))
        }),
        (
            "masked_softmax_with_soft_mask",
            &[("x", &[2, 4]), ("m", &[2, 4])],
            |g, p| {
                let m = g.exp(p.get("m")?);
                let y = g.masked_softmax(x(p)?, m)?;
                let w = g.constant(Tensor::from_f64(
                    &[2, 4],
                    &[1.0, -2.0, 0.5, 3.0, -1.0, 0.2, 2.0, 0.7],
                )?);
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
        ),
        ("masked_softmax_binary_mask", &[("x", &[2, 4])], |g, p| {
            let m = g.constant(Tensor::from_f64(
                &[2, 4],
                &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            )?);
            let y = g.masked_softmax(x(p)?, m)?;
            let y = g.square(y);
            Ok(g.sum(y))
        }),
        ("log_softmax_availability", &[("x", &[2, 3])], |g, p| {
            let y = g.log_softmax(x(p)?, Some(&[true, false, true, true, true, true]))?;
            let y = g.gather_last(y, &[2, 1])?;
            Ok(g.sum(y))
        }),
        (
            "huber_clamp_minimum",
            &[("x", &[6]), ("w", &[6])],
            |g, p| {
                let h = g.huber(x(p)?, 1.0);
                let c = g.clamp(p.get("w")?, -0.5, 0.5);
                let m = g.minimum(h, c)?;
                Ok(g.sum(m))
            },
        ),
        ("embedding_select_stack", &[("x", &[4, 3])], |g, p| {
            let e = g.embedding(x(p)?, &[0, 2, 2, 3], &[2, 2])?;
            let a = g.select(e, 1, 0)?;
            let b = g.select(e, 1, 1)?;
            let s = g.stack(&[b, a], 0)?;
            let s = g.reshape(s, &[1, 4, 3])?;
            let s = g.broadcast_to(s, &[2, 4, 3])?;
            let s = g.sum_last(s)?;
            let s = g.square(s);
            Ok(g.sum(s))
        }),
        ("straight_through", &[("x", &[2, 3])], |g, p| {
            let soft = g.exp(x(p)?);
            let reference = Tensor::ones(&[2, 3]);
            let hard = Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
            let st = g.straight_through(&hard, soft, &reference)?;
            let w = g.constant(Tensor::from_f64(&[2, 3], &[0.5, 1.0, -1.0, 2.0, 0.3, 0.1])?);
            let y = g.mul(st, w)?;
            Ok(g.sum(y))
        }),
    ]
}

fn timed(name: &str, run: impl FnOnce() -> Result<GradcheckReport>) -> Result<CheckOutcome> {
    let start = Instant::now();
    let report = run()?;
    Ok(CheckOutcome {
        name: name.to_string(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Every check, primitives first.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in primitives() {
        let mut params = ParameterStore::new();
        for &(pname, shape) in shapes {
            params.insert(pname, normal(shape, 1.0, &mut rng))?;
        }
        out.push(timed(name, || {
            gradcheck(f, &params, SUITE_STEP, SUITE_TOL)
        })?);
    }
    let encoder_only = Stage1Check::new(seed, 3, 4)?;
    out.push(timed("encoder_values", || {
        let c = &encoder_only;
        gradcheck(
            |g, p| {
                let obs = g.constant(c.batch.obs.clone());
                let alpha = p.get(ALPHA_PARAM)?;
                let e = st_edges(g, alpha, &c.sample)?;
                let e = g.reshape(e, &[1, 3, 3])?;
                let enc = encode(g, p, &c.dims, obs, e)?;
                let v = g.square(enc.values);
                let r = g.square(enc.reps);
                let (v, r) = (g.sum(v), g.mean(r));
                g.add(v, r)
            },
            &c.params,
            SUITE_STEP,
            SUITE_TOL,
        )
    })?);
    out.push(timed("stage1_loss", || {
        Stage1Check::new(seed, 3, 4)?.gradcheck(SUITE_STEP, SUITE_TOL)
    })?);
    let s2 = Stage2Check::new(seed)?;
    out.push(timed("stage2_loss_backbone", || s2.backbone())?);
    out.push(timed("stage2_gate_networks", || s2.gate_path())?);
    Ok(out)
}
