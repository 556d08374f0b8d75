//! Per-agent dynamic gates deciding whether an agent receives messages on
//! the current step.
//!
//! Each agent owns a small network `linear -> layer norm -> GELU -> linear`
//! producing two logits; index 0 means "open". The recurrent variant adds
//! `U c_{t-1}` to the first projection, where `c` is the post-GELU feature
//! of the previous step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::commgraph::gumbel_noise;
use crate::diffmath::{orthogonal, Binding, Graph, ParameterStore, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const GATE_PREFIX: &str = "gate.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub recurrent: bool,
}

/// Parameters `gate.{i}.l1`, `gate.{i}.ln`, `gate.{i}.l2` (and `gate.{i}.u`
/// when recurrent) for every agent.
///
/// The open logit starts with bias `open_bias` so fresh gates mostly let
/// messages through.
pub fn init_gates<T: Scalar>(
    dims: &GateDims,
    open_bias: f64,
    rng: &mut impl Rng,
) -> Result<ParameterStore<T>> {
    let d = dims.hidden;
    let mut s = ParameterStore::new();
    for i in 0..dims.n_agents {
        s.insert(
            format!("gate.{i}.l1.w"),
            orthogonal(dims.obs_dim, d, 1.0, rng),
        )?;
        s.insert(format!("gate.{i}.l1.b"), Tensor::zeros(&[d]))?;
        if dims.recurrent {
            s.insert(format!("gate.{i}.u"), orthogonal(d, d, 0.5, rng))?;
        }
        s.insert(format!("gate.{i}.ln.g"), Tensor::ones(&[d]))?;
        s.insert(format!("gate.{i}.ln.b"), Tensor::zeros(&[d]))?;
        s.insert(format!("gate.{i}.l2.w"), orthogonal(d, 2, 0.01, rng))?;
        s.insert(
            format!("gate.{i}.l2.b"),
            Tensor::from_f64(&[2], &[open_bias, 0.0])?,
        )?;
    }
    Ok(s)
}

fn row_param<T: Scalar>(g: &mut Graph<T>, p: &Binding, name: &str) -> Result<Var> {
    let v = p.get(name)?;
    let d = g.shape(v)[0];
    g.reshape(v, &[1, d])
}

/// Gate logits `[B, N, 2]` and post-GELU features `[B, N, d]`.
///
/// `obs` is `[B, N, obs_dim]`; `prev` is the previous features for the
/// recurrent variant (`None` means zeros).
pub fn gate_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &GateDims,
    obs: Var,
    prev: Option<Var>,
) -> Result<(Var, Var)> {
    let s = g.shape(obs).to_vec();
    if s.len() != 3 || s[1] != dims.n_agents || s[2] != dims.obs_dim {
        return shape_err(format!(
            "gate input must be [B, {}, {}], got {s:?}",
            dims.n_agents, dims.obs_dim
        ));
    }
    if let Some(c) = prev {
        if g.shape(c) != [s[0], dims.n_agents, dims.hidden] {
            return shape_err(format!(
                "gate state must be [B, N, {}], got {:?}",
                dims.hidden,
                g.shape(c)
            ));
        }
    }
    let mut logits = Vec::with_capacity(dims.n_agents);
    let mut feats = Vec::with_capacity(dims.n_agents);
    for i in 0..dims.n_agents {
        let o = g.select(obs, 1, i)?;
        let w1 = p.get(&format!("gate.{i}.l1.w"))?;
        let mut z = g.matmul(o, w1)?;
        if dims.recurrent {
            if let Some(c) = prev {
                let ci = g.select(c, 1, i)?;
                let u = p.get(&format!("gate.{i}.u"))?;
                let r = g.matmul(ci, u)?;
                z = g.add(z, r)?;
            }
        }
        let b1 = row_param(g, p, &format!("gate.{i}.l1.b"))?;
        let z = g.add(z, b1)?;
        let z = g.layer_norm(z)?;
        let ln_g = row_param(g, p, &format!("gate.{i}.ln.g"))?;
        let ln_b = row_param(g, p, &format!("gate.{i}.ln.b"))?;
        let z = g.mul(z, ln_g)?;
        let z = g.add(z, ln_b)?;
        let h = g.gelu(z);
        let w2 = p.get(&format!("gate.{i}.l2.w"))?;
        let b2 = row_param(g, p, &format!("gate.{i}.l2.b"))?;
        let l = g.matmul(h, w2)?;
        logits.push(g.add(l, b2)?);
        feats.push(h);
    }
    Ok((g.stack(&logits, 1)?, g.stack(&feats, 1)?))
}

/// A frozen Gumbel draw for a batch of gate decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDraw<T> {
    /// `[B, N, 2]`
    pub noise: Tensor<T>,
    /// `[B * N]`, true when the gate is open.
    pub open: Vec<bool>,
    /// Relaxed open probability at draw time, `[B, N]`.
    pub soft_ref: Tensor<T>,
    pub tau: f64,
}

fn relaxed_open<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    noise: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let noise = g.constant(noise.clone());
    let z = g.add(logits, noise)?;
    let z = g.scale(z, T::c(1.0 / tau));
    let ones = g.constant(Tensor::ones(g.shape(z)));
    let p = g.masked_softmax(z, ones)?;
    g.select(p, 2, 0)
}

fn argmax_open<T: Scalar>(pair: &[T]) -> bool {
    pair[0] >= pair[1]
}

/// Draws gates from logit values with explicit noise; ties go to "open".
pub fn draw_from_noise<T: Scalar>(
    logits: &Tensor<T>,
    noise: &Tensor<T>,
    tau: f64,
) -> Result<GateDraw<T>> {
    if logits.rank() != 3 || logits.shape()[2] != 2 || noise.shape() != logits.shape() {
        return shape_err(format!(
            "gate logits {:?} / noise {:?}",
            logits.shape(),
            noise.shape()
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "gate temperature must be positive, got {tau}"
        )));
    }
    let perturbed: Vec<T> = logits
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &b)| a + b)
        .collect();
    let open = perturbed.chunks(2).map(argmax_open).collect();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let soft = relaxed_open(&mut g, l, noise, tau)?;
    Ok(GateDraw {
        noise: noise.clone(),
        open,
        soft_ref: g.value(soft).clone(),
        tau,
    })
}

/// Training-mode draw with fresh Gumbel noise.
pub fn draw_gates<T: Scalar>(
    logits: &Tensor<T>,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<GateDraw<T>> {
    let noise = gumbel_noise(logits.shape(), rng);
    draw_from_noise(logits, &noise, tau)
}

/// Inference-mode decision: open iff the open logit is not below the closed
/// one.
pub fn inference_gates<T: Scalar>(logits: &Tensor<T>) -> Vec<bool> {
    logits.data().chunks(2).map(argmax_open).collect()
}

/// Straight-through gate values `[B, N]`: exactly the drawn 0/1 gates going
/// forward, gradient of the relaxed open probability going backward.
pub fn st_gates<T: Scalar>(g: &mut Graph<T>, logits: Var, draw: &GateDraw<T>) -> Result<Var> {
    if g.shape(logits) != draw.noise.shape() {
        return shape_err(format!(
            "gate draw {:?} does not match logits {:?}",
            draw.noise.shape(),
            g.shape(logits)
        ));
    }
    let soft = relaxed_open(g, logits, &draw.noise, draw.tau)?;
    let hard_data = draw
        .open
        .iter()
        .map(|&o| if o { T::one() } else { T::zero() })
        .collect();
    let hard = Tensor::new(draw.soft_ref.shape(), hard_data)?;
    g.straight_through(&hard, soft, &draw.soft_ref)
}

/// Straight-through gates for recorded decisions: the forward value is
/// exactly `open`, the relaxation is re-evaluated at the current logits.
pub fn replay_gates<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    noise: &Tensor<T>,
    tau: f64,
    open: &[bool],
) -> Result<Var> {
    if g.shape(logits) != noise.shape() || open.len() * 2 != noise.numel() {
        return shape_err(format!(
            "recorded gates {:?} do not match logits {:?}",
            noise.shape(),
            g.shape(logits)
        ));
    }
    let soft = relaxed_open(g, logits, noise, tau)?;
    let soft_ref = g.value(soft).clone();
    let hard_data = open
        .iter()
        .map(|&o| if o { T::one() } else { T::zero() })
        .collect();
    let hard = Tensor::new(soft_ref.shape(), hard_data)?;
    g.straight_through(&hard, soft, &soft_ref)
}

/// Forward pass with constant parameters, returning logit and feature
/// values. Useful for rollouts.
pub fn gate_forward<T: Scalar>(
    params: &ParameterStore<T>,
    dims: &GateDims,
    obs: &Tensor<T>,
    prev: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let o = g.constant(obs.clone());
    let c = prev.map(|c| g.constant(c.clone()));
    let (l, f) = gate_logits(&mut g, &p, dims, o, c)?;
    Ok((g.value(l).clone(), g.value(f).clone()))
}

/// Fraction of open gates.
pub fn open_fraction(open: &[bool]) -> f64 {
    if open.is_empty() {
        return 1.0;
    }
    open.iter().filter(|&&o| o).count() as f64 / open.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(recurrent: bool) -> GateDims {
        GateDims {
            n_agents: 3,
            obs_dim: 4,
            hidden: 6,
            recurrent,
        }
    }

    #[test]
    fn saturated_logits_open_everything() {
        let logits =
            Tensor::<f64>::from_f64(&[1, 3, 2], &[10.0, -10.0, 10.0, -10.0, 10.0, -10.0]).unwrap();
        assert_eq!(inference_gates(&logits), [true; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(draw_gates(&logits, 1.0, &mut rng)
                .unwrap()
                .open
                .iter()
                .all(|&o| o));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_gates::<f64>(&dims(false), 0.0, &mut rng).unwrap();
        let obs = normal(&[2, 3, 4], 1.0, &mut rng);
        let (a, _) = gate_forward(&p, &dims(false), &obs, None).unwrap();
        let (b, _) = gate_forward(&p, &dims(false), &obs, None).unwrap();
        assert_eq!(inference_gates(&a), inference_gates(&b));
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = normal::<f64>(&[2, 3, 2], 1.0, &mut rng);
        let draw = draw_gates(&logits, 0.7, &mut rng).unwrap();
        let mut g = Graph::new();
        let l = g.leaf(logits, true);
        let h = st_gates(&mut g, l, &draw).unwrap();
        let want: Vec<f64> = draw
            .open
            .iter()
            .map(|&o| if o { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.value(h).data(), &want[..]);
        let loss = g.sum(h);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(l).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gate_sees_only_own_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims(false);
        let p = init_gates::<f64>(&d, 0.0, &mut rng).unwrap();
        let obs = normal(&[1, 3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let o = g.leaf(obs, true);
        let (l, _) = gate_logits(&mut g, &b, &d, o, None).unwrap();
        let l0 = g.select(l, 1, 0).unwrap();
        let loss = g.sum(l0);
        let grads = g.backward(loss).unwrap();
        let go = grads.get(o).unwrap();
        for j in 1..3 {
            for k in 0..4 {
                assert_eq!(go.at(&[0, j, k]), 0.0);
            }
        }
        assert!((0..4).any(|k| go.at(&[0, 0, k]) != 0.0));
    }

    #[test]
    fn recurrent_with_zero_state_matches_feedforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ff = init_gates::<f64>(&dims(false), 0.3, &mut rng).unwrap();
        let mut rec = ff.clone();
        for i in 0..3 {
            rec.insert(format!("gate.{i}.u"), Tensor::zeros(&[6, 6]))
                .unwrap();
        }
        let obs = normal(&[2, 3, 4], 1.0, &mut rng);
        let state = normal(&[2, 3, 6], 1.0, &mut rng);
        let (a, fa) = gate_forward(&ff, &dims(false), &obs, None).unwrap();
        let (b, fb) = gate_forward(&rec, &dims(true), &obs, Some(&state)).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
    }

    #[test]
    fn recurrent_state_is_deterministic_and_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims(true);
        let p = init_gates::<f64>(&d, 0.0, &mut rng).unwrap();
        let obs = normal(&[1, 3, 4], 1.0, &mut rng);
        let (_, c1) = gate_forward(&p, &d, &obs, None).unwrap();
        let (l2a, c2a) = gate_forward(&p, &d, &obs, Some(&c1)).unwrap();
        let (l2b, c2b) = gate_forward(&p, &d, &obs, Some(&c1)).unwrap();
        assert_eq!((l2a.clone(), c2a), (l2b, c2b));
        let (l_zero, _) = gate_forward(&p, &d, &obs, None).unwrap();
        assert_ne!(l2a, l_zero);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_gates::<f64>(&dims(false), 0.0, &mut rng).unwrap();
        let obs = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(matches!(
            gate_forward(&p, &dims(false), &obs, None),
            Err(Error::Shape(_))
        ));
    }
}
