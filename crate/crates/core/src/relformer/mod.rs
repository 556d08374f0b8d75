//! Relation-enhanced transformer: encoder (critic) and auto-regressive
//! decoder (actor), both masked by the communication graph.

mod attention;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{relation_attention_scores, EdgeInputs};

use self::attention::attention;
use self::layers::{linear, mlp, norm};
use crate::diffmath::{normal, orthogonal, Binding, Graph, ParameterStore, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Token index of the decoder start symbol; action `a` is token `a + 1`.
pub const START_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitGains {
    /// Orthogonal gain for hidden projections.
    pub hidden: f64,
    /// Orthogonal gain for the value and policy output layers.
    pub output: f64,
    /// Standard deviation of edge and token embeddings.
    pub embedding_std: f64,
}

impl Default for InitGains {
    fn default() -> Self {
        Self {
            hidden: 1.0,
            output: 0.01,
            embedding_std: 0.1,
        }
    }
}

fn add_linear<T: Scalar>(
    s: &mut ParameterStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    s.insert(format!("{name}.w"), orthogonal(fan_in, fan_out, gain, rng))?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

fn add_norm<T: Scalar>(s: &mut ParameterStore<T>, name: &str, d: usize) -> Result<()> {
    s.insert(format!("{name}.g"), Tensor::ones(&[d]))?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[d]))
}

fn add_attention<T: Scalar>(
    s: &mut ParameterStore<T>,
    name: &str,
    d: usize,
    gains: &InitGains,
    rng: &mut impl Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv"] {
        s.insert(format!("{name}.{w}"), orthogonal(d, d, gains.hidden, rng))?;
    }
    s.insert(
        format!("{name}.edge"),
        normal(&[2, d], gains.embedding_std, rng),
    )?;
    add_linear(s, &format!("{name}.out"), d, d, gains.hidden, rng)
}

fn add_mlp<T: Scalar>(
    s: &mut ParameterStore<T>,
    name: &str,
    d: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    add_linear(s, &format!("{name}.l1"), d, d, gain, rng)?;
    add_linear(s, &format!("{name}.l2"), d, d, gain, rng)
}

/// Encoder parameters, all under `enc.`.
pub fn init_encoder<T: Scalar>(
    dims: &ModelDims,
    gains: &InitGains,
    rng: &mut impl Rng,
) -> Result<ParameterStore<T>> {
    let d = dims.hidden;
    let mut s = ParameterStore::new();
    add_linear(&mut s, "enc.obs", dims.obs_dim, d, gains.hidden, rng)?;
    add_norm(&mut s, "enc.obs_ln", d)?;
    for l in 0..dims.blocks {
        add_attention(&mut s, &format!("enc.b{l}.attn"), d, gains, rng)?;
        add_norm(&mut s, &format!("enc.b{l}.ln1"), d)?;
        add_mlp(&mut s, &format!("enc.b{l}.mlp"), d, gains.hidden, rng)?;
        add_norm(&mut s, &format!("enc.b{l}.ln2"), d)?;
    }
    add_linear(&mut s, "enc.value.l1", d, d, gains.hidden, rng)?;
    add_linear(&mut s, "enc.value.l2", d, 1, gains.output, rng)?;
    Ok(s)
}

/// Decoder parameters, all under `dec.`.
pub fn init_decoder<T: Scalar>(
    dims: &ModelDims,
    gains: &InitGains,
    rng: &mut impl Rng,
) -> Result<ParameterStore<T>> {
    let d = dims.hidden;
    let mut s = ParameterStore::new();
    s.insert(
        "dec.tok",
        normal(&[dims.n_actions + 1, d], gains.embedding_std, rng),
    )?;
    add_norm(&mut s, "dec.tok_ln", d)?;
    for l in 0..dims.blocks {
        add_attention(&mut s, &format!("dec.b{l}.self"), d, gains, rng)?;
        add_norm(&mut s, &format!("dec.b{l}.ln1"), d)?;
        add_attention(&mut s, &format!("dec.b{l}.cross"), d, gains, rng)?;
        add_norm(&mut s, &format!("dec.b{l}.ln2"), d)?;
        add_mlp(&mut s, &format!("dec.b{l}.mlp"), d, gains.hidden, rng)?;
        add_norm(&mut s, &format!("dec.b{l}.ln3"), d)?;
    }
    add_linear(&mut s, "dec.head.l1", d, d, gains.hidden, rng)?;
    add_norm(&mut s, "dec.head_ln", d)?;
    add_linear(&mut s, "dec.head.l2", d, dims.n_actions, gains.output, rng)?;
    Ok(s)
}

/// Encoder output.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, N, d]`
    pub reps: Var,
    /// `[B, N]`
    pub values: Var,
}

/// Encodes observations `[B, N, obs_dim]` under receive-oriented edges
/// `[B|1, N, N]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &ModelDims,
    obs: Var,
    edges: Var,
) -> Result<Encoded> {
    let s = g.shape(obs).to_vec();
    if s.len() != 3 || s[1] != dims.n_agents || s[2] != dims.obs_dim {
        return shape_err(format!(
            "observations must be [B, {}, {}], got {s:?}",
            dims.n_agents, dims.obs_dim
        ));
    }
    let e = EdgeInputs::new(g, edges)?;
    let x = linear(g, p, "enc.obs", obs)?;
    let mut x = norm(g, p, "enc.obs_ln", x)?;
    for l in 0..dims.blocks {
        let a = attention(g, p, &format!("enc.b{l}.attn"), x, x, &e)?;
        let h = g.add(x, a)?;
        let h = norm(g, p, &format!("enc.b{l}.ln1"), h)?;
        let m = mlp(g, p, &format!("enc.b{l}.mlp"), h)?;
        let h2 = g.add(h, m)?;
        x = norm(g, p, &format!("enc.b{l}.ln2"), h2)?;
    }
    let v = linear(g, p, "enc.value.l1", x)?;
    let v = g.gelu(v);
    let v = linear(g, p, "enc.value.l2", v)?;
    let values = g.reshape(v, &[s[0], s[1]])?;
    Ok(Encoded { reps: x, values })
}

/// Decoder token indices for a batch of joint actions `[B, N]`: position 0
/// holds the start token and position `p > 0` holds agent `p - 1`'s action.
pub fn shifted_tokens(actions: &[usize], batch: usize, n_agents: usize) -> Result<Vec<usize>> {
    if actions.len() != batch * n_agents {
        return Err(Error::Sequence(format!(
            "expected {} actions for {batch} x {n_agents}, got {}",
            batch * n_agents,
            actions.len()
        )));
    }
    let mut tokens = vec![START_TOKEN; actions.len()];
    for b in 0..batch {
        for p in 1..n_agents {
            tokens[b * n_agents + p] = actions[b * n_agents + p - 1] + 1;
        }
    }
    Ok(tokens)
}

/// Edges for decoder self-attention over shifted action tokens, plus the
/// `[B, N, 1]` weight with which position `i` reads its own input token.
///
/// Agent `i` sees the start token at position 0 and, for `p in 1..=i`, the
/// token of agent `p - 1` when it receives from that agent. Its own input
/// token is `a^{i-1}`, so that weight is `e(i, i-1)` (0 for agent 0).
fn shifted_edges<T: Scalar>(g: &mut Graph<T>, edges: Var) -> Result<(Var, Var)> {
    let n = g.shape(edges)[1];
    let mut shift = Tensor::zeros(&[n, n]);
    let mut causal = Tensor::zeros(&[1, n, n]);
    let mut start = Tensor::zeros(&[1, n, n]);
    let mut diag = Tensor::zeros(&[1, n, n]);
    for i in 0..n {
        if i + 1 < n {
            shift.set(&[i, i + 1], T::one());
        }
        for p in 1..=i {
            causal.set(&[0, i, p], T::one());
        }
        start.set(&[0, i, 0], T::one());
        diag.set(&[0, i, i], T::one());
    }
    let shift = g.constant(shift);
    let causal = g.constant(causal);
    let start = g.constant(start);
    let diag = g.constant(diag);
    let moved = g.matmul(edges, shift)?;
    let kept = g.mul(moved, causal)?;
    let own = g.mul(moved, diag)?;
    let own = g.sum_last(own)?;
    let own = g.reshape(own, &[g.shape(edges)[0], n, 1])?;
    Ok((g.add(kept, start)?, own))
}

/// Per-agent action distributions.
#[derive(Clone, Copy, Debug)]
pub struct Policy {
    /// `[B, N, A]`; unavailable actions report 0.
    pub log_probs: Var,
    /// `[B, N, A]`; unavailable actions are exactly 0.
    pub probs: Var,
}

/// Teacher-forced decoding: the distribution at position `m` depends on the
/// encoder output (through adjacency-masked cross-attention) and on the
/// actions of agents `j < m` that `m` receives from. Position `m` reads
/// `a^{m-1}` as its input token only when `m` receives from agent `m - 1`,
/// and the start token otherwise.
///
/// `avail` is an optional `[B, N, A]` availability mask.
pub fn decode_policy<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    dims: &ModelDims,
    reps: Var,
    actions: &[usize],
    edges: Var,
    avail: Option<&[bool]>,
) -> Result<Policy> {
    let rs = g.shape(reps).to_vec();
    let (b, n) = (rs[0], rs[1]);
    if let Some(&bad) = actions.iter().find(|&&a| a >= dims.n_actions) {
        return Err(Error::Sequence(format!(
            "action {bad} outside 0..{}",
            dims.n_actions
        )));
    }
    let tokens = shifted_tokens(actions, b, n)?;
    let table = p.get("dec.tok")?;
    let (self_recv, own) = shifted_edges(g, edges)?;
    // an unheard predecessor's action is replaced by the start token
    let heard = g.embedding(table, &tokens, &[b, n])?;
    let blank = g.embedding(table, &vec![START_TOKEN; b * n], &[b, n])?;
    let heard = g.mul(heard, own)?;
    let not_own = g.neg(own);
    let not_own = g.add_scalar(not_own, T::one());
    let blank = g.mul(blank, not_own)?;
    let x = g.add(heard, blank)?;
    let mut x = norm(g, p, "dec.tok_ln", x)?;

    let self_e = EdgeInputs::new(g, self_recv)?;
    let cross_e = EdgeInputs::new(g, edges)?;
    for l in 0..dims.blocks {
        let a = attention(g, p, &format!("dec.b{l}.self"), x, x, &self_e)?;
        let h = g.add(x, a)?;
        let h = norm(g, p, &format!("dec.b{l}.ln1"), h)?;
        let c = attention(g, p, &format!("dec.b{l}.cross"), h, reps, &cross_e)?;
        let h2 = g.add(h, c)?;
        let h2 = norm(g, p, &format!("dec.b{l}.ln2"), h2)?;
        let m = mlp(g, p, &format!("dec.b{l}.mlp"), h2)?;
        let h3 = g.add(h2, m)?;
        x = norm(g, p, &format!("dec.b{l}.ln3"), h3)?;
    }
    let h = linear(g, p, "dec.head.l1", x)?;
    let h = g.gelu(h);
    let h = norm(g, p, "dec.head_ln", h)?;
    let logits = linear(g, p, "dec.head.l2", h)?;
    let log_probs = g.log_softmax(logits, avail)?;
    let mask = match avail {
        Some(a) => {
            let data = a
                .iter()
                .map(|&ok| if ok { T::one() } else { T::zero() })
                .collect();
            Tensor::new(&[b, n, dims.n_actions], data)?
        }
        None => Tensor::ones(&[b, n, dims.n_actions]),
    };
    let mask = g.constant(mask);
    let probs = g.masked_softmax(logits, mask)?;
    Ok(Policy { log_probs, probs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Result of auto-regressive action selection for a batch.
#[derive(Clone, Debug)]
pub struct Acted<T> {
    /// `[B * N]`, agent-major within each batch row.
    pub actions: Vec<usize>,
    pub log_probs: Vec<T>,
    pub values: Vec<T>,
}

/// Draws from a categorical given probabilities; returns the first index
/// whose cumulative mass exceeds `u`.
fn categorical<T: Scalar>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        let p = p.f64();
        if p > 0.0 {
            last = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
    }
    last
}

fn greedy<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

/// Generates `a^1 .. a^N` one agent at a time, feeding each choice back into
/// the decoder. Parameters are used as constants.
///
/// Sampling draws row `b` from `rngs[b]`; greedy mode ignores `rngs`.
#[allow(clippy::too_many_arguments)]
pub fn act_autoregressive<T: Scalar, R: Rng>(
    params: &ParameterStore<T>,
    dims: &ModelDims,
    obs: &Tensor<T>,
    edges: &Tensor<T>,
    avail: Option<&[bool]>,
    mode: ActMode,
    rngs: &mut [R],
) -> Result<Acted<T>> {
    let b = obs.shape().first().copied().unwrap_or(0);
    if mode == ActMode::Sample && rngs.len() != b {
        return Err(Error::Config(format!(
            "sampling {b} rows needs {b} rng streams, got {}",
            rngs.len()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let n = dims.n_agents;
    let a_n = dims.n_actions;
    let o = g.constant(obs.clone());
    let e = g.constant(edges.clone());
    let enc = encode(&mut g, &p, dims, o, e)?;
    let mut actions = vec![0usize; b * n];
    let mut log_probs = vec![T::zero(); b * n];
    for m in 0..n {
        let pol = decode_policy(&mut g, &p, dims, enc.reps, &actions, e, avail)?;
        let probs = g.value(pol.probs).data();
        let logp = g.value(pol.log_probs).data();
        for row in 0..b {
            let base = (row * n + m) * a_n;
            let pr = &probs[base..base + a_n];
            let a = match mode {
                ActMode::Greedy => greedy(pr),
                ActMode::Sample => categorical(pr, rngs[row].random::<f64>()),
            };
            actions[row * n + m] = a;
            log_probs[row * n + m] = logp[base + a];
        }
    }
    let values = g.value(enc.values).data().to_vec();
    Ok(Acted {
        actions,
        log_probs,
        values,
    })
}
