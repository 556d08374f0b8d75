//! Relation-enhanced attention.
//!
//! The score between query position `i` and key position `j` is
//!
//! ```text
//! s_ij = (x_i + r_{i->j}) Wq . (y_j + r_{j->i}) Wk / sqrt(d)
//! ```
//!
//! where `r` is a row of a two-entry edge embedding table blended by the
//! (straight-through) edge value: `r = e * emb[1] + (1 - e) * emb[0]`.
//! With receive-oriented edges `S`, `r_{j->i}` uses `S[i][j]` and
//! `r_{i->j}` uses `S[j][i]`.
//!
//! Expanding the products lets the whole `N x N` score block be computed
//! from ordinary projections instead of `N^2` per-pair vectors:
//!
//! ```text
//! s = Q'K'^T + S * u + S^T * v + (S * S^T) c
//! Q' = (x + emb0) Wq,  K' = (y + emb0) Wk
//! qd = (emb1 - emb0) Wq,  kd = (emb1 - emb0) Wk
//! u_i = Q'_i . kd,  v_j = qd . K'_j,  c = qd . kd
//! ```

use super::layers::{add_row, linear};
use crate::diffmath::{Binding, Graph, Scalar, Var};
use crate::error::{shape_err, Result};

/// Edge values seen by one attention layer, shaped `[B|1, N, N]`.
///
/// `recv[i][j]` is the edge `j -> i` and doubles as the attention mask;
/// `send` is its transpose.
#[derive(Clone, Copy, Debug)]
pub struct EdgeInputs {
    pub recv: Var,
    pub send: Var,
}

impl EdgeInputs {
    pub fn new<T: Scalar>(g: &mut Graph<T>, recv: Var) -> Result<Self> {
        if g.shape(recv).len() != 3 {
            return shape_err(format!("edges must be [B, N, N], got {:?}", g.shape(recv)));
        }
        let send = g.transpose_last(recv)?;
        Ok(Self { recv, send })
    }
}

/// Relation-enhanced scores between queries `xq: [B, N, d]` and keys
/// `xk: [B, N, d]`, scaled by `1/sqrt(d)`.
pub fn relation_attention_scores<T: Scalar>(
    g: &mut Graph<T>,
    xq: Var,
    xk: Var,
    edges: &EdgeInputs,
    emb: Var,
    wq: Var,
    wk: Var,
) -> Result<Var> {
    let sq = g.shape(xq).to_vec();
    let sk = g.shape(xk).to_vec();
    let se = g.shape(emb).to_vec();
    if sq.len() != 3 || sq != sk {
        return shape_err(format!(
            "attention inputs must be equal [B, N, d], got {sq:?} and {sk:?}"
        ));
    }
    let d = sq[2];
    if se != [2, d] {
        return shape_err(format!("edge embedding must be [2, {d}], got {se:?}"));
    }
    let (b, n) = (sq[0], sq[1]);
    let es = g.shape(edges.recv).to_vec();
    if es.len() != 3 || es[1] != n || es[2] != n || (es[0] != 1 && es[0] != b) {
        return shape_err(format!(
            "edges {es:?} do not fit a batch of {b} x {n} agents"
        ));
    }

    let e0 = g.select(emb, 0, 0)?;
    let e1 = g.select(emb, 0, 1)?;
    let xq0 = add_row(g, xq, e0)?;
    let xk0 = add_row(g, xk, e0)?;
    let q = g.matmul(xq0, wq)?;
    let k = g.matmul(xk0, wk)?;

    let diff = g.sub(e1, e0)?;
    let diff = g.reshape(diff, &[1, d])?;
    let qd = g.matmul(diff, wq)?;
    let kd = g.matmul(diff, wk)?;

    let kt = g.transpose_last(k)?;
    let base = g.matmul(q, kt)?;

    let kd_col = g.transpose_last(kd)?;
    let u = g.matmul(q, kd_col)?; // [B, N, 1]
    let qd_col = g.transpose_last(qd)?;
    let v = g.matmul(k, qd_col)?; // [B, N, 1]
    let v = g.transpose_last(v)?; // [B, 1, N]
    let c = g.mul(qd, kd)?;
    let c = g.sum(c);
    let c = g.reshape(c, &[1, 1, 1])?;

    let su = g.mul(edges.recv, u)?;
    let sv = g.mul(edges.send, v)?;
    let both = g.mul(edges.recv, edges.send)?;
    let sc = g.mul(both, c)?;

    let s = g.add(base, su)?;
    let s = g.add(s, sv)?;
    let s = g.add(s, sc)?;
    Ok(g.scale(s, T::c(1.0 / (d as f64).sqrt())))
}

/// Masked relation-enhanced attention followed by the output projection.
///
/// Parameters under `prefix`: `wq`, `wk`, `wv`, `edge`, and the output
/// linear layer `out`.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    prefix: &str,
    xq: Var,
    xkv: Var,
    edges: &EdgeInputs,
) -> Result<Var> {
    let wq = p.get(&format!("{prefix}.wq"))?;
    let wk = p.get(&format!("{prefix}.wk"))?;
    let wv = p.get(&format!("{prefix}.wv"))?;
    let emb = p.get(&format!("{prefix}.edge"))?;
    let scores = relation_attention_scores(g, xq, xkv, edges, emb, wq, wk)?;
    let shape = g.shape(scores).to_vec();
    let mask = g.broadcast_to(edges.recv, &shape)?;
    let weights = g.masked_softmax(scores, mask)?;
    let values = g.matmul(xkv, wv)?;
    let mixed = g.matmul(weights, values)?;
    linear(g, p, &format!("{prefix}.out"), mixed)
}
