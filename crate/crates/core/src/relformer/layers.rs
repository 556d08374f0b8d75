use crate::diffmath::{Binding, Graph, Scalar, Var};
use crate::error::Result;

/// `x W + b` with `W: [in, out]`, `b: [out]`.
pub(crate) fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    add_row(g, y, b)
}

/// Adds a rank-1 vector along the last axis of `x`.
pub(crate) fn add_row<T: Scalar>(g: &mut Graph<T>, x: Var, row: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let d = g.shape(row)[g.shape(row).len() - 1];
    let mut shape = vec![1; rank];
    shape[rank - 1] = d;
    let r = g.reshape(row, &shape)?;
    g.add(x, r)
}

fn mul_row<T: Scalar>(g: &mut Graph<T>, x: Var, row: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let d = g.shape(row)[0];
    let mut shape = vec![1; rank];
    shape[rank - 1] = d;
    let r = g.reshape(row, &shape)?;
    g.mul(x, r)
}

/// Layer norm with learned gain `{prefix}.g` and shift `{prefix}.b`.
pub(crate) fn norm<T: Scalar>(g: &mut Graph<T>, p: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let y = g.layer_norm(x)?;
    let y = mul_row(g, y, p.get(&format!("{prefix}.g"))?)?;
    add_row(g, y, p.get(&format!("{prefix}.b"))?)
}

/// Two-layer GELU perceptron `{prefix}.l1`, `{prefix}.l2`.
pub(crate) fn mlp<T: Scalar>(g: &mut Graph<T>, p: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.l1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.l2"), h)
}
