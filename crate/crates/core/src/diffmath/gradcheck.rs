use super::{Binding, Graph, ParameterStore, Scalar, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively; central differences cannot resolve them any better.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn eval<T: Scalar, F>(
    f: &F,
    params: &ParameterStore<T>,
    trainable: bool,
) -> Result<(Graph<T>, Binding, Var)>
where
    F: Fn(&mut Graph<T>, &Binding) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| trainable);
    let loss = f(&mut g, &b)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok((g, b, loss))
}

/// Compares analytic gradients of `f` against central finite differences
/// for every entry of every parameter in `params`.
///
/// The error of one entry is `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradcheck<T, F>(
    f: F,
    params: &ParameterStore<T>,
    step: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Binding) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!(
            "gradcheck step must be positive, got {step}"
        )));
    }
    let (g, binding, loss) = eval(&f, params, true)?;
    let grads = g.backward(loss)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tol,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let var = binding.get(name)?;
        let analytic: Vec<f64> = match grads.get(var) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; tensor.numel()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = tensor.data()[i];
            let h = T::c(step);
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let (gp, _, lp) = eval(&f, &probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let (gm, _, lm) = eval(&f, &probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let n = (gp.value(lp).item().f64() - gm.value(lm).item().f64()) / (2.0 * step);
            let denom = a.abs().max(n.abs()).max(GRADCHECK_FLOOR);
            let err = (a - n).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
        }
    }
    Ok(report)
}
