use crate::diffmath::{ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Named gradients, in the order they were collected.
pub type NamedGrads<T> = Vec<(String, Tensor<T>)>;

/// Global L2 norm of `grads`, rescaled in place to at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut NamedGrads<T>, max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .map(|(_, g)| g.sq_norm().f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        let culprit = grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map_or("?", |(n, _)| n.as_str());
        return Err(Error::Numeric(format!(
            "non-finite gradient (first offender `{culprit}`)"
        )));
    }
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    Ok(norm)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            steps: 0,
            m: ParameterStore::new(),
            v: ParameterStore::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParameterStore<T>, grads: &NamedGrads<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` is {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !self.m.contains(name) {
                self.m.set(name, Tensor::zeros(g.shape()));
                self.v.set(name, Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = T::c(b1 * mi.f64() + (1.0 - b1) * gi.f64());
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = T::c(b2 * vi.f64() + (1.0 - b2) * gi.f64() * gi.f64());
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let step = self.lr * (mi.f64() / c1) / ((vi.f64() / c2).sqrt() + self.eps);
                *pi = T::c(pi.f64() - step);
            }
        }
        Ok(())
    }
}

/// `target <- (1 - tau) target + tau online` for every tensor in `target`.
pub fn ema_update<T: Scalar>(
    target: &mut ParameterStore<T>,
    online: &ParameterStore<T>,
    tau: f64,
) -> Result<()> {
    for (name, t) in target.iter_mut() {
        let o = online.get(name)?;
        if o.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "target `{name}` is {:?}, online {:?}",
                t.shape(),
                o.shape()
            )));
        }
        for (ti, &oi) in t.data_mut().iter_mut().zip(o.data()) {
            *ti = T::c((1.0 - tau) * ti.f64() + tau * oi.f64());
        }
    }
    Ok(())
}
