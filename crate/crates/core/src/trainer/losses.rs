use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::relformer::Policy;

/// Mean over steps and agents of the TD residual penalty between online
/// values `[B, N]` and fixed targets `R + gamma (1 - done) V_target(next)`.
///
/// Squared error unless `huber` gives a threshold.
pub fn encoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    values: Var,
    targets: &Tensor<T>,
    huber: Option<T>,
) -> Result<Var> {
    if g.shape(values) != targets.shape() {
        return shape_err(format!(
            "values {:?} vs targets {:?}",
            g.shape(values),
            targets.shape()
        ));
    }
    let y = g.constant(targets.clone());
    let diff = g.sub(values, y)?;
    let per = match huber {
        Some(delta) => g.huber(diff, delta),
        None => g.square(diff),
    };
    Ok(g.mean(per))
}

/// TD targets `R_t + gamma (1 - done_t) V_next[t, m]`, shaped `[B, N]`.
pub fn td_targets<T: Scalar>(
    rewards: &[f64],
    dones: &[bool],
    next_values: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    let s = next_values.shape();
    if s.len() != 2 || s[0] != rewards.len() || dones.len() != rewards.len() {
        return shape_err(format!("next values {s:?} for {} rewards", rewards.len()));
    }
    let n = s[1];
    let data = next_values
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let t = k / n;
            let live = if dones[t] { 0.0 } else { 1.0 };
            T::c(rewards[t] + gamma * live * v.f64())
        })
        .collect();
    Tensor::new(s, data)
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLoss {
    pub loss: Var,
    /// Mean clipped surrogate.
    pub surrogate: Var,
    /// Mean per-agent policy entropy.
    pub entropy: Var,
}

/// Clipped PPO objective with an entropy bonus:
/// `-mean(min(r A, clip(r, 1 - eps, 1 + eps) A)) - c * mean(H)`.
///
/// `old_log_probs` is `B * N`, `advantages` is one joint value per step.
pub fn decoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    policy: &Policy,
    actions: &[usize],
    old_log_probs: &[T],
    advantages: &[T],
    clip: f64,
    entropy_coef: f64,
) -> Result<DecoderLoss> {
    let s = g.shape(policy.log_probs).to_vec();
    if s.len() != 3 || advantages.len() != s[0] || old_log_probs.len() != s[0] * s[1] {
        return shape_err(format!(
            "policy {s:?} with {} advantages and {} old log-probs",
            advantages.len(),
            old_log_probs.len()
        ));
    }
    let (b, n) = (s[0], s[1]);
    let logp = g.gather_last(policy.log_probs, actions)?;
    let old = g.constant(Tensor::new(&[b, n], old_log_probs.to_vec())?);
    let log_ratio = g.sub(logp, old)?;
    let ratio = g.exp(log_ratio);
    if let Some(bad) = g.value(ratio).data().iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("importance ratio is {bad}")));
    }
    let adv = g.constant(Tensor::new(&[b, 1], advantages.to_vec())?);
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, T::c(1.0 - clip), T::c(1.0 + clip));
    let clipped = g.mul(clipped, adv)?;
    let surr = g.minimum(unclipped, clipped)?;
    let surrogate = g.mean(surr);

    let plogp = g.mul(policy.probs, policy.log_probs)?;
    let neg_h = g.sum_last(plogp)?;
    let mean_neg_h = g.mean(neg_h);
    let entropy = g.neg(mean_neg_h);

    let bonus = g.scale(entropy, T::c(entropy_coef));
    let total = g.add(surrogate, bonus)?;
    let loss = g.neg(total);
    Ok(DecoderLoss {
        loss,
        surrogate,
        entropy,
    })
}
