//! Preference losses, base and uncertainty-weighted, with closed-form
//! gradients with respect to their scalar inputs.
//!
//! Reward-model loss: `-u * log sigmoid(r_plus - r_minus)`.
//! Policy (DPO) loss: `-u * log sigmoid(beta * delta)` where delta is the
//! margin of policy-vs-reference log-ratios between the chosen and rejected
//! responses. `u = 1` recovers the unweighted losses exactly; gradients and
//! losses scale linearly in `u` by construction.
//!
//! Chaining the returned scalar gradients into model parameters is the
//! trainer's job; keeping the loss math scalar makes it independently
//! testable against finite differences.

use crate::error::{Error, Result};

/// Numerically stable `log sigmoid(z)`: `min(z, 0) - ln(1 + exp(-|z|))`.
/// No overflow for |z| up to well beyond 1e3.
pub fn log_sigmoid(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Input(format!("log_sigmoid needs finite input, got {z}")));
    }
    Ok(z.min(0.0) - (-z.abs()).exp().ln_1p())
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scalar inputs of the weighted DPO loss for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoInputs {
    /// Policy log-likelihood of the chosen response (nats, <= 0).
    pub logp_theta_plus: f64,
    /// Policy log-likelihood of the rejected response.
    pub logp_theta_minus: f64,
    /// Frozen reference log-likelihood of the chosen response.
    pub logp_ref_plus: f64,
    /// Frozen reference log-likelihood of the rejected response.
    pub logp_ref_minus: f64,
    /// Temperature, > 0.
    pub beta: f64,
    /// Pair weight in [0, 1].
    pub u: f64,
}

impl DpoInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("logp_theta_plus", self.logp_theta_plus),
            ("logp_theta_minus", self.logp_theta_minus),
            ("logp_ref_plus", self.logp_ref_plus),
            ("logp_ref_minus", self.logp_ref_minus),
        ] {
            if !v.is_finite() || v > 0.0 {
                return Err(Error::Input(format!(
                    "{name} must be a finite log-likelihood <= 0, got {v}"
                )));
            }
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Input(format!("beta must be > 0, got {}", self.beta)));
        }
        validate_weight(self.u)
    }
}

fn validate_weight(u: f64) -> Result<()> {
    if !u.is_finite() || !(0.0..=1.0).contains(&u) {
        return Err(Error::Input(format!("weight u must lie in [0, 1], got {u}")));
    }
    Ok(())
}

/// The DPO margin: difference of policy-vs-reference log-ratios between the
/// chosen and rejected responses. Antisymmetric under swapping the pair.
pub fn delta(inputs: &DpoInputs) -> f64 {
    (inputs.logp_theta_plus - inputs.logp_ref_plus)
        - (inputs.logp_theta_minus - inputs.logp_ref_minus)
}

/// Weighted DPO loss value and its gradient with respect to delta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    pub grad_delta: f64,
}

/// `loss = -u * log sigmoid(beta * delta)`,
/// `d loss / d delta = -u * (beta * sigmoid(-beta * delta))`.
///
/// The grouping keeps u-scaling exact: both outputs are a single
/// multiplication of `u` against the unweighted quantity.
pub fn dpo_loss(inputs: &DpoInputs) -> Result<DpoLoss> {
    inputs.validate()?;
    let z = inputs.beta * delta(inputs);
    let base_loss = -log_sigmoid(z)?;
    let base_grad = inputs.beta * sigmoid(-z);
    Ok(DpoLoss {
        loss: inputs.u * base_loss,
        grad_delta: -(inputs.u * base_grad),
    })
}

/// Scalar inputs of the weighted reward-model loss for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmInputs {
    /// Reward of the chosen response.
    pub r_plus: f64,
    /// Reward of the rejected response.
    pub r_minus: f64,
    /// Pair weight in [0, 1].
    pub u: f64,
}

impl RmInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r_plus", self.r_plus), ("r_minus", self.r_minus)] {
            if !v.is_finite() {
                return Err(Error::Input(format!("{name} must be finite, got {v}")));
            }
        }
        validate_weight(self.u)
    }
}

/// Weighted reward-model loss and its gradients with respect to the two
/// rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmLoss {
    pub loss: f64,
    pub grad_r_plus: f64,
    pub grad_r_minus: f64,
}

/// `loss = -u * log sigmoid(r_plus - r_minus)`; the reward gradients are
/// `-u * sigmoid(r_minus - r_plus)` and its negation.
pub fn rm_loss(inputs: &RmInputs) -> Result<RmLoss> {
    inputs.validate()?;
    let margin = inputs.r_plus - inputs.r_minus;
    let base_loss = -log_sigmoid(margin)?;
    let base_grad = sigmoid(-margin);
    Ok(RmLoss {
        loss: inputs.u * base_loss,
        grad_r_plus: -(inputs.u * base_grad),
        grad_r_minus: inputs.u * base_grad,
    })
}

/// How a batch of per-pair losses is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchReduction {
    /// Unweighted mean of the already-u-scaled terms (u lives inside the
    /// expectation).
    #[default]
    Mean,
    /// Divide by the sum of weights instead of the batch size; exposed for
    /// ablation.
    WeightNormalized,
}

fn reduction_scale(reduction: BatchReduction, n: usize, weight_sum: f64) -> f64 {
    match reduction {
        BatchReduction::Mean => 1.0 / n as f64,
        BatchReduction::WeightNormalized => {
            if weight_sum > 0.0 {
                1.0 / weight_sum
            } else {
                0.0
            }
        }
    }
}

/// Reduce a batch of DPO pairs: returns the reduced loss and per-pair delta
/// gradients already scaled by the reduction factor. Summation is
/// left-to-right for determinism.
pub fn batch_dpo_loss(
    batch: &[DpoInputs],
    reduction: BatchReduction,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("batch must be non-empty".into()));
    }
    let mut per_pair = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for inputs in batch {
        let out = dpo_loss(inputs)?;
        total += out.loss;
        weight_sum += inputs.u;
        per_pair.push(out.grad_delta);
    }
    let scale = reduction_scale(reduction, batch.len(), weight_sum);
    for g in &mut per_pair {
        *g *= scale;
    }
    Ok((total * scale, per_pair))
}

/// Reduce a batch of reward-model pairs: returns the reduced loss and
/// per-pair `(grad_r_plus, grad_r_minus)` scaled by the reduction factor.
pub fn batch_rm_loss(
    batch: &[RmInputs],
    reduction: BatchReduction,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if batch.is_empty() {
        return Err(Error::Input("batch must be non-empty".into()));
    }
    let mut per_pair = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for inputs in batch {
        let out = rm_loss(inputs)?;
        total += out.loss;
        weight_sum += inputs.u;
        per_pair.push((out.grad_r_plus, out.grad_r_minus));
    }
    let scale = reduction_scale(reduction, batch.len(), weight_sum);
    for (gp, gm) in &mut per_pair {
        *gp *= scale;
        *gm *= scale;
    }
    Ok((total * scale, per_pair))
}
