use super::{DpoSample, LossWeights, PrefOptError, SequenceLogProb};

/// `-ln σ(x)`, computed as `softplus(-x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_beta(beta_kl: f64) -> Result<(), PrefOptError> {
    if beta_kl.is_finite() && beta_kl > 0.0 {
        Ok(())
    } else {
        Err(PrefOptError::Weights(format!("beta_kl must be positive, got {beta_kl}")))
    }
}

/// Mean negated token log-probability.
pub fn ntp_loss(token_logprobs: &[f64]) -> Result<f64, PrefOptError> {
    if token_logprobs.is_empty() {
        return Err(PrefOptError::EmptyTokens);
    }
    for &lp in token_logprobs {
        SequenceLogProb::new(lp)?;
    }
    Ok(-token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

pub fn bce_loss(label: bool, yhat: f64) -> Result<f64, PrefOptError> {
    if !(yhat > 0.0 && yhat < 1.0) {
        return Err(PrefOptError::ProbabilityDomain(yhat));
    }
    Ok(if label { -yhat.ln() } else { -(-yhat).ln_1p() })
}

/// Σ (λ·ntp + β·bce) over `(ntp, bce)` pairs.
pub fn selective_vqd_loss(samples: &[(f64, f64)], weights: &LossWeights) -> Result<f64, PrefOptError> {
    if samples.is_empty() {
        return Err(PrefOptError::EmptySamples);
    }
    weights.validate()?;
    Ok(samples
        .iter()
        .map(|&(ntp, bce)| weights.lambda_ntp * ntp + weights.beta_bce * bce)
        .sum())
}

/// `-ln σ(r - β (log π(O) - log π_ref(O)))`.
pub fn po_loss(
    reward: f64,
    lp_policy: SequenceLogProb,
    lp_ref: SequenceLogProb,
    beta_kl: f64,
) -> Result<f64, PrefOptError> {
    check_beta(beta_kl)?;
    if !reward.is_finite() {
        return Err(PrefOptError::NonFinite(reward));
    }
    Ok(raw::po(reward, lp_policy.get(), lp_ref.get(), beta_kl))
}

pub fn dpo_loss(s: &DpoSample, beta_kl: f64) -> Result<f64, PrefOptError> {
    check_beta(beta_kl)?;
    Ok(raw::dpo(
        s.lp_w_policy.get(),
        s.lp_w_ref.get(),
        s.lp_l_policy.get(),
        s.lp_l_ref.get(),
        beta_kl,
    ))
}

pub fn ancpo_loss(lp_policy: SequenceLogProb, lp_ref: SequenceLogProb, beta_kl: f64) -> Result<f64, PrefOptError> {
    check_beta(beta_kl)?;
    Ok(raw::ancpo(lp_policy.get(), lp_ref.get(), beta_kl))
}

/// DPO plus γ times the anchored term. With γ = 0 the result is exactly
/// [`dpo_loss`] and no anchor is needed.
pub fn lidpo_loss(s: &DpoSample, weights: &LossWeights) -> Result<f64, PrefOptError> {
    weights.validate()?;
    let dpo = dpo_loss(s, weights.beta_kl)?;
    if weights.gamma_anchor == 0.0 {
        return Ok(dpo);
    }
    let anchor = s.anchor.ok_or(PrefOptError::MissingAnchor)?;
    Ok(dpo + weights.gamma_anchor * ancpo_loss(anchor.policy, anchor.reference, weights.beta_kl)?)
}

/// Unchecked kernels shared with the gradient checker.
pub(super) mod raw {
    use super::neg_log_sigmoid;

    pub fn po(reward: f64, lp_policy: f64, lp_ref: f64, beta: f64) -> f64 {
        neg_log_sigmoid(reward - beta * (lp_policy - lp_ref))
    }

    pub fn dpo(w_policy: f64, w_ref: f64, l_policy: f64, l_ref: f64, beta: f64) -> f64 {
        neg_log_sigmoid(beta * (w_policy - w_ref) - beta * (l_policy - l_ref))
    }

    pub fn ancpo(policy: f64, reference: f64, beta: f64) -> f64 {
        neg_log_sigmoid(beta * (policy - reference))
    }
}
