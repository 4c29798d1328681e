//! Training objectives for the decomposition model, evaluated on supplied
//! log-probabilities: next-token and decision losses, the preference losses
//! (reward-based, pairwise DPO, anchored, and their logical-implication
//! combination), preference-pair construction from an implication graph,
//! and central-difference gradient verification.

mod gradcheck;
mod loss;
mod pairs;
mod suite;

use serde::{Deserialize, Serialize};

pub use gradcheck::{analytic_gradient, finite_diff_check, finite_diff_check_with, GradReport, LossKind};
pub use loss::{
    ancpo_loss, bce_loss, dpo_loss, lidpo_loss, neg_log_sigmoid, ntp_loss, po_loss, selective_vqd_loss, sigmoid,
};
pub use pairs::{
    assemble_implication_graph, build_preference_pairs, ImplicationGraph, PreferencePair,
};
pub use suite::{
    identity_checks, random_point, run_loss_suite, run_loss_suite_with, IdentityCheck, LossSuiteReport, FD_EPSILON,
    GRADIENT_TOLERANCE, IDENTITY_TOLERANCE, LOG_RATIO_RANGE,
};

#[derive(Debug, thiserror::Error)]
pub enum PrefOptError {
    #[error("token log-probability list is empty")]
    EmptyTokens,
    #[error("log-probability {0} is positive")]
    PositiveLogProb(f64),
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("predicted probability {0} is outside (0, 1)")]
    ProbabilityDomain(f64),
    #[error("sample list is empty")]
    EmptySamples,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("anchor log-probabilities are required when gamma_anchor > 0")]
    MissingAnchor,
    #[error("epsilon {0} is outside [1e-8, 1e-3]")]
    Epsilon(f64),
    #[error("loss is not finite at the evaluation point")]
    NonFiniteLoss,
    #[error("edge ({0}, {1}) is out of range for {2} nodes")]
    EdgeRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("implication graph has a cycle through edge {from} -> {to}")]
    Cycle { from: usize, to: usize },
    #[error("order {0:?} is not a permutation of 1..={1}")]
    NotPermutation(Vec<usize>, usize),
    #[error("base order violates edge {from} -> {to}")]
    OrderViolatesEdge { from: usize, to: usize },
    #[error("relation backend: {0}")]
    Backend(#[from] crate::backends::BackendError),
}

/// Loss weights. Defaults: λ = β_bce = 1, β_kl = 0.5, γ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ntp: f64,
    pub beta_bce: f64,
    pub beta_kl: f64,
    pub gamma_anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ntp: 1.0,
            beta_bce: 1.0,
            beta_kl: 0.5,
            gamma_anchor: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), PrefOptError> {
        let all = [self.lambda_ntp, self.beta_bce, self.beta_kl, self.gamma_anchor];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(PrefOptError::Weights("weights must be finite".into()));
        }
        if self.beta_kl <= 0.0 {
            return Err(PrefOptError::Weights(format!("beta_kl must be positive, got {}", self.beta_kl)));
        }
        if self.lambda_ntp < 0.0 || self.beta_bce < 0.0 || self.gamma_anchor < 0.0 {
            return Err(PrefOptError::Weights("lambda, beta_bce and gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Summed log-probability of a whole output sequence under one policy.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SequenceLogProb(f64);

impl SequenceLogProb {
    pub fn new(total: f64) -> Result<Self, PrefOptError> {
        if !total.is_finite() {
            return Err(PrefOptError::NonFinite(total));
        }
        if total > 0.0 {
            return Err(PrefOptError::PositiveLogProb(total));
        }
        Ok(Self(total))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SequenceLogProb {
    type Error = PrefOptError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SequenceLogProb> for f64 {
    fn from(v: SequenceLogProb) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorLogProbs {
    pub policy: SequenceLogProb,
    pub reference: SequenceLogProb,
}

/// Policy and reference log-probabilities of a preferred (`w`) and a
/// rejected (`l`) output, plus an optional anchor output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoSample {
    pub lp_w_policy: SequenceLogProb,
    pub lp_w_ref: SequenceLogProb,
    pub lp_l_policy: SequenceLogProb,
    pub lp_l_ref: SequenceLogProb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorLogProbs>,
}

impl DpoSample {
    pub fn new(w_policy: f64, w_ref: f64, l_policy: f64, l_ref: f64) -> Result<Self, PrefOptError> {
        Ok(Self {
            lp_w_policy: SequenceLogProb::new(w_policy)?,
            lp_w_ref: SequenceLogProb::new(w_ref)?,
            lp_l_policy: SequenceLogProb::new(l_policy)?,
            lp_l_ref: SequenceLogProb::new(l_ref)?,
            anchor: None,
        })
    }

    /// Uses an externally generated anchor output.
    pub fn with_anchor(mut self, policy: f64, reference: f64) -> Result<Self, PrefOptError> {
        self.anchor = Some(AnchorLogProbs {
            policy: SequenceLogProb::new(policy)?,
            reference: SequenceLogProb::new(reference)?,
        });
        Ok(self)
    }

    /// Uses the preferred output as the anchor (the default choice).
    pub fn with_preferred_anchor(mut self) -> Self {
        self.anchor = Some(AnchorLogProbs {
            policy: self.lp_w_policy,
            reference: self.lp_w_ref,
        });
        self
    }

    /// Swaps the preferred and rejected outputs.
    pub fn swapped(self) -> Self {
        Self {
            lp_w_policy: self.lp_l_policy,
            lp_w_ref: self.lp_l_ref,
            lp_l_policy: self.lp_w_policy,
            lp_l_ref: self.lp_w_ref,
            anchor: self.anchor,
        }
    }
}
