use serde::{Deserialize, Serialize};

use super::loss::{raw, sigmoid};
use super::{DpoSample, LossWeights, PrefOptError};

/// Preference losses that can be gradient-checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Po,
    Dpo,
    AncPo,
    LiDpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Po, LossKind::Dpo, LossKind::AncPo, LossKind::LiDpo];

    /// Differentiated inputs, in order:
    /// - `Po`: preferred policy, preferred reference
    /// - `Dpo`: preferred policy/reference, rejected policy/reference
    /// - `AncPo`: anchor policy, anchor reference
    /// - `LiDpo`: the four DPO inputs followed by the two anchor inputs
    fn inputs(self, s: &DpoSample) -> Result<Vec<f64>, PrefOptError> {
        let dpo = [s.lp_w_policy, s.lp_w_ref, s.lp_l_policy, s.lp_l_ref].map(f64::from);
        let anchor = || {
            s.anchor
                .map(|a| [a.policy.get(), a.reference.get()])
                .ok_or(PrefOptError::MissingAnchor)
        };
        Ok(match self {
            LossKind::Po => vec![dpo[0], dpo[1]],
            LossKind::Dpo => dpo.to_vec(),
            LossKind::AncPo => anchor()?.to_vec(),
            LossKind::LiDpo => dpo.iter().copied().chain(anchor()?).collect(),
        })
    }

    fn eval(self, x: &[f64], w: &LossWeights, reward: f64) -> f64 {
        let b = w.beta_kl;
        match self {
            LossKind::Po => raw::po(reward, x[0], x[1], b),
            LossKind::Dpo => raw::dpo(x[0], x[1], x[2], x[3], b),
            LossKind::AncPo => raw::ancpo(x[0], x[1], b),
            LossKind::LiDpo => raw::dpo(x[0], x[1], x[2], x[3], b) + w.gamma_anchor * raw::ancpo(x[4], x[5], b),
        }
    }
}

/// Closed-form gradient of `kind` with respect to its inputs (see
/// [`LossKind`] for the input order).
///
/// For `L = -ln σ(z)`, `dL/dz = -σ(-z)`.
pub fn analytic_gradient(kind: LossKind, x: &[f64], w: &LossWeights, reward: f64) -> Vec<f64> {
    let b = w.beta_kl;
    match kind {
        LossKind::Po => {
            // z = r - β(p - q)
            let g = sigmoid(-(reward - b * (x[0] - x[1])));
            vec![b * g, -b * g]
        }
        LossKind::Dpo => dpo_grad(x, b).to_vec(),
        LossKind::AncPo => {
            let g = sigmoid(-b * (x[0] - x[1]));
            vec![-b * g, b * g]
        }
        LossKind::LiDpo => {
            let ga = w.gamma_anchor * sigmoid(-b * (x[4] - x[5]));
            let mut out = dpo_grad(x, b).to_vec();
            out.extend([-b * ga, b * ga]);
            out
        }
    }
}

fn dpo_grad(x: &[f64], b: f64) -> [f64; 4] {
    let g = sigmoid(-(b * (x[0] - x[1]) - b * (x[2] - x[3])));
    [-b * g, b * g, b * g, -b * g]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub kind: LossKind,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// Compares [`analytic_gradient`] with central finite differences.
pub fn finite_diff_check(
    kind: LossKind,
    sample: &DpoSample,
    weights: &LossWeights,
    reward: f64,
    epsilon: f64,
) -> Result<GradReport, PrefOptError> {
    finite_diff_check_with(kind, sample, weights, reward, epsilon, analytic_gradient)
}

/// As [`finite_diff_check`] with a caller-supplied analytic gradient.
pub fn finite_diff_check_with<G>(
    kind: LossKind,
    sample: &DpoSample,
    weights: &LossWeights,
    reward: f64,
    epsilon: f64,
    gradient: G,
) -> Result<GradReport, PrefOptError>
where
    G: Fn(LossKind, &[f64], &LossWeights, f64) -> Vec<f64>,
{
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(PrefOptError::Epsilon(epsilon));
    }
    weights.validate()?;
    let x = kind.inputs(sample)?;
    if !kind.eval(&x, weights, reward).is_finite() {
        return Err(PrefOptError::NonFiniteLoss);
    }
    let analytic = gradient(kind, &x, weights, reward);
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let up = kind.eval(&probe, weights, reward);
        probe[i] = x[i] - epsilon;
        let down = kind.eval(&probe, weights, reward);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(PrefOptError::NonFiniteLoss);
        }
        numeric.push((up - down) / (2.0 * epsilon));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(if analytic.len() == numeric.len() { 0.0 } else { f64::INFINITY }, f64::max);
    Ok(GradReport {
        kind,
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dpo_at_zero_log_ratios() {
        let s = DpoSample::new(-2.0, -2.0, -3.0, -3.0).unwrap();
        let r = finite_diff_check(LossKind::Dpo, &s, &LossWeights::default(), 0.0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn ancpo_at_unit_log_ratio() {
        let s = DpoSample::new(-1.0, -2.0, -3.0, -3.0).unwrap().with_preferred_anchor();
        let r = finite_diff_check(LossKind::AncPo, &s, &LossWeights::default(), 0.0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn lidpo_with_unit_gamma() {
        let s = DpoSample::new(-1.5, -2.0, -3.0, -1.0).unwrap().with_anchor(-0.5, -2.5).unwrap();
        let r = finite_diff_check(LossKind::LiDpo, &s, &LossWeights::default(), 0.0, 1e-5).unwrap();
        assert_eq!(r.analytic.len(), 6);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn po_with_reward() {
        let s = DpoSample::new(-1.0, -4.0, -1.0, -1.0).unwrap();
        let r = finite_diff_check(LossKind::Po, &s, &LossWeights::default(), 0.7, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_bad_epsilon_and_missing_anchor() {
        let s = DpoSample::new(-1.0, -1.0, -1.0, -1.0).unwrap();
        let w = LossWeights::default();
        assert!(matches!(
            finite_diff_check(LossKind::Dpo, &s, &w, 0.0, 1e-2),
            Err(PrefOptError::Epsilon(_))
        ));
        assert!(matches!(
            finite_diff_check(LossKind::AncPo, &s, &w, 0.0, 1e-5),
            Err(PrefOptError::MissingAnchor)
        ));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let s = DpoSample::new(-1.0, -2.0, -3.0, -1.0).unwrap();
        let r = finite_diff_check_with(LossKind::Dpo, &s, &LossWeights::default(), 0.0, 1e-5, |k, x, w, r| {
            analytic_gradient(k, x, w, r).into_iter().map(|g| g * 1.01).collect()
        })
        .unwrap();
        assert!(r.max_rel_error > 1e-3);
    }
}
