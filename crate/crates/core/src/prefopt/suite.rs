use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{analytic_gradient, finite_diff_check_with, LossKind};
use super::loss::{ancpo_loss, dpo_loss, lidpo_loss, po_loss};
use super::{AnchorLogProbs, DpoSample, LossWeights, PrefOptError, SequenceLogProb};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
pub const FD_EPSILON: f64 = 1e-5;

/// Half-width of the log-ratio range sampled by the gradient checks.
pub const LOG_RATIO_RANGE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub expected: f64,
    pub actual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSuiteReport {
    pub identities: Vec<IdentityCheck>,
    pub trials: usize,
    pub gradient_checks: usize,
    pub max_rel_error: f64,
    pub worst_kind: Option<LossKind>,
}

impl LossSuiteReport {
    pub fn passed(&self) -> bool {
        self.identities.iter().all(|c| c.passed) && self.max_rel_error <= GRADIENT_TOLERANCE
    }
}

fn lp(v: f64) -> Result<SequenceLogProb, PrefOptError> {
    SequenceLogProb::new(v)
}

fn check(name: &'static str, expected: f64, actual: f64, exact: bool) -> IdentityCheck {
    let passed = if exact {
        expected.to_bits() == actual.to_bits()
    } else {
        (expected - actual).abs() <= IDENTITY_TOLERANCE
    };
    IdentityCheck {
        name,
        expected,
        actual,
        passed,
    }
}

/// Closed-form values at a zero argument of the sigmoid, and the
/// `gamma = 0` reduction of the implication loss.
pub fn identity_checks() -> Result<Vec<IdentityCheck>, PrefOptError> {
    let ln2 = std::f64::consts::LN_2;
    let w = LossWeights::default();
    let zero = DpoSample::new(-3.0, -3.0, -7.0, -7.0)?.with_anchor(-3.0, -3.0)?;
    let off = DpoSample::new(-2.0, -4.5, -6.0, -3.25)?.with_anchor(-1.0, -2.5)?;
    let no_anchor = LossWeights {
        gamma_anchor: 0.0,
        ..w
    };
    Ok(vec![
        check("dpo at zero", ln2, dpo_loss(&zero, w.beta_kl)?, false),
        check("ancpo at zero", ln2, ancpo_loss(lp(-4.0)?, lp(-4.0)?, w.beta_kl)?, false),
        check("po at zero", ln2, po_loss(0.0, lp(-5.0)?, lp(-5.0)?, w.beta_kl)?, false),
        check("lidpo(gamma=1) at zero", 2.0 * ln2, lidpo_loss(&zero, &w)?, false),
        check(
            "lidpo(gamma=0) equals dpo",
            dpo_loss(&off, w.beta_kl)?,
            lidpo_loss(&off, &no_anchor)?,
            true,
        ),
    ])
}

/// A random evaluation point: reference log-probabilities in [-30, -5] and
/// policy log-ratios in [-5, 5], so policy values stay non-positive.
pub fn random_point(rng: &mut impl Rng) -> Result<(DpoSample, f64), PrefOptError> {
    fn pair(rng: &mut impl Rng) -> Result<(SequenceLogProb, SequenceLogProb), PrefOptError> {
        let reference: f64 = rng.random_range(-30.0..=-LOG_RATIO_RANGE);
        let ratio: f64 = rng.random_range(-LOG_RATIO_RANGE..=LOG_RATIO_RANGE);
        Ok((lp(reference + ratio)?, lp(reference)?))
    }
    let (wp, wr) = pair(rng)?;
    let (lpp, lr) = pair(rng)?;
    let (ap, ar) = pair(rng)?;
    let reward = rng.random_range(-LOG_RATIO_RANGE..=LOG_RATIO_RANGE);
    let sample = DpoSample {
        lp_w_policy: wp,
        lp_w_ref: wr,
        lp_l_policy: lpp,
        lp_l_ref: lr,
        anchor: Some(AnchorLogProbs {
            policy: ap,
            reference: ar,
        }),
    };
    Ok((sample, reward))
}

pub fn run_loss_suite(trials: usize, seed: u64) -> Result<LossSuiteReport, PrefOptError> {
    run_loss_suite_with(trials, seed, analytic_gradient)
}

/// Identity checks plus `trials` finite-difference checks of every
/// preference loss, using `gradient` as the analytic side.
pub fn run_loss_suite_with<G>(trials: usize, seed: u64, gradient: G) -> Result<LossSuiteReport, PrefOptError>
where
    G: Fn(LossKind, &[f64], &LossWeights, f64) -> Vec<f64> + Copy,
{
    let identities = identity_checks()?;
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error: f64 = 0.0;
    let mut worst_kind = None;
    let mut gradient_checks = 0;
    for _ in 0..trials {
        let (sample, reward) = random_point(&mut rng)?;
        for kind in LossKind::ALL {
            let r = finite_diff_check_with(kind, &sample, &weights, reward, FD_EPSILON, gradient)?;
            gradient_checks += 1;
            if r.max_rel_error.is_nan() || r.max_rel_error > max_rel_error {
                max_rel_error = if r.max_rel_error.is_nan() { f64::INFINITY } else { r.max_rel_error };
                worst_kind = Some(kind);
            }
        }
    }
    Ok(LossSuiteReport {
        identities,
        trials,
        gradient_checks,
        max_rel_error,
        worst_kind,
    })
}
