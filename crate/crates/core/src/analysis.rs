//! Stationarity diagnostics for online DPO.
//!
//! At a regularised Nash equilibrium `π*` the margin satisfies
//! `τ h(y, y') = p(y ≻ π*) − p(y' ≻ π*)`, so online DPO is stationary there
//! exactly when
//!
//! ```text
//! p(y ≻ π) = Σ_{y'} π(y') σ(p(y ≻ π) − p(y' ≻ π))   for every y.
//! ```
//!
//! The gap between the two sides is the stationarity residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{preference_vector, GameSpec, Policy, PolicyLogits, PreferenceMatrix};
use crate::games::{bradley_terry_matrix, two_action_matrix};
use crate::losses::{dpo_loss_logit_gradient, population_gradient_under, LossId};
use crate::math::{dot, norm, sigmoid};
use crate::solvers::rlhf_closed_form;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// `Σ_y π(y) residual(y)`. Zero for anti-symmetric preferences.
    pub weighted_sum: f64,
}

pub fn online_dpo_stationarity_residual(prefs: &PreferenceMatrix, pi: &Policy) -> Result<StationarityReport> {
    if pi.len() != prefs.n() {
        return Err(Error::Dimension("policy does not match the preference matrix".into()));
    }
    pi.require_interior()?;
    let v = preference_vector(prefs, pi);
    let residuals: Vec<f64> = v
        .iter()
        .map(|&vy| {
            let smoothed: f64 = pi.probs().iter().zip(&v).map(|(p, &vyp)| p * sigmoid(vy - vyp)).sum();
            vy - smoothed
        })
        .collect();
    Ok(StationarityReport {
        max_abs: residuals.iter().fold(0.0, |m: f64, r| m.max(r.abs())),
        weighted_sum: dot(pi.probs(), &residuals),
        residuals,
    })
}

/// Norm of the online DPO loss gradient in logit space (sampling frozen at `π`).
pub fn online_dpo_gradient_norm(spec: &GameSpec, pi: &Policy) -> Result<f64> {
    let logits = PolicyLogits::from_policy(pi)?;
    Ok(norm(&dpo_loss_logit_gradient(&logits, spec, pi)?))
}

/// Closed-form residuals for the game `[[½, 1 − p], [p, ½]]` at `π = (α, 1 − α)`,
/// i.e. `p` is the probability that the second action beats the first.
pub fn two_action_residuals(p: f64, alpha: f64) -> Result<(f64, f64)> {
    for (name, v) in [("p", p), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let gap = 1.0 - p - sigmoid(0.5 - p);
    Ok(((1.0 - alpha) * gap, -alpha * gap))
}

/// The two-action game matching [`two_action_residuals`]'s parametrisation.
pub fn two_action_game(p: f64) -> Result<PreferenceMatrix> {
    two_action_matrix(1.0 - p)
}

/// Gradient norm of the DPO objective, sampled from `μ`, at
/// `π_r ∝ π_ref exp(r/τ)` in the Bradley-Terry game with rewards `r`.
pub fn bt_stationarity_check(reference: &Policy, tau: f64, reward: &[f64], mu: &Policy) -> Result<f64> {
    let spec = GameSpec::new(bradley_terry_matrix(reward)?, reference.clone(), tau)?;
    let pi_r = rlhf_closed_form(reference, tau, reward)?;
    let logits = PolicyLogits::from_policy(&pi_r)?;
    Ok(norm(&dpo_loss_logit_gradient(&logits, &spec, mu)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    /// The rescaled policy `π^α`.
    pub policy: Policy,
    pub dpo_gradient_norm: f64,
    /// IPO gradient norm at `π^α` under the same sampler, for contrast.
    pub ipo_gradient_norm: f64,
}

/// Rescale `π_dpo` by `α` on the support of `μ`, keep its mass elsewhere,
/// renormalise, and measure the DPO gradient under `μ` at the result.
pub fn dpo_degeneracy_demo(spec: &GameSpec, mu: &Policy, pi_dpo: &Policy, alpha: f64) -> Result<DegeneracyReport> {
    let off: Vec<f64> = pi_dpo
        .probs()
        .iter()
        .zip(mu.probs())
        .filter(|(_, m)| **m == 0.0)
        .map(|(p, _)| *p)
        .collect();
    dpo_degeneracy_demo_with(spec, mu, pi_dpo, alpha, &off)
}

/// As [`dpo_degeneracy_demo`], with explicit (unnormalised) weights for the
/// actions outside the support of `μ`, in index order.
pub fn dpo_degeneracy_demo_with(
    spec: &GameSpec,
    mu: &Policy,
    pi_dpo: &Policy,
    alpha: f64,
    off_support: &[f64],
) -> Result<DegeneracyReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::OutOfRange(format!("alpha must be positive, got {alpha}")));
    }
    let n = spec.n();
    if mu.len() != n || pi_dpo.len() != n {
        return Err(Error::Dimension("policies do not match the game".into()));
    }
    let zeros = mu.probs().iter().filter(|m| **m == 0.0).count();
    if zeros == 0 {
        return Err(Error::OutOfRange(
            "sampling policy must leave at least one action unsampled".into(),
        ));
    }
    if off_support.len() != zeros || off_support.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::OutOfRange(format!(
            "need {zeros} positive off-support weights, got {off_support:?}"
        )));
    }
    let mut extra = off_support.iter();
    let weights: Vec<f64> = pi_dpo
        .probs()
        .iter()
        .zip(mu.probs())
        .map(|(&p, &m)| {
            if m > 0.0 {
                alpha * p
            } else {
                *extra.next().expect("counted above")
            }
        })
        .collect();
    let policy = Policy::from_weights(&weights)?;
    let logits = PolicyLogits::from_policy(&policy)?;
    let dpo = dpo_loss_logit_gradient(&logits, spec, mu)?;
    let ipo = population_gradient_under(LossId::Ipo, &logits, spec, mu)?;
    Ok(DegeneracyReport {
        policy,
        dpo_gradient_norm: norm(&dpo),
        ipo_gradient_norm: norm(&ipo),
    })
}
