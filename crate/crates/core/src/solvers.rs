//! Closed-form and fixed-point solutions of the regularised preference game:
//! best responses, the KL-regularised reward maximiser, the regularised Nash
//! equilibrium, mixture-opponent fixed points and exploitability.
//!
//! Fixed points are found by damped Picard iteration started at the
//! reference policy:
//!
//! ```text
//! π_{t+1} = (1 − d) π_t + d · T(π_t)
//! ```
//!
//! The damping `d` is halved whenever the residual `‖π_t − T(π_t)‖_∞` grows,
//! down to a floor of 1/64.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{geometric_mixture, kl_divergence, payoff, preference_vector, GameSpec, Policy};
use crate::math::sup_norm;

pub const DAMPING_FLOOR: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
            damping: 0.5,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::OutOfRange(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub policy: Policy,
    /// Sup-norm of `π − T(π)` at the returned policy.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn softmax_from_ref(reference: &Policy, scores: &[f64], tau: f64) -> Result<Policy> {
    let logw: Vec<f64> = reference
        .probs()
        .iter()
        .zip(scores)
        .map(|(&r, &s)| if r > 0.0 { r.ln() + s / tau } else { f64::NEG_INFINITY })
        .collect();
    Policy::from_log_weights(&logw)
}

/// `π(y) ∝ π_ref(y) exp(p(y ≻ μ)/τ)`.
pub fn best_response(spec: &GameSpec, mu: &Policy) -> Result<Policy> {
    if mu.len() != spec.n() {
        return Err(Error::Dimension(format!(
            "opponent has {} entries, game has {} actions",
            mu.len(),
            spec.n()
        )));
    }
    softmax_from_ref(&spec.ref_policy, &preference_vector(&spec.prefs, mu), spec.tau)
}

/// `π(y) ∝ π_ref(y) exp(r(y)/τ)`, the maximiser of `E_π[r] − τ KL(π ‖ π_ref)`.
pub fn rlhf_closed_form(reference: &Policy, tau: f64, reward: &[f64]) -> Result<Policy> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::OutOfRange(format!("tau must be positive, got {tau}")));
    }
    if reward.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "reward has {} entries, reference has {}",
            reward.len(),
            reference.len()
        )));
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {reward:?}")));
    }
    softmax_from_ref(reference, reward, tau)
}

/// `E_π[r] − τ KL(π ‖ π_ref)`.
pub fn rlhf_objective(reference: &Policy, tau: f64, reward: &[f64], pi: &Policy) -> Result<f64> {
    let kl = kl_divergence(pi, reference)?;
    Ok(crate::math::dot(pi.probs(), reward) - tau * kl)
}

/// `π ↦ BR(mixture(π, π_ref, β))`.
fn mixture_response(spec: &GameSpec, beta: f64, pi: &Policy) -> Result<Policy> {
    let opponent = geometric_mixture(pi, &spec.ref_policy, beta)?;
    best_response(spec, &opponent)
}

/// Sup-norm of `π − BR(mixture(π, π_ref, β))`; `β = 0` gives the regularised
/// Nash defect.
pub fn fixed_point_defect(spec: &GameSpec, beta: f64, pi: &Policy) -> Result<f64> {
    let image = mixture_response(spec, beta, pi)?;
    Ok(sup_norm(&crate::math::sub(pi.probs(), image.probs())))
}

fn damped_iteration(spec: &GameSpec, beta: f64, init: Policy, opts: &SolverOptions) -> Result<FixedPointReport> {
    opts.validate()?;
    if init.len() != spec.n() {
        return Err(Error::Dimension("initial policy does not match the game".into()));
    }
    let mut pi = init;
    let mut damping = opts.damping;
    let mut previous = f64::INFINITY;
    for iteration in 0..=opts.max_iter {
        let image = mixture_response(spec, beta, &pi)?;
        let residual = sup_norm(&crate::math::sub(pi.probs(), image.probs()));
        if !residual.is_finite() {
            return Err(Error::NonFinite(format!(
                "fixed-point residual at iteration {iteration}"
            )));
        }
        if residual <= opts.tol || iteration == opts.max_iter {
            let converged = residual <= opts.tol;
            debug!("fixed point (beta = {beta}): {iteration} iterations, residual {residual:e}");
            return Ok(FixedPointReport {
                policy: pi,
                residual,
                iterations: iteration,
                converged,
            });
        }
        if residual > previous && damping > DAMPING_FLOOR {
            damping = (damping * 0.5).max(DAMPING_FLOOR);
        }
        previous = residual;
        let next: Vec<f64> = pi
            .probs()
            .iter()
            .zip(image.probs())
            .map(|(a, b)| (1.0 - damping) * a + damping * b)
            .collect();
        pi = Policy::from_weights(&next)?;
    }
    unreachable!("loop returns at iteration == max_iter")
}

/// Regularised Nash equilibrium: the policy that is a best response to itself.
pub fn solve_regularised_nash(spec: &GameSpec, opts: &SolverOptions) -> Result<FixedPointReport> {
    damped_iteration(spec, 0.0, spec.ref_policy.clone(), opts)
}

pub fn solve_regularised_nash_from(spec: &GameSpec, init: &Policy, opts: &SolverOptions) -> Result<FixedPointReport> {
    damped_iteration(spec, 0.0, init.clone(), opts)
}

/// Fixed point of `π = BR(mixture(π, π_ref, β))`. At `β = 1` the map is
/// constant and one application suffices.
pub fn solve_ipo_md_fixed_point(spec: &GameSpec, beta: f64, opts: &SolverOptions) -> Result<FixedPointReport> {
    solve_ipo_md_fixed_point_from(spec, beta, &spec.ref_policy, opts)
}

pub fn solve_ipo_md_fixed_point_from(
    spec: &GameSpec,
    beta: f64,
    init: &Policy,
    opts: &SolverOptions,
) -> Result<FixedPointReport> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 1.0 {
        let policy = best_response(spec, &spec.ref_policy)?;
        let residual = fixed_point_defect(spec, 1.0, &policy)?;
        return Ok(FixedPointReport {
            policy,
            converged: residual <= opts.tol,
            residual,
            iterations: 1,
        });
    }
    damped_iteration(spec, beta, init.clone(), opts)
}

/// Mixes `π*_β` with the reference and returns its regularised-Nash defect in
/// the game with temperature `τ / (1 − β)`.
pub fn verify_modified_tau(spec: &GameSpec, beta: f64, pi_star_beta: &Policy) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!(
            "modified temperature needs beta in [0, 1), got {beta}"
        )));
    }
    let mixed = geometric_mixture(pi_star_beta, &spec.ref_policy, beta)?;
    let modified = spec.with_tau(spec.tau / (1.0 - beta))?;
    fixed_point_defect(&modified, 0.0, &mixed)
}

/// `payoff(BR(π), π) − payoff(π, π)`, evaluated as the equivalent
/// `τ KL(π ‖ BR(π))`, which is nonnegative in floating point.
pub fn exploitability(spec: &GameSpec, pi: &Policy) -> Result<f64> {
    let br = best_response(spec, pi)?;
    Ok(spec.tau * kl_divergence(pi, &br)?)
}

/// Exploitability as the literal payoff difference.
pub fn exploitability_payoff_gap(spec: &GameSpec, pi: &Policy) -> Result<f64> {
    let br = best_response(spec, pi)?;
    Ok(payoff(spec, &br, pi)? - payoff(spec, pi, pi)?)
}
