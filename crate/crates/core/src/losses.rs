//! Contrastive preference losses (IPO, simplified IPO, DPO, SLiC): per-pair
//! values, exact population values by enumeration, and exact gradients with
//! respect to the softmax logits.
//!
//! Every loss is a function of the reference-normalised log-ratio margin
//!
//! ```text
//! h(y⁺, y⁻) = log π(y⁺) − log π(y⁻) − log π_ref(y⁺) + log π_ref(y⁻)
//! ```
//!
//! whose logit gradient is `e_{y⁺} − e_{y⁻}` (the policy normaliser cancels).
//! Population quantities sum over all ordered pairs `(y, y')` weighted by
//! `μ(y) μ(y')` and over both labels of the preference distribution. The
//! sampling distribution `μ` is always held fixed while differentiating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{geometric_mixture, GameSpec, LabelledPair, Policy, PolicyLogits};
use crate::math::{log_sigmoid, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    /// `(h − 1/(2τ))²`
    Ipo,
    /// `−log(π(y⁺)/π(y⁻)) + τ h²`; gradient is `τ` times the IPO gradient.
    IpoSimplified,
    /// `−log σ(τ h)`
    Dpo,
    /// `max(0, 1 − τ h)`
    Slic,
}

impl LossId {
    pub const ALL: [LossId; 4] = [LossId::Ipo, LossId::IpoSimplified, LossId::Dpo, LossId::Slic];

    /// Loss value from the margin `h` and the reference margin
    /// `log π_ref(y⁺) − log π_ref(y⁻)` (only the simplified IPO loss needs it).
    pub fn value(self, h: f64, ref_margin: f64, tau: f64) -> f64 {
        match self {
            LossId::Ipo => (h - 0.5 / tau).powi(2),
            LossId::IpoSimplified => -(h + ref_margin) + tau * h * h,
            LossId::Dpo => -log_sigmoid(tau * h),
            LossId::Slic => (1.0 - tau * h).max(0.0),
        }
    }

    /// `dL/dh`. The SLiC kink `1 − τh = 0` takes the flat branch.
    pub fn slope(self, h: f64, tau: f64) -> f64 {
        match self {
            LossId::Ipo => 2.0 * (h - 0.5 / tau),
            LossId::IpoSimplified => -1.0 + 2.0 * tau * h,
            LossId::Dpo => -tau * sigmoid(-tau * h),
            LossId::Slic => {
                if 1.0 - tau * h > 0.0 {
                    -tau
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which form of the DPO objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DpoForm {
    /// `−log σ(τh)`, minimised.
    #[default]
    NegLogSigmoid,
    /// `σ(τh)` exactly as typeset in some write-ups. Kept for comparison only;
    /// it is bounded and is not the likelihood-derived loss.
    PrintedSigmoid,
}

pub fn dpo_pair_loss(h: f64, tau: f64, form: DpoForm) -> f64 {
    match form {
        DpoForm::NegLogSigmoid => -log_sigmoid(tau * h),
        DpoForm::PrintedSigmoid => sigmoid(tau * h),
    }
}

/// Distribution that generates the pair `(Y, Y')`.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    Fixed(Policy),
    CurrentPolicy,
    GeometricMixture(f64),
}

impl SamplingScheme {
    /// Sampling distribution at the current policy.
    pub fn resolve(&self, current: &Policy, reference: &Policy) -> Result<Policy> {
        match self {
            SamplingScheme::Fixed(mu) => {
                if mu.len() != current.len() {
                    return Err(Error::Dimension(format!(
                        "sampling policy has {} entries, expected {}",
                        mu.len(),
                        current.len()
                    )));
                }
                Ok(mu.clone())
            }
            SamplingScheme::CurrentPolicy => Ok(current.clone()),
            SamplingScheme::GeometricMixture(beta) => geometric_mixture(current, reference, *beta),
        }
    }
}

/// Softmax score `∇_φ log π(y) = e_y − π`.
pub fn score(pi: &[f64], y: usize) -> Vec<f64> {
    let mut s: Vec<f64> = pi.iter().map(|p| -p).collect();
    s[y] += 1.0;
    s
}

fn log_ref(spec_ref: &Policy, y: usize) -> Result<f64> {
    let r = spec_ref.probs()[y];
    if r > 0.0 {
        Ok(r.ln())
    } else {
        Err(Error::ZeroReference(y))
    }
}

/// `(h, ref_margin)` for an ordered pair.
fn margins(log_pi: &[f64], reference: &Policy, winner: usize, loser: usize) -> Result<(f64, f64)> {
    let ref_margin = log_ref(reference, winner)? - log_ref(reference, loser)?;
    Ok((log_pi[winner] - log_pi[loser] - ref_margin, ref_margin))
}

fn check_pair(n: usize, pair: &LabelledPair) -> Result<()> {
    if pair.winner >= n || pair.loser >= n {
        return Err(Error::Dimension(format!("pair {pair:?} out of range for {n} actions")));
    }
    Ok(())
}

/// Reference-normalised log-ratio margin `h(y⁺, y⁻)`.
pub fn log_ratio_margin(logits: &PolicyLogits, reference: &Policy, pair: LabelledPair) -> Result<f64> {
    check_pair(logits.len(), &pair)?;
    Ok(margins(&logits.log_softmax(), reference, pair.winner, pair.loser)?.0)
}

pub fn pair_loss(loss: LossId, logits: &PolicyLogits, reference: &Policy, tau: f64, pair: LabelledPair) -> Result<f64> {
    check_pair(logits.len(), &pair)?;
    let (h, rm) = margins(&logits.log_softmax(), reference, pair.winner, pair.loser)?;
    Ok(loss.value(h, rm, tau))
}

/// Logit gradient of [`pair_loss`].
pub fn pair_loss_gradient(
    loss: LossId,
    logits: &PolicyLogits,
    reference: &Policy,
    tau: f64,
    pair: LabelledPair,
) -> Result<Vec<f64>> {
    check_pair(logits.len(), &pair)?;
    let (h, _) = margins(&logits.log_softmax(), reference, pair.winner, pair.loser)?;
    let mut g = vec![0.0; logits.len()];
    if pair.winner != pair.loser {
        let s = loss.slope(h, tau);
        g[pair.winner] += s;
        g[pair.loser] -= s;
    }
    Ok(g)
}

/// `p·L(y, y') + (1 − p)·L(y', y)`.
#[allow(clippy::too_many_arguments)]
pub fn expected_label_pair_loss(
    loss: LossId,
    logits: &PolicyLogits,
    reference: &Policy,
    tau: f64,
    y: usize,
    y_prime: usize,
    p_value: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_value) {
        return Err(Error::OutOfRange(format!("preference value {p_value} not in [0, 1]")));
    }
    let forward = pair_loss(loss, logits, reference, tau, LabelledPair::new(y, y_prime))?;
    let backward = pair_loss(loss, logits, reference, tau, LabelledPair::new(y_prime, y))?;
    Ok(p_value * forward + (1.0 - p_value) * backward)
}

/// Logit gradient of [`expected_label_pair_loss`].
#[allow(clippy::too_many_arguments)]
pub fn expected_label_pair_gradient(
    loss: LossId,
    logits: &PolicyLogits,
    reference: &Policy,
    tau: f64,
    y: usize,
    y_prime: usize,
    p_value: f64,
) -> Result<Vec<f64>> {
    let mut g = pair_loss_gradient(loss, logits, reference, tau, LabelledPair::new(y, y_prime))?;
    let b = pair_loss_gradient(loss, logits, reference, tau, LabelledPair::new(y_prime, y))?;
    for (a, b) in g.iter_mut().zip(&b) {
        *a = p_value * *a + (1.0 - p_value) * b;
    }
    Ok(g)
}

pub fn population_loss(loss: LossId, logits: &PolicyLogits, spec: &GameSpec, sampling: &SamplingScheme) -> Result<f64> {
    let mu = sampling.resolve(&logits.softmax(), &spec.ref_policy)?;
    population_loss_under(loss, logits, spec, &mu)
}

/// Population loss with the pair distribution `μ × μ` given explicitly.
pub fn population_loss_under(loss: LossId, logits: &PolicyLogits, spec: &GameSpec, mu: &Policy) -> Result<f64> {
    let n = spec.n();
    if logits.len() != n || mu.len() != n {
        return Err(Error::Dimension("logits, sampling policy and game disagree".into()));
    }
    let log_pi = logits.log_softmax();
    let m = mu.probs();
    let mut total = 0.0;
    for y in 0..n {
        for yp in 0..n {
            let w = m[y] * m[yp];
            if w == 0.0 {
                continue;
            }
            let p = spec.prefs.get(y, yp);
            let (h, rm) = margins(&log_pi, &spec.ref_policy, y, yp)?;
            total += w * (p * loss.value(h, rm, spec.tau) + (1.0 - p) * loss.value(-h, -rm, spec.tau));
        }
    }
    Ok(total)
}

/// Exact logit gradient of [`population_loss`] with the sampling distribution
/// frozen at the current policy. DPO uses the closed form; the other losses
/// use [`enumerated_gradient_under`].
pub fn population_gradient(
    loss: LossId,
    logits: &PolicyLogits,
    spec: &GameSpec,
    sampling: &SamplingScheme,
) -> Result<Vec<f64>> {
    let mu = sampling.resolve(&logits.softmax(), &spec.ref_policy)?;
    population_gradient_under(loss, logits, spec, &mu)
}

pub fn population_gradient_under(
    loss: LossId,
    logits: &PolicyLogits,
    spec: &GameSpec,
    mu: &Policy,
) -> Result<Vec<f64>> {
    match loss {
        LossId::Dpo => dpo_loss_logit_gradient(logits, spec, mu),
        _ => enumerated_gradient_under(loss, logits, spec, mu),
    }
}

/// Gradient by summing per-pair gradients over every ordered pair and label.
pub fn enumerated_gradient_under(
    loss: LossId,
    logits: &PolicyLogits,
    spec: &GameSpec,
    mu: &Policy,
) -> Result<Vec<f64>> {
    let n = spec.n();
    if logits.len() != n || mu.len() != n {
        return Err(Error::Dimension("logits, sampling policy and game disagree".into()));
    }
    let log_pi = logits.log_softmax();
    let m = mu.probs();
    let mut g = vec![0.0; n];
    for y in 0..n {
        for yp in 0..n {
            let w = m[y] * m[yp];
            if w == 0.0 || y == yp {
                continue;
            }
            let p = spec.prefs.get(y, yp);
            let (h, _) = margins(&log_pi, &spec.ref_policy, y, yp)?;
            // d/dh of p·L(h) + (1−p)·L(−h), then ∇h = e_y − e_y'
            let s = p * loss.slope(h, spec.tau) - (1.0 - p) * loss.slope(-h, spec.tau);
            g[y] += w * s;
            g[yp] -= w * s;
        }
    }
    Ok(g)
}

/// Gradient of the (maximised) offline DPO objective `J` with respect to the
/// probabilities themselves:
///
/// ```text
/// ∂J/∂π(y) = 2τ μ(y)/π(y) Σ_{y'} μ(y') (p̃(y ≻ y') − σ(τ h(y, y')))
/// ```
///
/// where `p̃` is the exchangeable part of the preference matrix (equal to `p`
/// for anti-symmetric matrices). Requires `π` to be interior.
pub fn dpo_objective_probability_gradient(spec: &GameSpec, pi: &Policy, mu: &Policy) -> Result<Vec<f64>> {
    pi.require_interior()?;
    let core = dpo_weighted_residuals(spec, &pi.log_probs(), mu)?;
    Ok(core.iter().zip(pi.probs()).map(|(c, p)| c / p).collect())
}

/// `2τ μ(y) Σ_{y'} μ(y') (p̃(y ≻ y') − σ(τ h(y, y')))`, i.e. `π(y)·∂J/∂π(y)`.
fn dpo_weighted_residuals(spec: &GameSpec, log_pi: &[f64], mu: &Policy) -> Result<Vec<f64>> {
    let n = spec.n();
    if log_pi.len() != n || mu.len() != n {
        return Err(Error::Dimension("policy, sampling policy and game disagree".into()));
    }
    let m = mu.probs();
    let mut out = vec![0.0; n];
    for y in 0..n {
        if m[y] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for yp in 0..n {
            if m[yp] == 0.0 {
                continue;
            }
            let (h, _) = margins(log_pi, &spec.ref_policy, y, yp)?;
            let p_tilde = 0.5 * (spec.prefs.get(y, yp) + 1.0 - spec.prefs.get(yp, y));
            acc += m[yp] * (p_tilde - sigmoid(spec.tau * h));
        }
        out[y] = 2.0 * spec.tau * m[y] * acc;
    }
    Ok(out)
}

/// Logit gradient of the DPO population loss `−J`. Because `J` depends only
/// on probability ratios, `Σ_y π(y) ∂J/∂π(y) = 0` and the softmax chain rule
/// reduces to `∂J/∂φ(y) = π(y) ∂J/∂π(y)`.
pub fn dpo_loss_logit_gradient(logits: &PolicyLogits, spec: &GameSpec, mu: &Policy) -> Result<Vec<f64>> {
    Ok(dpo_weighted_residuals(spec, &logits.log_softmax(), mu)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

/// Central differences, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, logits: &PolicyLogits, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&PolicyLogits) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::OutOfRange(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let base = logits.phi().to_vec();
    let mut g = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = f(&PolicyLogits::new(plus)?)?;
        let fm = f(&PolicyLogits::new(minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        g.push((fp - fm) / (2.0 * step));
    }
    Ok(g)
}
