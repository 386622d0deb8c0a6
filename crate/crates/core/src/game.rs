//! Finite-action preference games: preference matrices, simplex policies and
//! their softmax parametrisation, geometric mixtures, payoffs and the
//! labelled-pair data model.
//!
//! Actions are indexed `0..n`. All products of probabilities are formed in log
//! space so that peaked policies and mixtures with `beta` near 0 or 1 do not
//! underflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Tolerance used for anti-symmetry and simplex-sum checks.
pub const VALIDATION_TOL: f64 = 1e-12;

/// Seeded counter-based generator used by every stochastic routine.
pub type GameRng = ChaCha8Rng;

/// Build a generator for `seed`, on an independent `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> GameRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pairwise preference function `p(y ≻ y')` on `n` actions, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PreferenceMatrix {
    n: usize,
    entries: Vec<f64>,
    antisymmetric: bool,
}

impl PreferenceMatrix {
    /// Validate a preference matrix: square, `n ≥ 2`, entries in `[0, 1]`,
    /// diagonal exactly 1/2, and `p(y ≻ y') + p(y' ≻ y) = 1` within 1e-12.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self::general(rows)?;
        for i in 0..m.n {
            for j in (i + 1)..m.n {
                let (f, b) = (m.get(i, j), m.get(j, i));
                if (f + b - 1.0).abs() > VALIDATION_TOL {
                    return Err(Error::AntiSymmetry {
                        row: i,
                        col: j,
                        forward: f,
                        backward: b,
                    });
                }
            }
        }
        Ok(m)
    }

    /// Accept a matrix that need not be anti-symmetric. Only the shape, the
    /// `[0, 1]` range and the 1/2 diagonal are checked.
    ///
    /// Quantities that only involve `p(y ≻ ·)` (best responses, payoffs,
    /// policy-gradient kernels) use the entries as given. Anything built on
    /// the labelled-pair model sees [`exchangeable_part`](Self::exchangeable_part) instead.
    pub fn general(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Dimension(format!(
                "preference matrix needs at least 2 actions, got {n}"
            )));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::NotAProbability {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            if row[i] != 0.5 {
                return Err(Error::Diagonal(i, row[i]));
            }
            entries.extend_from_slice(row);
        }
        let antisymmetric =
            (0..n).all(|i| (0..n).all(|j| (entries[i * n + j] + entries[j * n + i] - 1.0).abs() <= VALIDATION_TOL));
        Ok(Self {
            n,
            entries,
            antisymmetric,
        })
    }

    /// All preferences equal to 1/2.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![vec![0.5; n]; n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `p(y ≻ y')`.
    #[inline]
    pub fn get(&self, y: usize, y_prime: usize) -> f64 {
        self.entries[y * self.n + y_prime]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.entries[y * self.n..(y + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn is_antisymmetric(&self) -> bool {
        self.antisymmetric
    }

    /// The preference induced by the labelled-pair model under exchangeable
    /// sampling, `(p(y ≻ y') + 1 − p(y' ≻ y)) / 2`. Equal to `self` when the
    /// matrix is anti-symmetric.
    pub fn exchangeable_part(&self) -> PreferenceMatrix {
        if self.antisymmetric {
            return self.clone();
        }
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = 0.5 * (self.get(i, j) + 1.0 - self.get(j, i));
            }
        }
        PreferenceMatrix {
            n,
            entries,
            antisymmetric: true,
        }
    }
}

impl TryFrom<Vec<Vec<f64>>> for PreferenceMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::general(rows)
    }
}

impl From<PreferenceMatrix> for Vec<Vec<f64>> {
    fn from(m: PreferenceMatrix) -> Self {
        m.rows()
    }
}

/// Strict validation of a raw preference matrix.
pub fn validate_preference_matrix(entries: Vec<Vec<f64>>) -> Result<PreferenceMatrix> {
    PreferenceMatrix::new(entries)
}

/// A distribution over actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Policy {
    probs: Vec<f64>,
}

impl Policy {
    /// Nonnegative finite entries summing to one within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        if let Some((i, v)) = probs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidPolicy(format!("entry {i} = {v}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > VALIDATION_TOL {
            return Err(Error::InvalidPolicy(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalise nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "weights {weights:?} cannot be normalised"
            )));
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Normalise `exp(log_weights)` via log-sum-exp.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NonFinite(format!("log-weights {log_weights:?}")));
        }
        let lse = math::log_sum_exp(log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::Unnormalisable);
        }
        Ok(Self {
            probs: log_weights.iter().map(|x| (x - lse).exp()).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, y: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[y] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    pub fn require_interior(&self) -> Result<()> {
        match self.probs.iter().enumerate().find(|(_, p)| **p <= 0.0) {
            Some((index, &value)) => Err(Error::NotInterior { index, value }),
            None => Ok(()),
        }
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    /// Total-variation distance `½ Σ |π(y) − μ(y)|`.
    pub fn tv_distance(&self, other: &Policy) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

impl TryFrom<Vec<f64>> for Policy {
    type Error = Error;
    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Policy> for Vec<f64> {
    fn from(p: Policy) -> Self {
        p.probs
    }
}

/// Unconstrained softmax parameters of an interior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLogits {
    phi: Vec<f64>,
}

impl PolicyLogits {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::Dimension("empty logits".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logits {phi:?}")));
        }
        Ok(Self { phi })
    }

    pub fn zeros(n: usize) -> Self {
        Self { phi: vec![0.0; n] }
    }

    /// Mean-zero logits of an interior policy.
    pub fn from_policy(policy: &Policy) -> Result<Self> {
        policy.require_interior()?;
        Ok(Self {
            phi: policy.log_probs(),
        }
        .canonical())
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Shift to mean zero; softmax is unchanged.
    pub fn canonical(mut self) -> Self {
        let mean = self.phi.iter().sum::<f64>() / self.phi.len() as f64;
        for x in &mut self.phi {
            *x -= mean;
        }
        self
    }

    pub fn softmax(&self) -> Policy {
        Policy {
            probs: math::softmax(&self.phi),
        }
    }

    pub fn log_softmax(&self) -> Vec<f64> {
        math::log_softmax(&self.phi)
    }

    /// `φ + step·direction`, canonicalised. Fails on non-finite results.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Result<Self> {
        let phi: Vec<f64> = self.phi.iter().zip(direction).map(|(x, d)| x + step * d).collect();
        Ok(Self::new(phi)?.canonical())
    }
}

/// Softmax of a logit vector.
pub fn softmax(logits: &PolicyLogits) -> Policy {
    logits.softmax()
}

/// Preference matrix, reference policy and regularisation temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub prefs: PreferenceMatrix,
    pub ref_policy: Policy,
    pub tau: f64,
}

impl GameSpec {
    pub fn new(prefs: PreferenceMatrix, ref_policy: Policy, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::OutOfRange(format!("tau must be positive, got {tau}")));
        }
        if ref_policy.len() != prefs.n() {
            return Err(Error::Dimension(format!(
                "reference policy has {} entries, preference matrix has {} actions",
                ref_policy.len(),
                prefs.n()
            )));
        }
        Ok(Self { prefs, ref_policy, tau })
    }

    pub fn n(&self) -> usize {
        self.prefs.n()
    }

    /// Same game with a different temperature.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.prefs.clone(), self.ref_policy.clone(), tau)
    }

    /// Same game seen through the labelled-pair model.
    pub fn exchangeable(&self) -> Self {
        Self {
            prefs: self.prefs.exchangeable_part(),
            ref_policy: self.ref_policy.clone(),
            tau: self.tau,
        }
    }

    /// `log(π(y) / π^ref(y))` for every action, erroring on a zero reference entry.
    pub fn log_ratio(&self, log_pi: &[f64]) -> Result<Vec<f64>> {
        self.ref_policy
            .probs()
            .iter()
            .zip(log_pi)
            .enumerate()
            .map(|(y, (&r, &lp))| {
                if r > 0.0 {
                    Ok(lp - r.ln())
                } else {
                    Err(Error::ZeroReference(y))
                }
            })
            .collect()
    }
}

/// An ordered (winner, loser) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledPair {
    pub winner: usize,
    pub loser: usize,
}

impl LabelledPair {
    pub fn new(winner: usize, loser: usize) -> Self {
        Self { winner, loser }
    }
}

fn check_len(what: &str, got: usize, n: usize) -> Result<()> {
    if got != n {
        return Err(Error::Dimension(format!("{what} has {got} entries, expected {n}")));
    }
    Ok(())
}

/// Normalised `π^{1−β}·ref^β`, formed in log space.
pub fn geometric_mixture(pi: &Policy, reference: &Policy, beta: f64) -> Result<Policy> {
    check_len("reference", reference.len(), pi.len())?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("beta must lie in [0, 1], got {beta}")));
    }
    let weights: Vec<f64> = pi
        .probs()
        .iter()
        .zip(reference.probs())
        .map(|(&p, &r)| {
            let a = if beta == 1.0 { 0.0 } else { (1.0 - beta) * p.ln() };
            let b = if beta == 0.0 { 0.0 } else { beta * r.ln() };
            // a zero entry on a side with positive weight removes the action
            if (beta < 1.0 && p == 0.0) || (beta > 0.0 && r == 0.0) {
                f64::NEG_INFINITY
            } else {
                a + b
            }
        })
        .collect();
    Policy::from_log_weights(&weights)
}

/// `p(y ≻ μ) = Σ_{y'} μ(y') p(y ≻ y')`.
pub fn preference_vs_policy(prefs: &PreferenceMatrix, y: usize, mu: &Policy) -> f64 {
    math::dot(prefs.row(y), mu.probs())
}

/// `p(y ≻ μ)` for every `y`.
pub fn preference_vector(prefs: &PreferenceMatrix, mu: &Policy) -> Vec<f64> {
    (0..prefs.n()).map(|y| preference_vs_policy(prefs, y, mu)).collect()
}

/// `Σ_y π(y) p(y ≻ μ)`.
pub fn policy_vs_policy(prefs: &PreferenceMatrix, pi: &Policy, mu: &Policy) -> f64 {
    math::dot(pi.probs(), &preference_vector(prefs, mu))
}

/// `KL(π ‖ ref)`; zero-mass terms of `π` contribute nothing.
pub fn kl_divergence(pi: &Policy, reference: &Policy) -> Result<f64> {
    check_len("reference", reference.len(), pi.len())?;
    let mut kl = 0.0;
    for (y, (&p, &r)) in pi.probs().iter().zip(reference.probs()).enumerate() {
        if p > 0.0 {
            if r <= 0.0 {
                return Err(Error::InfiniteKl(y));
            }
            kl += p * (p.ln() - r.ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Player-one payoff of the regularised game.
pub fn payoff(spec: &GameSpec, pi1: &Policy, pi2: &Policy) -> Result<f64> {
    let kl1 = kl_divergence(pi1, &spec.ref_policy)?;
    let kl2 = kl_divergence(pi2, &spec.ref_policy)?;
    Ok(policy_vs_policy(&spec.prefs, pi1, pi2) - spec.tau * kl1 + spec.tau * kl2)
}

/// Draw `Y ~ μ`, `Y' ~ μ'` and order them with the preference distribution.
pub fn sample_labelled_pair<R: Rng + ?Sized>(
    prefs: &PreferenceMatrix,
    mu: &Policy,
    mu_prime: &Policy,
    rng: &mut R,
) -> LabelledPair {
    let y = mu.sample(rng);
    let y_prime = mu_prime.sample(rng);
    label_pair(prefs, y, y_prime, rng)
}

/// Order an already-drawn pair: `(y, y')` with probability `p(y ≻ y')`.
pub fn label_pair<R: Rng + ?Sized>(prefs: &PreferenceMatrix, y: usize, y_prime: usize, rng: &mut R) -> LabelledPair {
    let u: f64 = rng.random();
    if u < prefs.get(y, y_prime) {
        LabelledPair::new(y, y_prime)
    } else {
        LabelledPair::new(y_prime, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn validation_accepts_and_rejects() {
        assert!(PreferenceMatrix::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).is_ok());
        let err = PreferenceMatrix::new(vec![vec![0.5, 0.7], vec![0.4, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::AntiSymmetry { row: 0, col: 1, .. }));
        assert!(matches!(
            PreferenceMatrix::new(vec![vec![0.5, 0.5, 0.5], vec![0.5, 0.5]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            PreferenceMatrix::new(vec![vec![0.5, 1.2], vec![-0.2, 0.5]]),
            Err(Error::NotAProbability { .. })
        ));
        assert!(matches!(
            PreferenceMatrix::new(vec![vec![0.5]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            PreferenceMatrix::new(vec![vec![0.4, 0.5], vec![0.5, 0.5]]),
            Err(Error::Diagonal(0, _))
        ));
    }

    #[test]
    fn printed_three_action_matrix_is_not_antisymmetric() {
        let rows = games::THREE_ACTION_EXAMPLE
            .iter()
            .map(|r| r.to_vec())
            .collect::<Vec<_>>();
        assert!(matches!(
            validate_preference_matrix(rows.clone()),
            Err(Error::AntiSymmetry { row: 0, col: 1, .. })
        ));
        let general = PreferenceMatrix::general(rows).unwrap();
        assert!(!general.is_antisymmetric());
        let ex = general.exchangeable_part();
        assert!(ex.is_antisymmetric());
        assert!(close(ex.get(0, 1), 0.85, 1e-15));
        assert!(close(ex.get(2, 0), 0.9, 1e-15));
    }

    #[test]
    fn geometric_mixture_examples() {
        let pi = Policy::new(vec![0.8, 0.2]).unwrap();
        let r = Policy::uniform(2);
        let m = geometric_mixture(&pi, &r, 0.5).unwrap();
        assert!(close(m.probs()[0], 2.0 / 3.0, 1e-15));
        assert!(close(m.probs()[1], 1.0 / 3.0, 1e-15));
        assert_eq!(geometric_mixture(&pi, &r, 0.0).unwrap(), pi);
        assert_eq!(geometric_mixture(&pi, &r, 1.0).unwrap(), r);
        assert!(geometric_mixture(&pi, &r, 1.5).is_err());
        // β = 1 ignores zeros in π, β = 0 ignores zeros in ref
        let degenerate = Policy::point_mass(2, 0);
        assert_eq!(geometric_mixture(&degenerate, &r, 1.0).unwrap(), r);
        let a = Policy::point_mass(2, 0);
        let b = Policy::point_mass(2, 1);
        assert_eq!(geometric_mixture(&a, &b, 0.5), Err(Error::Unnormalisable));
    }

    #[test]
    fn preference_vs_policy_examples() {
        let g = games::three_action_example();
        let u = Policy::uniform(3);
        assert!(close(preference_vs_policy(&g.prefs, 2, &u), 0.5, 1e-15));
        let flat = PreferenceMatrix::uniform(4).unwrap();
        let mu = Policy::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(close(preference_vs_policy(&flat, 1, &mu), 0.5, 1e-15));
        for y in 0..3 {
            for yp in 0..3 {
                let v = preference_vs_policy(&g.prefs, y, &Policy::point_mass(3, yp));
                assert_eq!(v, g.prefs.get(y, yp));
            }
        }
    }

    #[test]
    fn policy_vs_policy_examples() {
        let g = games::rock_paper_scissors();
        let pi = Policy::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert!(close(policy_vs_policy(&g.prefs, &pi, &pi), 0.5, 1e-15));
        let a = Policy::point_mass(3, 0);
        let b = Policy::point_mass(3, 1);
        assert_eq!(policy_vs_policy(&g.prefs, &a, &b), g.prefs.get(0, 1));
        // the printed three-action matrix is not anti-symmetric, so the
        // self-match value is its mean entry 4.3/9 rather than 1/2
        let d = games::three_action_example();
        let u = Policy::uniform(3);
        assert!(close(policy_vs_policy(&d.prefs, &u, &u), 4.3 / 9.0, 1e-15));
        let ex = d.prefs.exchangeable_part();
        assert!(close(policy_vs_policy(&ex, &u, &u), 0.5, 1e-15));
    }

    #[test]
    fn kl_examples() {
        let r = Policy::uniform(2);
        assert_eq!(kl_divergence(&r, &r).unwrap(), 0.0);
        let kl = kl_divergence(&Policy::point_mass(2, 0), &r).unwrap();
        assert!(close(kl, std::f64::consts::LN_2, 1e-15));
        assert_eq!(kl_divergence(&r, &Policy::point_mass(2, 0)), Err(Error::InfiniteKl(1)));
    }

    #[test]
    fn payoff_examples() {
        let d = games::three_action_example();
        let u = Policy::uniform(3);
        let pm = Policy::point_mass(3, 0);
        let v = payoff(&d, &u, &pm).unwrap();
        assert!(close(v, 0.5 + 0.1 * 3f64.ln(), 1e-12), "{v}");
        assert!(close(v, 0.609861, 1e-6));
        let g = games::random_game(&mut seeded_rng(3, 0), 4, 0.7);
        let a = Policy::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Policy::new(vec![0.4, 0.4, 0.1, 0.1]).unwrap();
        assert!(close(payoff(&g, &a, &a).unwrap(), 0.5, 1e-15));
        let s = payoff(&g, &a, &b).unwrap() + payoff(&g, &b, &a).unwrap();
        assert!(close(s, 1.0, 1e-12));
    }

    #[test]
    fn sampling_deterministic_preference() {
        let prefs = PreferenceMatrix::new(vec![vec![0.5, 1.0], vec![0.0, 0.5]]).unwrap();
        let mut rng = seeded_rng(1, 0);
        for _ in 0..1000 {
            let p = sample_labelled_pair(&prefs, &Policy::point_mass(2, 0), &Policy::point_mass(2, 1), &mut rng);
            assert_eq!(p, LabelledPair::new(0, 1));
        }
    }

    #[test]
    fn sampling_uniform_preferences_is_a_fair_coin() {
        let prefs = PreferenceMatrix::uniform(3).unwrap();
        let mu = Policy::new(vec![0.6, 0.3, 0.1]).unwrap();
        let nu = Policy::new(vec![0.1, 0.1, 0.8]).unwrap();
        let n = 200_000;
        let mut counts = [0usize; 3];
        let mut rng = seeded_rng(7, 0);
        for _ in 0..n {
            counts[sample_labelled_pair(&prefs, &mu, &nu, &mut rng).winner] += 1;
        }
        for y in 0..3 {
            let expected = 0.5 * (mu.probs()[y] + nu.probs()[y]);
            let freq = counts[y] as f64 / n as f64;
            let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!((freq - expected).abs() <= 4.0 * sigma, "{y}: {freq} vs {expected}");
        }
    }

    #[test]
    fn sampling_matches_enumerated_winner_marginal() {
        let d = games::three_action_example();
        let u = Policy::uniform(3);
        // exact: sum λ_p over the 9 ordered pairs
        let mut exact = [0.0; 3];
        for y in 0..3 {
            for yp in 0..3 {
                let w = 1.0 / 9.0;
                exact[y] += w * d.prefs.get(y, yp);
                exact[yp] += w * (1.0 - d.prefs.get(y, yp));
            }
        }
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        let mut rng = seeded_rng(11, 0);
        for _ in 0..n {
            counts[sample_labelled_pair(&d.prefs, &u, &u, &mut rng).winner] += 1;
        }
        for y in 0..3 {
            let freq = counts[y] as f64 / n as f64;
            let sigma = (exact[y] * (1.0 - exact[y]) / n as f64).sqrt();
            assert!((freq - exact[y]).abs() <= 3.0 * sigma, "{y}: {freq} vs {}", exact[y]);
        }
        assert!(close(exact[2], (0.9 + 0.1 + 0.5 + 0.9 + 0.2 + 0.5) / 9.0, 1e-15));
    }

    #[test]
    fn fixed_pair_label_rate() {
        let g = games::random_game(&mut seeded_rng(5, 0), 4, 1.0);
        let mut rng = seeded_rng(5, 1);
        for (y, yp) in [(0, 1), (2, 3), (3, 0)] {
            let p = g.prefs.get(y, yp);
            let n = 100_000;
            let wins = (0..n)
                .filter(|_| label_pair(&g.prefs, y, yp, &mut rng).winner == y)
                .count();
            assert!((wins as f64 / n as f64 - p).abs() <= 5e-3);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let d = games::three_action_example();
        let u = Policy::uniform(3);
        let draw = |seed| {
            let mut rng = seeded_rng(seed, 2);
            (0..50)
                .map(|_| sample_labelled_pair(&d.prefs, &u, &u, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn logits_canonical_and_roundtrip() {
        let l = PolicyLogits::new(vec![1.0, 2.0, 6.0]).unwrap().canonical();
        assert!(l.phi().iter().sum::<f64>().abs() < 1e-15);
        let p = l.softmax();
        let back = PolicyLogits::from_policy(&p).unwrap();
        for (a, b) in back.phi().iter().zip(l.phi()) {
            assert!(close(*a, *b, 1e-12));
        }
        assert!(PolicyLogits::new(vec![f64::NAN, 0.0]).is_err());
    }

    fn interior(n: usize) -> impl Strategy<Value = Policy> {
        prop::collection::vec(0.05f64..1.0, n).prop_map(|w| Policy::from_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn prop_constant_sum(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = seeded_rng(seed, 0);
            let g = games::random_game(&mut rng, n, 1.0);
            let pi = games::random_interior_policy(&mut rng, n);
            let mu = games::random_interior_policy(&mut rng, n);
            let s = policy_vs_policy(&g.prefs, &pi, &mu) + policy_vs_policy(&g.prefs, &mu, &pi);
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn prop_mixture_of_reference_with_itself(r in interior(4), beta in 0.0f64..=1.0) {
            let m = geometric_mixture(&r, &r, beta).unwrap();
            prop_assert!(m.tv_distance(&r) <= 1e-12);
        }

        #[test]
        fn prop_mixture_exchange_symmetry(a in interior(5), b in interior(5), beta in 0.0f64..=1.0) {
            let m1 = geometric_mixture(&a, &b, beta).unwrap();
            let m2 = geometric_mixture(&b, &a, 1.0 - beta).unwrap();
            for (x, y) in m1.probs().iter().zip(m2.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_kl_nonnegative(a in interior(4), b in interior(4)) {
            let kl = kl_divergence(&a, &b).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&a, &a).unwrap().abs() <= 1e-15);
            if a.tv_distance(&b) > 1e-6 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
