//! Expected and sampled update directions for each preference-optimisation
//! algorithm, and a trajectory runner.
//!
//! Every direction returned here is an *improvement* direction in logit
//! space: the negative loss gradient for the contrastive losses, the payoff
//! ascent direction for the game-theoretic methods and the objective ascent
//! direction for regularised RLHF. The runner therefore always adds
//! `learning_rate · direction`.
//!
//! The per-action kernel shared by the mirror-descent style methods is
//!
//! ```text
//! g(y) = ∇_φ log π(y) · (p(y ≻ π′) − τ log(π(y)/π_ref(y)))
//! ```
//!
//! with `π′` the geometric mixture of `π` and `π_ref`. Its expectation under
//! `π` is the Nash-MD-PG ascent direction. Its expectation under `π′` relates
//! to the IPO-MD loss gradient through [`ipo_md_gradient_from_kernel`], which
//! carries an extra term along `π′ − π` because the score of `π` does not
//! average to zero under `π′`.

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    geometric_mixture, kl_divergence, label_pair, preference_vector, seeded_rng, GameSpec, Policy, PolicyLogits,
};
use crate::losses::{
    expected_label_pair_gradient, pair_loss_gradient, population_gradient, population_loss, score, LossId,
    SamplingScheme,
};
use crate::math::{axpy, dot, norm, scale};
use crate::solvers::{best_response, rlhf_closed_form, rlhf_objective, solve_ipo_md_fixed_point, SolverOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmId {
    OnlineIpo,
    IpoMd(f64),
    OfflineIpo(Policy),
    NashMdPg(f64),
    SelfPlay,
    OnlineDpo,
    OnlineSlic,
    RlhfPg(Vec<f64>),
}

impl AlgorithmId {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmId::OnlineIpo => "online_ipo",
            AlgorithmId::IpoMd(_) => "ipo_md",
            AlgorithmId::OfflineIpo(_) => "offline_ipo",
            AlgorithmId::NashMdPg(_) => "nash_md_pg",
            AlgorithmId::SelfPlay => "self_play",
            AlgorithmId::OnlineDpo => "online_dpo",
            AlgorithmId::OnlineSlic => "online_slic",
            AlgorithmId::RlhfPg(_) => "rlhf_pg",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            AlgorithmId::IpoMd(b) | AlgorithmId::NashMdPg(b) => Some(*b),
            _ => None,
        }
    }

    /// The contrastive loss and pair sampler, for loss-based algorithms.
    pub fn loss(&self) -> Option<(LossId, SamplingScheme)> {
        match self {
            AlgorithmId::OnlineIpo => Some((LossId::Ipo, SamplingScheme::CurrentPolicy)),
            AlgorithmId::IpoMd(b) => Some((LossId::Ipo, SamplingScheme::GeometricMixture(*b))),
            AlgorithmId::OfflineIpo(mu) => Some((LossId::Ipo, SamplingScheme::Fixed(mu.clone()))),
            AlgorithmId::OnlineDpo => Some((LossId::Dpo, SamplingScheme::CurrentPolicy)),
            AlgorithmId::OnlineSlic => Some((LossId::Slic, SamplingScheme::CurrentPolicy)),
            _ => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            AlgorithmId::IpoMd(b) | AlgorithmId::NashMdPg(b) if !(0.0..=1.0).contains(b) => {
                Err(Error::OutOfRange(format!("beta must lie in [0, 1], got {b}")))
            }
            AlgorithmId::OfflineIpo(mu) if mu.len() != n => Err(Error::Dimension(format!(
                "offline sampling policy has {} entries, game has {n} actions",
                mu.len()
            ))),
            AlgorithmId::RlhfPg(r) if r.len() != n => Err(Error::Dimension(format!(
                "reward has {} entries, game has {n} actions",
                r.len()
            ))),
            AlgorithmId::RlhfPg(r) if r.iter().any(|v| !v.is_finite()) => {
                Err(Error::NonFinite(format!("reward {r:?}")))
            }
            _ => Ok(()),
        }
    }
}

/// Whether `g` subtracts 1/2 from the preference term. The two versions have
/// the same expectation under `π`; under `π′` they differ by `(π′ − π)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelCentring {
    #[default]
    Raw,
    Centred,
}

/// Distribution under which the kernel is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelWeights {
    Current,
    Mixture,
}

struct KernelParts {
    pi: Policy,
    mixture: Policy,
    /// `p(y ≻ π′) − c − τ log(π(y)/π_ref(y))`
    advantage: Vec<f64>,
    log_ratio: Vec<f64>,
}

fn kernel_parts(spec: &GameSpec, logits: &PolicyLogits, beta: f64, centring: KernelCentring) -> Result<KernelParts> {
    if logits.len() != spec.n() {
        return Err(Error::Dimension("logits do not match the game".into()));
    }
    let pi = logits.softmax();
    let log_ratio = spec.log_ratio(&logits.log_softmax())?;
    let mixture = geometric_mixture(&pi, &spec.ref_policy, beta)?;
    let shift = match centring {
        KernelCentring::Raw => 0.0,
        KernelCentring::Centred => 0.5,
    };
    let advantage = preference_vector(&spec.prefs, &mixture)
        .iter()
        .zip(&log_ratio)
        .map(|(p, l)| p - shift - spec.tau * l)
        .collect();
    Ok(KernelParts {
        pi,
        mixture,
        advantage,
        log_ratio,
    })
}

/// `g(y)` for a single action.
pub fn gradient_kernel_g(
    spec: &GameSpec,
    logits: &PolicyLogits,
    beta: f64,
    y: usize,
    centring: KernelCentring,
) -> Result<Vec<f64>> {
    let parts = kernel_parts(spec, logits, beta, centring)?;
    if y >= spec.n() {
        return Err(Error::Dimension(format!("action {y} out of range")));
    }
    Ok(scale(&score(parts.pi.probs(), y), parts.advantage[y]))
}

/// `Σ_y w(y) g(y)` with `w = π` or `w = π′`, by enumeration.
pub fn kernel_expectation(
    spec: &GameSpec,
    logits: &PolicyLogits,
    beta: f64,
    centring: KernelCentring,
    weights: KernelWeights,
) -> Result<Vec<f64>> {
    let parts = kernel_parts(spec, logits, beta, centring)?;
    let w = match weights {
        KernelWeights::Current => parts.pi.probs(),
        KernelWeights::Mixture => parts.mixture.probs(),
    };
    let mut acc = vec![0.0; spec.n()];
    for y in 0..spec.n() {
        if w[y] > 0.0 {
            axpy(&mut acc, w[y] * parts.advantage[y], &score(parts.pi.probs(), y));
        }
    }
    Ok(acc)
}

/// `(diag π − π πᵀ) v`, the softmax Jacobian applied to `v`.
pub fn softmax_jacobian_apply(pi: &[f64], v: &[f64]) -> Vec<f64> {
    let mean = dot(pi, v);
    pi.iter().zip(v).map(|(p, x)| p * (x - mean)).collect()
}

/// Logit gradient of `φ ↦ E_{π_φ}[p(· ≻ π′)] − τ KL(π_φ ‖ π_ref)` with the
/// opponent `π′ = mixture(π, π_ref, β)` frozen, by the chain rule through the
/// softmax Jacobian.
pub fn mixture_payoff_gradient(spec: &GameSpec, logits: &PolicyLogits, beta: f64) -> Result<Vec<f64>> {
    let pi = logits.softmax();
    let opponent = geometric_mixture(&pi, &spec.ref_policy, beta)?;
    let ratio = spec.log_ratio(&logits.log_softmax())?;
    // ∂KL/∂π = log-ratio + 1; the constant is annihilated by the Jacobian
    let v: Vec<f64> = preference_vector(&spec.prefs, &opponent)
        .iter()
        .zip(&ratio)
        .map(|(p, l)| p - spec.tau * (l + 1.0))
        .collect();
    Ok(softmax_jacobian_apply(pi.probs(), &v))
}

/// Self-play ascent direction: the regularised payoff against a frozen copy of
/// the current policy.
pub fn self_play_direction(spec: &GameSpec, logits: &PolicyLogits) -> Result<Vec<f64>> {
    mixture_payoff_gradient(spec, logits, 0.0)
}

/// The IPO-MD population loss gradient assembled from the kernel:
///
/// ```text
/// ∇L = 2 [ −(2/τ) E_{π′}[g] + (π′ − π)(1/τ − 2 E_{π′}[log(π/π_ref)]) ]
/// ```
///
/// with the uncentred kernel.
pub fn ipo_md_gradient_from_kernel(spec: &GameSpec, logits: &PolicyLogits, beta: f64) -> Result<Vec<f64>> {
    let parts = kernel_parts(spec, logits, beta, KernelCentring::Raw)?;
    let eg = kernel_expectation(spec, logits, beta, KernelCentring::Raw, KernelWeights::Mixture)?;
    let tau = spec.tau;
    let mean_ratio = dot(parts.mixture.probs(), &parts.log_ratio);
    let coef = 1.0 / tau - 2.0 * mean_ratio;
    Ok(eg
        .iter()
        .zip(parts.mixture.probs().iter().zip(parts.pi.probs()))
        .map(|(g, (m, p))| 2.0 * (-(2.0 / tau) * g + (m - p) * coef))
        .collect())
}

/// The loss-gradient expressions `−(2/τ) E_{π′}[g]` (IPO-MD) and `−E_π[g]`
/// (Nash-MD-PG) in their commonly quoted form, for comparison with the exact
/// gradients.
pub fn quoted_ipo_md_gradient(spec: &GameSpec, logits: &PolicyLogits, beta: f64) -> Result<Vec<f64>> {
    let eg = kernel_expectation(spec, logits, beta, KernelCentring::Raw, KernelWeights::Mixture)?;
    Ok(scale(&eg, -2.0 / spec.tau))
}

pub fn quoted_nash_md_gradient(spec: &GameSpec, logits: &PolicyLogits, beta: f64) -> Result<Vec<f64>> {
    let eg = kernel_expectation(spec, logits, beta, KernelCentring::Raw, KernelWeights::Current)?;
    Ok(scale(&eg, -1.0))
}

/// Exact improvement direction of `algorithm` at `logits`.
pub fn expected_update(algorithm: &AlgorithmId, spec: &GameSpec, logits: &PolicyLogits) -> Result<Vec<f64>> {
    algorithm.validate(spec.n())?;
    if let Some((loss, sampling)) = algorithm.loss() {
        let g = population_gradient(loss, logits, spec, &sampling)?;
        return Ok(scale(&g, -1.0));
    }
    match algorithm {
        AlgorithmId::NashMdPg(beta) => {
            kernel_expectation(spec, logits, *beta, KernelCentring::Raw, KernelWeights::Current)
        }
        AlgorithmId::SelfPlay => self_play_direction(spec, logits),
        AlgorithmId::RlhfPg(reward) => {
            let pi = logits.softmax();
            let ratio = spec.log_ratio(&logits.log_softmax())?;
            let v: Vec<f64> = reward.iter().zip(&ratio).map(|(r, l)| r - spec.tau * l).collect();
            Ok(softmax_jacobian_apply(pi.probs(), &v))
        }
        _ => unreachable!("loss-based algorithms handled above"),
    }
}

/// Value tracked along a trajectory: the algorithm's own loss, the IPO loss
/// under the same sampler for the game-theoretic methods, and the negated
/// regularised objective for RLHF.
pub fn algorithm_loss(algorithm: &AlgorithmId, spec: &GameSpec, logits: &PolicyLogits) -> Result<f64> {
    if let Some((loss, sampling)) = algorithm.loss() {
        return population_loss(loss, logits, spec, &sampling);
    }
    match algorithm {
        AlgorithmId::NashMdPg(beta) => {
            population_loss(LossId::Ipo, logits, spec, &SamplingScheme::GeometricMixture(*beta))
        }
        AlgorithmId::SelfPlay => population_loss(LossId::Ipo, logits, spec, &SamplingScheme::CurrentPolicy),
        AlgorithmId::RlhfPg(reward) => Ok(-rlhf_objective(&spec.ref_policy, spec.tau, reward, &logits.softmax())?),
        _ => unreachable!("loss-based algorithms handled above"),
    }
}

/// How sampled pairs are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Draw the winner from the preference distribution.
    #[default]
    Sampled,
    /// Weight both orderings by `p(y ≻ y')` and `1 − p(y ≻ y')`.
    ExpectedLabel,
}

/// Minibatch estimate of [`expected_update`]. Loss-based algorithms average
/// negated per-pair gradients over pairs from their sampler. Nash-MD-PG and
/// self-play draw `y ~ π`, `y' ~ π′` and use the centred policy-gradient
/// sample `∇log π(y)·(1{y ≻ y'} − 1/2 − τ log(π(y)/π_ref(y)))`. RLHF draws
/// `y ~ π` only.
pub fn stochastic_update<R: Rng + ?Sized>(
    algorithm: &AlgorithmId,
    spec: &GameSpec,
    logits: &PolicyLogits,
    batch_size: usize,
    label_mode: LabelMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    algorithm.validate(spec.n())?;
    if batch_size == 0 {
        return Err(Error::OutOfRange("batch size must be at least 1".into()));
    }
    let n = spec.n();
    let pi = logits.softmax();
    let mut acc = vec![0.0; n];
    if let Some((loss, sampling)) = algorithm.loss() {
        let mu = sampling.resolve(&pi, &spec.ref_policy)?;
        for _ in 0..batch_size {
            let y = mu.sample(rng);
            let yp = mu.sample(rng);
            let g = match label_mode {
                LabelMode::Sampled => {
                    let pair = label_pair(&spec.prefs, y, yp, rng);
                    pair_loss_gradient(loss, logits, &spec.ref_policy, spec.tau, pair)?
                }
                LabelMode::ExpectedLabel => expected_label_pair_gradient(
                    loss,
                    logits,
                    &spec.ref_policy,
                    spec.tau,
                    y,
                    yp,
                    spec.prefs.get(y, yp),
                )?,
            };
            axpy(&mut acc, -1.0, &g);
        }
    } else {
        let ratio = spec.log_ratio(&logits.log_softmax())?;
        match algorithm {
            AlgorithmId::NashMdPg(_) | AlgorithmId::SelfPlay => {
                let beta = algorithm.beta().unwrap_or(0.0);
                let opponent = geometric_mixture(&pi, &spec.ref_policy, beta)?;
                for _ in 0..batch_size {
                    let y = pi.sample(rng);
                    let yp = opponent.sample(rng);
                    let outcome = match label_mode {
                        LabelMode::Sampled => {
                            let u: f64 = rng.random();
                            if u < spec.prefs.get(y, yp) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        LabelMode::ExpectedLabel => spec.prefs.get(y, yp),
                    };
                    axpy(&mut acc, outcome - 0.5 - spec.tau * ratio[y], &score(pi.probs(), y));
                }
            }
            AlgorithmId::RlhfPg(reward) => {
                for _ in 0..batch_size {
                    let y = pi.sample(rng);
                    axpy(&mut acc, reward[y] - spec.tau * ratio[y], &score(pi.probs(), y));
                }
            }
            _ => unreachable!("loss-based algorithms handled above"),
        }
    }
    Ok(scale(&acc, 1.0 / batch_size as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Expected,
    Stochastic { batch_size: usize, label_mode: LabelMode },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub algorithm: AlgorithmId,
    pub spec: GameSpec,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub record_every: usize,
}

impl DynamicsConfig {
    pub fn new(algorithm: AlgorithmId, spec: GameSpec, learning_rate: f64, steps: usize) -> Self {
        Self {
            algorithm,
            spec,
            learning_rate,
            steps,
            seed: 0,
            mode: Mode::Expected,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate(self.spec.n())?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::OutOfRange("steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::OutOfRange("record_every must be at least 1".into()));
        }
        if let Mode::Stochastic { batch_size: 0, .. } = self.mode {
            return Err(Error::OutOfRange("batch size must be at least 1".into()));
        }
        self.spec.ref_policy.require_interior()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub policy: Policy,
    pub population_loss: f64,
    /// Total-variation distance to the matched fixed point.
    pub nash_residual: f64,
    pub kl_to_ref: f64,
    /// Norm of the exact expected update at this policy.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub diverged: bool,
    pub matched_fixed_point: Policy,
}

impl Trajectory {
    pub fn last(&self) -> &Record {
        self.records
            .last()
            .expect("trajectories hold at least the initial record")
    }
}

/// The policy each algorithm's expected dynamics should settle at.
///
/// The contrastive losses only see the preference matrix through pairs whose
/// order is drawn from the preference distribution, so they respond to the
/// exchangeable part of the matrix. Online DPO and SLiC have no closed-form
/// rest point; their trajectories are compared with the regularised Nash
/// equilibrium of that game.
pub fn matched_fixed_point(algorithm: &AlgorithmId, spec: &GameSpec, opts: &SolverOptions) -> Result<Policy> {
    algorithm.validate(spec.n())?;
    let seen = spec.exchangeable();
    let report = match algorithm {
        AlgorithmId::OnlineIpo | AlgorithmId::OnlineDpo | AlgorithmId::OnlineSlic => {
            solve_ipo_md_fixed_point(&seen, 0.0, opts)?
        }
        AlgorithmId::IpoMd(beta) => solve_ipo_md_fixed_point(&seen, *beta, opts)?,
        AlgorithmId::OfflineIpo(mu) => return best_response(&seen, mu),
        AlgorithmId::NashMdPg(beta) => solve_ipo_md_fixed_point(spec, *beta, opts)?,
        AlgorithmId::SelfPlay => solve_ipo_md_fixed_point(spec, 0.0, opts)?,
        AlgorithmId::RlhfPg(reward) => return rlhf_closed_form(&spec.ref_policy, spec.tau, reward),
    };
    if !report.converged {
        debug!("matched fixed point unconverged, residual {:e}", report.residual);
    }
    Ok(report.policy)
}

fn record(config: &DynamicsConfig, step: usize, logits: &PolicyLogits, target: &Policy) -> Result<Record> {
    let policy = logits.softmax();
    let direction = expected_update(&config.algorithm, &config.spec, logits)?;
    Ok(Record {
        step,
        population_loss: algorithm_loss(&config.algorithm, &config.spec, logits)?,
        nash_residual: policy.tv_distance(target),
        kl_to_ref: kl_divergence(&policy, &config.spec.ref_policy)?,
        grad_norm: norm(&direction),
        policy,
    })
}

/// Iterate `φ ← canonical(φ + lr · direction)` from the reference policy.
/// Records step 0, every `record_every` steps and the final step. A
/// non-finite direction or logit stops the run and sets `diverged`.
pub fn run_dynamics(config: &DynamicsConfig) -> Result<Trajectory> {
    config.validate()?;
    let target = matched_fixed_point(&config.algorithm, &config.spec, &SolverOptions::default())?;
    let mut rng = seeded_rng(config.seed, 0);
    let mut logits = PolicyLogits::from_policy(&config.spec.ref_policy)?;
    let mut records = vec![record(config, 0, &logits, &target)?];
    let mut diverged = false;
    for step in 1..=config.steps {
        let direction = match config.mode {
            Mode::Expected => expected_update(&config.algorithm, &config.spec, &logits),
            Mode::Stochastic { batch_size, label_mode } => stochastic_update(
                &config.algorithm,
                &config.spec,
                &logits,
                batch_size,
                label_mode,
                &mut rng,
            ),
        }?;
        if direction.iter().any(|d| !d.is_finite()) {
            diverged = true;
        } else {
            match logits.stepped(&direction, config.learning_rate) {
                Ok(next) => logits = next,
                Err(Error::NonFinite(_)) => diverged = true,
                Err(e) => return Err(e),
            }
        }
        if diverged {
            info!("{} diverged at step {step}", config.algorithm.name());
            break;
        }
        if step % config.record_every == 0 || step == config.steps {
            match record(config, step, &logits, &target) {
                Ok(r) => records.push(r),
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Trajectory {
        records,
        diverged,
        matched_fixed_point: target,
    })
}
