//! Single-pair gradient estimates for the self-play objective, their exact and
//! Monte Carlo variances, and Bradley-Terry reward fitting.
//!
//! With `s(y) = ∇_φ log π(y)` and the pair kernel
//!
//! ```text
//! f(y, y') = p(y ≻ y') − 1/2 − τ log(π(y)/π_ref(y)) + τ log(π(y')/π_ref(y'))
//! ```
//!
//! the non-contrastive estimate is `−s(y) f(y, y')` and the contrastive one is
//! `−½ (s(y) − s(y')) f(y, y')`, for `y, y'` drawn independently from `π`.
//! Variances of vector estimates are reported as the trace `E‖ĝ − Eĝ‖²`
//! together with the per-coordinate values.

use petgraph::algo::kosaraju_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameSpec, LabelledPair, PolicyLogits};
use crate::games;
use crate::losses::score;
use crate::math::{axpy, dot, log_sigmoid, sigmoid, sup_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Contrastive,
    NonContrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateStats {
    pub mean: Vec<f64>,
    pub total_variance: f64,
    pub per_coordinate_variance: Vec<f64>,
    /// Number of enumerated outcomes (exact) or samples (Monte Carlo).
    pub n_outcomes_or_samples: usize,
    pub exact: bool,
}

/// `f(y, y')` for every ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceKernel {
    n: usize,
    f_values: Vec<f64>,
}

impl VarianceKernel {
    pub fn new(spec: &GameSpec, logits: &PolicyLogits) -> Result<Self> {
        let n = spec.n();
        if logits.len() != n {
            return Err(Error::Dimension("logits do not match the game".into()));
        }
        let ratio = spec.log_ratio(&logits.log_softmax())?;
        let mut f_values = vec![0.0; n * n];
        for y in 0..n {
            for yp in 0..n {
                f_values[y * n + yp] = spec.prefs.get(y, yp) - 0.5 - spec.tau * ratio[y] + spec.tau * ratio[yp];
            }
        }
        Ok(Self { n, f_values })
    }

    #[inline]
    pub fn get(&self, y: usize, y_prime: usize) -> f64 {
        self.f_values[y * self.n + y_prime]
    }

    /// Largest `|f(y, y') + f(y', y)|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for y in 0..self.n {
            for yp in 0..self.n {
                worst = worst.max((self.get(y, yp) + self.get(yp, y)).abs());
            }
        }
        worst
    }
}

fn estimate_with(kernel: &VarianceKernel, pi: &[f64], which: EstimatorKind, y: usize, yp: usize) -> Vec<f64> {
    let f = kernel.get(y, yp);
    match which {
        EstimatorKind::NonContrastive => score(pi, y).into_iter().map(|s| -s * f).collect(),
        EstimatorKind::Contrastive => score(pi, y)
            .into_iter()
            .zip(score(pi, yp))
            .map(|(a, b)| -0.5 * (a - b) * f)
            .collect(),
    }
}

fn check_action(n: usize, y: usize) -> Result<()> {
    if y >= n {
        return Err(Error::Dimension(format!("action {y} out of range for {n} actions")));
    }
    Ok(())
}

/// `−s(y) f(y, y')`.
pub fn noncontrastive_estimate(spec: &GameSpec, logits: &PolicyLogits, y: usize, y_prime: usize) -> Result<Vec<f64>> {
    check_action(spec.n(), y)?;
    check_action(spec.n(), y_prime)?;
    let k = VarianceKernel::new(spec, logits)?;
    Ok(estimate_with(
        &k,
        logits.softmax().probs(),
        EstimatorKind::NonContrastive,
        y,
        y_prime,
    ))
}

/// `−½ (s(y) − s(y')) f(y, y')`.
pub fn contrastive_estimate(spec: &GameSpec, logits: &PolicyLogits, y: usize, y_prime: usize) -> Result<Vec<f64>> {
    check_action(spec.n(), y)?;
    check_action(spec.n(), y_prime)?;
    let k = VarianceKernel::new(spec, logits)?;
    Ok(estimate_with(
        &k,
        logits.softmax().probs(),
        EstimatorKind::Contrastive,
        y,
        y_prime,
    ))
}

/// Exact mean and variance over `(y, y') ~ π × π` by enumeration.
pub fn exact_variance(spec: &GameSpec, logits: &PolicyLogits, which: EstimatorKind) -> Result<EstimateStats> {
    let n = spec.n();
    let kernel = VarianceKernel::new(spec, logits)?;
    let pi = logits.softmax();
    let p = pi.probs();
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for y in 0..n {
        for yp in 0..n {
            let w = p[y] * p[yp];
            let e = estimate_with(&kernel, p, which, y, yp);
            axpy(&mut mean, w, &e);
            for i in 0..n {
                second[i] += w * e[i] * e[i];
            }
        }
    }
    let per: Vec<f64> = second.iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
    Ok(EstimateStats {
        total_variance: per.iter().sum(),
        per_coordinate_variance: per,
        mean,
        n_outcomes_or_samples: n * n,
        exact: true,
    })
}

/// Sample mean and (unbiased) sample variance from `samples` independent pairs.
pub fn monte_carlo_variance<R: Rng + ?Sized>(
    spec: &GameSpec,
    logits: &PolicyLogits,
    which: EstimatorKind,
    samples: usize,
    rng: &mut R,
) -> Result<EstimateStats> {
    if samples < 2 {
        return Err(Error::OutOfRange(
            "Monte Carlo variance needs at least 2 samples".into(),
        ));
    }
    let n = spec.n();
    let kernel = VarianceKernel::new(spec, logits)?;
    let pi = logits.softmax();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    // Welford accumulation
    for k in 1..=samples {
        let y = pi.sample(rng);
        let yp = pi.sample(rng);
        let e = estimate_with(&kernel, pi.probs(), which, y, yp);
        for i in 0..n {
            let delta = e[i] - mean[i];
            mean[i] += delta / k as f64;
            m2[i] += delta * (e[i] - mean[i]);
        }
    }
    let per: Vec<f64> = m2.iter().map(|v| v / (samples - 1) as f64).collect();
    Ok(EstimateStats {
        total_variance: per.iter().sum(),
        per_coordinate_variance: per,
        mean,
        n_outcomes_or_samples: samples,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCondition {
    /// `E[⟨s(y), s(y')⟩ f(y, y')²]`; contrastive variance is no larger when `≥ 0`.
    pub value: f64,
    /// `E[s_i(y) s_i(y') f(y, y')²]` per coordinate.
    pub per_coordinate: Vec<f64>,
}

pub fn variance_condition(spec: &GameSpec, logits: &PolicyLogits) -> Result<VarianceCondition> {
    let n = spec.n();
    let kernel = VarianceKernel::new(spec, logits)?;
    let pi = logits.softmax();
    let p = pi.probs();
    let mut per = vec![0.0; n];
    for y in 0..n {
        let sy = score(p, y);
        for yp in 0..n {
            let w = p[y] * p[yp] * kernel.get(y, yp).powi(2);
            let syp = score(p, yp);
            for i in 0..n {
                per[i] += w * sy[i] * syp[i];
            }
        }
    }
    Ok(VarianceCondition {
        value: per.iter().sum(),
        per_coordinate: per,
    })
}

/// Draw random games and peaked policies (`n ∈ 3..6`, logits uniform on
/// `[−3, 3]`) until the variance condition is nonnegative. `None` after
/// `max_tries` draws.
pub fn sample_nonnegative_condition<R: Rng + ?Sized>(
    rng: &mut R,
    max_tries: usize,
) -> Option<(GameSpec, PolicyLogits)> {
    for _ in 0..max_tries {
        let n = rng.random_range(3..6);
        let tau = rng.random_range(0.05..2.0);
        let g = games::random_game(rng, n, tau);
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l = PolicyLogits::new(phi).ok()?.canonical();
        if variance_condition(&g, &l).ok()?.value >= 0.0 {
            return Some((g, l));
        }
    }
    None
}

/// Pieces of the variance comparison with `X₁ = −s(y) f(y, y')` and
/// `X₂ = s(y') f(y, y')`, so the contrastive estimate is `(X₁ + X₂)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDecomposition {
    /// Trace variance of `X₁` (the non-contrastive estimate).
    pub var_x1: f64,
    /// Trace covariance `E⟨X₁, X₂⟩ − ⟨E X₁, E X₂⟩`, enumerated directly.
    pub cov_x1_x2: f64,
    /// `−E[⟨s(y), s(y')⟩ f²] − ‖c‖²` with `c = E[s(y) f(y, y')]`.
    pub cov_closed_form: f64,
    /// `½ (var_x1 + cov_x1_x2)`.
    pub contrastive_from_parts: f64,
}

pub fn covariance_decomposition(spec: &GameSpec, logits: &PolicyLogits) -> Result<CovarianceDecomposition> {
    let n = spec.n();
    let kernel = VarianceKernel::new(spec, logits)?;
    let pi = logits.softmax();
    let p = pi.probs();
    let mut ex1 = vec![0.0; n];
    let mut ex2 = vec![0.0; n];
    let mut cross = 0.0;
    let mut c = vec![0.0; n];
    for y in 0..n {
        for yp in 0..n {
            let w = p[y] * p[yp];
            let f = kernel.get(y, yp);
            let sy = score(p, y);
            let syp = score(p, yp);
            axpy(&mut ex1, -w * f, &sy);
            axpy(&mut ex2, w * f, &syp);
            axpy(&mut c, w * f, &sy);
            cross += w * (-f * f) * dot(&sy, &syp);
        }
    }
    let var_x1 = exact_variance(spec, logits, EstimatorKind::NonContrastive)?.total_variance;
    let cov_x1_x2 = cross - dot(&ex1, &ex2);
    let cov_closed_form = cross - dot(&c, &c);
    Ok(CovarianceDecomposition {
        var_x1,
        cov_x1_x2,
        cov_closed_form,
        contrastive_from_parts: 0.5 * (var_x1 + cov_x1_x2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BradleyTerryOptions {
    /// L2 penalty `(λ/2)‖r‖²`.
    pub regulariser: f64,
    pub max_iter: usize,
    /// Stop when the sup-norm of the gradient falls below this.
    pub tol: f64,
}

impl Default for BradleyTerryOptions {
    fn default() -> Self {
        Self {
            regulariser: 0.0,
            max_iter: 1_000_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BradleyTerryFit {
    /// Rewards gauge-fixed to sum to zero.
    pub rewards: Vec<f64>,
    pub iterations: usize,
    /// Penalised mean log-likelihood after each iteration, starting at `r = 0`.
    pub log_likelihood_trace: Vec<f64>,
}

/// Maximum-likelihood Bradley-Terry rewards with the default options and the
/// given L2 regulariser.
pub fn fit_bradley_terry(samples: &[LabelledPair], n: usize, regulariser: f64) -> Result<Vec<f64>> {
    let opts = BradleyTerryOptions {
        regulariser,
        ..BradleyTerryOptions::default()
    };
    Ok(fit_bradley_terry_with(samples, n, &opts)?.rewards)
}

/// Gradient ascent on `(1/N) Σ log σ(r(y⁺) − r(y⁻)) − (λ/2)‖r‖²` with step
/// `1/(1/2 + λ)`, the inverse of a bound on the Hessian norm, which makes every
/// step non-decreasing in the objective.
///
/// Without regularisation the maximiser exists only when the win graph on the
/// observed actions is strongly connected; otherwise [`Error::Separable`].
pub fn fit_bradley_terry_with(
    samples: &[LabelledPair],
    n: usize,
    opts: &BradleyTerryOptions,
) -> Result<BradleyTerryFit> {
    if samples.is_empty() {
        return Err(Error::OutOfRange("Bradley-Terry fit needs at least one sample".into()));
    }
    if !(opts.regulariser >= 0.0 && opts.regulariser.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "regulariser must be >= 0, got {}",
            opts.regulariser
        )));
    }
    let mut wins = vec![0.0; n * n];
    for s in samples {
        if s.winner >= n || s.loser >= n {
            return Err(Error::Dimension(format!("sample {s:?} out of range for {n} actions")));
        }
        if s.winner != s.loser {
            wins[s.winner * n + s.loser] += 1.0;
        }
    }
    if opts.regulariser == 0.0 && is_separable(&wins, n) {
        return Err(Error::Separable);
    }
    let total = samples.len() as f64;
    let lambda = opts.regulariser;
    let objective = |r: &[f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = wins[i * n + j];
                if w > 0.0 {
                    ll += w * log_sigmoid(r[i] - r[j]);
                }
            }
        }
        ll / total - 0.5 * lambda * dot(r, r)
    };
    let step = 1.0 / (0.5 + lambda);
    let mut r = vec![0.0; n];
    let mut trace = vec![objective(&r)];
    for iteration in 1..=opts.max_iter {
        let mut grad: Vec<f64> = r.iter().map(|v| -lambda * v).collect();
        for i in 0..n {
            for j in 0..n {
                let w = wins[i * n + j];
                if w > 0.0 {
                    let g = w / total * sigmoid(r[j] - r[i]);
                    grad[i] += g;
                    grad[j] -= g;
                }
            }
        }
        if sup_norm(&grad) <= opts.tol {
            return Ok(BradleyTerryFit {
                rewards: centred(r),
                iterations: iteration - 1,
                log_likelihood_trace: trace,
            });
        }
        axpy(&mut r, step, &grad);
        trace.push(objective(&r));
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        reason: "Bradley-Terry gradient did not vanish".into(),
    })
}

fn centred(mut r: Vec<f64>) -> Vec<f64> {
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    for v in &mut r {
        *v -= mean;
    }
    r
}

/// True when the observed actions split into more than one strongly
/// connected component of the "beat at least once" graph.
fn is_separable(wins: &[f64], n: usize) -> bool {
    let observed: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| wins[i * n + j] > 0.0 || wins[j * n + i] > 0.0))
        .collect();
    let mut graph = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = observed.iter().map(|&i| graph.add_node(i)).collect();
    for (a, &i) in observed.iter().enumerate() {
        for (b, &j) in observed.iter().enumerate() {
            if wins[i * n + j] > 0.0 {
                graph.add_edge(nodes[a], nodes[b], ());
            }
        }
    }
    kosaraju_scc(&graph).len() > 1
}
