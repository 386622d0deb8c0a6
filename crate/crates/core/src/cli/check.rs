//! Self-check suites. Each check records the worst observed value over its
//! random instances and the tolerance it is held to. Informational checks
//! (the constants as printed in the source derivation) are reported but
//! never fail the suite.

use clap::ValueEnum;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{bt_stationarity_check, dpo_degeneracy_demo, online_dpo_stationarity_residual, two_action_game};
use crate::dynamics::{
    expected_update, ipo_md_gradient_from_kernel, mixture_payoff_gradient, quoted_ipo_md_gradient,
    quoted_nash_md_gradient, AlgorithmId,
};
use crate::estimators::{covariance_decomposition, exact_variance, sample_nonnegative_condition, EstimatorKind};
use crate::game::{
    geometric_mixture, kl_divergence, policy_vs_policy, seeded_rng, GameRng, GameSpec, Policy, PolicyLogits,
};
use crate::games::{self, bradley_terry_matrix, rock_paper_scissors, two_action_matrix};
use crate::losses::{
    finite_difference_gradient, population_gradient_under, population_loss_under, LossId, SamplingScheme,
};
use crate::math::{cosine_similarity, norm, relative_error, scale, sigmoid};
use crate::solvers::{
    exploitability, rlhf_closed_form, solve_ipo_md_fixed_point, solve_regularised_nash, verify_modified_tau,
    SolverOptions,
};

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradients,
    Propositions,
    Variance,
    DpoAnalysis,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// `false` for checks reported for comparison only.
    pub asserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    pub informational: usize,
    pub results: Vec<CheckResult>,
}

const MIXTURE_BETAS: [f64; 4] = [0.125, 0.25, 0.5, 0.75];

struct Recorder {
    suite: Suite,
    results: Vec<CheckResult>,
}

impl Recorder {
    fn at_most(&mut self, name: &str, observed: f64, tolerance: f64) {
        self.push(name, observed, tolerance, true);
    }

    fn info(&mut self, name: &str, observed: f64, tolerance: f64) {
        self.push(name, observed, tolerance, false);
    }

    fn push(&mut self, name: &str, observed: f64, tolerance: f64, asserted: bool) {
        self.results.push(CheckResult {
            suite: self.suite,
            name: name.to_string(),
            observed,
            tolerance,
            passed: observed <= tolerance,
            asserted,
        });
    }
}

fn random_point(rng: &mut GameRng, n: usize, tau: f64) -> (GameSpec, PolicyLogits) {
    let g = games::random_game(rng, n, tau);
    let l = PolicyLogits::from_policy(&games::random_interior_policy(rng, n)).expect("interior policy");
    (g, l)
}

fn gradients(rec: &mut Recorder, seed: u64) -> crate::Result<()> {
    let mut rng = seeded_rng(seed, 1);
    let mut worst: f64 = 0.0;
    let mut worst_nash: f64 = 0.0;
    for i in 0..20 {
        let n = 2 + i % 5;
        let tau = rng.random_range(0.2..2.0);
        let (g, l) = random_point(&mut rng, n, tau);
        let beta = rng.random_range(0.0..1.0);
        let fixed = games::random_interior_policy(&mut rng, n);
        let schemes = [
            SamplingScheme::Fixed(fixed),
            SamplingScheme::CurrentPolicy,
            SamplingScheme::GeometricMixture(beta),
        ];
        for loss in [LossId::Ipo, LossId::Dpo, LossId::Slic] {
            for s in &schemes {
                let mu = s.resolve(&l.softmax(), &g.ref_policy)?;
                let exact = population_gradient_under(loss, &l, &g, &mu)?;
                let fd = finite_difference_gradient(|x| population_loss_under(loss, x, &g, &mu), &l, 1e-5)?;
                worst = worst.max(relative_error(&exact, &fd));
            }
        }
        let opponent = geometric_mixture(&l.softmax(), &g.ref_policy, beta)?;
        let direct = mixture_payoff_gradient(&g, &l, beta)?;
        let fd = finite_difference_gradient(
            |x| {
                let p = x.softmax();
                Ok(policy_vs_policy(&g.prefs, &p, &opponent) - g.tau * kl_divergence(&p, &g.ref_policy)?)
            },
            &l,
            1e-5,
        )?;
        worst_nash = worst_nash.max(relative_error(&direct, &fd));
    }
    rec.at_most("loss_gradients_vs_finite_differences", worst, 1e-6);
    rec.at_most("mixture_payoff_gradient_vs_finite_differences", worst_nash, 1e-6);
    Ok(())
}

fn propositions(rec: &mut Recorder, seed: u64) -> crate::Result<()> {
    let mut rng = seeded_rng(seed, 2);
    let opts = SolverOptions::default();

    let (mut cos_gap, mut ratio4, mut ratio2): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for tau in [0.1, 0.5, 1.0, 5.0, 10.0] {
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let (g, l) = random_point(&mut rng, n, tau);
            let a = expected_update(&AlgorithmId::OnlineIpo, &g, &l)?;
            let b = expected_update(&AlgorithmId::SelfPlay, &g, &l)?;
            cos_gap = cos_gap.max(1.0 - cosine_similarity(&a, &b));
            let r = norm(&a) / norm(&b);
            ratio4 = ratio4.max((r * tau / 4.0 - 1.0).abs());
            ratio2 = ratio2.max((r * tau / 2.0 - 1.0).abs());
        }
    }
    rec.at_most("online_ipo_self_play_cosine_gap", cos_gap, 1e-10);
    rec.at_most("online_ipo_self_play_norm_ratio_4_over_tau", ratio4, 1e-8);
    rec.info("online_ipo_self_play_norm_ratio_2_over_tau_as_printed", ratio2, 1e-8);

    let (mut nash_asm, mut ipo_corrected, mut ipo_printed): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..20 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.1..3.0);
        let (g, l) = random_point(&mut rng, n, tau);
        for beta in MIXTURE_BETAS {
            let update = expected_update(&AlgorithmId::NashMdPg(beta), &g, &l)?;
            let assembled = scale(&quoted_nash_md_gradient(&g, &l, beta)?, -1.0);
            nash_asm = nash_asm.max(relative_error(&update, &assembled));
            let mu = SamplingScheme::GeometricMixture(beta).resolve(&l.softmax(), &g.ref_policy)?;
            let direct = population_gradient_under(LossId::Ipo, &l, &g, &mu)?;
            ipo_corrected = ipo_corrected.max(relative_error(&direct, &ipo_md_gradient_from_kernel(&g, &l, beta)?));
            ipo_printed = ipo_printed.max(relative_error(&direct, &quoted_ipo_md_gradient(&g, &l, beta)?));
        }
    }
    rec.at_most("nash_md_pg_assembled_vs_direct", nash_asm, 1e-10);
    rec.at_most("ipo_md_gradient_corrected_identity", ipo_corrected, 1e-10);
    rec.info("ipo_md_gradient_as_printed", ipo_printed, 1e-10);

    let (mut residual, mut expl): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.1..3.0);
        let g = games::random_game(&mut rng, n, tau);
        let r = solve_regularised_nash(&g, &opts)?;
        residual = residual.max(r.residual);
        expl = expl.max(exploitability(&g, &r.policy)?);
    }
    rec.at_most("nash_solver_residual", residual, 1e-12);
    rec.at_most("nash_solver_exploitability", expl, 1e-10);
    let two = GameSpec::new(two_action_matrix(0.9)?, Policy::uniform(2), 1.0)?;
    let pi = solve_regularised_nash(&two, &opts)?.policy;
    rec.at_most(
        "two_action_nash_closed_form",
        (pi.probs()[0] - sigmoid(0.4)).abs(),
        1e-9,
    );

    let (mut stationary, mut modified): (f64, f64) = (0.0, 0.0);
    let mut gamelist = vec![games::three_action_example().exchangeable()];
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let tau = rng.random_range(0.1..2.0);
        gamelist.push(games::random_game(&mut rng, n, tau));
    }
    for g in &gamelist {
        for beta in MIXTURE_BETAS {
            let fp = solve_ipo_md_fixed_point(g, beta, &opts)?.policy;
            let l = PolicyLogits::from_policy(&fp)?;
            for alg in [AlgorithmId::IpoMd(beta), AlgorithmId::NashMdPg(beta)] {
                stationary = stationary.max(norm(&expected_update(&alg, g, &l)?));
            }
            modified = modified.max(verify_modified_tau(g, beta, &fp)?);
        }
    }
    rec.at_most("mixture_fixed_point_stationary_for_both_dynamics", stationary, 1e-8);
    rec.at_most("mixture_is_nash_of_modified_tau_game", modified, 1e-8);
    Ok(())
}

fn variance(rec: &mut Recorder, seed: u64) -> crate::Result<()> {
    let mut rng = seeded_rng(seed, 3);
    let (mut means, mut cov, mut parts): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.05..2.0);
        let (g, l) = random_point(&mut rng, n, tau);
        let c = exact_variance(&g, &l, EstimatorKind::Contrastive)?;
        let nc = exact_variance(&g, &l, EstimatorKind::NonContrastive)?;
        means = means.max(crate::math::sup_norm(&crate::math::sub(&c.mean, &nc.mean)));
        let d = covariance_decomposition(&g, &l)?;
        cov = cov.max((d.cov_x1_x2 - d.cov_closed_form).abs());
        parts = parts.max((d.contrastive_from_parts - c.total_variance).abs());
    }
    for _ in 0..100 {
        let Some((g, l)) = sample_nonnegative_condition(&mut rng, 1_000_000) else {
            return Err(crate::Error::NoConvergence {
                iterations: 1_000_000,
                reason: "no configuration with a nonnegative variance condition".into(),
            });
        };
        let c = exact_variance(&g, &l, EstimatorKind::Contrastive)?;
        let nc = exact_variance(&g, &l, EstimatorKind::NonContrastive)?;
        excess = excess.max(c.total_variance - nc.total_variance);
    }
    rec.at_most("estimator_means_agree", means, 1e-12);
    rec.at_most("covariance_identity", cov, 1e-12);
    rec.at_most("contrastive_variance_from_parts", parts, 1e-12);
    rec.at_most("contrastive_minus_noncontrastive_variance_under_condition", excess, 0.0);
    Ok(())
}

fn dpo_analysis(rec: &mut Recorder, seed: u64) -> crate::Result<()> {
    let opts = SolverOptions::default();
    let mut mismatches = 0usize;
    for k in 1..20 {
        let p = k as f64 * 0.05;
        let g = GameSpec::new(two_action_game(p)?, Policy::uniform(2), 1.0)?;
        let nash = solve_regularised_nash(&g, &opts)?.policy;
        let r = online_dpo_stationarity_residual(&g.prefs, &nash)?.residuals;
        if k == 10 {
            rec.at_most("two_action_residual_at_half", r[0].abs().max(r[1].abs()), 1e-12);
            continue;
        }
        let s = (0.5 - p).signum();
        if r[0].signum() != s || r[1].signum() != -s {
            mismatches += 1;
        }
    }
    rec.at_most("two_action_residual_sign_mismatches", mismatches as f64, 0.0);

    let mut rng = seeded_rng(seed, 4);
    let mut bt: f64 = 0.0;
    for i in 0..20 {
        let n = rng.random_range(2..6);
        let tau = rng.random_range(0.1..3.0);
        let reference = games::random_interior_policy(&mut rng, n);
        let reward: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu = if i % 4 == 0 {
            rlhf_closed_form(&reference, tau, &reward)?
        } else {
            games::random_interior_policy(&mut rng, n)
        };
        bt = bt.max(bt_stationarity_check(&reference, tau, &reward, &mu)?);
    }
    rec.at_most("bradley_terry_optimum_is_dpo_stationary", bt, 1e-8);

    let rps = rock_paper_scissors();
    let rep = online_dpo_stationarity_residual(&rps.prefs, &Policy::uniform(3))?;
    rec.at_most("rock_paper_scissors_uniform_stationary", rep.max_abs, 1e-12);

    let reward = [0.4, -0.1, 0.7, -1.0];
    let reference = Policy::new(vec![0.1, 0.2, 0.3, 0.4])?;
    let spec = GameSpec::new(bradley_terry_matrix(&reward)?, reference.clone(), 0.5)?;
    let pi_dpo = rlhf_closed_form(&reference, 0.5, &reward)?;
    let mu = Policy::new(vec![0.5, 0.0, 0.3, 0.2])?;
    let mut degenerate: f64 = 0.0;
    for alpha in [0.01, 0.1, 10.0] {
        degenerate = degenerate.max(dpo_degeneracy_demo(&spec, &mu, &pi_dpo, alpha)?.dpo_gradient_norm);
    }
    rec.at_most("offline_dpo_degenerate_rescaling_gradient", degenerate, 1e-8);
    Ok(())
}

pub fn run_checks(suite: Suite, seed: u64) -> Result<CheckReport, CliError> {
    let selected: &[Suite] = match suite {
        Suite::All => &[
            Suite::Gradients,
            Suite::Propositions,
            Suite::Variance,
            Suite::DpoAnalysis,
        ],
        Suite::Gradients => &[Suite::Gradients],
        Suite::Propositions => &[Suite::Propositions],
        Suite::Variance => &[Suite::Variance],
        Suite::DpoAnalysis => &[Suite::DpoAnalysis],
    };
    let mut results = Vec::new();
    for &s in selected {
        let mut rec = Recorder {
            suite: s,
            results: Vec::new(),
        };
        match s {
            Suite::Gradients => gradients(&mut rec, seed),
            Suite::Propositions => propositions(&mut rec, seed),
            Suite::Variance => variance(&mut rec, seed),
            Suite::DpoAnalysis => dpo_analysis(&mut rec, seed),
            Suite::All => unreachable!(),
        }?;
        results.extend(rec.results);
    }
    let asserted = results.iter().filter(|r| r.asserted);
    let failed = asserted.clone().filter(|r| !r.passed).count();
    let passed = asserted.count() - failed;
    Ok(CheckReport {
        suite,
        seed,
        passed,
        failed,
        informational: results.iter().filter(|r| !r.asserted).count(),
        results,
    })
}
