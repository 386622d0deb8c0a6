//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! observed values and then asserts. Run with
//! `cargo test --test acceptance -- --nocapture --test-threads 1`.

use std::time::Instant;

use prefgame::analysis::{
    bt_stationarity_check, dpo_degeneracy_demo, online_dpo_stationarity_residual, two_action_game, two_action_residuals,
};
use prefgame::cli::{reproduce_appendix_d, run_experiment, AppendixDOptions, ExperimentConfig};
use prefgame::dynamics::{
    expected_update, mixture_payoff_gradient, quoted_ipo_md_gradient, quoted_nash_md_gradient, stochastic_update,
    AlgorithmId, LabelMode,
};
use prefgame::estimators::{
    contrastive_estimate, covariance_decomposition, exact_variance, fit_bradley_terry, noncontrastive_estimate,
    sample_nonnegative_condition, EstimatorKind,
};
use prefgame::game::{
    geometric_mixture, label_pair, preference_vector, seeded_rng, GameRng, GameSpec, LabelledPair, Policy,
    PolicyLogits, PreferenceMatrix,
};
use prefgame::games::{self, bradley_terry_matrix, rock_paper_scissors, three_action_example, two_action_matrix};
use prefgame::losses::{
    finite_difference_gradient, population_gradient, population_gradient_under, population_loss_under, LossId,
    SamplingScheme,
};
use prefgame::math::{cosine_similarity, log_sum_exp, norm, relative_error, sigmoid};
use prefgame::solvers::{rlhf_closed_form, solve_ipo_md_fixed_point, solve_regularised_nash, SolverOptions};
use rand::Rng;

const MIXTURE_BETAS: [f64; 4] = [0.125, 0.25, 0.5, 0.75];

fn verdict(id: u32, title: &str, pass: bool, detail: String) {
    println!("{} [{id:02}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn random_point(rng: &mut GameRng, n: usize, tau: f64) -> (GameSpec, PolicyLogits) {
    let g = games::random_game(rng, n, tau);
    let l = PolicyLogits::from_policy(&games::random_interior_policy(rng, n)).unwrap();
    (g, l)
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `max_π' [p(π' ≻ π) − τ KL(π'‖π_ref)] − [p(π ≻ π) − τ KL(π‖π_ref)]`, with
/// the maximum from the log-partition function.
fn exploitability_oracle(g: &GameSpec, pi: &Policy) -> f64 {
    let v = preference_vector(&g.prefs, pi);
    let r = g.ref_policy.probs();
    let logz: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r.ln() + v / g.tau).collect();
    let best = g.tau * log_sum_exp(&logz);
    let p = pi.probs();
    let own: f64 = p.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        - g.tau
            * p.iter()
                .zip(r)
                .map(|(p, r)| if *p > 0.0 { p * (p / r).ln() } else { 0.0 })
                .sum::<f64>();
    best - own
}

#[test]
fn acceptance_01_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = seeded_rng(101, 0);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = 2 + i % 5;
        let tau = rng.random_range(0.2..2.0);
        let (g, l) = random_point(&mut rng, n, tau);
        let schemes = [
            SamplingScheme::Fixed(games::random_interior_policy(&mut rng, n)),
            SamplingScheme::CurrentPolicy,
            SamplingScheme::GeometricMixture(rng.random_range(0.0..1.0)),
        ];
        for loss in [LossId::Ipo, LossId::Dpo, LossId::Slic] {
            for s in &schemes {
                let mu = s.resolve(&l.softmax(), &g.ref_policy).unwrap();
                let exact = population_gradient_under(loss, &l, &g, &mu).unwrap();
                let fd = finite_difference_gradient(|x| population_loss_under(loss, x, &g, &mu), &l, 1e-5).unwrap();
                worst = worst.max(relative_error(&exact, &fd));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "IPO/DPO/SLiC gradients vs central differences",
        worst <= 1e-6 && secs < 10.0,
        format!("max relative error {worst:.3e} (tol 1e-6), {secs:.2}s (limit 10s)"),
    );
}

#[test]
fn acceptance_02_online_ipo_and_self_play_are_collinear() {
    let mut rng = seeded_rng(102, 0);
    let (mut cos_min, mut ratio_err, mut ratio_seen): (f64, f64, f64) = (1.0, 0.0, 0.0);
    for tau in [0.1, 0.5, 1.0, 5.0, 10.0] {
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let (g, l) = random_point(&mut rng, n, tau);
            let a = expected_update(&AlgorithmId::OnlineIpo, &g, &l).unwrap();
            let b = expected_update(&AlgorithmId::SelfPlay, &g, &l).unwrap();
            cos_min = cos_min.min(cosine_similarity(&a, &b));
            let ratio = norm(&a) / norm(&b);
            ratio_seen = ratio * tau;
            ratio_err = ratio_err.max((ratio / (2.0 / tau) - 1.0).abs());
        }
    }
    verdict(
        2,
        "online IPO vs self-play direction",
        cos_min >= 1.0 - 1e-10 && ratio_err <= 1e-8,
        format!(
            "min cosine {cos_min:.15} (tol 1-1e-10); norm ratio x tau = {ratio_seen:.12}, relative error vs 2/tau {ratio_err:.3e} (tol 1e-8)"
        ),
    );
}

#[test]
fn acceptance_03_mixture_gradient_assembly() {
    let mut rng = seeded_rng(103, 0);
    let (mut nash, mut ipo): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.1..3.0);
        let (g, l) = random_point(&mut rng, n, tau);
        for beta in MIXTURE_BETAS {
            // Nash-MD-PG: objective gradient by central differences
            let opponent = geometric_mixture(&l.softmax(), &g.ref_policy, beta).unwrap();
            let fd = finite_difference_gradient(
                |x| {
                    let p = x.softmax();
                    Ok(prefgame::game::policy_vs_policy(&g.prefs, &p, &opponent)
                        - g.tau * prefgame::game::kl_divergence(&p, &g.ref_policy)?)
                },
                &l,
                1e-5,
            )
            .unwrap();
            // direct chain rule through the softmax Jacobian
            let direct = mixture_payoff_gradient(&g, &l, beta).unwrap();
            assert!(relative_error(&direct, &fd) <= 1e-6);
            let assembled = quoted_nash_md_gradient(&g, &l, beta).unwrap();
            let negated: Vec<f64> = direct.iter().map(|v| -v).collect();
            nash = nash.max(relative_error(&assembled, &negated));
            let direct = population_gradient(LossId::Ipo, &l, &g, &SamplingScheme::GeometricMixture(beta)).unwrap();
            ipo = ipo.max(relative_error(&quoted_ipo_md_gradient(&g, &l, beta).unwrap(), &direct));
        }
    }
    verdict(
        3,
        "mixture-gradient assembly (Nash-MD-PG = -E_pi[g], IPO-MD = -(2/tau) E_pi'[g])",
        nash <= 1e-10 && ipo <= 1e-10,
        format!("Nash-MD-PG relative error {nash:.3e}, IPO-MD relative error {ipo:.3e} (tol 1e-10 each)"),
    );
}

#[test]
fn acceptance_04_regularised_nash_solver() {
    let mut rng = seeded_rng(104, 0);
    let opts = SolverOptions::default();
    let (mut residual, mut expl): (f64, f64) = (0.0, 0.0);
    let mut all_converged = true;
    for _ in 0..50 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.1..3.0);
        let g = games::random_game(&mut rng, n, tau);
        let r = solve_regularised_nash(&g, &opts).unwrap();
        all_converged &= r.converged;
        residual = residual.max(r.residual);
        expl = expl.max(exploitability_oracle(&g, &r.policy));
    }
    let two = GameSpec::new(two_action_matrix(0.9).unwrap(), Policy::uniform(2), 1.0).unwrap();
    let pi1 = solve_regularised_nash(&two, &opts).unwrap().policy.probs()[0];
    let gap = (pi1 - sigmoid(0.4)).abs();
    assert!((sigmoid(0.4) - 0.598688).abs() < 1e-6);
    verdict(
        4,
        "regularised Nash solver",
        all_converged && residual <= 1e-12 && expl <= 1e-10 && gap <= 1e-9,
        format!(
            "max residual {residual:.3e} (tol 1e-12), max exploitability {expl:.3e} (tol 1e-10), two-action pi(1) = {pi1:.12} vs sigma(0.4), gap {gap:.3e} (tol 1e-9)"
        ),
    );
}

#[test]
fn acceptance_05_mixture_fixed_point_stationary_for_both_dynamics() {
    let opts = SolverOptions::default();
    let worst_for = |g: &GameSpec| -> f64 {
        let mut worst: f64 = 0.0;
        for beta in MIXTURE_BETAS {
            let fp = solve_ipo_md_fixed_point(g, beta, &opts).unwrap().policy;
            let l = PolicyLogits::from_policy(&fp).unwrap();
            for alg in [AlgorithmId::IpoMd(beta), AlgorithmId::NashMdPg(beta)] {
                worst = worst.max(norm(&expected_update(&alg, g, &l).unwrap()));
            }
        }
        worst
    };
    let mut rng = seeded_rng(105, 0);
    let mut random_worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let tau = rng.random_range(0.1..2.0);
        random_worst = random_worst.max(worst_for(&games::random_game(&mut rng, n, tau)));
    }
    let printed = worst_for(&three_action_example());
    verdict(
        5,
        "mixture fixed point is stationary for IPO-MD and Nash-MD-PG",
        random_worst <= 1e-8 && printed <= 1e-8,
        format!("max update norm: 20 random games {random_worst:.3e}, three-action example {printed:.3e} (tol 1e-8)"),
    );
}

#[test]
fn acceptance_06_mixture_is_nash_of_modified_tau_game() {
    let opts = SolverOptions::default();
    let mut rng = seeded_rng(106, 0);
    let mut gamelist = vec![three_action_example()];
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let tau = rng.random_range(0.1..2.0);
        gamelist.push(games::random_game(&mut rng, n, tau));
    }
    let mut worst: f64 = 0.0;
    for g in &gamelist {
        for beta in MIXTURE_BETAS {
            let fp = solve_ipo_md_fixed_point(g, beta, &opts).unwrap().policy;
            // mixture and best response in the τ/(1−β) game, computed directly
            let w: Vec<f64> = fp
                .probs()
                .iter()
                .zip(g.ref_policy.probs())
                .map(|(p, r)| p.powf(1.0 - beta) * r.powf(beta))
                .collect();
            let z: f64 = w.iter().sum();
            let mix = Policy::new(w.iter().map(|v| v / z).collect()).unwrap();
            let tau2 = g.tau / (1.0 - beta);
            let v = preference_vector(&g.prefs, &mix);
            let logw: Vec<f64> = g
                .ref_policy
                .probs()
                .iter()
                .zip(&v)
                .map(|(r, v)| r.ln() + v / tau2)
                .collect();
            let lz = log_sum_exp(&logw);
            for (m, lw) in mix.probs().iter().zip(&logw) {
                worst = worst.max((m - (lw - lz).exp()).abs());
            }
        }
    }
    verdict(
        6,
        "geometric mixture of the fixed point is the regularised Nash at tau/(1-beta)",
        worst <= 1e-8,
        format!(
            "max fixed-point defect {worst:.3e} over {} games (tol 1e-8)",
            gamelist.len()
        ),
    );
}

#[test]
fn acceptance_07_three_action_reproduction() {
    let start = Instant::now();
    let opts = AppendixDOptions::default();
    assert_eq!((opts.steps, opts.learning_rate), (100_000, 0.1));
    let report = reproduce_appendix_d(&opts, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst_tv = report.runs.iter().map(|r| r.tv_to_matched).fold(0.0, f64::max);
    let none_diverged = report.runs.iter().all(|r| !r.diverged);
    let target = [0.2945, 0.2945, 0.4110];
    let end = |name: &str| report.runs.iter().find(|r| r.name == name).unwrap().endpoint.clone();
    let ipo_end = end("ipo_md_beta1");
    let ipo_err = ipo_end
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let nash_end = end("nash_md_pg_beta1");
    let nash_err = nash_end
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let nash_raw = solve_regularised_nash(&three_action_example(), &SolverOptions::default())
        .unwrap()
        .policy;
    let beta0_tv = tv(&end("ipo_md_beta0"), nash_raw.probs());
    verdict(
        7,
        "three-action cyclic game trajectories",
        none_diverged && worst_tv <= 1e-4 && ipo_err <= 1e-3 && secs < 60.0,
        format!(
            "{} runs, max TV to matched fixed point {worst_tv:.3e} (tol 1e-4); IPO-MD beta=1 endpoint {ipo_end:.5?}, max deviation from (0.2945, 0.2945, 0.4110) {ipo_err:.3e} (tol 1e-3); Nash-MD-PG beta=1 endpoint deviation {nash_err:.3e}; IPO-MD beta=0 TV to printed-matrix Nash {beta0_tv:.3e}; {secs:.2}s (limit 60s)",
            report.runs.len()
        ),
    );
}

#[test]
fn acceptance_08_contrastive_estimator_variance() {
    let mut rng = seeded_rng(108, 0);
    let (mut mean_gap, mut cov_gap, mut var_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(2..7);
        let tau = rng.random_range(0.05..2.0);
        let (g, l) = random_point(&mut rng, n, tau);
        let p = l.softmax();
        let mut mc = vec![0.0; n];
        let mut mn = vec![0.0; n];
        let mut second_c = 0.0;
        for y in 0..n {
            for yp in 0..n {
                let w = p.probs()[y] * p.probs()[yp];
                let c = contrastive_estimate(&g, &l, y, yp).unwrap();
                let nc = noncontrastive_estimate(&g, &l, y, yp).unwrap();
                for i in 0..n {
                    mc[i] += w * c[i];
                    mn[i] += w * nc[i];
                }
                second_c += w * c.iter().map(|v| v * v).sum::<f64>();
            }
        }
        for i in 0..n {
            mean_gap = mean_gap.max((mc[i] - mn[i]).abs());
        }
        let var_c = second_c - mc.iter().map(|v| v * v).sum::<f64>();
        let d = covariance_decomposition(&g, &l).unwrap();
        cov_gap = cov_gap.max((d.cov_x1_x2 - d.cov_closed_form).abs());
        var_gap = var_gap.max((d.contrastive_from_parts - var_c).abs());
    }
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let (g, l) = sample_nonnegative_condition(&mut rng, 1_000_000).expect("condition is attainable");
        let c = exact_variance(&g, &l, EstimatorKind::Contrastive)
            .unwrap()
            .total_variance;
        let nc = exact_variance(&g, &l, EstimatorKind::NonContrastive)
            .unwrap()
            .total_variance;
        excess = excess.max(c - nc);
    }
    verdict(
        8,
        "contrastive vs non-contrastive estimators",
        mean_gap <= 1e-12 && excess <= 0.0 && cov_gap <= 1e-12 && var_gap <= 1e-12,
        format!(
            "max mean gap {mean_gap:.3e} (tol 1e-12); max (contrastive - non-contrastive) variance over 100 configurations with nonnegative condition {excess:.3e} (must be <= 0); covariance identity gap {cov_gap:.3e}, variance assembly gap {var_gap:.3e} (tol 1e-12)"
        ),
    );
}

#[test]
fn acceptance_09_online_dpo_stationarity() {
    let opts = SolverOptions::default();
    let mut mismatches = 0;
    let mut at_half: f64 = 0.0;
    for k in 1..20 {
        let p = k as f64 * 0.05;
        let g = GameSpec::new(two_action_game(p).unwrap(), Policy::uniform(2), 1.0).unwrap();
        let nash = solve_regularised_nash(&g, &opts).unwrap().policy;
        let (r0, r1) = two_action_residuals(p, nash.probs()[0]).unwrap();
        let general = online_dpo_stationarity_residual(&g.prefs, &nash).unwrap();
        assert!((general.residuals[0] - r0).abs() <= 1e-12 && (general.residuals[1] - r1).abs() <= 1e-12);
        if k == 10 {
            at_half = r0.abs().max(r1.abs());
        } else {
            let gap = 1.0 - p - sigmoid(0.5 - p);
            let s = (0.5 - p).signum();
            if gap.signum() != s || r0.signum() != s || r1.signum() != -s {
                mismatches += 1;
            }
        }
    }

    let mut rng = seeded_rng(109, 0);
    let mut bt: f64 = 0.0;
    for i in 0..20 {
        let n = rng.random_range(2..6);
        let tau = rng.random_range(0.1..3.0);
        let reference = games::random_interior_policy(&mut rng, n);
        let reward: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu = if i % 4 == 0 {
            rlhf_closed_form(&reference, tau, &reward).unwrap()
        } else {
            games::random_interior_policy(&mut rng, n)
        };
        bt = bt.max(bt_stationarity_check(&reference, tau, &reward, &mu).unwrap());
    }

    let rps = online_dpo_stationarity_residual(&rock_paper_scissors().prefs, &Policy::uniform(3))
        .unwrap()
        .max_abs;

    let reward = [0.4, -0.1, 0.7, -1.0];
    let reference = Policy::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let spec = GameSpec::new(bradley_terry_matrix(&reward).unwrap(), reference.clone(), 0.5).unwrap();
    let pi_dpo = rlhf_closed_form(&reference, 0.5, &reward).unwrap();
    let mu = Policy::new(vec![0.5, 0.0, 0.3, 0.2]).unwrap();
    let degenerate = [0.01, 0.1, 10.0]
        .iter()
        .map(|&a| dpo_degeneracy_demo(&spec, &mu, &pi_dpo, a).unwrap().dpo_gradient_norm)
        .fold(0.0, f64::max);

    verdict(
        9,
        "online DPO stationarity analysis",
        mismatches == 0 && at_half <= 1e-12 && bt <= 1e-8 && rps <= 1e-12 && degenerate <= 1e-8,
        format!(
            "(a) sign mismatches {mismatches}/18, residual at p=0.5 {at_half:.3e} (tol 1e-12); (b) max BT gradient norm {bt:.3e} (tol 1e-8); (c) RPS max residual {rps:.3e} (tol 1e-12); (d) max degenerate gradient norm {degenerate:.3e} (tol 1e-8)"
        ),
    );
}

#[test]
fn acceptance_10_stochastic_updates_average_to_expected() {
    const SAMPLES: usize = 100_000;
    let mut rng = seeded_rng(110, 0);
    let mut worst_z: f64 = 0.0;
    let mut outside = 0;
    let mut total = 0;
    for game in 0..5 {
        let n = 3 + game % 2;
        let (g, l) = random_point(&mut rng, n, 0.7);
        let algorithms = vec![
            AlgorithmId::OnlineIpo,
            AlgorithmId::IpoMd(0.5),
            AlgorithmId::OfflineIpo(games::random_interior_policy(&mut rng, n)),
            AlgorithmId::NashMdPg(0.5),
            AlgorithmId::SelfPlay,
            AlgorithmId::OnlineDpo,
            AlgorithmId::OnlineSlic,
            AlgorithmId::RlhfPg((0..n).map(|i| i as f64 * 0.3).collect()),
        ];
        for alg in &algorithms {
            let expected = expected_update(alg, &g, &l).unwrap();
            let mut sum = vec![0.0; n];
            let mut sq = vec![0.0; n];
            let mut sample_rng = seeded_rng(1000 + game as u64, 0);
            for _ in 0..SAMPLES {
                let u = stochastic_update(alg, &g, &l, 1, LabelMode::Sampled, &mut sample_rng).unwrap();
                for i in 0..n {
                    sum[i] += u[i];
                    sq[i] += u[i] * u[i];
                }
            }
            for i in 0..n {
                let mean = sum[i] / SAMPLES as f64;
                let var = (sq[i] / SAMPLES as f64 - mean * mean).max(0.0);
                let se = (var / SAMPLES as f64).sqrt();
                let z = if se > 0.0 {
                    (mean - expected[i]).abs() / se
                } else {
                    (mean - expected[i]).abs() * 1e12
                };
                worst_z = worst_z.max(z);
                total += 1;
                if z > 3.0 {
                    outside += 1;
                }
            }
        }
    }

    let config = ExperimentConfig::from_toml_str(
        "[game]\ngenerator = { kind = \"random\", seed = 5, n = 4 }\ntau = 0.5\n\
         [algo]\nname = \"nash_md_pg\"\nbeta = 0.3\nlearning_rate = 0.05\nmode = \"stochastic\"\nbatch_size = 4\n\
         [run]\nsteps = 500\nseed = 42\nrecord_every = 10\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let outcome = run_experiment(&config).unwrap();
        let sub = dir.path().join(format!("run{k}"));
        prefgame::cli::output::write_run(&sub, &config.output.formats, &outcome).unwrap();
        let mut summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(sub.join("summary.json")).unwrap()).unwrap();
        summary.as_object_mut().unwrap().remove("wall_time_s");
        bytes.push((std::fs::read(sub.join("trajectory.csv")).unwrap(), summary.to_string()));
    }
    let identical = bytes[0] == bytes[1];
    verdict(
        10,
        "stochastic updates are unbiased and reproducible",
        outside == 0 && identical,
        format!(
            "{outside}/{total} coordinates outside 3 standard errors (max z {worst_z:.2}); repeated seeded runs byte-identical: {identical}"
        ),
    );
}

#[test]
fn acceptance_11_bradley_terry_fit() {
    let mut samples = vec![LabelledPair::new(0, 1); 75];
    samples.extend(vec![LabelledPair::new(1, 0); 25]);
    let r = fit_bradley_terry(&samples, 2, 0.0).unwrap();
    let gap_err = ((r[0] - r[1]) - 3f64.ln()).abs();

    let truth = [0.8, -0.4, 0.2, -0.6];
    let prefs: PreferenceMatrix = bradley_terry_matrix(&truth).unwrap();
    let mut rng = seeded_rng(111, 0);
    let mu = Policy::uniform(4);
    let data: Vec<LabelledPair> = (0..100_000)
        .map(|_| {
            let y = mu.sample(&mut rng);
            let yp = mu.sample(&mut rng);
            label_pair(&prefs, y, yp, &mut rng)
        })
        .collect();
    let fitted = fit_bradley_terry(&data, 4, 0.0).unwrap();
    let reference = Policy::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let tau = 0.5;
    let from_fit = rlhf_closed_form(&reference, tau, &fitted).unwrap();
    let optimum = rlhf_closed_form(&reference, tau, &truth).unwrap();
    let distance = from_fit.tv_distance(&optimum);
    verdict(
        11,
        "Bradley-Terry reward fit",
        gap_err <= 1e-3 && distance <= 0.01,
        format!(
            "win rate 0.75 gives reward gap {:.9} vs ln 3, error {gap_err:.3e} (tol 1e-3); TV of fitted-reward optimum to true optimum at 1e5 samples {distance:.3e} (tol 0.01)",
            r[0] - r[1]
        ),
    );
}
