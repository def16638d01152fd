use approx::assert_abs_diff_eq;
use lqmfg::evalne::{exact_full_information_gap, fit_n_slope};
use lqmfg::linalg::{smat, spectral_norm, svec};
use lqmfg::sim::{derive_seed, rollout_with, stream_rng, RolloutOptions};
use lqmfg::{
    aggregate, apply_t, critic_gtd, critic_lstd, deploy, estimate_gap, fixed_point_mf, optimal_gain, rollout_population,
    solve_dare, solve_mfe, true_theta, BestResponseKind, DMatrix, DVector, EvalConfig, FeedbackPolicy, GameSpec,
    LearnerConfig, MeanFieldLaw,
};
use proptest::prelude::*;
use rand::Rng;

fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Random game with two states and two inputs that satisfies the contraction assumption.
fn random_instance(seed: u64) -> GameSpec {
    let mut rng = stream_rng(seed, 0);
    loop {
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.6..0.6));
        let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.5..0.5));
        let c_z = &l * l.transpose() + DMatrix::identity(2, 2) * 0.01;
        let spec = GameSpec::new(
            a,
            b,
            c_z,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
            DVector::from_vec(vec![0.7, -1.2]),
            0.1,
        )
        .unwrap();
        if solve_dare(&spec).is_ok_and(|rd| rd.assumption1_ok) {
            return spec;
        }
    }
}

#[test]
fn operator_identities_on_a_multi_input_instance() {
    let spec = random_instance(5);
    let rd = solve_dare(&spec).unwrap();
    let mut rng = stream_rng(6, 0);
    for _ in 0..50 {
        let f = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let f = &f * (rd.admissible_radius() * rng.random_range(0.0..1.0) / spectral_norm(&f));
        let via_gain = aggregate(&optimal_gain(&f, &rd, &spec).unwrap(), &spec).unwrap();
        let direct = apply_t(&f, &rd, &spec).unwrap();
        assert!(spectral_norm(&(via_gain - &direct)) <= 1e-10);
        assert!(spectral_norm(&direct) <= rd.t_p);
    }
    let sol = fixed_point_mf(&rd, &spec, &DMatrix::zeros(2, 2), 1e-13).unwrap();
    let k_sum = sol.k_star.k1() + sol.k_star.k2();
    // at the fixed point the aggregate reproduces F*
    assert!(spectral_norm(&(&spec.a - &spec.b * k_sum - &sol.f_star)) <= 1e-10);
}

#[test]
fn noiseless_population_follows_the_aggregate_recursion() {
    let base = GameSpec::reference_scalar();
    let spec = GameSpec::new(
        base.a.clone(),
        base.b.clone(),
        base.c_z.clone(),
        base.c_u.clone(),
        scalar(0.0),
        scalar(0.0),
        DVector::from_element(1, 2.0),
        0.0,
    )
    .unwrap();
    let k = FeedbackPolicy::from_blocks(&scalar(0.25), &scalar(-0.4)).unwrap();
    let f_prime = aggregate(&k, &spec).unwrap()[(0, 0)];
    // each agent uses its own state and the population mean it observes
    struct Closed(f64, f64);
    impl lqmfg::sim::AgentPolicy for Closed {
        fn control_dim(&self) -> usize {
            1
        }
        fn action_into(&self, _t: usize, z: &[f64], others: &[f64], out: &mut [f64]) {
            out[0] = -self.0 * z[0] - self.1 * others[0];
        }
    }
    let pols: Vec<Closed> = (0..5).map(|_| Closed(0.25, -0.4)).collect();
    let tr = rollout_population(&pols, &spec, 30, 1).unwrap();
    let mut want = 2.0;
    for t in 0..30 {
        let mean: f64 = tr.z.iter().map(|z| z[(0, t)]).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(mean, want, epsilon = 1e-12);
        want *= f_prime;
    }
}

#[test]
fn others_mean_variance_scales_inversely_with_population() {
    let spec = GameSpec::reference_scalar();
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let mut dp = deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap();
    dp.prepare(40);
    let ns = [4usize, 16, 64, 256];
    let mut vars = Vec::new();
    for &n in &ns {
        let pols = vec![&dp; n];
        let samples: Vec<f64> = (0..300u64)
            .map(|s| rollout_population(&pols, &spec, 40, derive_seed(31, &[n as u64, s])).unwrap().zbar[0][(0, 39)])
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        vars.push(samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64);
    }
    let slope = fit_n_slope(&ns, &vars).unwrap();
    assert!((slope + 1.0).abs() <= 0.15, "slope {slope}, variances {vars:?}");
}

#[test]
fn gtd_and_lstd_agree_on_a_shared_trajectory() {
    let spec = GameSpec::reference_scalar();
    let mf = MeanFieldLaw::for_spec(&spec, scalar(0.3)).unwrap();
    let k = FeedbackPolicy::from_blocks(&scalar(0.2), &scalar(-0.1)).unwrap();
    let truth = true_theta(&k, &mf, &spec).unwrap();
    let cfg = LearnerConfig {
        rho_theta: Some(10.0 * truth.norm()),
        ..Default::default()
    };
    let opts = RolloutOptions {
        restart_every: cfg.episode_len,
        ..Default::default()
    };
    let tr = rollout_with(&k, &mf, &spec, 100_000, 2024, &opts).unwrap();
    let gtd = critic_gtd(&tr, &cfg).unwrap();
    let lstd = critic_lstd(&tr, &cfg).unwrap();
    let rel = (gtd.theta() - lstd.theta()).norm() / lstd.theta().norm();
    assert!(rel <= 0.05, "relative distance {rel}");
}

#[test]
fn tracking_response_is_the_deployed_rule_at_equilibrium() {
    let spec = GameSpec::reference_scalar();
    let rd = solve_dare(&spec).unwrap();
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let dp = deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap();
    let cfg = EvalConfig {
        horizon: 600,
        reps: 4,
        ..Default::default()
    };
    for n in [2usize, 16] {
        let est = estimate_gap(&dp, n, &spec, &rd, &cfg, 3).unwrap();
        assert!(est.gap.abs() <= 1e-12, "N = {n}: gap {}", est.gap);
    }
}

#[test]
fn full_information_gap_orders_small_above_large_populations() {
    let spec = GameSpec::reference_scalar();
    let rd = solve_dare(&spec).unwrap();
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let dp = deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap();
    let cfg = EvalConfig {
        horizon: 2_000,
        reps: 20,
        best_response: BestResponseKind::FullInformation,
        ..Default::default()
    };
    let median = |n: usize| {
        let mut g: Vec<f64> = (0..10u64)
            .map(|s| estimate_gap(&dp, n, &spec, &rd, &cfg, derive_seed(44, &[n as u64, s])).unwrap().gap)
            .collect();
        g.sort_by(f64::total_cmp);
        0.5 * (g[4] + g[5])
    };
    let (g2, g64) = (median(2), median(64));
    assert!(g2 > g64, "N=2 {g2}, N=64 {g64}");
    // the sampled gap is consistent with the exact one
    let exact = exact_full_information_gap(&dp.k1, &spec, 2).unwrap().gap;
    assert!((g2 - exact).abs() <= 0.3 * exact, "sampled {g2}, exact {exact}");
}

#[test]
fn full_information_gap_is_exactly_inverse_in_population() {
    let spec = random_instance(9);
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let k1 = sol.k_star.k1();
    let scaled: Vec<f64> = [2usize, 5, 17, 100]
        .iter()
        .map(|&n| exact_full_information_gap(&k1, &spec, n).unwrap().gap * (n - 1) as f64)
        .collect();
    for s in &scaled[1..] {
        assert!((s - scaled[0]).abs() <= 1e-8 * scaled[0].abs().max(1e-12), "{scaled:?}");
    }
    assert!(scaled[0] > 0.0);
}

#[test]
fn best_response_never_costs_more_than_deploying() {
    let spec = GameSpec::reference_scalar();
    let rd = solve_dare(&spec).unwrap();
    let sol = solve_mfe(&spec, 1e-13).unwrap();
    let dp = deploy(&sol.k_star, &sol.f_star, &spec.nu0).unwrap();
    let cfg = EvalConfig {
        horizon: 2_000,
        reps: 10,
        best_response: BestResponseKind::FullInformation,
        ..Default::default()
    };
    for n in [3usize, 8, 32] {
        let est = estimate_gap(&dp, n, &spec, &rd, &cfg, 77).unwrap();
        assert!(est.gap >= -3.0 * est.gap_se, "N = {n}: gap {} ± {}", est.gap, est.gap_se);
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn svec_is_an_isometry(n in 1usize..5, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
        let (sa, sb) = (sym(&a), sym(&b));
        let back = smat(&svec(&a)).unwrap();
        prop_assert!((back - &sa).amax() <= 1e-12);
        let inner = svec(&a).dot(&svec(&b));
        let trace = (&sa * &sb).trace();
        prop_assert!((inner - trace).abs() <= 1e-10 * (1.0 + trace.abs()));
    }
}
