use ctxrisk::newsvendor::{nv_cost, oracle_cvar, oracle_rn, DemandModel, NvParams};
use ctxrisk::normal::TruncNormal;
use ctxrisk::portfolio::{deploy, evaluate_metrics, gen_portfolio, solve_model, PortfolioGenConfig, PortfolioModel, PortfolioSolveConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nv_cost_midpoint_convex(a in 0u32..800, b in 0u32..800, y in 0u32..800, h in 1u32..64, bo in 1u32..64) {
        // Dyadic inputs keep every product and sum exact, so the midpoint
        // inequality can be checked without tolerance.
        let (a, b, y) = (a as f64 / 4.0, b as f64 / 4.0, y as f64 / 4.0);
        let p = NvParams::new(h as f64 / 8.0, bo as f64 / 8.0).unwrap();
        let m = nv_cost((a + b) / 2.0, y, &p).0;
        prop_assert!(m <= (nv_cost(a, y, &p).0 + nv_cost(b, y, &p).0) / 2.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn cvar_oracle_at_zero_beta_is_risk_neutral(x in 1.0f64..7.3) {
        let p = NvParams::default();
        let a = oracle_cvar(&[x], 0.0, DemandModel::Linear, &p).unwrap().0;
        let b = oracle_rn(&[x], DemandModel::Linear, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), n in 1usize..50) {
        for m in [DemandModel::Linear, DemandModel::Nonlinear] {
            let a = m.generate(n, seed).unwrap();
            let b = m.generate(n, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn trunc_normal_quantile_inverts_cdf(mu in -50.0f64..150.0, sigma in 0.1f64..30.0) {
        let d = TruncNormal::new(mu, sigma).unwrap();
        for i in 1..100 {
            let p = i as f64 / 100.0;
            prop_assert!((d.cdf(d.quantile(p).unwrap()) - p).abs() <= 1e-7);
        }
    }
}

#[test]
fn deployed_portfolios_are_feasible_and_ew_ignores_solver_seed() {
    let g = PortfolioGenConfig { seed: 5, ..Default::default() };
    let (train, test, _) = gen_portfolio(&g, 40, 500).unwrap();
    let cfg = PortfolioSolveConfig::default();
    for model in [PortfolioModel::Ew, PortfolioModel::Mc, PortfolioModel::Cmeac] {
        let t = solve_model(model, &train, &cfg).unwrap();
        for x in test.covariates() {
            let z = deploy(&t.policy, x).unwrap();
            assert!(z.iter().all(|v| *v >= -1e-12));
            assert!(z.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
        let m = evaluate_metrics(&t.policy, &test, cfg.eta, cfg.beta).unwrap();
        assert_eq!(m.tradeoff, cfg.eta * m.expected_return - m.cvar);
    }
    let mut other = cfg.clone();
    other.fit.solver.seed = 99;
    let a = solve_model(PortfolioModel::Ew, &train, &cfg).unwrap();
    let b = solve_model(PortfolioModel::Ew, &train, &other).unwrap();
    assert_eq!(
        evaluate_metrics(&a.policy, &test, cfg.eta, cfg.beta).unwrap(),
        evaluate_metrics(&b.policy, &test, cfg.eta, cfg.beta).unwrap()
    );
}
