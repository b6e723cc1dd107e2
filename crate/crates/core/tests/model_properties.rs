use ctxrisk::kernel::{gram, kernel_eval, rkhs_norm_sq, KernelSpec};
use ctxrisk::objectives::{
    entropic_objective, exante_objective, expected_oce_objective, zero_template, EmpiricalSample, FnCost, SaaKind,
    SaaProblem,
};
use ctxrisk::policy::{Basis, FeasibleSet, PolicySpec};
use ctxrisk::risk::{self, LossSample, RiskSpec, UtilitySpec};
use ctxrisk::solve::{minimize, Objective, SolveConfig, StepSchedule};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(dx: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dx), 2..12)
}

fn kernels() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        (0.1f64..5.0).prop_map(|lengthscale| KernelSpec::Gaussian { lengthscale }),
        (0.0f64..2.0).prop_map(|bias| KernelSpec::Linear { bias }),
        (1u32..4, 0.0f64..2.0).prop_map(|(degree, bias)| KernelSpec::Polynomial { degree, bias }),
    ]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn gram_is_psd(centers in points(2), k in kernels()) {
        prop_assert!(gram(&k, &centers).unwrap().is_psd());
    }

    #[test]
    fn reproducing_property(centers in points(2), alpha in prop::collection::vec(-2.0f64..2.0, 12), l in 0.3f64..3.0) {
        let k = KernelSpec::Gaussian { lengthscale: l };
        let n = centers.len();
        let a = DMatrix::from_column_slice(n, 1, &alpha[..n]);
        let g = gram(&k, &centers).unwrap();
        let direct: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| alpha[i] * alpha[j] * kernel_eval(&k, &centers[i], &centers[j]).unwrap())
            .sum();
        let nsq = rkhs_norm_sq(&a, &g).unwrap();
        prop_assert!((nsq - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
        let f = PolicySpec::Rkhs {
            kernel: k,
            centers: centers.clone(),
            alpha_z: alpha[..n].iter().map(|v| vec![*v]).collect(),
            alpha_s: None,
            bias_z: None,
            bias_s: None,
        };
        for m in 0..n {
            let inner: f64 = (0..n).map(|i| alpha[i] * kernel_eval(&k, &centers[i], &centers[m]).unwrap()).sum();
            let fx = f.evaluate(&centers[m]).unwrap().0[0];
            prop_assert!((inner - fx).abs() <= 1e-10 * (1.0 + fx.abs()));
        }
    }
}

#[test]
fn gaussian_offdiagonal_tends_to_one() {
    let c = vec![vec![0.0, 0.0], vec![1.0, -2.0], vec![3.0, 0.5]];
    let mut prev = 0.0;
    for l in [1.0, 10.0, 100.0] {
        let k = KernelSpec::Gaussian { lengthscale: l };
        let v = kernel_eval(&k, &c[0], &c[2]).unwrap();
        assert!(v > prev && v < 1.0);
        prev = v;
    }
    assert!(1.0 - prev < 1e-3);
}

fn simplex() -> impl Strategy<Value = (FeasibleSet, Vec<f64>)> {
    (1usize..6).prop_flat_map(|d| {
        (
            prop_oneof![
                (0.2f64..3.0).prop_map(|cap| FeasibleSet::CappedSimplex { cap }),
                Just(FeasibleSet::Box { lower: vec![-1.0; d], upper: vec![0.5; d] }),
            ],
            prop::collection::vec(-3.0f64..3.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn projection_idempotent_and_feasible((set, v) in simplex()) {
        let p = set.project(&v);
        prop_assert_eq!(set.project(&p), p.clone());
        if let FeasibleSet::CappedSimplex { cap } = set {
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!(p.iter().sum::<f64>() <= cap + 1e-12);
        }
    }

    #[test]
    fn projection_nonexpansive((set, u) in simplex(), shift in prop::collection::vec(-2.0f64..2.0, 6)) {
        let v: Vec<f64> = u.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert!(dist(&set.project(&u), &set.project(&v)) <= dist(&u, &v) + 1e-12);
    }

    #[test]
    fn projection_beats_grid(v in prop::collection::vec(-1.5f64..1.5, 2), cap in 0.3f64..1.5) {
        let set = FeasibleSet::CappedSimplex { cap };
        let p = set.project(&v);
        let best = dist(&p, &v);
        let steps = 300;
        for i in 0..=steps {
            for j in 0..=steps {
                let z = [cap * i as f64 / steps as f64, cap * j as f64 / steps as f64];
                if z[0] + z[1] <= cap {
                    prop_assert!(best <= dist(&z, &v) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rkhs_linear_in_alpha(
        centers in points(1),
        a1 in prop::collection::vec(-2.0f64..2.0, 12),
        a2 in prop::collection::vec(-2.0f64..2.0, 12),
        x in -3.0f64..3.0,
    ) {
        let n = centers.len();
        let mk = |a: Vec<f64>| PolicySpec::Rkhs {
            kernel: KernelSpec::Gaussian { lengthscale: 1.0 },
            centers: centers.clone(),
            alpha_z: a.into_iter().map(|v| vec![v]).collect(),
            alpha_s: None,
            bias_z: None,
            bias_s: None,
        };
        let sum: Vec<f64> = a1[..n].iter().zip(&a2[..n]).map(|(p, q)| p + q).collect();
        let lhs = mk(sum).evaluate(&[x]).unwrap().0[0];
        let rhs = mk(a1[..n].to_vec()).evaluate(&[x]).unwrap().0[0] + mk(a2[..n].to_vec()).evaluate(&[x]).unwrap().0[0];
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn policy_json_roundtrip(c in prop::collection::vec(-5.0f64..5.0, 3)) {
        let p = PolicySpec::Ldr { dx: 2, coef_z: vec![c.clone()], coef_s: Some(c) };
        prop_assert_eq!(PolicySpec::from_json(&p.to_json().unwrap()).unwrap(), p);
    }
}

fn quad_objective(center: Vec<f64>) -> Objective<'static> {
    Objective::new(center.len(), true, move |x: &[f64]| {
        let v = x.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        (v, x.iter().zip(&center).map(|(a, c)| 2.0 * (a - c)).collect())
    })
}

fn abs_objective(center: Vec<f64>) -> Objective<'static> {
    Objective::new(center.len(), false, move |x: &[f64]| {
        let v = x.iter().zip(&center).map(|(a, c)| (a - c).abs()).sum::<f64>();
        (v, x.iter().zip(&center).map(|(a, c)| (a - c).signum()).collect())
    })
}

fn schedules() -> impl Strategy<Value = StepSchedule> {
    prop::sample::select(vec![StepSchedule::Diminishing, StepSchedule::Constant, StepSchedule::Armijo, StepSchedule::Lbfgs])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn solver_trace_and_determinism(
        center in prop::collection::vec(-2.0f64..2.0, 1..3),
        init in prop::collection::vec(-2.0f64..2.0, 3),
        schedule in schedules(),
        smooth in any::<bool>(),
    ) {
        let obj = if smooth { quad_objective(center.clone()) } else { abs_objective(center.clone()) };
        let cfg = SolveConfig { schedule, max_iters: 400, ..SolveConfig::default() };
        let x0 = &init[..center.len()];
        let a = minimize(&obj, x0, &cfg).unwrap();
        let b = minimize(&obj, x0, &cfg).unwrap();
        prop_assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(&a.trace, &b.trace);
        prop_assert_eq!(&a.params, &b.params);
        prop_assert_eq!(a.value, *a.trace.last().unwrap());
    }

    #[test]
    fn solver_matches_grid(c0 in -1.5f64..1.5, c1 in -1.5f64..1.5, two_d in any::<bool>()) {
        let center = if two_d { vec![c0, c1] } else { vec![c0] };
        for (obj, schedule) in [
            (quad_objective(center.clone()), StepSchedule::Lbfgs),
            (abs_objective(center.clone()), StepSchedule::Diminishing),
        ] {
            let cfg = SolveConfig { schedule, max_iters: 200_000, stall_tol: 0.0, ..SolveConfig::default() };
            let r = minimize(&obj, &vec![0.0; center.len()], &cfg).unwrap();
            let grid: Vec<f64> = (0..=400).map(|i| -2.0 + i as f64 * 0.01).collect();
            let best = if two_d {
                grid.iter().flat_map(|a| grid.iter().map(move |b| vec![*a, *b])).map(|x| obj.value(&x).unwrap()).fold(f64::INFINITY, f64::min)
            } else {
                grid.iter().map(|a| obj.value(&[*a]).unwrap()).fold(f64::INFINITY, f64::min)
            };
            prop_assert!(r.value <= best + 1e-3, "{:?}: {} vs grid {}", schedule, r.value, best);
        }
    }

    #[test]
    fn regularized_solution_is_bounded(lambda in 0.01f64..2.0, c in -5.0f64..5.0) {
        let data = sample_1d(20, 3);
        let cost = abs_cost();
        let t = zero_template(&Basis::Affine { dx: 1 }, 1, false, false);
        let obj = exante_objective(&RiskSpec::Mean, &cost, &data, &t, lambda).unwrap();
        let init = vec![c, 0.0];
        let f0 = obj.value(&init).unwrap();
        let r = minimize(&obj, &init, &SolveConfig { max_iters: 300, ..SolveConfig::default() }).unwrap();
        prop_assert!(norm(&r.params) <= (f0 / lambda).sqrt() + norm(&init) + 1e-9);
    }
}

fn sample_1d(n: usize, seed: u64) -> EmpiricalSample {
    let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 * 0.37 + seed as f64).sin()]).collect();
    let ys: Vec<Vec<f64>> = xs.iter().enumerate().map(|(i, x)| vec![2.0 * x[0] + ((i * 7 + seed as usize) % 5) as f64 * 0.3]).collect();
    EmpiricalSample::new(xs, ys).unwrap()
}

fn abs_cost() -> FnCost<impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync> {
    FnCost(|z: &[f64], y: &[f64]| ((z[0] - y[0]).abs(), vec![(z[0] - y[0]).signum()]))
}

fn sq_cost() -> FnCost<impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>) + Send + Sync> {
    FnCost(|z: &[f64], y: &[f64]| ((z[0] - y[0]).powi(2) / 2.0, vec![z[0] - y[0]]))
}

fn fd_check(obj: &Objective<'_>, x: &[f64]) -> Result<(), TestCaseError> {
    let (_, g) = obj.eval(x).unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        let fd = (obj.value(&p).unwrap() - obj.value(&m).unwrap()) / (2.0 * h);
        prop_assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + g[i].abs()), "coord {}: fd {} vs {}", i, fd, g[i]);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn smooth_objective_gradients(theta in prop::collection::vec(-1.0f64..1.0, 6), gamma in 0.1f64..1.0, lambda in 0.0f64..0.5) {
        let data = sample_1d(15, 1);
        let cost = sq_cost();
        let t = zero_template(&Basis::Affine { dx: 1 }, 1, true, false);
        let ent = entropic_objective(gamma, &cost, &data, &t, lambda).unwrap();
        fd_check(&ent, &theta[..ent.dim()])?;
        let eu = expected_oce_objective(&UtilitySpec::Exponential { gamma }, &cost, &data, &t, lambda).unwrap();
        fd_check(&eu, &theta[..eu.dim()])?;
        let tk = zero_template(
            &Basis::Kernel { kernel: KernelSpec::Gaussian { lengthscale: 0.7 }, centers: data.covariates()[..3].to_vec() },
            1,
            false,
            true,
        );
        let mean = exante_objective(&RiskSpec::Mean, &cost, &data, &tk, lambda).unwrap();
        fd_check(&mean, &theta[..mean.dim()])?;
    }

    #[test]
    fn exante_delegates_to_risk(a in -2.0f64..2.0, b in -2.0f64..2.0, t in -3.0f64..3.0, lambda in 0.0f64..0.3) {
        let data = sample_1d(25, 2);
        let cost = abs_cost();
        let tmpl = zero_template(&Basis::Affine { dx: 1 }, 1, false, false);
        let policy = PolicySpec::ldr(a, vec![b]);
        let prob = SaaProblem::new(SaaKind::ExAnte { risk: RiskSpec::Mean }, &cost, &data, &tmpl, lambda).unwrap();
        let costs = LossSample::uniform(prob.costs(&policy).unwrap()).unwrap();
        let reg = lambda * (a * a + b * b);
        let obj = prob.objective().unwrap();
        let v = obj.value(&[a, b]).unwrap();
        let direct = risk::mean(&costs).unwrap() + reg;
        prop_assert!((v - direct).abs() <= 1e-10 * (1.0 + v.abs()));

        // The variational CVaR objective minimized over its level equals
        // the closed form.
        let beta = 0.8;
        let cv = exante_objective(&RiskSpec::Cvar { beta }, &cost, &data, &tmpl, lambda).unwrap();
        let closed = risk::cvar(&costs, beta).unwrap() + reg;
        prop_assert!(cv.value(&[a, b, t]).unwrap() >= closed - 1e-10);
        let var = risk::value_at_risk(&costs, beta).unwrap();
        prop_assert!((cv.value(&[a, b, var]).unwrap() - closed).abs() <= 1e-10 * (1.0 + closed.abs()));
    }

    #[test]
    fn frozen_aux_expected_cvar_equals_exante(a in -2.0f64..2.0, b in -2.0f64..2.0, t in -3.0f64..3.0) {
        let data = sample_1d(25, 4);
        let cost = abs_cost();
        let beta = 0.7;
        let with_aux = zero_template(&Basis::Affine { dx: 1 }, 1, true, false);
        let plain = zero_template(&Basis::Affine { dx: 1 }, 1, false, false);
        let ecv = expected_oce_objective(&UtilitySpec::PiecewiseLinearCvar { beta }, &cost, &data, &with_aux, 0.0).unwrap();
        let eac = exante_objective(&RiskSpec::Cvar { beta }, &cost, &data, &plain, 0.0).unwrap();
        // t(x) = t + 0·x is a single shared constant.
        let v1 = ecv.value(&[a, b, t, 0.0]).unwrap();
        let v2 = eac.value(&[a, b, t]).unwrap();
        prop_assert!((v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()), "{v1} vs {v2}");
    }

    #[test]
    fn regularization_monotone(theta in prop::collection::vec(-2.0f64..2.0, 2), l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        let data = sample_1d(10, 5);
        let cost = abs_cost();
        let t = zero_template(&Basis::Affine { dx: 1 }, 1, false, false);
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = exante_objective(&RiskSpec::Mean, &cost, &data, &t, lo).unwrap().value(&theta).unwrap();
        let b = exante_objective(&RiskSpec::Mean, &cost, &data, &t, hi).unwrap().value(&theta).unwrap();
        prop_assert!(a <= b);
    }
}
