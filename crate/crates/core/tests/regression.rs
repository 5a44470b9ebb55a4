use mwe::solvers::{
    group_lasso_lambda_max, lasso_lambda_max, solve_dirty, solve_group_lasso, solve_lasso, solve_lasso_with,
    solve_subproblem, update_sigma, CdOptions, SignedSource,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const N: usize = 12;
const P: usize = 20;

fn design() -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0..1.0f64, N * P).prop_map(|v| Array2::from_shape_vec((N, P), v).unwrap())
}

fn target() -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-3.0..3.0f64, N).prop_map(Array1::from)
}

fn tight() -> CdOptions {
    CdOptions {
        tol: 1e-10,
        max_sweeps: 100_000,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lasso_satisfies_kkt(l in design(), y in target(), frac in 0.05..0.95f64) {
        let lambda = frac * lasso_lambda_max(y.view(), l.view());
        let x = solve_lasso_with(y.view(), l.view(), lambda, &tight(), None).unwrap().x;
        let g = l.t().dot(&(&y - &l.dot(&x))) / N as f64;
        for j in 0..P {
            if x[j] == 0.0 {
                prop_assert!(g[j].abs() <= lambda + 1e-8);
            } else {
                prop_assert!((g[j] - lambda * x[j].signum()).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn lasso_is_zero_above_critical_value(l in design(), y in target()) {
        let lmax = lasso_lambda_max(y.view(), l.view());
        prop_assert!(solve_lasso(y.view(), l.view(), lmax * 1.0001).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_task_group_lasso_is_lasso(l in design(), y in target(), frac in 0.1..0.9f64) {
        let lambda = frac * lasso_lambda_max(y.view(), l.view());
        let lasso = solve_lasso_with(y.view(), l.view(), lambda, &tight(), None).unwrap().x;
        let group = solve_group_lasso(&[y.view()], &[l.view()], lambda, &tight()).unwrap().x;
        for j in 0..P {
            prop_assert!((lasso[j] - group[[j, 0]]).abs() <= 1e-7);
        }
    }

    #[test]
    fn group_lasso_shares_support(l1 in design(), l2 in design(), y1 in target(), y2 in target(), frac in 0.1..0.9f64) {
        let ys = [y1.view(), y2.view()];
        let ls = [l1.view(), l2.view()];
        let lambda = frac * group_lasso_lambda_max(&ys, &ls);
        let x = solve_group_lasso(&ys, &ls, lambda, &tight()).unwrap().x;
        for j in 0..P {
            prop_assert_eq!(x[[j, 0]] == 0.0, x[[j, 1]] == 0.0);
        }
    }

    #[test]
    fn dirty_without_specific_part_is_group_lasso(l1 in design(), l2 in design(), y1 in target(), y2 in target(), frac in 0.1..0.9f64) {
        let ys = [y1.view(), y2.view()];
        let ls = [l1.view(), l2.view()];
        let lambda = frac * group_lasso_lambda_max(&ys, &ls);
        let group = solve_group_lasso(&ys, &ls, lambda, &tight()).unwrap().x;
        let dirty = solve_dirty(&ys, &ls, lambda, f64::INFINITY, &tight()).unwrap();
        prop_assert!(dirty.specific.iter().all(|&v| v == 0.0));
        for (a, b) in group.iter().zip(dirty.common.iter()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn subproblem_is_coordinatewise_optimal(
        l in design(),
        y in target(),
        m in prop::collection::vec(0.0..1.0f64, P),
        kappa in 0.01..1.0f64,
        lam in 0.0..0.5f64,
    ) {
        let fit = solve_subproblem(y.view(), l.view(), &m, kappa, lam, None, &tight()).unwrap();
        let x = fit.x;
        let g = l.t().dot(&(&y - &l.dot(&x))) / N as f64;
        for j in 0..P {
            prop_assert!(x[j] >= 0.0);
            if m[j] > 0.0 {
                prop_assert!(x[j] > 0.0);
                // stationarity: -g + kappa (1 - m/x) + lam = 0
                let r = -g[j] + kappa * (1.0 - m[j] / x[j]) + lam;
                prop_assert!(r.abs() <= 1e-7 * (1.0 + kappa * m[j] / x[j]), "j={} r={}", j, r);
            } else if x[j] == 0.0 {
                prop_assert!(g[j] <= kappa + lam + 1e-8);
            }
        }
    }

    #[test]
    fn sigma_is_residual_norm_clipped(l in design(), y in target(), x in prop::collection::vec(-1.0..1.0f64, P), floor in 0.01..2.0f64) {
        let src = SignedSource::from_signed(Array1::from(x).view());
        let r = &y - &l.dot(&src.signed());
        let want = (r.dot(&r).sqrt() / (N as f64).sqrt()).max(floor);
        let got = update_sigma(y.view(), l.view(), &src, floor).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want);
    }
}
