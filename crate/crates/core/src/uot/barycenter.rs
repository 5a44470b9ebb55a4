use rayon::prelude::*;

use super::kl::check_nonnegative;
use super::sinkhorn::{log_measure, log_sum_exp, PlanSummary, Scaling, SinkhornParams, SinkhornState};
use crate::error::{param, Error, Result};
use crate::geometry::GibbsKernel;

#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub barycenter: Vec<f64>,
    /// `P_s 1` for every input measure.
    pub left_marginals: Vec<Vec<f64>>,
    pub plans: Vec<PlanSummary>,
    pub states: Vec<SinkhornState>,
    /// `(1/S) sum_s W(x_s, barycenter)`.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Scalings carried between calls so that a sequence of barycenter problems
/// with slowly moving inputs can be warm-started.
#[derive(Debug, Clone, Default)]
pub struct BarycenterWorkspace {
    scalings: Vec<Option<Scaling>>,
}

impl BarycenterWorkspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Minimizer over `xbar` of `(1/S) sum_s W(x_s, xbar)` by simultaneous
/// generalized Sinkhorn scaling of the `S` problems.
///
/// Each sweep updates every `u_s` against its measure, then sets
/// `xbar = ((1/S) sum_s (K^T u_s)^(1-psi))^(1/(1-psi))` and finally every
/// `v_s = (xbar / K^T u_s)^psi`. At the fixed point `xbar` is the mean of the
/// right marginals, which is the first-order condition in `xbar`.
pub fn unbalanced_barycenter(
    measures: &[Vec<f64>],
    kernel: &GibbsKernel,
    params: &SinkhornParams,
) -> Result<BarycenterResult> {
    let mut ws = BarycenterWorkspace::new();
    unbalanced_barycenter_with(measures, kernel, params, &mut ws, false)
}

pub fn unbalanced_barycenter_with(
    measures: &[Vec<f64>],
    kernel: &GibbsKernel,
    params: &SinkhornParams,
    ws: &mut BarycenterWorkspace,
    parallel: bool,
) -> Result<BarycenterResult> {
    params.validate(kernel)?;
    if measures.is_empty() {
        return param("barycenter needs at least one measure");
    }
    let p = kernel.dim();
    for (s, x) in measures.iter().enumerate() {
        if x.len() != p {
            return param(format!(
                "measure {s} has length {}, kernel dimension is {p}",
                x.len()
            ));
        }
        check_nonnegative(x, &format!("measure {s}"))?;
    }
    let n_problems = measures.len();
    let psi = params.psi();
    let active: Vec<bool> = measures.iter().map(|x| x.iter().any(|&v| v > 0.0)).collect();
    if !active.iter().any(|&a| a) {
        let zero = SinkhornState::zeros(p);
        return Ok(BarycenterResult {
            barycenter: vec![0.0; p],
            left_marginals: vec![vec![0.0; p]; n_problems],
            plans: vec![PlanSummary::zero(p, kernel.sum()); n_problems],
            states: vec![zero; n_problems],
            objective: 0.0,
            converged: true,
            iterations: 0,
        });
    }

    if ws.scalings.len() != n_problems {
        ws.scalings = vec![None; n_problems];
    }
    let mut scalings: Vec<Scaling> = ws
        .scalings
        .iter_mut()
        .zip(&active)
        .map(|(slot, &on)| {
            let mut sc = match slot.take() {
                Some(sc) if on && sc.is_usable() => sc,
                _ => Scaling::new(kernel),
            };
            if !on {
                sc.set_zero();
            }
            sc
        })
        .collect();
    let log_x: Vec<Vec<f64>> = measures.iter().map(|x| log_measure(x)).collect();

    let mut log_bar = vec![0.0; p];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        iterations = it;
        let step_u = |(sc, lx): (&mut Scaling, &Vec<f64>)| -> Result<f64> {
            let d = sc.update_u(kernel, lx, psi, it)?;
            sc.refresh_ktu();
            Ok(d)
        };
        let du: Vec<f64> = if parallel {
            scalings
                .par_iter_mut()
                .zip(active.par_iter())
                .zip(log_x.par_iter())
                .filter(|((_, &on), _)| on)
                .map(|((sc, _), lx)| step_u((sc, lx)))
                .collect::<Result<_>>()?
        } else {
            scalings
                .iter_mut()
                .zip(&active)
                .zip(&log_x)
                .filter(|((_, &on), _)| on)
                .map(|((sc, _), lx)| step_u((sc, lx)))
                .collect::<Result<_>>()?
        };

        // inactive problems have K^T u = 0 and contribute zero to the mean
        let w = 1.0 - psi;
        let log_s = (n_problems as f64).ln();
        let mut terms = Vec::with_capacity(n_problems);
        for (j, lb) in log_bar.iter_mut().enumerate() {
            terms.clear();
            for (sc, &on) in scalings.iter().zip(&active) {
                if on {
                    terms.push(w * sc.log_ktu(kernel, j));
                }
            }
            *lb = (log_sum_exp(&terms) - log_s) / w;
        }
        if log_bar.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Numerical {
                iteration: it,
                detail: "barycenter left the positive reals".into(),
            });
        }

        let step_v = |sc: &mut Scaling| sc.update_v(kernel, &log_bar, psi, it);
        let dv: Vec<f64> = if parallel {
            scalings
                .par_iter_mut()
                .zip(active.par_iter())
                .filter(|(_, &on)| on)
                .map(|(sc, _)| step_v(sc))
                .collect::<Result<_>>()?
        } else {
            scalings
                .iter_mut()
                .zip(&active)
                .filter(|(_, &on)| on)
                .map(|(sc, _)| step_v(sc))
                .collect::<Result<_>>()?
        };

        let residual = du.iter().chain(&dv).copied().fold(0.0, f64::max);
        if residual <= params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("barycenter stopped after {iterations} iterations without converging");
    }

    let barycenter: Vec<f64> = log_bar.iter().map(|x| x.exp()).collect();
    let plans: Vec<PlanSummary> = scalings.iter().map(|sc| sc.summary(kernel.sum())).collect();
    let mut objective = 0.0;
    for (plan, x) in plans.iter().zip(measures) {
        objective += plan.value(x, &barycenter, params.epsilon, params.gamma);
    }
    objective /= n_problems as f64;
    if !objective.is_finite() {
        return Err(Error::Numerical {
            iteration: iterations,
            detail: format!("barycenter objective evaluated to {objective}"),
        });
    }
    let states = scalings
        .iter()
        .map(|sc| sc.state(converged, iterations))
        .collect();
    ws.scalings = scalings.into_iter().map(Some).collect();
    Ok(BarycenterResult {
        barycenter,
        left_marginals: plans.iter().map(|p| p.left.clone()).collect(),
        plans,
        states,
        objective,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gibbs_kernel, CostMatrix};
    use crate::uot::sinkhorn_unbalanced;
    use ndarray::Array2;

    fn line_kernel(p: usize, eps: f64) -> GibbsKernel {
        let m = Array2::from_shape_fn((p, p), |(i, j)| (i as f64 - j as f64).abs());
        gibbs_kernel(&CostMatrix::new(m).unwrap(), eps).unwrap()
    }

    #[test]
    fn all_zero_inputs() {
        let k = line_kernel(3, 1.0);
        let r = unbalanced_barycenter(&[vec![0.0; 3], vec![0.0; 3]], &k, &SinkhornParams::new(1.0, 1.0))
            .unwrap();
        assert_eq!(r.barycenter, vec![0.0; 3]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn identical_inputs_are_order_free() {
        let k = line_kernel(5, 0.5);
        let x = vec![0.0, 1.0, 2.0, 0.5, 0.0];
        let params = SinkhornParams::new(0.5, 2.0);
        let r = unbalanced_barycenter(&[x.clone(), x.clone(), x.clone()], &k, &params).unwrap();
        assert!(r.converged);
        assert_eq!(r.left_marginals[0], r.left_marginals[2]);
        assert_eq!(r.left_marginals[0], r.left_marginals[1]);
    }

    #[test]
    fn barycenter_is_mean_of_right_marginals() {
        let k = line_kernel(6, 0.7);
        let xs = vec![
            vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.3],
            vec![0.0; 6],
        ];
        let params = SinkhornParams {
            tol: 1e-10,
            ..SinkhornParams::new(0.7, 1.0)
        };
        let r = unbalanced_barycenter(&xs, &k, &params).unwrap();
        assert!(r.converged);
        for j in 0..6 {
            let mean: f64 = r.plans.iter().map(|p| p.right[j]).sum::<f64>() / 3.0;
            assert!((mean - r.barycenter[j]).abs() < 1e-8 * (1.0 + mean));
        }
    }

    #[test]
    fn single_measure_objective_matches_direct_transport() {
        let k = line_kernel(4, 0.5);
        let x = vec![1.0, 0.0, 0.4, 0.0];
        let params = SinkhornParams {
            tol: 1e-10,
            ..SinkhornParams::new(0.5, 1.0)
        };
        let r = unbalanced_barycenter(std::slice::from_ref(&x), &k, &params).unwrap();
        let direct = sinkhorn_unbalanced(&x, &r.barycenter, &k, &params).unwrap();
        assert!((direct.value - r.objective).abs() < 1e-8);
    }

    #[test]
    fn parallel_matches_serial() {
        let k = line_kernel(5, 0.5);
        let xs = vec![vec![1.0, 0.0, 0.0, 0.0, 0.2], vec![0.0, 0.3, 0.0, 1.0, 0.0]];
        let params = SinkhornParams::new(0.5, 1.0);
        let a = unbalanced_barycenter_with(&xs, &k, &params, &mut BarycenterWorkspace::new(), false)
            .unwrap();
        let b = unbalanced_barycenter_with(&xs, &k, &params, &mut BarycenterWorkspace::new(), true)
            .unwrap();
        assert_eq!(a.barycenter, b.barycenter);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let k = line_kernel(5, 0.5);
        let xs = vec![vec![1.0, 0.0, 0.0, 0.0, 0.2], vec![0.0, 0.3, 0.0, 1.0, 0.0]];
        let params = SinkhornParams {
            tol: 1e-10,
            ..SinkhornParams::new(0.5, 1.0)
        };
        let cold = unbalanced_barycenter(&xs, &k, &params).unwrap();
        let mut ws = BarycenterWorkspace::new();
        let moved = vec![vec![0.9, 0.1, 0.0, 0.0, 0.2], vec![0.0, 0.3, 0.1, 1.0, 0.0]];
        unbalanced_barycenter_with(&moved, &k, &params, &mut ws, false).unwrap();
        let warm = unbalanced_barycenter_with(&xs, &k, &params, &mut ws, false).unwrap();
        assert!(warm.iterations < cold.iterations);
        assert!((warm.objective - cold.objective).abs() < 1e-7);
    }
}
