use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::design::{soft_threshold, Design};
use crate::error::{param, Result};

/// Stopping rule shared by the coordinate descent solvers: a sweep in which
/// every coordinate's optimality violation is at most `tol` ends the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 2000,
        }
    }
}

impl CdOptions {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return param(format!("cd tol must be positive, got {}", self.tol));
        }
        if self.max_sweeps == 0 {
            return param("cd max_sweeps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdReport {
    pub sweeps: usize,
    /// Largest coordinate optimality violation seen in the last sweep.
    pub violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub x: Array1<f64>,
    pub report: CdReport,
}

/// `min_x (1/2n) ||y - L x||^2 + lambda ||x||_1` by cyclic coordinate descent.
pub fn solve_lasso(y: ArrayView1<f64>, l: ArrayView2<f64>, lambda: f64) -> Result<Array1<f64>> {
    Ok(solve_lasso_with(y, l, lambda, &CdOptions::default(), None)?.x)
}

pub fn solve_lasso_with(
    y: ArrayView1<f64>,
    l: ArrayView2<f64>,
    lambda: f64,
    opts: &CdOptions,
    x0: Option<ArrayView1<f64>>,
) -> Result<LassoFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return param(format!("lambda must be nonnegative, got {lambda}"));
    }
    opts.validate()?;
    let design = Design::new(l)?;
    design.check_target(y)?;
    let mut x = match x0 {
        Some(x0) if x0.len() == design.p() => x0.to_vec(),
        Some(x0) => {
            return param(format!(
                "initial point has length {}, expected {}",
                x0.len(),
                design.p()
            ))
        }
        None => vec![0.0; design.p()],
    };
    let y = y.to_vec();
    let mut r = design.residual(&y, &x);
    let report = lasso_cd(&design, &mut r, &mut x, lambda, opts);
    Ok(LassoFit {
        x: Array1::from(x),
        report,
    })
}

/// Coordinate descent on `x` with `r = y - L x` kept up to date.
pub(crate) fn lasso_cd(
    design: &Design,
    r: &mut [f64],
    x: &mut [f64],
    lambda: f64,
    opts: &CdOptions,
) -> CdReport {
    let mut violation = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        violation = 0.0;
        for j in 0..design.p() {
            let a = design.lipschitz(j);
            let g = design.corr(j, r);
            violation = violation.max(l1_violation(g, x[j], lambda));
            if a == 0.0 {
                x[j] = 0.0;
                continue;
            }
            let new = soft_threshold(g + a * x[j], lambda) / a;
            let delta = new - x[j];
            if delta != 0.0 {
                design.axpy(j, delta, r);
                x[j] = new;
            }
        }
        if violation <= opts.tol {
            return CdReport {
                sweeps: sweep,
                violation,
                converged: true,
            };
        }
    }
    log::debug!("lasso coordinate descent stopped with violation {violation}");
    CdReport {
        sweeps: opts.max_sweeps,
        violation,
        converged: false,
    }
}

/// Distance from `g = L_j^T r / n` to `lambda * subdiff|x_j|`.
pub(crate) fn l1_violation(g: f64, xj: f64, lambda: f64) -> f64 {
    if xj > 0.0 {
        (g - lambda).abs()
    } else if xj < 0.0 {
        (g + lambda).abs()
    } else {
        (g.abs() - lambda).max(0.0)
    }
}

/// Smallest `lambda` for which the zero vector solves the lasso.
pub fn lasso_lambda_max(y: ArrayView1<f64>, l: ArrayView2<f64>) -> f64 {
    let n = y.len() as f64;
    l.t().dot(&y).iter().fold(0.0, |m: f64, v| m.max(v.abs())) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn above_lambda_max_is_zero() {
        let l = array![[1.0, 0.5, -0.2], [0.3, 1.0, 0.4]];
        let y = array![1.0, -2.0];
        let lmax = lasso_lambda_max(y.view(), l.view());
        let x = solve_lasso(y.view(), l.view(), lmax).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        let x = solve_lasso(y.view(), l.view(), 0.9 * lmax).unwrap();
        assert!(x.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unpenalized_square_system() {
        let l = array![[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]];
        let truth = array![1.0, -2.0, 0.5];
        let y = l.dot(&truth);
        let opts = CdOptions {
            tol: 1e-14,
            max_sweeps: 100_000,
        };
        let fit = solve_lasso_with(y.view(), l.view(), 0.0, &opts, None).unwrap();
        for (a, b) in fit.x.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn orthogonal_design_closed_form() {
        // columns orthogonal with squared norm n, so each coordinate decouples
        let n = 4.0;
        let l: Array2<f64> = array![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0],
            [1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0]
        ];
        let y = array![3.0, -1.0, 0.5, 2.0];
        let lambda = 0.4;
        let x = solve_lasso(y.view(), l.view(), lambda).unwrap();
        let c = l.t().dot(&y) / n;
        for j in 0..3 {
            assert!((x[j] - soft_threshold(c[j], lambda)).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let l = array![[1.0]];
        assert!(solve_lasso(array![1.0].view(), l.view(), -1.0).is_err());
    }
}
