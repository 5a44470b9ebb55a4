use ndarray::{Array2, ArrayView1, ArrayView2};

use super::design::{norm, soft_threshold, Design};
use super::lasso::{l1_violation, CdOptions, CdReport};
use crate::error::{param, Result};

#[derive(Debug, Clone)]
pub struct GroupLassoFit {
    /// `p x S`, column `s` belongs to subject `s`.
    pub x: Array2<f64>,
    pub report: CdReport,
}

#[derive(Debug, Clone)]
pub struct DirtyFit {
    pub common: Array2<f64>,
    pub specific: Array2<f64>,
    pub report: CdReport,
}

impl DirtyFit {
    pub fn sum(&self) -> Array2<f64> {
        &self.common + &self.specific
    }
}

struct Tasks {
    designs: Vec<Design>,
    residuals: Vec<Vec<f64>>,
    p: usize,
}

impl Tasks {
    fn new(ys: &[ArrayView1<f64>], ls: &[ArrayView2<f64>]) -> Result<Self> {
        if ys.is_empty() || ys.len() != ls.len() {
            return param(format!(
                "need matching, nonempty observation and design lists ({} vs {})",
                ys.len(),
                ls.len()
            ));
        }
        let designs = ls.iter().map(|l| Design::new(*l)).collect::<Result<Vec<_>>>()?;
        let p = designs[0].p();
        for (d, y) in designs.iter().zip(ys) {
            if d.p() != p {
                return param("all designs must have the same number of columns");
            }
            d.check_target(*y)?;
        }
        let residuals = ys.iter().map(|y| y.to_vec()).collect();
        Ok(Self {
            designs,
            residuals,
            p,
        })
    }

    fn n_tasks(&self) -> usize {
        self.designs.len()
    }

    fn corr(&self, s: usize, j: usize) -> f64 {
        self.designs[s].corr(j, &self.residuals[s])
    }

    fn shift(&mut self, s: usize, j: usize, delta: f64) {
        if delta != 0.0 {
            self.designs[s].axpy(j, delta, &mut self.residuals[s]);
        }
    }
}

/// Minimizer of `sum_s a_s/2 x_s^2 - c_s x_s + lambda ||x||_2`.
pub(crate) fn group_prox(c: &[f64], a: &[f64], lambda: f64, out: &mut [f64]) {
    let cn = norm(c);
    if cn <= lambda {
        out.fill(0.0);
        return;
    }
    if lambda == 0.0 {
        for ((o, &cs), &as_) in out.iter_mut().zip(c).zip(a) {
            *o = if as_ > 0.0 { cs / as_ } else { 0.0 };
        }
        return;
    }
    // x_s = c_s rho / (a_s rho + lambda) where rho = ||x|| solves
    // phi(rho) = sum_s c_s^2 / (a_s rho + lambda)^2 = 1, phi decreasing
    let rho = if a.iter().all(|&v| v == a[0]) && a[0] > 0.0 {
        (cn - lambda) / a[0]
    } else {
        let a_min = a
            .iter()
            .zip(c)
            .filter(|(_, &cs)| cs != 0.0)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min);
        let mut lo = 0.0;
        let mut hi = cn / a_min;
        let mut rho = 0.5 * (lo + hi);
        for _ in 0..200 {
            let mut phi = -1.0;
            let mut dphi = 0.0;
            for (&cs, &as_) in c.iter().zip(a) {
                let d = as_ * rho + lambda;
                phi += cs * cs / (d * d);
                dphi -= 2.0 * cs * cs * as_ / (d * d * d);
            }
            if phi > 0.0 {
                lo = rho;
            } else {
                hi = rho;
            }
            let newton = rho - phi / dphi;
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - rho).abs() <= 1e-15 * rho.max(1e-300) {
                rho = next;
                break;
            }
            rho = next;
        }
        rho
    };
    for ((o, &cs), &as_) in out.iter_mut().zip(c).zip(a) {
        *o = cs * rho / (as_ * rho + lambda);
    }
}

/// Distance from `g` to `lambda * subdiff ||x||_2`.
fn group_violation(g: &[f64], x: &[f64], lambda: f64) -> f64 {
    let xn = norm(x);
    if xn == 0.0 {
        return (norm(g) - lambda).max(0.0);
    }
    g.iter()
        .zip(x)
        .map(|(gs, xs)| (gs - lambda * xs / xn).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn update_row(tasks: &mut Tasks, x: &mut Array2<f64>, j: usize, lambda: f64) -> f64 {
    let s_count = tasks.n_tasks();
    let g: Vec<f64> = (0..s_count).map(|s| tasks.corr(s, j)).collect();
    let row: Vec<f64> = (0..s_count).map(|s| x[[j, s]]).collect();
    let violation = group_violation(&g, &row, lambda);
    let a: Vec<f64> = (0..s_count).map(|s| tasks.designs[s].lipschitz(j)).collect();
    let c: Vec<f64> = (0..s_count).map(|s| g[s] + a[s] * row[s]).collect();
    let mut new = vec![0.0; s_count];
    group_prox(&c, &a, lambda, &mut new);
    for s in 0..s_count {
        tasks.shift(s, j, new[s] - row[s]);
        x[[j, s]] = new[s];
    }
    violation
}

/// Multi-task regression with an `l21` penalty on the rows of `X`:
/// `min sum_s (1/2n) ||y_s - L_s x_s||^2 + lambda sum_j ||X_j.||_2`.
pub fn solve_group_lasso(
    ys: &[ArrayView1<f64>],
    ls: &[ArrayView2<f64>],
    lambda: f64,
    opts: &CdOptions,
) -> Result<GroupLassoFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return param(format!("lambda must be nonnegative, got {lambda}"));
    }
    opts.validate()?;
    let mut tasks = Tasks::new(ys, ls)?;
    let mut x = Array2::zeros((tasks.p, tasks.n_tasks()));
    let mut violation = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        violation = 0.0;
        for j in 0..tasks.p {
            violation = violation.max(update_row(&mut tasks, &mut x, j, lambda));
        }
        if violation <= opts.tol {
            return Ok(GroupLassoFit {
                x,
                report: CdReport {
                    sweeps: sweep,
                    violation,
                    converged: true,
                },
            });
        }
    }
    Ok(GroupLassoFit {
        x,
        report: CdReport {
            sweeps: opts.max_sweeps,
            violation,
            converged: false,
        },
    })
}

/// Dirty model: `X = C + D` with `lambda_shared ||C||_21 +
/// lambda_specific ||D||_1`, fitted by block coordinate descent that visits
/// the row of `C` and then the entries of `D` for every source.
pub fn solve_dirty(
    ys: &[ArrayView1<f64>],
    ls: &[ArrayView2<f64>],
    lambda_shared: f64,
    lambda_specific: f64,
    opts: &CdOptions,
) -> Result<DirtyFit> {
    for (name, v) in [("lambda_shared", lambda_shared), ("lambda_specific", lambda_specific)] {
        if !(v >= 0.0) || v.is_nan() {
            return param(format!("{name} must be nonnegative, got {v}"));
        }
    }
    opts.validate()?;
    let mut tasks = Tasks::new(ys, ls)?;
    let s_count = tasks.n_tasks();
    let mut common = Array2::zeros((tasks.p, s_count));
    let mut specific = Array2::zeros((tasks.p, s_count));
    let mut violation = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        violation = 0.0;
        for j in 0..tasks.p {
            if lambda_shared.is_finite() {
                violation = violation.max(update_row(&mut tasks, &mut common, j, lambda_shared));
            }
            if lambda_specific.is_finite() {
                for s in 0..s_count {
                    let a = tasks.designs[s].lipschitz(j);
                    let g = tasks.corr(s, j);
                    let old = specific[[j, s]];
                    violation = violation.max(l1_violation(g, old, lambda_specific));
                    let new = if a > 0.0 {
                        soft_threshold(g + a * old, lambda_specific) / a
                    } else {
                        0.0
                    };
                    tasks.shift(s, j, new - old);
                    specific[[j, s]] = new;
                }
            }
        }
        if violation <= opts.tol {
            return Ok(DirtyFit {
                common,
                specific,
                report: CdReport {
                    sweeps: sweep,
                    violation,
                    converged: true,
                },
            });
        }
    }
    Ok(DirtyFit {
        common,
        specific,
        report: CdReport {
            sweeps: opts.max_sweeps,
            violation,
            converged: false,
        },
    })
}

/// Smallest `lambda` for which the group lasso returns zero.
pub fn group_lasso_lambda_max(ys: &[ArrayView1<f64>], ls: &[ArrayView2<f64>]) -> f64 {
    let p = ls.first().map_or(0, |l| l.ncols());
    let corr: Vec<_> = ys
        .iter()
        .zip(ls)
        .map(|(y, l)| l.t().dot(y) / y.len() as f64)
        .collect();
    (0..p)
        .map(|j| corr.iter().map(|c| c[j] * c[j]).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
