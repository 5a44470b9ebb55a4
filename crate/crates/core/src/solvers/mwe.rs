//! Joint estimation across subjects with an unbalanced transport coupling.
//!
//! The objective, for subjects `s = 1..S` with sources `x_s = x_s+ - x_s-`,
//! noise levels `sigma_s >= sigma0` and shared barycenters `xbar+`, `xbar-`:
//!
//! ```text
//! sum_s ||Y_s - L_s x_s||^2 / (2 n sigma_s) + sigma_s / 2 + lambda ||x_s||_1
//!   + (mu / S) sum_s W(x_s+, xbar+) + W(x_s-, xbar-)
//! ```
//!
//! With `concomitant = false` every `sigma_s` is frozen at 1 and the
//! `sigma_s / 2` terms are dropped.
//!
//! Each transport term is `eps kl(P|K) + gamma kl(P1|x) + gamma kl(P^T 1|xbar)`
//! minimized over the plan `P`. The solver treats the plans as variables and
//! minimizes the joint objective by blocks: the sources of one subject with
//! plans fixed (where only the left marginal `m = P1` matters), the noise
//! level in closed form, then all plans and barycenters together. Every
//! block step is a minimization, so the recorded objective never increases.

use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::{norm, Design};
use super::lasso::{lasso_cd, CdOptions, CdReport};
use crate::dataset::MultiSubjectDataset;
use crate::error::{param, Error, Result};
use crate::geometry::{gibbs_kernel, CostMatrix, GibbsKernel};
use crate::uot::{
    unbalanced_barycenter_with, BarycenterWorkspace, PlanSummary, SinkhornParams,
};

/// Allowed relative increase of the objective between outer iterations
/// before the run is aborted.
const INCREASE_TOL: f64 = 1e-10;

/// A signed source vector stored as its positive and negative parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedSource {
    pub pos: Array1<f64>,
    pub neg: Array1<f64>,
}

impl SignedSource {
    pub fn zeros(p: usize) -> Self {
        Self {
            pos: Array1::zeros(p),
            neg: Array1::zeros(p),
        }
    }

    pub fn from_signed(x: ArrayView1<f64>) -> Self {
        Self {
            pos: x.mapv(|v| v.max(0.0)),
            neg: x.mapv(|v| (-v).max(0.0)),
        }
    }

    pub fn signed(&self) -> Array1<f64> {
        &self.pos - &self.neg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MWEConfig {
    pub mu: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub gamma: f64,
    /// Noise floor. `None` uses `alpha * min_s ||Y_s|| / sqrt(n)`.
    pub sigma0: Option<f64>,
    pub alpha: f64,
    /// Estimate a noise level per subject; otherwise all are fixed to 1.
    pub concomitant: bool,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub cd: CdOptions,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    /// Run the per-subject and per-problem updates on the rayon pool.
    pub parallel: bool,
}

impl Default for MWEConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            lambda: 0.0,
            epsilon: 1.0,
            gamma: 1.0,
            sigma0: None,
            alpha: 0.01,
            concomitant: true,
            outer_tol: 1e-5,
            outer_max_iter: 200,
            cd: CdOptions::default(),
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iter: 5000,
            parallel: false,
        }
    }
}

impl MWEConfig {
    pub fn new(mu: f64, lambda: f64, epsilon: f64, gamma: f64) -> Self {
        Self {
            mu,
            lambda,
            epsilon,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                param(format!("{name} must be nonnegative and finite, got {v}"))
            }
        };
        nonneg("mu", self.mu)?;
        nonneg("lambda", self.lambda)?;
        for (name, v) in [("epsilon", self.epsilon), ("gamma", self.gamma)] {
            if !(v > 0.0) || !v.is_finite() {
                return param(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(s0) = self.sigma0 {
            if !(s0 > 0.0) || !s0.is_finite() {
                return param(format!("sigma0 must be positive, got {s0}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return param(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.outer_tol > 0.0) || self.outer_max_iter == 0 {
            return param("outer_tol must be positive and outer_max_iter at least 1");
        }
        if !(self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iter == 0 {
            return param("sinkhorn_tol must be positive and sinkhorn_max_iter at least 1");
        }
        self.cd.validate()
    }

    fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
            ..SinkhornParams::new(self.epsilon, self.gamma)
        }
    }
}

/// Objective decomposition after one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterTraceRow {
    pub iteration: usize,
    pub data_fit: f64,
    pub ot: f64,
    pub l1: f64,
    pub objective: f64,
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MWESolution {
    pub sources: Vec<SignedSource>,
    pub sigmas: Vec<f64>,
    pub sigma0: f64,
    /// `(xbar+, xbar-)`.
    pub barycenters: (Array1<f64>, Array1<f64>),
    /// Objective after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub trace: Vec<OuterTraceRow>,
    pub converged: bool,
    /// False if any barycenter computation hit its iteration limit.
    pub sinkhorn_converged: bool,
    pub iterations: usize,
}

/// Trace as CSV: `iteration,data_fit,ot,l1,objective,sigma_0,...`.
pub fn write_outer_trace_csv<W: Write>(w: W, rows: &[OuterTraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n_sigmas = rows.first().map_or(0, |r| r.sigmas.len());
    let mut header = vec![
        "iteration".to_string(),
        "data_fit".into(),
        "ot".into(),
        "l1".into(),
        "objective".into(),
    ];
    header.extend((0..n_sigmas).map(|s| format!("sigma_{s}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.data_fit.to_string(),
            r.ot.to_string(),
            r.l1.to_string(),
            r.objective.to_string(),
        ];
        rec.extend(r.sigmas.iter().map(|s| s.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `max(||Y - L x|| / sqrt(n), sigma0)`.
pub fn update_sigma(
    y: ArrayView1<f64>,
    l: ArrayView2<f64>,
    x: &SignedSource,
    sigma0: f64,
) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return param(format!("sigma0 must be positive, got {sigma0}"));
    }
    if l.dim() != (y.len(), x.pos.len()) || x.neg.len() != x.pos.len() {
        return param("shapes of observation, leadfield and source disagree");
    }
    let r = &y - &l.dot(&x.signed());
    Ok((norm(r.as_slice().expect("contiguous")) / (y.len() as f64).sqrt()).max(sigma0))
}

#[derive(Debug, Clone)]
pub struct SubproblemFit {
    pub x: Array1<f64>,
    pub report: CdReport,
}

/// `min_{x >= 0} (1/2n) ||Y - L x||^2 + kappa (<x, 1> - <log x, m>) + lam_eff ||x||_1`
/// by coordinate descent. Coordinates with `m_j > 0` stay strictly positive.
pub fn solve_subproblem(
    y: ArrayView1<f64>,
    l: ArrayView2<f64>,
    m: &[f64],
    kappa: f64,
    lam_eff: f64,
    x_init: Option<ArrayView1<f64>>,
    opts: &CdOptions,
) -> Result<SubproblemFit> {
    let design = Design::new(l)?;
    design.check_target(y)?;
    let p = design.p();
    if m.len() != p {
        return param(format!("marginal has length {}, expected {p}", m.len()));
    }
    if m.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("marginal must be nonnegative".into()));
    }
    if !(kappa >= 0.0) || !(lam_eff >= 0.0) || !kappa.is_finite() || !lam_eff.is_finite() {
        return param(format!(
            "kappa and lam_eff must be nonnegative, got {kappa} and {lam_eff}"
        ));
    }
    opts.validate()?;
    let mut x = match x_init {
        Some(x0) if x0.len() == p => x0.iter().map(|v| v.max(0.0)).collect(),
        Some(x0) => return param(format!("initial point has length {}, expected {p}", x0.len())),
        None => vec![0.0; p],
    };
    let mut r = design.residual(&y.to_vec(), &x);
    let report = nonneg_cd(&design, &mut r, &mut x, m, kappa, lam_eff, opts)?;
    Ok(SubproblemFit {
        x: Array1::from(x),
        report,
    })
}

/// Value and gradient of the differentiable part of the subproblem,
/// `(1/2n) ||Y - L x||^2 + kappa (<x, 1> - <log x, m>)`, at `x > 0`.
pub fn subproblem_smooth(
    y: ArrayView1<f64>,
    l: ArrayView2<f64>,
    m: &[f64],
    kappa: f64,
    x: ArrayView1<f64>,
) -> (f64, Array1<f64>) {
    let n = y.len() as f64;
    let r = &y - &l.dot(&x);
    let mut value = r.dot(&r) / (2.0 * n);
    let mut grad = -l.t().dot(&r) / n;
    for j in 0..x.len() {
        value += kappa * x[j];
        grad[j] += kappa;
        if m[j] > 0.0 {
            value -= kappa * m[j] * x[j].ln();
            grad[j] -= kappa * m[j] / x[j];
        }
    }
    (value, grad)
}

/// Exact minimizer over `x >= 0` of
/// `a/2 x^2 - c x + (kappa + lam) x - kappa m log x`.
fn coordinate_min(a: f64, c: f64, kappa: f64, lam: f64, m: f64, index: usize) -> Result<f64> {
    let diverged = |value| Err(Error::DivergentCoordinate { index, value });
    let b = kappa + lam - c;
    let x = if kappa > 0.0 && m > 0.0 {
        // positive root of a x^2 + b x - kappa m = 0, written to avoid
        // cancellation in either sign of b
        let d = kappa * m;
        if a == 0.0 {
            if b <= 0.0 {
                return diverged(f64::INFINITY);
            }
            d / b
        } else {
            let disc = (b * b + 4.0 * a * d).sqrt();
            if b >= 0.0 {
                2.0 * d / (b + disc)
            } else {
                (disc - b) / (2.0 * a)
            }
        }
        .max(f64::MIN_POSITIVE)
    } else if a == 0.0 {
        if b < 0.0 {
            return diverged(f64::INFINITY);
        }
        0.0
    } else {
        (-b / a).max(0.0)
    };
    if !x.is_finite() {
        return diverged(x);
    }
    Ok(x)
}

/// Coordinate descent for the subproblem with `r = target - L x` kept up
/// to date.
pub(crate) fn nonneg_cd(
    design: &Design,
    r: &mut [f64],
    x: &mut [f64],
    m: &[f64],
    kappa: f64,
    lam: f64,
    opts: &CdOptions,
) -> Result<CdReport> {
    let mut violation = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        violation = 0.0;
        for j in 0..design.p() {
            let a = design.lipschitz(j);
            let g = design.corr(j, r);
            let barrier = m[j] > 0.0 && kappa > 0.0;
            let mut grad = kappa + lam - g;
            if barrier {
                grad -= kappa * m[j] / x[j];
            }
            violation = violation.max(if x[j] > 0.0 { grad.abs() } else { (-grad).max(0.0) });
            let new = coordinate_min(a, g + a * x[j], kappa, lam, m[j], j)?;
            let delta = new - x[j];
            if delta != 0.0 {
                design.axpy(j, delta, r);
                x[j] = new;
            }
        }
        if violation <= opts.tol {
            return Ok(CdReport {
                sweeps: sweep,
                violation,
                converged: true,
            });
        }
    }
    log::debug!("subproblem coordinate descent stopped with violation {violation}");
    Ok(CdReport {
        sweeps: opts.max_sweeps,
        violation,
        converged: false,
    })
}

struct Subject {
    design: Design,
    y_norm: f64,
    pos: Vec<f64>,
    neg: Vec<f64>,
    /// `Y - L (pos - neg)`.
    r: Vec<f64>,
    sigma: f64,
}

impl Subject {
    fn data_fit(&self, concomitant: bool) -> f64 {
        let n = self.design.n() as f64;
        let rss: f64 = self.r.iter().map(|v| v * v).sum();
        if concomitant {
            rss / (2.0 * n * self.sigma) + self.sigma / 2.0
        } else {
            rss / (2.0 * n)
        }
    }

    fn l1(&self) -> f64 {
        self.pos.iter().sum::<f64>() + self.neg.iter().sum::<f64>()
    }

    fn step(
        &mut self,
        m_pos: &[f64],
        m_neg: &[f64],
        config: &MWEConfig,
        n_subjects: usize,
        sigma0: f64,
    ) -> Result<()> {
        let scale = if config.concomitant { self.sigma } else { 1.0 };
        let kappa = config.mu * config.gamma * scale / n_subjects as f64;
        let lam = config.lambda * scale;
        if kappa == 0.0 {
            // no barrier: the two parts of a coordinate are minimized jointly,
            // which is plain lasso coordinate descent on pos - neg
            let mut x: Vec<f64> = self.pos.iter().zip(&self.neg).map(|(a, b)| a - b).collect();
            lasso_cd(&self.design, &mut self.r, &mut x, lam, &config.cd);
            for (j, v) in x.into_iter().enumerate() {
                (self.pos[j], self.neg[j]) = (v.max(0.0), (-v).max(0.0));
            }
        } else {
            self.step_parts(m_pos, m_neg, kappa, lam, &config.cd)?;
        }
        if config.concomitant {
            self.sigma = (norm(&self.r) / (self.design.n() as f64).sqrt()).max(sigma0);
        }
        Ok(())
    }

    fn step_parts(&mut self, m_pos: &[f64], m_neg: &[f64], kappa: f64, lam: f64, cd: &CdOptions) -> Result<()> {
        nonneg_cd(&self.design, &mut self.r, &mut self.pos, m_pos, kappa, lam, cd)?;
        // the negative part sees the residual with flipped sign
        self.r.iter_mut().for_each(|v| *v = -*v);
        let res = nonneg_cd(&self.design, &mut self.r, &mut self.neg, m_neg, kappa, lam, cd);
        self.r.iter_mut().for_each(|v| *v = -*v);
        res.map(|_| ())
    }
}

struct Coupling {
    plans_pos: Vec<PlanSummary>,
    plans_neg: Vec<PlanSummary>,
    bar_pos: Vec<f64>,
    bar_neg: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Parts {
    data_fit: f64,
    ot: f64,
    l1: f64,
}

impl Parts {
    fn total(&self) -> f64 {
        self.data_fit + self.ot + self.l1
    }
}

fn ot_term(subjects: &[Subject], c: &Coupling, config: &MWEConfig) -> f64 {
    if config.mu == 0.0 {
        return 0.0;
    }
    let (eps, gamma) = (config.epsilon, config.gamma);
    let mut total = 0.0;
    for (s, sub) in subjects.iter().enumerate() {
        total += c.plans_pos[s].value(&sub.pos, &c.bar_pos, eps, gamma);
        total += c.plans_neg[s].value(&sub.neg, &c.bar_neg, eps, gamma);
    }
    config.mu * total / subjects.len() as f64
}

fn parts(subjects: &[Subject], c: &Coupling, config: &MWEConfig) -> Parts {
    Parts {
        data_fit: subjects.iter().map(|s| s.data_fit(config.concomitant)).sum(),
        ot: ot_term(subjects, c, config),
        l1: config.lambda * subjects.iter().map(Subject::l1).sum::<f64>(),
    }
}

/// Minimum Wasserstein Estimates: joint fit of all subjects with a noise
/// level per subject (see the module documentation for the objective).
pub fn solve_mwe(
    data: &MultiSubjectDataset,
    cost: &CostMatrix,
    config: &MWEConfig,
) -> Result<MWESolution> {
    config.validate()?;
    let p = data.n_sources();
    if cost.dim() != p {
        return param(format!(
            "cost matrix is {0}x{0} but the dataset has {p} sources",
            cost.dim()
        ));
    }
    let kernel = gibbs_kernel(cost, config.epsilon)?;
    run(data, &kernel, config)
}

/// Multi-task Wasserstein fit: `solve_mwe` with every noise level frozen at 1.
pub fn solve_mtw(
    data: &MultiSubjectDataset,
    cost: &CostMatrix,
    config: &MWEConfig,
) -> Result<MWESolution> {
    let config = MWEConfig {
        concomitant: false,
        ..config.clone()
    };
    solve_mwe(data, cost, &config)
}

fn run(data: &MultiSubjectDataset, kernel: &GibbsKernel, config: &MWEConfig) -> Result<MWESolution> {
    let n_subjects = data.n_subjects();
    let n = data.n_sensors() as f64;
    let p = data.n_sources();
    let mut subjects = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let design = Design::new(data.leadfield(s))?;
        let y = data.observation(s);
        design.check_target(y)?;
        let y = y.to_vec();
        subjects.push(Subject {
            design,
            y_norm: norm(&y),
            pos: vec![0.0; p],
            neg: vec![0.0; p],
            r: y,
            sigma: 1.0,
        });
    }
    let sigma0 = if config.concomitant {
        let s0 = config.sigma0.unwrap_or_else(|| {
            config.alpha * subjects.iter().map(|s| s.y_norm).fold(f64::INFINITY, f64::min) / n.sqrt()
        });
        if !(s0 > 0.0) {
            return param("default sigma0 is zero because some observation is zero; set sigma0");
        }
        for sub in &mut subjects {
            sub.sigma = (sub.y_norm / n.sqrt()).max(s0);
        }
        s0
    } else {
        1.0
    };

    let params = config.sinkhorn();
    // Start from the plan K (unit scalings) with its right marginal as the
    // barycenter. An empty left marginal would pin every source at zero for
    // good, and a nearly empty one makes the first iterations so slow that
    // the stopping rule fires long before the optimum.
    let start = if config.mu > 0.0 {
        PlanSummary::scaled_kernel(kernel, 1.0)
    } else {
        PlanSummary::zero(p, kernel.sum())
    };
    let bar = start.right.clone();
    let mut coupling = Coupling {
        plans_pos: vec![start.clone(); n_subjects],
        plans_neg: vec![start; n_subjects],
        bar_pos: bar.clone(),
        bar_neg: bar,
    };
    let mut ws_pos = BarycenterWorkspace::new();
    let mut ws_neg = BarycenterWorkspace::new();
    // every plan carries eps * sum(K) when empty; relative progress is
    // measured without this constant
    let offset = if config.mu > 0.0 {
        2.0 * config.mu * config.epsilon * kernel.sum()
    } else {
        0.0
    };

    let mut previous = f64::INFINITY;
    let mut objective_trace = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sinkhorn_converged = true;
    let mut iterations = 0;

    for it in 1..=config.outer_max_iter {
        iterations = it;
        let step = |(sub, (mp, mn)): (&mut Subject, (&PlanSummary, &PlanSummary))| {
            sub.step(&mp.left, &mn.left, config, n_subjects, sigma0)
        };
        if config.parallel {
            subjects
                .par_iter_mut()
                .zip(coupling.plans_pos.par_iter().zip(coupling.plans_neg.par_iter()))
                .map(step)
                .collect::<Result<Vec<_>>>()?;
        } else {
            subjects
                .iter_mut()
                .zip(coupling.plans_pos.iter().zip(coupling.plans_neg.iter()))
                .map(step)
                .collect::<Result<Vec<_>>>()?;
        }
        let mut current = parts(&subjects, &coupling, config);
        check_increase(it, previous, current.total())?;

        if config.mu > 0.0 {
            let pos: Vec<Vec<f64>> = subjects.iter().map(|s| s.pos.clone()).collect();
            let neg: Vec<Vec<f64>> = subjects.iter().map(|s| s.neg.clone()).collect();
            let bp = unbalanced_barycenter_with(&pos, kernel, &params, &mut ws_pos, config.parallel)?;
            let bn = unbalanced_barycenter_with(&neg, kernel, &params, &mut ws_neg, config.parallel)?;
            sinkhorn_converged &= bp.converged && bn.converged;
            let candidate = Coupling {
                plans_pos: bp.plans,
                plans_neg: bn.plans,
                bar_pos: bp.barycenter,
                bar_neg: bn.barycenter,
            };
            let trial = parts(&subjects, &candidate, config);
            if trial.total() <= current.total() {
                coupling = candidate;
                current = trial;
            } else {
                log::debug!(
                    "outer iteration {it}: barycenter step would raise the objective by {}; kept previous plans",
                    trial.total() - current.total()
                );
            }
        }

        let total = current.total();
        objective_trace.push(total);
        trace.push(OuterTraceRow {
            iteration: it,
            data_fit: current.data_fit,
            ot: current.ot,
            l1: current.l1,
            objective: total,
            sigmas: subjects.iter().map(|s| s.sigma).collect(),
        });
        let scale = (total - offset).abs().max(f64::MIN_POSITIVE);
        let decrease = (previous - total) / scale;
        previous = total;
        if decrease <= config.outer_tol {
            converged = true;
            break;
        }
    }
    if !sinkhorn_converged {
        log::warn!("some barycenter computations stopped before converging");
    }

    Ok(MWESolution {
        sigmas: subjects.iter().map(|s| s.sigma).collect(),
        sources: subjects
            .into_iter()
            .map(|s| SignedSource {
                pos: Array1::from(s.pos),
                neg: Array1::from(s.neg),
            })
            .collect(),
        sigma0,
        barycenters: (Array1::from(coupling.bar_pos), Array1::from(coupling.bar_neg)),
        objective_trace,
        trace,
        converged,
        sinkhorn_converged,
        iterations,
    })
}

fn check_increase(iteration: usize, previous: f64, current: f64) -> Result<()> {
    if current > previous + INCREASE_TOL * previous.abs() {
        return Err(Error::ObjectiveIncrease {
            iteration,
            previous,
            current,
        });
    }
    Ok(())
}
