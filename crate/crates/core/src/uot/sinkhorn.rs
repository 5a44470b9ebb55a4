//! Generalized Sinkhorn scaling for entropic unbalanced transport.
//!
//! The plan is never stored: it is `P_ij = u_i K_ij v_j`, with `u` and `v`
//! kept as `exp(alpha) * u~` and `exp(beta) * v~`. Whenever a residual
//! scaling leaves `[exp(-T), exp(T)]` it is absorbed into the potentials and
//! the rescaled kernel `exp(alpha_i + beta_j - M_ij / eps)` is rebuilt from
//! the cost, so small epsilons do not under- or overflow.

use std::io::Write;

use ndarray::{Array1, Array2};

use super::kl::{check_nonnegative, kl_unchecked};
use crate::error::{param, Error, Result};
use crate::geometry::GibbsKernel;

const ABSORB_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Entropic scale (cm). Must equal the kernel's epsilon.
    pub epsilon: f64,
    /// Weight of the KL marginal relaxation.
    pub gamma: f64,
    pub max_iter: usize,
    /// Bound on the relative sup-norm change of the scalings.
    pub tol: f64,
    /// Record `(iteration, objective, residual)` after every iteration.
    pub trace: bool,
}

impl SinkhornParams {
    pub fn new(epsilon: f64, gamma: f64) -> Self {
        Self {
            epsilon,
            gamma,
            max_iter: 5000,
            tol: 1e-6,
            trace: false,
        }
    }

    pub fn psi(&self) -> f64 {
        self.gamma / (self.gamma + self.epsilon)
    }

    pub fn validate(&self, kernel: &GibbsKernel) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return param(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return param(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.tol > 0.0) {
            return param(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return param("max_iter must be at least 1");
        }
        if self.epsilon != kernel.epsilon() {
            return param(format!(
                "params epsilon {} does not match kernel epsilon {}",
                self.epsilon,
                kernel.epsilon()
            ));
        }
        Ok(())
    }
}

/// Scalings in log form; `-inf` encodes an exactly zero entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl SinkhornState {
    pub fn ones(p: usize) -> Self {
        Self {
            log_u: vec![0.0; p],
            log_v: vec![0.0; p],
            converged: false,
            iterations: 0,
        }
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            log_u: vec![f64::NEG_INFINITY; p],
            log_v: vec![f64::NEG_INFINITY; p],
            converged: true,
            iterations: 0,
        }
    }

    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|x| x.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|x| x.exp()).collect()
    }

    /// Dense plan `u_i K_ij v_j`, evaluated in the log domain.
    pub fn materialize(&self, kernel: &GibbsKernel) -> Array2<f64> {
        let eps = kernel.epsilon();
        let cost = kernel.cost();
        Array2::from_shape_fn(cost.dim(), |(i, j)| {
            (self.log_u[i] + self.log_v[j] - cost[[i, j]] / eps).exp()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "objective", "residual"])?;
    for r in rows {
        out.write_record([
            r.iteration.to_string(),
            r.objective.to_string(),
            r.residual.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub state: SinkhornState,
    /// Full unbalanced objective at the returned plan.
    pub value: f64,
    pub trace: Vec<TraceRow>,
}

/// Marginals of the implicit plan plus `kl(P | K)`; enough to evaluate the
/// unbalanced objective against any pair of target measures.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSummary {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub kl_kernel: f64,
}

impl PlanSummary {
    /// The empty plan.
    pub fn zero(p: usize, kernel_sum: f64) -> Self {
        Self {
            left: vec![0.0; p],
            right: vec![0.0; p],
            kl_kernel: kernel_sum,
        }
    }

    /// The plan `c K`.
    pub fn scaled_kernel(kernel: &GibbsKernel, c: f64) -> Self {
        let k = kernel.view();
        Self {
            left: k.sum_axis(ndarray::Axis(1)).mapv(|v| c * v).to_vec(),
            right: k.sum_axis(ndarray::Axis(0)).mapv(|v| c * v).to_vec(),
            kl_kernel: kernel.sum() * (c * c.ln() - c + 1.0),
        }
    }

    /// `eps kl(P|K) + gamma kl(P1|a) + gamma kl(P^T 1|b)`, constant included.
    pub fn value(&self, a: &[f64], b: &[f64], epsilon: f64, gamma: f64) -> f64 {
        epsilon * self.kl_kernel
            + gamma * kl_unchecked(&self.left, a)
            + gamma * kl_unchecked(&self.right, b)
    }
}

/// Working form of one scaling problem.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    kt: Array2<f64>,
    u: Array1<f64>,
    v: Array1<f64>,
    ktu: Array1<f64>,
}

fn split_log(x: f64) -> (f64, f64) {
    if x == f64::NEG_INFINITY {
        (0.0, 0.0)
    } else {
        (x, 1.0)
    }
}

impl Scaling {
    pub(crate) fn new(kernel: &GibbsKernel) -> Self {
        let p = kernel.dim();
        Self {
            alpha: vec![0.0; p],
            beta: vec![0.0; p],
            kt: kernel.view().to_owned(),
            u: Array1::ones(p),
            v: Array1::ones(p),
            ktu: Array1::zeros(p),
        }
    }

    pub(crate) fn from_state(kernel: &GibbsKernel, state: &SinkhornState) -> Self {
        let (alpha, u): (Vec<f64>, Vec<f64>) = state.log_u.iter().map(|&x| split_log(x)).unzip();
        let (beta, v): (Vec<f64>, Vec<f64>) = state.log_v.iter().map(|&x| split_log(x)).unzip();
        let mut s = Self {
            alpha,
            beta,
            kt: Array2::zeros((kernel.dim(), kernel.dim())),
            u: Array1::from(u),
            v: Array1::from(v),
            ktu: Array1::zeros(kernel.dim()),
        };
        s.rebuild(kernel);
        s
    }

    fn rebuild(&mut self, kernel: &GibbsKernel) {
        let eps = kernel.epsilon();
        let cost = kernel.cost();
        if self.alpha.iter().chain(&self.beta).all(|&x| x == 0.0) {
            self.kt.assign(&kernel.view());
            return;
        }
        for ((i, j), k) in self.kt.indexed_iter_mut() {
            *k = (self.alpha[i] + self.beta[j] - cost[[i, j]] / eps).exp();
        }
    }

    pub(crate) fn log_u(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.u).map(|(a, u)| a + u.ln()).collect()
    }

    pub(crate) fn log_v(&self) -> Vec<f64> {
        self.beta.iter().zip(&self.v).map(|(b, v)| b + v.ln()).collect()
    }

    pub(crate) fn state(&self, converged: bool, iterations: usize) -> SinkhornState {
        SinkhornState {
            log_u: self.log_u(),
            log_v: self.log_v(),
            converged,
            iterations,
        }
    }

    /// A warm start needs some positive mass on both sides.
    pub(crate) fn is_usable(&self) -> bool {
        self.u.iter().any(|&x| x > 0.0) && self.v.iter().any(|&x| x > 0.0)
    }

    pub(crate) fn set_zero(&mut self) {
        self.u.fill(0.0);
        self.v.fill(0.0);
        self.ktu.fill(0.0);
    }

    /// `u <- (a / K v)^psi` given `log a`. Returns the relative sup-norm
    /// change of `u`.
    pub(crate) fn update_u(
        &mut self,
        kernel: &GibbsKernel,
        log_a: &[f64],
        psi: f64,
        iteration: usize,
    ) -> Result<f64> {
        let kv = self.kt.dot(&self.v);
        let mut log_prod: Vec<f64> = kv.iter().map(|x| x.ln()).collect();
        for i in 0..log_prod.len() {
            if log_a[i] > f64::NEG_INFINITY && log_prod[i] == f64::NEG_INFINITY {
                log_prod[i] = self.alpha[i] + exact_log_product(kernel, i, &self.beta, &self.v);
            }
        }
        let old = self.log_u();
        let absorbed = scale_update(
            &mut self.u,
            &mut self.alpha,
            &log_prod,
            log_a,
            psi,
            iteration,
            "u",
        )?;
        if absorbed {
            self.rebuild(kernel);
        }
        Ok(relative_change(&old, &self.log_u()))
    }

    /// Recomputes `K^T u` in rescaled form, i.e. `exp(beta) * K^T u`.
    pub(crate) fn refresh_ktu(&mut self) {
        self.ktu = self.kt.t().dot(&self.u);
    }

    /// `log (K^T u)_j`, using the cached product.
    pub(crate) fn log_ktu(&self, kernel: &GibbsKernel, j: usize) -> f64 {
        let l = self.ktu[j].ln();
        if l == f64::NEG_INFINITY && self.u.iter().any(|&u| u > 0.0) {
            return exact_log_product(kernel, j, &self.alpha, &self.u);
        }
        l - self.beta[j]
    }

    /// `v <- (b / K^T u)^psi` given `log b`, using the cached `K^T u`.
    pub(crate) fn update_v(
        &mut self,
        kernel: &GibbsKernel,
        log_b: &[f64],
        psi: f64,
        iteration: usize,
    ) -> Result<f64> {
        let mut log_prod: Vec<f64> = self.ktu.iter().map(|x| x.ln()).collect();
        for j in 0..log_prod.len() {
            if log_b[j] > f64::NEG_INFINITY && log_prod[j] == f64::NEG_INFINITY {
                log_prod[j] = self.beta[j] + exact_log_product(kernel, j, &self.alpha, &self.u);
            }
        }
        let old = self.log_v();
        let absorbed = scale_update(
            &mut self.v,
            &mut self.beta,
            &log_prod,
            log_b,
            psi,
            iteration,
            "v",
        )?;
        if absorbed {
            self.rebuild(kernel);
        }
        Ok(relative_change(&old, &self.log_v()))
    }


    /// Marginals and `kl(P|K)` of the current plan.
    pub(crate) fn summary(&self, kernel_sum: f64) -> PlanSummary {
        let kv = self.kt.dot(&self.v);
        let ktu = self.kt.t().dot(&self.u);
        let left: Vec<f64> = self.u.iter().zip(&kv).map(|(u, k)| u * k).collect();
        let right: Vec<f64> = self.v.iter().zip(&ktu).map(|(v, k)| v * k).collect();
        let log_u = self.log_u();
        let log_v = self.log_v();
        let mass: f64 = left.iter().sum();
        let mut kl = kernel_sum - mass;
        for (m, lu) in left.iter().zip(&log_u) {
            if *m > 0.0 {
                kl += m * lu;
            }
        }
        for (n, lv) in right.iter().zip(&log_v) {
            if *n > 0.0 {
                kl += n * lv;
            }
        }
        PlanSummary {
            left,
            right,
            kl_kernel: kl,
        }
    }
}

/// `log sum_k exp(offset_k - M_ik / eps) * s_k`, for rows whose rescaled
/// kernel product underflowed. `M` is symmetric, so this serves both sides.
fn exact_log_product(kernel: &GibbsKernel, i: usize, offset: &[f64], s: &Array1<f64>) -> f64 {
    let eps = kernel.epsilon();
    let cost = kernel.cost();
    let row = cost.row(i);
    let terms: Vec<f64> = (0..s.len())
        .filter(|&k| s[k] > 0.0)
        .map(|k| offset[k] + s[k].ln() - row[k] / eps)
        .collect();
    log_sum_exp(&terms)
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Writes the residual scalings `exp(psi (log t - log prod) + (psi - 1) offset)`
/// into `out`. Entries whose log leaves `[-T, T]` are moved into `offset`;
/// returns whether that happened, in which case the rescaled kernel is stale.
fn scale_update(
    out: &mut Array1<f64>,
    offset: &mut [f64],
    log_prod: &[f64],
    log_target: &[f64],
    psi: f64,
    iteration: usize,
    name: &str,
) -> Result<bool> {
    let mut absorbed = false;
    for i in 0..out.len() {
        let lt = log_target[i];
        if lt == f64::NEG_INFINITY {
            out[i] = 0.0;
            continue;
        }
        let ls = psi * (lt - log_prod[i]) + (psi - 1.0) * offset[i];
        if !ls.is_finite() {
            return Err(Error::Numerical {
                iteration,
                detail: format!(
                    "scaling {name}[{i}] has log {ls} (log kernel product {})",
                    log_prod[i]
                ),
            });
        }
        if ls.abs() > ABSORB_THRESHOLD {
            offset[i] += ls;
            out[i] = 1.0;
            absorbed = true;
        } else {
            out[i] = ls.exp();
        }
    }
    Ok(absorbed)
}

/// `max_i |x_i - y_i| / max_i x_i` between `x = exp(new)` and `y = exp(old)`,
/// computed without leaving the log domain.
fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    let top = new.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return if old.iter().all(|&o| o == f64::NEG_INFINITY) { 0.0 } else { 1.0 };
    }
    old.iter()
        .zip(new)
        .map(|(o, n)| ((n - top).exp() - (o - top).exp()).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn log_measure(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x.ln()).collect()
}

fn validate_measures(a: &[f64], b: &[f64], kernel: &GibbsKernel) -> Result<()> {
    let p = kernel.dim();
    if a.len() != p || b.len() != p {
        return param(format!(
            "measure lengths ({}, {}) do not match kernel dimension {p}",
            a.len(),
            b.len()
        ));
    }
    check_nonnegative(a, "first measure")?;
    check_nonnegative(b, "second measure")
}

/// Entropic unbalanced transport between `a` and `b` by generalized Sinkhorn
/// iterations started from `u = v = 1`.
///
/// The returned value is the full objective
/// `eps kl(P|K) + gamma kl(P1|a) + gamma kl(P^T 1|b)` at the final plan,
/// except that two empty measures short-circuit to zero. Reaching
/// `max_iter` is not an error: the state is flagged as not converged.
pub fn sinkhorn_unbalanced(
    a: &[f64],
    b: &[f64],
    kernel: &GibbsKernel,
    params: &SinkhornParams,
) -> Result<SinkhornResult> {
    sinkhorn_unbalanced_warm(a, b, kernel, params, None)
}

pub fn sinkhorn_unbalanced_warm(
    a: &[f64],
    b: &[f64],
    kernel: &GibbsKernel,
    params: &SinkhornParams,
    warm: Option<&SinkhornState>,
) -> Result<SinkhornResult> {
    params.validate(kernel)?;
    validate_measures(a, b, kernel)?;
    let p = kernel.dim();
    let a_empty = a.iter().all(|&x| x == 0.0);
    let b_empty = b.iter().all(|&x| x == 0.0);
    if a_empty || b_empty {
        // only the empty plan has finite marginal penalties
        let value = if a_empty && b_empty {
            0.0
        } else {
            PlanSummary::zero(p, kernel.sum()).value(a, b, params.epsilon, params.gamma)
        };
        return Ok(SinkhornResult {
            state: SinkhornState::zeros(p),
            value,
            trace: Vec::new(),
        });
    }

    let psi = params.psi();
    let log_a = log_measure(a);
    let log_b = log_measure(b);
    let mut sc = match warm {
        Some(state) => Scaling::from_state(kernel, state),
        None => Scaling::new(kernel),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        iterations = it;
        let du = sc.update_u(kernel, &log_a, psi, it)?;
        sc.refresh_ktu();
        let dv = sc.update_v(kernel, &log_b, psi, it)?;
        let residual = du.max(dv);
        if params.trace {
            let value = sc
                .summary(kernel.sum())
                .value(a, b, params.epsilon, params.gamma);
            trace.push(TraceRow {
                iteration: it,
                objective: value,
                residual,
            });
        }
        if residual <= params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("sinkhorn stopped after {iterations} iterations without converging");
    }
    let value = sc
        .summary(kernel.sum())
        .value(a, b, params.epsilon, params.gamma);
    if !value.is_finite() {
        return Err(Error::Numerical {
            iteration: iterations,
            detail: format!("objective evaluated to {value}"),
        });
    }
    Ok(SinkhornResult {
        state: sc.state(converged, iterations),
        value,
        trace,
    })
}

/// `P 1 = u * (K v)` from the scalings, without forming `P`.
pub fn left_marginal(state: &SinkhornState, kernel: &GibbsKernel) -> Vec<f64> {
    let eps = kernel.epsilon();
    let cost = kernel.cost();
    state
        .log_u
        .iter()
        .enumerate()
        .map(|(i, &lu)| {
            if lu == f64::NEG_INFINITY {
                return 0.0;
            }
            state
                .log_v
                .iter()
                .enumerate()
                .map(|(j, &lv)| (lu + lv - cost[[i, j]] / eps).exp())
                .sum()
        })
        .collect()
}

/// Summary of the plan encoded by `state`.
pub fn plan_summary(state: &SinkhornState, kernel: &GibbsKernel) -> PlanSummary {
    Scaling::from_state(kernel, state).summary(kernel.sum())
}

/// `W(a+, b+) + W(a-, b-)` for signed vectors.
pub fn signed_wasserstein(
    a: &[f64],
    b: &[f64],
    kernel: &GibbsKernel,
    params: &SinkhornParams,
) -> Result<f64> {
    if a.len() != b.len() {
        return param(format!("lengths differ ({} vs {})", a.len(), b.len()));
    }
    let (ap, an) = split_signed(a);
    let (bp, bn) = split_signed(b);
    let pos = sinkhorn_unbalanced(&ap, &bp, kernel, params)?;
    let neg = sinkhorn_unbalanced(&an, &bn, kernel, params)?;
    Ok(pos.value + neg.value)
}

/// `(max(x, 0), max(-x, 0))`.
pub fn split_signed(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        x.iter().map(|&v| v.max(0.0)).collect(),
        x.iter().map(|&v| (-v).max(0.0)).collect(),
    )
}
