use ndarray::{ArrayView1, ArrayView2};

use crate::error::{param, Result};

/// Column-major copy of a design matrix with cached `||L_j||^2 / n`.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    n: usize,
    p: usize,
    cols: Vec<f64>,
    lipschitz: Vec<f64>,
}

impl Design {
    pub(crate) fn new(l: ArrayView2<f64>) -> Result<Self> {
        let (n, p) = l.dim();
        if n == 0 {
            return param("design has no rows");
        }
        if l.iter().any(|x| !x.is_finite()) {
            return param("design has non-finite entries");
        }
        let mut cols = Vec::with_capacity(n * p);
        for j in 0..p {
            cols.extend(l.column(j).iter());
        }
        let lipschitz = cols
            .chunks_exact(n)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>() / n as f64)
            .collect();
        Ok(Self {
            n,
            p,
            cols,
            lipschitz,
        })
    }

    pub(crate) fn n(&self) -> usize {
        self.n
    }

    pub(crate) fn p(&self) -> usize {
        self.p
    }

    pub(crate) fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub(crate) fn lipschitz(&self, j: usize) -> f64 {
        self.lipschitz[j]
    }

    /// `L_j^T r / n`.
    pub(crate) fn corr(&self, j: usize, r: &[f64]) -> f64 {
        dot(self.col(j), r) / self.n as f64
    }

    /// `r -= delta * L_j`.
    pub(crate) fn axpy(&self, j: usize, delta: f64, r: &mut [f64]) {
        for (ri, li) in r.iter_mut().zip(self.col(j)) {
            *ri -= delta * li;
        }
    }

    /// `y - L x`.
    pub(crate) fn residual(&self, y: &[f64], x: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                self.axpy(j, xj, &mut r);
            }
        }
        r
    }

    pub(crate) fn check_target(&self, y: ArrayView1<f64>) -> Result<()> {
        if y.len() != self.n {
            return param(format!(
                "observation has length {}, design has {} rows",
                y.len(),
                self.n
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return param("observation has non-finite entries");
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}
