//! Exact optimal transport between histograms of equal mass, solved as a
//! transportation problem with the network simplex method.

use std::collections::VecDeque;

use super::kl::check_nonnegative;
use crate::error::{param, Error, Result};
use crate::geometry::CostMatrix;

const MASS_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;

/// `min <P, M>` over plans with `P 1 = a` and `P^T 1 = b`.
///
/// `a` and `b` must carry the same total mass up to `1e-9`; the mismatch
/// left within that tolerance is removed by rescaling `b`.
pub fn exact_kantorovich(a: &[f64], b: &[f64], cost: &CostMatrix) -> Result<f64> {
    let p = cost.dim();
    if a.len() != p || b.len() != p {
        return param(format!(
            "histogram lengths ({}, {}) do not match cost dimension {p}",
            a.len(),
            b.len()
        ));
    }
    check_nonnegative(a, "first histogram")?;
    check_nonnegative(b, "second histogram")?;
    let mass_a: f64 = a.iter().sum();
    let mass_b: f64 = b.iter().sum();
    if (mass_a - mass_b).abs() > MASS_TOL {
        return Err(Error::Domain(format!(
            "histograms carry different mass ({mass_a} vs {mass_b})"
        )));
    }
    let rows: Vec<usize> = (0..p).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..p).filter(|&j| b[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Ok(0.0);
    }
    let supply: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let scale = mass_a / mass_b;
    let demand: Vec<f64> = cols.iter().map(|&j| b[j] * scale).collect();
    let c: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| cost.get(i, j)).collect())
        .collect();
    Transport::new(c, supply, demand).solve()
}

struct Transport {
    m: usize,
    n: usize,
    cost: Vec<Vec<f64>>,
    /// Basic cells `(row, col, flow)`; always `m + n - 1` of them.
    basis: Vec<(usize, usize, f64)>,
    in_basis: Vec<Vec<bool>>,
}

impl Transport {
    fn new(cost: Vec<Vec<f64>>, mut supply: Vec<f64>, mut demand: Vec<f64>) -> Self {
        let m = supply.len();
        let n = demand.len();
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut in_basis = vec![vec![false; n]; m];
        // north-west corner rule
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]);
            supply[i] -= x;
            demand[j] -= x;
            basis.push((i, j, x));
            in_basis[i][j] = true;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || supply[i] <= demand[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            m,
            n,
            cost,
            basis,
            in_basis,
        }
    }

    /// Node ids: rows are `0..m`, columns `m..m+n`.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j, _)) in self.basis.iter().enumerate() {
            adj[i].push(k);
            adj[self.m + j].push(k);
        }
        adj
    }

    fn other_end(&self, cell: usize, node: usize) -> usize {
        let (i, j, _) = self.basis[cell];
        if node == i {
            self.m + j
        } else {
            i
        }
    }

    fn potentials(&self, adj: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0]);
        while let Some(node) = queue.pop_front() {
            for &cell in &adj[node] {
                let next = self.other_end(cell, node);
                if pot[next].is_nan() {
                    let (i, j, _) = self.basis[cell];
                    pot[next] = self.cost[i][j] - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Basic cells on the tree path from row `i` to column `j`, in order.
    fn tree_path(&self, adj: &[Vec<usize>], i: usize, j: usize) -> Vec<usize> {
        let target = self.m + j;
        let mut via = vec![usize::MAX; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[i] = true;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &cell in &adj[node] {
                let next = self.other_end(cell, node);
                if !seen[next] {
                    seen[next] = true;
                    via[next] = cell;
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != i {
            let cell = via[node];
            path.push(cell);
            node = self.other_end(cell, node);
        }
        path.reverse();
        path
    }

    fn solve(mut self) -> Result<f64> {
        let max_c = self
            .cost
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max);
        let tol = 1e-12 * (1.0 + max_c);
        let cap = 100 * (self.m * self.n + self.m + self.n) + 1000;
        let mut degenerate = 0;
        for _ in 0..cap {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            let bland = degenerate >= DEGENERATE_STREAK;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..self.m {
                for j in 0..self.n {
                    if self.in_basis[i][j] {
                        continue;
                    }
                    let r = self.cost[i][j] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(self
                    .basis
                    .iter()
                    .map(|&(i, j, x)| x * self.cost[i][j])
                    .sum());
            };

            // the path from row ei to column ej alternates -, +, -, ...
            let path = self.tree_path(&adj, ei, ej);
            let mut leave = path[0];
            for &cell in path.iter().step_by(2) {
                let (li, lj, lx) = self.basis[leave];
                let (ci, cj, cx) = self.basis[cell];
                let tie_wins = bland && (ci, cj) < (li, lj);
                if cx < lx || (cx == lx && tie_wins) {
                    leave = cell;
                }
            }
            let theta = self.basis[leave].2;
            for (k, &cell) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.basis[cell].2 -= theta;
                } else {
                    self.basis[cell].2 += theta;
                }
            }
            degenerate = if theta == 0.0 { degenerate + 1 } else { 0 };
            let (li, lj, _) = self.basis[leave];
            self.in_basis[li][lj] = false;
            self.in_basis[ei][ej] = true;
            self.basis[leave] = (ei, ej, theta);
        }
        Err(Error::Numerical {
            iteration: cap,
            detail: "network simplex hit its pivot limit".into(),
        })
    }
}
