//! Discrete optimal transport between two equal-size uniform empirical
//! measures.
//!
//! Two solvers are provided: an exact assignment solver (Hungarian method
//! with dual potentials), whose optimum is a scaled permutation matrix, and
//! log-domain Sinkhorn for the entropically regularized problem.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which quantity a cost matrix measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Feature,
    Label,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    kind: CostKind,
}

impl CostMatrix {
    /// Entries must be finite and nonnegative.
    pub fn new(values: Array2<f64>, kind: CostKind) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {v}")));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("cost entries must be ≥ 0".into()));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// A coupling between two uniform empirical measures, with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub gamma: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub marginal_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    fn from_gamma(gamma: Array2<f64>, iterations: usize, tol: f64) -> Self {
        let (n, m) = gamma.dim();
        let row_marginal = Array1::from_elem(n, 1.0 / n as f64);
        let col_marginal = Array1::from_elem(m, 1.0 / m as f64);
        let violation = marginal_violation(&gamma, &row_marginal, &col_marginal);
        Self {
            gamma,
            row_marginal,
            col_marginal,
            marginal_violation: violation,
            iterations,
            converged: violation < tol,
        }
    }

    pub fn size(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn total_mass(&self) -> f64 {
        self.gamma.sum()
    }
}

fn marginal_violation(gamma: &Array2<f64>, rows: &Array1<f64>, cols: &Array1<f64>) -> f64 {
    let row_sums = gamma.sum_axis(ndarray::Axis(1));
    let col_sums = gamma.sum_axis(ndarray::Axis(0));
    let r = row_sums
        .iter()
        .zip(rows)
        .map(|(s, m)| (s - m).abs())
        .fold(0.0, f64::max);
    let c = col_sums
        .iter()
        .zip(cols)
        .map(|(s, m)| (s - m).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Entropic regularizer, relative to the max-normalized cost.
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 10_000,
            marginal_tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "sinkhorn epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be ≥ 1".into()));
        }
        if self.marginal_tol.is_nan() || self.marginal_tol <= 0.0 {
            return Err(Error::Config("sinkhorn marginal_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Plan solver used by the adaptation trainer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OtSolver {
    #[default]
    Exact,
    Sinkhorn(SinkhornConfig),
}

impl OtSolver {
    pub fn solve(&self, cost: &CostMatrix) -> Result<TransportPlan> {
        match self {
            OtSolver::Exact => exact_plan_uniform(cost),
            OtSolver::Sinkhorn(cfg) => sinkhorn_plan(cost, cfg),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OtSolver::Exact => "exact",
            OtSolver::Sinkhorn(_) => "sinkhorn",
        }
    }
}

/// Squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
pub fn pairwise_sq_euclidean(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "row widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    Ok(out)
}

/// Pairwise squared-distance cost matrix tagged as a feature cost.
pub fn feature_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    CostMatrix::new(pairwise_sq_euclidean(a, b)?, CostKind::Feature)
}

/// Minimum-cost assignment of rows to columns. Returns `assignment[row] = col`.
///
/// Among optimal assignments the lexicographically smallest is returned.
pub fn solve_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Shape(format!("assignment needs a square cost, got {n}×{m}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {v}")));
    }

    // Shortest augmenting path Hungarian method, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut col_owner = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
        col_owner[j - 1] = owner[j] - 1;
    }

    // Every perfect matching on tight edges (zero reduced cost under the final
    // potentials) is optimal, so the lexicographically smallest one is found
    // greedily: fix rows in order, each to the smallest column that still
    // admits a completion.
    let scale = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs())).max(1.0);
    let tol = 1e-10 * scale;
    let tight = |i: usize, j: usize| cost[[i, j]] - u[i + 1] - v[j + 1] <= tol;
    let mut visited = vec![false; n];
    for i in 0..n {
        for j in 0..assignment[i] {
            if !tight(i, j) || col_owner[j] < i {
                continue;
            }
            visited.iter_mut().for_each(|x| *x = false);
            let freed = assignment[i];
            let displaced = col_owner[j];
            let mut path = Vec::new();
            if augment(displaced, freed, i, &tight, &assignment, &col_owner, &mut visited, &mut path) {
                // path holds (row, new column) pairs
                for &(row, col) in &path {
                    assignment[row] = col;
                    col_owner[col] = row;
                }
                assignment[i] = j;
                col_owner[j] = i;
                break;
            }
        }
    }
    Ok(assignment)
}

/// Depth-first search for an alternating path that rehomes `row` so that
/// column `freed` ends up used, touching only rows after `fixed`.
#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    freed: usize,
    fixed: usize,
    tight: &impl Fn(usize, usize) -> bool,
    assignment: &[usize],
    col_owner: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    visited[row] = true;
    let n = assignment.len();
    for col in 0..n {
        if col == assignment[row] || !tight(row, col) {
            continue;
        }
        if col == freed {
            path.push((row, col));
            return true;
        }
        let next = col_owner[col];
        if next <= fixed || visited[next] {
            continue;
        }
        if augment(next, freed, fixed, tight, assignment, col_owner, visited, path) {
            path.push((row, col));
            return true;
        }
    }
    false
}

/// Exact OT plan for uniform marginals `1/b` on a square cost: `(1/b)·P` for
/// the optimal permutation `P`.
pub fn exact_plan_uniform(cost: &CostMatrix) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Shape(format!("exact solver needs a square cost, got {n}×{m}")));
    }
    if n == 0 {
        return Err(Error::Degenerate("empty cost matrix".into()));
    }
    let assignment = solve_assignment(cost.values())?;
    let mut gamma = Array2::zeros((n, n));
    let mass = 1.0 / n as f64;
    for (i, &j) in assignment.iter().enumerate() {
        gamma[[i, j]] = mass;
    }
    Ok(TransportPlan::from_gamma(gamma, 1, f64::INFINITY))
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT plan for uniform marginals via log-domain Sinkhorn.
///
/// The cost is divided by its largest entry first, so `epsilon` is relative to
/// the cost range. Failing to reach `marginal_tol` is reported through
/// `converged`, not as an error.
pub fn sinkhorn_plan(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Degenerate("empty cost matrix".into()));
    }
    let max = cost.max();
    let k = if max > 0.0 {
        cost.values().mapv(|c| c / max)
    } else {
        cost.values().to_owned()
    };
    let eps = cfg.epsilon;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];

    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - k[[i, j]]) / eps).exp())
    };

    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (g[j] - k[[i, j]]) / eps));
            f[i] = eps * (log_a - lse);
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - k[[i, j]]) / eps));
            g[j] = eps * (log_b - lse);
        }
        // columns are exact after the g update; rows carry the residual
        let row_err = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - k[[i, j]]) / eps).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .fold(0.0, f64::max);
        if !row_err.is_finite() {
            return Err(Error::NonFinite("sinkhorn potentials diverged".into()));
        }
        if row_err < cfg.marginal_tol {
            break;
        }
    }
    Ok(TransportPlan::from_gamma(plan_of(&f, &g), iterations, cfg.marginal_tol))
}

/// Transport cost `Σ_ij cost_ij · γ_ij`, without any entropy term.
pub fn ot_objective(cost: &CostMatrix, plan: &TransportPlan) -> Result<f64> {
    if cost.dim() != plan.gamma.dim() {
        return Err(Error::Shape(format!(
            "cost {:?} vs plan {:?}",
            cost.dim(),
            plan.gamma.dim()
        )));
    }
    Ok(cost
        .values()
        .iter()
        .zip(plan.gamma.iter())
        .map(|(c, g)| c * g)
        .sum())
}
