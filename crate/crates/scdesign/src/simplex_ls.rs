//! Simplex-constrained least squares with optional linear penalties.
//!
//! Minimizes `‖target - Σ_j w_j X_j‖² + Σ_j w_j p_j` over the probability
//! simplex, where `p ≥ 0` is a per-column penalty. The solver is a
//! fully-corrective active set on the simplex: it repeatedly solves the
//! equality-constrained problem on the current support (sum-to-one
//! eliminated, normal equations by Cholesky), backtracks when a coordinate
//! would go negative, and adds the column with the most negative reduced
//! gradient. When the inner solve is singular (duplicate or collinear
//! columns) it falls back to Frank–Wolfe with exact line search. Termination
//! is by Frank–Wolfe duality gap, which bounds the suboptimality of the
//! iterate directly.
//!
//! Tie-breaking is deterministic: all argmin scans resolve ties to the
//! lowest column index, so reruns on identical inputs reproduce the same
//! weights even when the minimizer is not unique.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Default duality-gap threshold.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Negative weights above this magnitude are treated as numerical noise and
/// clamped to zero.
const FEAS_EPS: f64 = 1e-12;

/// A simplex least-squares instance over the columns of `columns`.
#[derive(Debug, Clone)]
pub struct SimplexLsProblem {
    columns: DMatrix<f64>,
    target: DVector<f64>,
    penalty: DVector<f64>,
    tolerance: f64,
    max_iter: usize,
}

impl SimplexLsProblem {
    /// Unpenalized problem with default tolerance and iteration cap
    /// `10·|S|·M`.
    pub fn new(columns: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        let n = columns.ncols();
        let m = columns.nrows();
        if n == 0 {
            return Err(Error::DimensionMismatch("no columns".into()));
        }
        if target.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "target length {} vs {} rows",
                target.len(),
                m
            )));
        }
        Ok(SimplexLsProblem {
            columns,
            target,
            penalty: DVector::zeros(n),
            tolerance: DEFAULT_TOLERANCE,
            max_iter: 10 * n * m.max(1),
        })
    }

    /// Attach per-column linear penalties (must be nonnegative).
    pub fn with_penalty(mut self, penalty: DVector<f64>) -> Result<Self> {
        if penalty.len() != self.columns.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "penalty length {} vs {} columns",
                penalty.len(),
                self.columns.ncols()
            )));
        }
        if penalty.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::DimensionMismatch("penalty entries must be nonnegative".into()));
        }
        self.penalty = penalty;
        Ok(self)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        assert!(tolerance > 0.0, "tolerance must be positive");
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Solver termination state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    HitIterationCap,
}

/// Weights on the simplex and the achieved objective value.
#[derive(Debug, Clone)]
pub struct SimplexLsSolution {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Solve a simplex least-squares problem.
///
/// The returned objective is within the problem tolerance of the true
/// minimum of this convex program; hitting the iteration cap returns the
/// best iterate with [`SolveStatus::HitIterationCap`].
pub fn solve_simplex_ls(problem: &SimplexLsProblem) -> Result<SimplexLsSolution> {
    let a = &problem.columns;
    let gram = a.tr_mul(a);
    let lin = a.tr_mul(&problem.target);
    let const_term = problem.target.norm_squared();
    let (weights, _, iterations, status) = solve_gram(
        &GramView::Dense(&gram),
        lin.as_slice(),
        const_term,
        problem.penalty.as_slice(),
        problem.tolerance,
        problem.max_iter,
    );
    let w = DVector::from_vec(weights);
    // Exact objective in column space avoids Gram-expansion cancellation.
    let residual = &problem.target - a * &w;
    let objective = residual.norm_squared() + problem.penalty.dot(&w);
    Ok(SimplexLsSolution { weights: w, objective, iterations, status })
}

/// Per-column penalties `λ·‖target - X_j‖²` used by the penalized designs.
pub fn distance_penalties(columns: &DMatrix<f64>, target: &DVector<f64>, lambda: f64) -> DVector<f64> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    assert_eq!(columns.nrows(), target.len(), "target length must match column rows");
    DVector::from_iterator(
        columns.ncols(),
        columns.column_iter().map(|col| lambda * (target - col).norm_squared()),
    )
}

/// Gram access for the solver core: either a dense Gram matrix of the
/// problem columns, or a subset view into a larger precomputed Gram.
pub(crate) enum GramView<'a> {
    Dense(&'a DMatrix<f64>),
    Subset { gram: &'a DMatrix<f64>, support: &'a [usize] },
}

impl GramView<'_> {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            GramView::Dense(g) => g[(i, j)],
            GramView::Subset { gram, support } => gram[(support[i], support[j])],
        }
    }

    fn n(&self) -> usize {
        match self {
            GramView::Dense(g) => g.ncols(),
            GramView::Subset { support, .. } => support.len(),
        }
    }
}

/// Minimize `w'Gw - 2c'w + const_term + p'w` over the simplex.
///
/// Returns `(weights, objective, iterations, status)`. The objective is the
/// Gram-space value clamped at zero (it represents a squared residual plus a
/// nonnegative penalty, so small negative values are cancellation noise).
pub(crate) fn solve_gram(
    gram: &GramView<'_>,
    lin: &[f64],
    const_term: f64,
    penalty: &[f64],
    tolerance: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, usize, SolveStatus) {
    let n = gram.n();
    debug_assert_eq!(lin.len(), n);
    debug_assert_eq!(penalty.len(), n);
    // Linear coefficients of the expanded objective: -2c + p.
    let ell: Vec<f64> = (0..n).map(|j| -2.0 * lin[j] + penalty[j]).collect();

    if n == 1 {
        let obj = (gram.at(0, 0) + ell[0] + const_term).max(0.0);
        return (vec![1.0], obj, 0, SolveStatus::Converged);
    }

    // Start at the best vertex, lowest index on ties.
    let mut start = 0;
    let mut start_obj = f64::INFINITY;
    for j in 0..n {
        let obj = gram.at(j, j) + ell[j] + const_term;
        if obj < start_obj {
            start_obj = obj;
            start = j;
        }
    }
    let mut active: Vec<usize> = vec![start];
    let mut w_active: Vec<f64> = vec![1.0];
    let mut iterations = 0usize;

    let objective_on = |active: &[usize], w: &[f64]| -> f64 {
        let mut quad = 0.0;
        for (i, &ai) in active.iter().enumerate() {
            for (j, &aj) in active.iter().enumerate() {
                quad += w[i] * w[j] * gram.at(ai, aj);
            }
            quad += w[i] * ell[ai];
        }
        quad + const_term
    };

    let mut best_w = full_weights(n, &active, &w_active);
    let mut best_obj = objective_on(&active, &w_active);

    while iterations < max_iter {
        iterations += 1;
        let Some(candidate) = eq_solve(gram, &ell, &active) else {
            // Singular reduced system: duplicate or collinear columns.
            return frank_wolfe(
                gram,
                &ell,
                const_term,
                full_weights(n, &active, &w_active),
                tolerance,
                max_iter,
                iterations,
            );
        };

        if candidate.iter().any(|&wi| wi < -FEAS_EPS) {
            // Backtrack from the current feasible point toward the
            // candidate until the first coordinate hits zero, then drop it.
            let mut alpha = 1.0f64;
            for i in 0..active.len() {
                if candidate[i] < w_active[i] {
                    let step = w_active[i] / (w_active[i] - candidate[i]);
                    if step < alpha {
                        alpha = step;
                    }
                }
            }
            for i in 0..active.len() {
                w_active[i] += alpha * (candidate[i] - w_active[i]);
            }
            let mut kept_active = Vec::with_capacity(active.len());
            let mut kept_w = Vec::with_capacity(active.len());
            for i in 0..active.len() {
                if w_active[i] > FEAS_EPS {
                    kept_active.push(active[i]);
                    kept_w.push(w_active[i]);
                }
            }
            if kept_active.is_empty() {
                // All mass collapsed numerically; restart from best vertex.
                kept_active.push(start);
                kept_w.push(1.0);
            }
            active = kept_active;
            w_active = kept_w;
            continue;
        }

        w_active = candidate;
        let obj = objective_on(&active, &w_active);
        if obj < best_obj {
            best_obj = obj;
            best_w = full_weights(n, &active, &w_active);
        }

        // Reduced gradient over the full column set: g_j = 2(Gw)_j + ell_j.
        let mut g_dot_w = 0.0;
        let mut g_min = f64::INFINITY;
        let mut j_star = 0;
        let mut g = vec![0.0; n];
        for j in 0..n {
            let mut gw = 0.0;
            for (i, &ai) in active.iter().enumerate() {
                gw += w_active[i] * gram.at(j, ai);
            }
            g[j] = 2.0 * gw + ell[j];
            if g[j] < g_min {
                g_min = g[j];
                j_star = j;
            }
        }
        for (i, &ai) in active.iter().enumerate() {
            g_dot_w += w_active[i] * g[ai];
        }
        let gap = g_dot_w - g_min;
        if gap <= tolerance {
            let w = full_weights(n, &active, &w_active);
            let obj = objective_on(&active, &w_active).max(0.0);
            return (normalize(w), obj, iterations, SolveStatus::Converged);
        }
        if active.contains(&j_star) {
            // Gradient says an active column should enter again: the inner
            // solve has stalled numerically.
            return frank_wolfe(
                gram,
                &ell,
                const_term,
                full_weights(n, &active, &w_active),
                tolerance,
                max_iter,
                iterations,
            );
        }
        let pos = active.partition_point(|&a| a < j_star);
        active.insert(pos, j_star);
        w_active.insert(pos, 0.0);
    }

    (normalize(best_w), best_obj.max(0.0), iterations, SolveStatus::HitIterationCap)
}

/// Equality-constrained minimizer on the active set: eliminate the first
/// coordinate with `w_0 = 1 - Σ z` and solve the reduced normal equations.
/// Cholesky on the positive-definite path; rank-deficient systems (duplicate
/// or collinear columns) get the min-norm SVD solution instead. Returns
/// `None` only when even the SVD solve produces non-finite values.
fn eq_solve(gram: &GramView<'_>, ell: &[f64], active: &[usize]) -> Option<Vec<f64>> {
    let k = active.len();
    if k == 1 {
        return Some(vec![1.0]);
    }
    let a0 = active[0];
    let mut h = DMatrix::zeros(k - 1, k - 1);
    let mut rhs = DVector::zeros(k - 1);
    for i in 1..k {
        let ai = active[i];
        for j in 1..k {
            let aj = active[j];
            h[(i - 1, j - 1)] = gram.at(ai, aj) - gram.at(a0, aj) - gram.at(ai, a0) + gram.at(a0, a0);
        }
        rhs[i - 1] = -(ell[ai] - ell[a0]) / 2.0 - (gram.at(ai, a0) - gram.at(a0, a0));
    }
    let h_inf = h.amax();
    let b_inf = rhs.amax();
    let residual_ok = |z: &DVector<f64>| -> bool {
        if z.iter().any(|zi| !zi.is_finite()) {
            return false;
        }
        let r = &h * z - &rhs;
        r.amax() <= 1e-8 * (b_inf + h_inf * z.amax()) + 1e-14
    };
    let z = match Cholesky::new(h.clone()).map(|chol| chol.solve(&rhs)) {
        Some(z) if residual_ok(&z) => z,
        _ => {
            // Rank-deficient reduced system: take the min-norm solution. If
            // the system is inconsistent the equality-relaxed subproblem is
            // unbounded along a null direction of H; hand back a far point
            // on that descent ray so the caller's backtracking step drops a
            // blocking coordinate.
            let svd = h.clone().svd(true, true);
            let s_max = svd.singular_values.max();
            let mut z = svd.solve(&rhs, s_max.max(1e-300) * 1e-12).ok()?;
            if z.iter().any(|zi| !zi.is_finite()) {
                return None;
            }
            let r = &h * &z - &rhs;
            if r.amax() > 1e-10 * (1.0 + b_inf) {
                // r lies in null(H); -r is a strict descent direction.
                let d = -r;
                let lifted_max = d.amax().max(d.iter().sum::<f64>().abs());
                if lifted_max > 0.0 {
                    let t = (2.0 + z.amax()) / lifted_max;
                    z += d * t;
                }
            }
            z
        }
    };
    let mut w = Vec::with_capacity(k);
    let s: f64 = z.iter().sum();
    w.push(1.0 - s);
    w.extend(z.iter());
    Some(w)
}

/// Frank–Wolfe with exact line search, used when the active-set linear solve
/// is singular. First-order, so it needs more iterations but tolerates rank
/// deficiency and duplicate columns.
fn frank_wolfe(
    gram: &GramView<'_>,
    ell: &[f64],
    const_term: f64,
    mut w: Vec<f64>,
    tolerance: f64,
    max_iter: usize,
    mut iterations: usize,
) -> (Vec<f64>, f64, usize, SolveStatus) {
    let n = gram.n();
    let objective = |w: &[f64]| -> f64 {
        let mut quad = 0.0;
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let mut gi = 0.0;
            for j in 0..n {
                if w[j] != 0.0 {
                    gi += w[j] * gram.at(i, j);
                }
            }
            quad += w[i] * (gi + ell[i]);
        }
        quad + const_term
    };
    let mut status = SolveStatus::HitIterationCap;
    while iterations < max_iter {
        iterations += 1;
        // g = 2Gw + ell
        let mut g = vec![0.0; n];
        for j in 0..n {
            let mut gw = 0.0;
            for i in 0..n {
                if w[i] != 0.0 {
                    gw += w[i] * gram.at(j, i);
                }
            }
            g[j] = 2.0 * gw + ell[j];
        }
        let mut j_star = 0;
        let mut g_min = f64::INFINITY;
        for j in 0..n {
            if g[j] < g_min {
                g_min = g[j];
                j_star = j;
            }
        }
        let g_dot_w: f64 = (0..n).map(|j| w[j] * g[j]).sum();
        let gap = g_dot_w - g_min;
        if gap <= tolerance {
            status = SolveStatus::Converged;
            break;
        }
        // d = e_{j*} - w; curvature d'Gd.
        let mut gd_j = 0.0;
        let mut w_gw = 0.0;
        for i in 0..n {
            if w[i] != 0.0 {
                gd_j += w[i] * gram.at(j_star, i);
                w_gw += w[i] * (g[i] - ell[i]) / 2.0;
            }
        }
        let curvature = gram.at(j_star, j_star) - 2.0 * gd_j + w_gw;
        let gamma = if curvature > 0.0 { (gap / (2.0 * curvature)).clamp(0.0, 1.0) } else { 1.0 };
        for wi in w.iter_mut() {
            *wi *= 1.0 - gamma;
        }
        w[j_star] += gamma;
    }
    let obj = objective(&w).max(0.0);
    (normalize(w), obj, iterations, status)
}

fn full_weights(n: usize, active: &[usize], w_active: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (i, &a) in active.iter().enumerate() {
        w[a] = w_active[i];
    }
    w
}

/// Clamp numerical negatives to zero and rescale to an exact unit sum.
fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    for wi in w.iter_mut() {
        if *wi < 0.0 {
            debug_assert!(*wi > -1e-9, "weight {wi} below feasibility tolerance");
            *wi = 0.0;
        }
    }
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        for wi in w.iter_mut() {
            *wi /= sum;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn solve(columns: DMatrix<f64>, target: DVector<f64>, penalty: Option<DVector<f64>>) -> SimplexLsSolution {
        let mut problem = SimplexLsProblem::new(columns, target).unwrap();
        if let Some(p) = penalty {
            problem = problem.with_penalty(p).unwrap();
        }
        solve_simplex_ls(&problem).unwrap()
    }

    /// Exhaustive simplex grid search; the independent oracle for this
    /// module's objective values.
    fn grid_oracle(columns: &DMatrix<f64>, target: &DVector<f64>, penalty: &[f64], steps: usize) -> f64 {
        let n = columns.ncols();
        let mut best = f64::INFINITY;
        let mut counts = vec![0usize; n];
        fn recurse(
            columns: &DMatrix<f64>,
            target: &DVector<f64>,
            penalty: &[f64],
            steps: usize,
            counts: &mut [usize],
            depth: usize,
            remaining: usize,
            best: &mut f64,
        ) {
            let n = counts.len();
            if depth == n - 1 {
                counts[depth] = remaining;
                let mut residual = target.clone();
                let mut pen = 0.0;
                for j in 0..n {
                    let w = counts[j] as f64 / steps as f64;
                    residual -= columns.column(j) * w;
                    pen += w * penalty[j];
                }
                let obj = residual.norm_squared() + pen;
                if obj < *best {
                    *best = obj;
                }
                return;
            }
            for c in 0..=remaining {
                counts[depth] = c;
                recurse(columns, target, penalty, steps, counts, depth + 1, remaining - c, best);
            }
        }
        recurse(columns, target, penalty, steps, &mut counts, 0, steps, &mut best);
        best
    }

    #[test]
    fn target_equal_to_column_gets_full_weight() {
        let columns = DMatrix::from_columns(&[
            DVector::from_vec(vec![4.0, 1.0]),
            DVector::from_vec(vec![2.0, 3.0]),
        ]);
        let sol = solve(columns, DVector::from_vec(vec![2.0, 3.0]), None);
        assert_relative_eq!(sol.weights[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.weights[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.objective, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn one_dimensional_interpolation() {
        let columns = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let sol = solve(columns, DVector::from_vec(vec![0.25]), None);
        assert_relative_eq!(sol.weights[0], 0.75, epsilon = 1e-10);
        assert_relative_eq!(sol.weights[1], 0.25, epsilon = 1e-10);
        assert_relative_eq!(sol.objective, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn penalty_moves_optimum_to_vertex() {
        // Closed form: objective in w2 is (w2 - 0.25)^2 + 0.0625 + 0.5 w2,
        // minimized at w2 = 0.
        let columns = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let target = DVector::from_vec(vec![0.25]);
        let penalty = DVector::from_vec(vec![0.0625, 0.5625]);
        let sol = solve(columns.clone(), target.clone(), Some(penalty.clone()));
        assert_relative_eq!(sol.weights[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.weights[1], 0.0, epsilon = 1e-10);
        assert_relative_eq!(sol.objective, 0.125, epsilon = 1e-12);
        // Cross-check against a fine grid.
        let oracle = grid_oracle(&columns, &target, penalty.as_slice(), 10_000);
        assert!((sol.objective - oracle).abs() < 1e-7);
    }

    #[test]
    fn distance_penalties_examples() {
        let columns = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let target = DVector::from_vec(vec![0.25]);
        let zero = distance_penalties(&columns, &target, 0.0);
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
        let one = distance_penalties(&columns, &target, 1.0);
        assert_relative_eq!(one[0], 0.0625, epsilon = 1e-15);
        assert_relative_eq!(one[1], 0.5625, epsilon = 1e-15);
        let two = distance_penalties(&columns, &target, 2.0);
        assert_relative_eq!(two[0], 2.0 * one[0], epsilon = 1e-15);
        assert_relative_eq!(two[1], 2.0 * one[1], epsilon = 1e-15);
    }

    #[test]
    fn duplicate_columns_fall_back_and_converge() {
        let columns = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0]);
        let target = DVector::from_vec(vec![0.5, 1.5]);
        let sol = solve(columns.clone(), target.clone(), None);
        assert_eq!(sol.status, SolveStatus::Converged);
        let sum: f64 = sol.weights.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        let oracle = grid_oracle(&columns, &target, &[0.0; 3], 100);
        assert!(sol.objective <= oracle + 1e-3);
    }

    #[test]
    fn single_column_is_trivial() {
        let columns = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let sol = solve(columns, DVector::from_vec(vec![0.0, 0.0]), None);
        assert_eq!(sol.weights.as_slice(), &[1.0]);
        assert_relative_eq!(sol.objective, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let columns = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let err = SimplexLsProblem::new(columns, DVector::from_vec(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn matches_grid_oracle_on_random_instances() {
        // 200 seeded random problems, |S| <= 4, M <= 3, with and without
        // penalties, compared to the 0.01-step grid oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..200 {
            let n = rng.gen_range(1..=4usize);
            let m = rng.gen_range(1..=3usize);
            let columns = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>());
            let target = DVector::from_fn(m, |_, _| rng.gen::<f64>());
            let penalty = if case % 2 == 0 {
                DVector::zeros(n)
            } else {
                DVector::from_fn(n, |_, _| rng.gen::<f64>() * 0.5)
            };
            let sol = solve(columns.clone(), target.clone(), Some(penalty.clone()));
            let oracle = grid_oracle(&columns, &target, penalty.as_slice(), 100);
            assert!(
                (sol.objective - oracle).abs() < 1e-3,
                "case {case}: solver {} vs oracle {oracle}",
                sol.objective
            );
            // Vertex domination.
            for j in 0..n {
                let vertex = (&target - columns.column(j)).norm_squared() + penalty[j];
                assert!(sol.objective <= vertex + 1e-9);
            }
        }
    }

    #[test]
    fn saturated_penalty_selects_nearest_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..=4usize);
            let m = rng.gen_range(1..=3usize);
            let columns = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>());
            let target = DVector::from_fn(m, |_, _| rng.gen::<f64>());
            let dist = distance_penalties(&columns, &target, 1.0);
            // Skip near-ties so the one-hot claim is well posed.
            let mut sorted: Vec<f64> = dist.iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted[1] - sorted[0] < 1e-3 {
                continue;
            }
            let max_pair = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| (columns.column(i) - columns.column(j)).norm_squared())
                .fold(0.0f64, f64::max);
            let lambda = 1e6 * max_pair.max(1.0);
            let penalty = distance_penalties(&columns, &target, lambda);
            let sol = solve(columns.clone(), target.clone(), Some(penalty));
            let argmin = (0..n).fold(0, |acc, j| if dist[j] < dist[acc] { j } else { acc });
            assert_relative_eq!(sol.weights[argmin], 1.0, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn weights_stay_on_simplex(
            seed in 0u64..1000,
            n in 1usize..=4,
            m in 1usize..=3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let columns = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let target = DVector::from_fn(m, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let sol = solve(columns, target, None);
            let sum: f64 = sol.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(sol.weights.iter().all(|&w| w >= 0.0));
            prop_assert!(sol.objective >= 0.0);
        }

        #[test]
        fn scale_equivariance(seed in 0u64..500, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=4usize);
            let m = rng.gen_range(1..=3usize);
            let columns = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>());
            let target = DVector::from_fn(m, |_, _| rng.gen::<f64>());
            let penalty = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 0.2);
            let base = solve(columns.clone(), target.clone(), Some(penalty.clone()));
            let scaled = solve(
                columns * scale,
                target * scale,
                Some(penalty * (scale * scale)),
            );
            prop_assert!((scaled.objective - scale * scale * base.objective).abs()
                <= 1e-7 * (1.0 + base.objective));
            for j in 0..base.weights.len() {
                prop_assert!((scaled.weights[j] - base.weights[j]).abs() < 1e-5);
            }
        }
    }
}
