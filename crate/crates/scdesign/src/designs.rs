//! The synthetic control design programs, solved by exact enumeration over
//! treated supports with the simplex least-squares kernel inside.
//!
//! Every design enumerates candidate treated supports `S` (size-major, then
//! lexicographic), solves the inner convex subproblems exactly on each, and
//! keeps the best candidate under a deterministic total order: lower
//! objective first, ties broken by fewer treated units, then by
//! lexicographically smaller sorted support. Because the base designs are
//! symmetric under swapping the treated and control roles, this order always
//! reports the orientation with the smaller treated group.
//!
//! Inner structure per kind:
//! - Unconstrained/Constrained: fit `w` on `S` to `X̄`, fit `v` on the
//!   complement to `X̄`; the objective is the sum.
//! - Penalized: the same two fits with per-unit distance penalties
//!   `λ‖X̄ - X_j‖²` added.
//! - UnitLevel: for each `j ∈ S` fit a synthetic control `v_{·j}` on the
//!   complement to `X_j` with discrepancy `d_j`, then fit `w` on `S` to `X̄`
//!   with linear penalty `ξ·d`. This decomposition is exact: each `v_{·j}`
//!   enters the joint objective only through its own term, whose coefficient
//!   `w_j` is nonnegative.
//! - Clustered: assign clusters first (weighted k-means), then run the
//!   unit-level inner solve per cluster against the cluster mean, weighted
//!   by the cluster's population mass; weights sum to one within each
//!   cluster and cross-cluster controls are forced to zero.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PredictorSet;
use crate::simplex_ls::{solve_gram, GramView, SolveStatus};

/// Default cap on the number of candidate supports a solve may enumerate.
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// Which design program to solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignKind {
    /// Base design with the full cardinality range `1..=J-1`.
    Unconstrained,
    /// Base design with explicit cardinality bounds.
    Constrained,
    /// Base design with distance penalties on both weight vectors.
    Penalized { lambda1: f64, lambda2: f64 },
    /// One synthetic control per treated unit; `xi` trades population fit
    /// against per-treated-unit control fit.
    UnitLevel { xi: f64 },
    /// Unit-level design run independently within k-means clusters.
    Clustered { xi: f64, k: usize, seed: u64, restarts: usize },
}

/// Budget constraint `β'd ≤ b` over treated assignment indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub costs: Vec<f64>,
    pub bound: f64,
}

/// A design problem: kind, cardinality bounds, and enumeration limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(flatten)]
    pub kind: DesignKind,
    /// Minimum number of treated units.
    pub m_lo: usize,
    /// Maximum number of treated units; `None` resolves to `J - 1`.
    pub m_hi: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<Budget>,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u128,
}

fn default_cap() -> u128 {
    DEFAULT_ENUMERATION_CAP
}

impl DesignSpec {
    pub fn unconstrained() -> Self {
        DesignSpec {
            kind: DesignKind::Unconstrained,
            m_lo: 1,
            m_hi: None,
            budget: None,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn constrained(m_hi: usize) -> Self {
        DesignSpec { kind: DesignKind::Constrained, m_hi: Some(m_hi), ..Self::unconstrained() }
    }

    /// Penalized base design with a common `λ = λ₁ = λ₂`.
    pub fn penalized(lambda: f64) -> Self {
        DesignSpec {
            kind: DesignKind::Penalized { lambda1: lambda, lambda2: lambda },
            ..Self::unconstrained()
        }
    }

    pub fn penalized_asymmetric(lambda1: f64, lambda2: f64) -> Self {
        DesignSpec { kind: DesignKind::Penalized { lambda1, lambda2 }, ..Self::unconstrained() }
    }

    pub fn unit_level(xi: f64) -> Self {
        DesignSpec { kind: DesignKind::UnitLevel { xi }, ..Self::unconstrained() }
    }

    pub fn clustered(xi: f64, k: usize, seed: u64) -> Self {
        DesignSpec {
            kind: DesignKind::Clustered { xi, k, seed, restarts: 10 },
            ..Self::unconstrained()
        }
    }

    pub fn with_bounds(mut self, m_lo: usize, m_hi: usize) -> Self {
        self.m_lo = m_lo;
        self.m_hi = Some(m_hi);
        self
    }

    pub fn with_budget(mut self, costs: Vec<f64>, bound: f64) -> Self {
        self.budget = Some(Budget { costs, bound });
        self
    }

    pub fn with_enumeration_cap(mut self, cap: u128) -> Self {
        self.enumeration_cap = cap;
        self
    }

    fn resolve_m_hi(&self, j: usize) -> usize {
        self.m_hi.unwrap_or(j.saturating_sub(1))
    }

    fn validate(&self, j: usize) -> Result<(usize, usize)> {
        if j < 2 {
            return Err(Error::InvalidSpec("a design needs at least two units".into()));
        }
        let m_hi = self.resolve_m_hi(j);
        if self.m_lo == 0 {
            return Err(Error::InvalidSpec("m_lo must be at least 1".into()));
        }
        if self.m_lo > m_hi {
            return Err(Error::InvalidSpec(format!("m_lo = {} > m_hi = {m_hi}", self.m_lo)));
        }
        if m_hi > j - 1 {
            return Err(Error::InvalidSpec(format!(
                "m_hi = {m_hi} leaves no donor pool (J = {j})"
            )));
        }
        match &self.kind {
            DesignKind::Penalized { lambda1, lambda2 } => {
                if *lambda1 < 0.0 || *lambda2 < 0.0 {
                    return Err(Error::InvalidSpec("penalty constants must be nonnegative".into()));
                }
            }
            DesignKind::UnitLevel { xi } => {
                if *xi <= 0.0 {
                    return Err(Error::InvalidSpec("xi must be positive".into()));
                }
            }
            DesignKind::Clustered { xi, k, .. } => {
                if *xi <= 0.0 {
                    return Err(Error::InvalidSpec("xi must be positive".into()));
                }
                if *k == 0 || *k > j {
                    return Err(Error::InvalidSpec(format!("cluster count {k} not in 1..={j}")));
                }
            }
            _ => {}
        }
        if let Some(budget) = &self.budget {
            if budget.costs.len() != j {
                return Err(Error::DimensionMismatch(format!(
                    "budget has {} costs for {} units",
                    budget.costs.len(),
                    j
                )));
            }
        }
        Ok((self.m_lo, m_hi))
    }
}

/// Solved design: the treated support, both weight vectors, and (for the
/// unit-level designs) the per-treated-unit control weights.
#[derive(Debug, Clone)]
pub struct DesignSolution {
    /// Units assigned to treatment, ascending.
    pub treated: Vec<usize>,
    /// Synthetic treated weights; sums to one (per cluster for clustered
    /// designs) and is supported on `treated`.
    pub w: DVector<f64>,
    /// Synthetic control weights, aggregated over treated units for the
    /// unit-level designs; disjoint from `w`.
    pub v: DVector<f64>,
    /// `v_unit[(i, j)]` is the weight of unit `i` in treated unit `j`'s
    /// synthetic control (unit-level and clustered designs only).
    pub v_unit: Option<DMatrix<f64>>,
    pub objective: f64,
    pub cluster_assignment: Option<Vec<usize>>,
    /// Number of admissible supports whose inner problems were solved.
    pub evaluated_subsets: u64,
    pub spec: DesignSpec,
}

impl DesignSolution {
    /// Globally normalized weight vectors for estimation. For clustered
    /// designs the per-cluster weights are scaled by the cluster's
    /// population mass so both vectors sum to one overall; other designs
    /// return `w` and `v` unchanged.
    pub fn effective_weights(&self, f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match &self.cluster_assignment {
            None => (self.w.clone(), self.v.clone()),
            Some(labels) => {
                let k = labels.iter().copied().max().map_or(0, |m| m + 1);
                let mut mass = vec![0.0; k];
                for (unit, &label) in labels.iter().enumerate() {
                    mass[label] += f[unit];
                }
                let scale = |vec: &DVector<f64>| {
                    DVector::from_fn(vec.len(), |unit, _| vec[unit] * mass[labels[unit]])
                };
                (scale(&self.w), scale(&self.v))
            }
        }
    }
}

/// Canonical matrices of the base design written as a quadratically
/// constrained quadratic program over the stacked vector `(w, v)`.
#[derive(Debug, Clone)]
pub struct QcqpExport {
    pub p0: DMatrix<f64>,
    pub q0: DVector<f64>,
    pub p1: DMatrix<f64>,
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    pub j: usize,
    pub m: usize,
}

// ---------------------------------------------------------------------
// Support enumeration
// ---------------------------------------------------------------------

/// Number of subsets of `0..j` with size in `m_lo..=m_hi`.
pub fn count_supports(j: usize, m_lo: usize, m_hi: usize) -> u128 {
    (m_lo..=m_hi).map(|k| binomial(j, k)).sum()
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Advance `idx` to the lexicographic successor among `idx.len()`-subsets of
/// `0..n`; returns `false` when exhausted.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for l in i + 1..k {
                idx[l] = idx[l - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Iterator over admissible treated supports: size-major, lexicographic
/// within each size, budget-infeasible supports skipped.
pub struct SupportIter<'a> {
    j: usize,
    m_hi: usize,
    budget: Option<&'a Budget>,
    current: Vec<usize>,
    fresh: bool,
    done: bool,
}

impl Iterator for SupportIter<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            if self.fresh {
                self.fresh = false;
            } else if !next_combination(&mut self.current, self.j) {
                let k = self.current.len() + 1;
                if k > self.m_hi {
                    self.done = true;
                    break;
                }
                self.current = (0..k).collect();
            }
            let feasible = match self.budget {
                None => true,
                Some(budget) => {
                    self.current.iter().map(|&u| budget.costs[u]).sum::<f64>() <= budget.bound
                }
            };
            if feasible {
                return Some(self.current.clone());
            }
        }
        None
    }
}

/// Enumerate all supports with `m_lo <= |S| <= m_hi` (and within budget when
/// one is given), smallest sizes first and lexicographic within a size.
pub fn enumerate_supports(
    j: usize,
    m_lo: usize,
    m_hi: usize,
    budget: Option<&Budget>,
) -> SupportIter<'_> {
    assert!(m_lo >= 1 && m_lo <= m_hi && m_hi <= j, "invalid cardinality bounds");
    SupportIter { j, m_hi, budget, current: (0..m_lo).collect(), fresh: true, done: false }
}

// ---------------------------------------------------------------------
// Inner fits on precomputed Gram matrices
// ---------------------------------------------------------------------

/// Shared precomputation for one predictor set: the column Gram matrix and
/// the cross products against the population target.
struct GramContext {
    gram: DMatrix<f64>,
    lin: DVector<f64>,
    const_term: f64,
    /// Squared distances `‖X̄ - X_j‖²` for the penalized designs.
    dist: Vec<f64>,
    m_rows: usize,
}

impl GramContext {
    fn new(pred: &PredictorSet) -> Self {
        let x = pred.x();
        let gram = x.tr_mul(x);
        let lin = x.tr_mul(pred.xbar());
        let const_term = pred.xbar().norm_squared();
        let dist = (0..pred.j()).map(|u| (pred.xbar() - x.column(u)).norm_squared()).collect();
        GramContext { gram, lin, const_term, dist, m_rows: pred.m() }
    }

    fn max_iter(&self, support_len: usize) -> usize {
        10 * support_len * self.m_rows.max(1)
    }

    /// Fit simplex weights on `support` to the population target, with an
    /// optional per-unit linear penalty aligned to `support`. Returns the
    /// weights and the achieved objective.
    fn fit_to_target(&self, support: &[usize], penalty: Option<&[f64]>) -> (Vec<f64>, f64) {
        let lin: Vec<f64> = support.iter().map(|&u| self.lin[u]).collect();
        let zeros;
        let pen = match penalty {
            Some(p) => p,
            None => {
                zeros = vec![0.0; support.len()];
                &zeros[..]
            }
        };
        let (w, obj, _iters, status) = solve_gram(
            &GramView::Subset { gram: &self.gram, support },
            &lin,
            self.const_term,
            pen,
            1e-10,
            self.max_iter(support.len()),
        );
        debug_assert!(status == SolveStatus::Converged || obj.is_finite());
        (w, obj)
    }

    /// Fit simplex weights on `pool` to column `target_unit` of the
    /// predictor matrix (the unit-level synthetic control subproblem).
    fn fit_to_unit(&self, pool: &[usize], target_unit: usize) -> (Vec<f64>, f64) {
        let lin: Vec<f64> = pool.iter().map(|&u| self.gram[(u, target_unit)]).collect();
        let pen = vec![0.0; pool.len()];
        let (w, obj, _iters, _status) = solve_gram(
            &GramView::Subset { gram: &self.gram, support: pool },
            &lin,
            self.gram[(target_unit, target_unit)],
            &pen,
            1e-10,
            self.max_iter(pool.len()),
        );
        (w, obj)
    }
}

/// Candidate ordering: lower objective wins; objectives within a small
/// relative band count as tied and fall through to fewer treated units, then
/// the lexicographically smaller support.
fn improves(obj: f64, support: &[usize], best: Option<(f64, &[usize])>) -> bool {
    match best {
        None => true,
        Some((best_obj, best_support)) => {
            let eps = 1e-9 * (1.0 + obj.abs().min(best_obj.abs()));
            if obj < best_obj - eps {
                true
            } else if obj > best_obj + eps {
                false
            } else {
                match support.len().cmp(&best_support.len()) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => support < best_support,
                }
            }
        }
    }
}

fn complement(j: usize, support: &[usize]) -> Vec<usize> {
    let mut in_support = vec![false; j];
    for &u in support {
        in_support[u] = true;
    }
    (0..j).filter(|&u| !in_support[u]).collect()
}

fn support_mask(support: &[usize]) -> u64 {
    support.iter().fold(0u64, |m, &u| m | (1u64 << u))
}

fn embed(j: usize, support: &[usize], weights: &[f64]) -> DVector<f64> {
    let mut full = DVector::zeros(j);
    for (i, &u) in support.iter().enumerate() {
        full[u] = weights[i];
    }
    full
}

// ---------------------------------------------------------------------
// Design solvers
// ---------------------------------------------------------------------

/// Solve a design program to global optimality over the enumerated family
/// of treated supports.
pub fn solve_design(pred: &PredictorSet, spec: &DesignSpec) -> Result<DesignSolution> {
    let j = pred.j();
    let (m_lo, m_hi) = spec.validate(j)?;
    if j > 64 {
        return Err(Error::InvalidSpec("support enumeration is limited to J <= 64 units".into()));
    }
    let candidates = count_supports(j, m_lo, m_hi);
    if candidates > spec.enumeration_cap {
        return Err(Error::EnumerationCapExceeded { candidates, cap: spec.enumeration_cap });
    }
    let ctx = GramContext::new(pred);
    match spec.kind.clone() {
        DesignKind::Unconstrained | DesignKind::Constrained => {
            solve_separable(pred, spec, &ctx, m_lo, m_hi, 0.0, 0.0)
        }
        DesignKind::Penalized { lambda1, lambda2 } => {
            solve_separable(pred, spec, &ctx, m_lo, m_hi, lambda1, lambda2)
        }
        DesignKind::UnitLevel { xi } => solve_unit_level(pred, spec, &ctx, m_lo, m_hi, xi),
        DesignKind::Clustered { xi, k, seed, restarts } => {
            let (labels, _means) = cluster_units(pred, k, seed, restarts)?;
            solve_clustered_with_assignment(pred, spec, &labels, xi)
        }
    }
}

/// Base and penalized designs: the objective separates into two fits to the
/// population target, one on the support and one on its complement, so fit
/// values are cached per subset and shared between the two roles whenever
/// the penalties coincide.
fn solve_separable(
    pred: &PredictorSet,
    spec: &DesignSpec,
    ctx: &GramContext,
    m_lo: usize,
    m_hi: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<DesignSolution> {
    let j = pred.j();
    let shared = lambda1 == lambda2;
    let mut w_cache: HashMap<u64, f64> = HashMap::new();
    let mut v_cache: HashMap<u64, f64> = HashMap::new();

    let penalty_for = |support: &[usize], lambda: f64| -> Option<Vec<f64>> {
        (lambda != 0.0).then(|| support.iter().map(|&u| lambda * ctx.dist[u]).collect())
    };
    fn fit_cached(
        ctx: &GramContext,
        support: &[usize],
        lambda: f64,
        cache: &mut HashMap<u64, f64>,
        penalty_for: &impl Fn(&[usize], f64) -> Option<Vec<f64>>,
    ) -> f64 {
        let mask = support_mask(support);
        if let Some(&obj) = cache.get(&mask) {
            return obj;
        }
        let penalty = penalty_for(support, lambda);
        let (_w, obj) = ctx.fit_to_target(support, penalty.as_deref());
        cache.insert(mask, obj);
        obj
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluated = 0u64;
    for support in enumerate_supports(j, m_lo, m_hi, spec.budget.as_ref()) {
        evaluated += 1;
        let pool = complement(j, &support);
        let w_obj = fit_cached(ctx, &support, lambda1, &mut w_cache, &penalty_for);
        let v_obj = if shared {
            fit_cached(ctx, &pool, lambda2, &mut w_cache, &penalty_for)
        } else {
            fit_cached(ctx, &pool, lambda2, &mut v_cache, &penalty_for)
        };
        let obj = w_obj + v_obj;
        if improves(obj, &support, best.as_ref().map(|(o, s)| (*o, s.as_slice()))) {
            best = Some((obj, support));
        }
    }

    let Some((objective, treated)) = best else {
        return Err(no_candidate_error(spec, m_lo, m_hi));
    };

    let pool = complement(j, &treated);
    let (w_weights, _) = ctx.fit_to_target(&treated, penalty_for(&treated, lambda1).as_deref());
    let (v_weights, _) = ctx.fit_to_target(&pool, penalty_for(&pool, lambda2).as_deref());
    Ok(DesignSolution {
        w: embed(j, &treated, &w_weights),
        v: embed(j, &pool, &v_weights),
        treated,
        v_unit: None,
        objective,
        cluster_assignment: None,
        evaluated_subsets: evaluated,
        spec: spec.clone(),
    })
}

fn no_candidate_error(spec: &DesignSpec, m_lo: usize, m_hi: usize) -> Error {
    if spec.budget.is_some() {
        Error::InfeasibleBudget
    } else {
        Error::EmptyDonorPool(format!("no admissible support with {m_lo} <= |S| <= {m_hi}"))
    }
}

/// Unit-level design: each treated unit gets its own synthetic control from
/// the donor pool; the treated weights are then fit with the control
/// discrepancies as linear penalties.
fn solve_unit_level(
    pred: &PredictorSet,
    spec: &DesignSpec,
    ctx: &GramContext,
    m_lo: usize,
    m_hi: usize,
    xi: f64,
) -> Result<DesignSolution> {
    let j = pred.j();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluated = 0u64;

    for support in enumerate_supports(j, m_lo, m_hi, spec.budget.as_ref()) {
        evaluated += 1;
        let pool = complement(j, &support);
        let penalty: Vec<f64> = support.iter().map(|&u| xi * ctx.fit_to_unit(&pool, u).1).collect();
        let (_w, obj) = ctx.fit_to_target(&support, Some(&penalty));
        if improves(obj, &support, best.as_ref().map(|(o, s)| (*o, s.as_slice()))) {
            best = Some((obj, support));
        }
    }

    let Some((objective, treated)) = best else {
        return Err(no_candidate_error(spec, m_lo, m_hi));
    };

    let pool = complement(j, &treated);
    let mut v_unit = DMatrix::zeros(j, j);
    let mut penalty = Vec::with_capacity(treated.len());
    for &unit in &treated {
        let (weights, d) = ctx.fit_to_unit(&pool, unit);
        penalty.push(xi * d);
        for (i, &p) in pool.iter().enumerate() {
            v_unit[(p, unit)] = weights[i];
        }
    }
    let (w_weights, _) = ctx.fit_to_target(&treated, Some(&penalty));
    let w = embed(j, &treated, &w_weights);
    let v = aggregate_unit_level_weights(&w, &v_unit)?;
    Ok(DesignSolution {
        treated,
        w,
        v,
        v_unit: Some(v_unit),
        objective,
        cluster_assignment: None,
        evaluated_subsets: evaluated,
        spec: spec.clone(),
    })
}

/// Clustered design with a fixed cluster assignment. Every cluster must
/// contribute at least one treated unit and keep at least one donor; the
/// global cardinality bounds apply to the union of the treated sets.
pub fn solve_clustered_with_assignment(
    pred: &PredictorSet,
    spec: &DesignSpec,
    labels: &[usize],
    xi: f64,
) -> Result<DesignSolution> {
    let j = pred.j();
    let (m_lo, m_hi) = spec.validate(j)?;
    if labels.len() != j {
        return Err(Error::DimensionMismatch(format!("{} labels for {} units", labels.len(), j)));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let members: Vec<Vec<usize>> =
        (0..k).map(|c| (0..j).filter(|&u| labels[u] == c).collect()).collect();
    if members.iter().any(|m| m.is_empty()) {
        return Err(Error::InvalidSpec("cluster labels must be contiguous and nonempty".into()));
    }
    if members.iter().any(|m| m.len() < 2) {
        return Err(Error::EmptyDonorPool(
            "a cluster with a single unit cannot hold both a treated unit and a donor".into(),
        ));
    }
    let f = pred.f();
    let x = pred.x();
    let ctx = GramContext::new(pred);
    let masses: Vec<f64> = members.iter().map(|m| m.iter().map(|&u| f[u]).sum()).collect();
    let cluster_targets: Vec<DVector<f64>> = (0..k)
        .map(|c| {
            let mut target = DVector::zeros(pred.m());
            for &u in &members[c] {
                target += x.column(u) * (f[u] / masses[c]);
            }
            target
        })
        .collect();
    let cluster_lin: Vec<DVector<f64>> = cluster_targets.iter().map(|t| x.tr_mul(t)).collect();
    let cluster_const: Vec<f64> = cluster_targets.iter().map(|t| t.norm_squared()).collect();

    // Inner solve for one cluster given its treated subset: per-treated
    // synthetic controls from the within-cluster pool, then the cluster's
    // treated weights with the discrepancies as penalties.
    let cluster_term = |c: usize, treated: &[usize]| -> (f64, Vec<f64>, Vec<(usize, Vec<f64>)>) {
        let pool: Vec<usize> =
            members[c].iter().copied().filter(|u| !treated.contains(u)).collect();
        let mut penalty = Vec::with_capacity(treated.len());
        let mut controls = Vec::with_capacity(treated.len());
        for &unit in treated {
            let (weights, d) = ctx.fit_to_unit(&pool, unit);
            penalty.push(xi * d);
            controls.push((unit, weights));
        }
        let lin: Vec<f64> = treated.iter().map(|&u| cluster_lin[c][u]).collect();
        let (w, obj, _iters, _status) = solve_gram(
            &GramView::Subset { gram: &ctx.gram, support: treated },
            &lin,
            cluster_const[c],
            &penalty,
            1e-10,
            ctx.max_iter(treated.len()),
        );
        (obj, w, controls)
    };

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluated = 0u64;
    let mut any_cluster_valid = false;
    for support in enumerate_supports(j, m_lo, m_hi, spec.budget.as_ref()) {
        let mut counts = vec![0usize; k];
        for &u in &support {
            counts[labels[u]] += 1;
        }
        if counts.iter().enumerate().any(|(c, &n)| n == 0 || n == members[c].len()) {
            continue;
        }
        any_cluster_valid = true;
        evaluated += 1;
        let mut obj = 0.0;
        for c in 0..k {
            let treated_c: Vec<usize> =
                support.iter().copied().filter(|&u| labels[u] == c).collect();
            obj += masses[c] * cluster_term(c, &treated_c).0;
        }
        if improves(obj, &support, best.as_ref().map(|(o, s)| (*o, s.as_slice()))) {
            best = Some((obj, support));
        }
    }

    let Some((objective, treated)) = best else {
        return Err(if any_cluster_valid {
            Error::InfeasibleBudget
        } else {
            Error::EmptyDonorPool(
                "no support assigns every cluster both a treated unit and a donor".into(),
            )
        });
    };

    let mut w = DVector::zeros(j);
    let mut v = DVector::zeros(j);
    let mut v_unit = DMatrix::zeros(j, j);
    for c in 0..k {
        let treated_c: Vec<usize> = treated.iter().copied().filter(|&u| labels[u] == c).collect();
        let (_, w_c, controls) = cluster_term(c, &treated_c);
        for (i, &unit) in treated_c.iter().enumerate() {
            w[unit] = w_c[i];
        }
        let pool: Vec<usize> =
            members[c].iter().copied().filter(|u| !treated_c.contains(u)).collect();
        for (unit, weights) in controls {
            for (i, &p) in pool.iter().enumerate() {
                v_unit[(p, unit)] = weights[i];
            }
        }
        for &p in &pool {
            v[p] = treated_c.iter().map(|&i| w[i] * v_unit[(p, i)]).sum();
        }
    }
    Ok(DesignSolution {
        treated,
        w,
        v,
        v_unit: Some(v_unit),
        objective,
        cluster_assignment: Some(labels.to_vec()),
        evaluated_subsets: evaluated,
        spec: spec.clone(),
    })
}

/// Aggregate unit-level control weights into a single control vector:
/// `v_j = Σ_i w_i · v_unit[(j, i)]`. The result is on the simplex and
/// supported on the donor pool whenever the inputs are.
pub fn aggregate_unit_level_weights(
    w: &DVector<f64>,
    v_unit: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let j = w.len();
    if v_unit.nrows() != j || v_unit.ncols() != j {
        return Err(Error::DimensionMismatch(format!(
            "v_unit is {}x{}, expected {j}x{j}",
            v_unit.nrows(),
            v_unit.ncols()
        )));
    }
    Ok(v_unit * w)
}

// ---------------------------------------------------------------------
// Weighted k-means
// ---------------------------------------------------------------------

/// K-means over the predictor columns with population-weighted centroid
/// updates. Returns cluster labels (relabeled by first occurrence, so unit 0
/// is always in cluster 0) and the weighted cluster means. Empty clusters
/// trigger a reseeded restart, up to `restarts` extra attempts.
pub fn cluster_units(
    pred: &PredictorSet,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let j = pred.j();
    if k == 0 || k > j {
        return Err(Error::InvalidSpec(format!("cluster count {k} not in 1..={j}")));
    }
    let x = pred.x();
    let f = pred.f();
    for attempt in 0..=restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        while chosen.len() < k {
            let candidate = rng.gen_range(0..j);
            if !chosen.contains(&candidate) {
                chosen.push(candidate);
            }
        }
        let mut centers: Vec<DVector<f64>> =
            chosen.iter().map(|&u| x.column(u).into_owned()).collect();
        let mut labels = vec![0usize; j];
        let mut ok = true;
        for _ in 0..200 {
            let mut changed = false;
            for u in 0..j {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = (x.column(u) - center).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if labels[u] != best_c {
                    labels[u] = best_c;
                    changed = true;
                }
            }
            let mut mass = vec![0.0; k];
            let mut sums = vec![DVector::zeros(pred.m()); k];
            for u in 0..j {
                mass[labels[u]] += f[u];
                sums[labels[u]] += x.column(u) * f[u];
            }
            if mass.iter().any(|&m| m <= 0.0) {
                ok = false;
                break;
            }
            for c in 0..k {
                centers[c] = &sums[c] / mass[c];
            }
            if !changed {
                break;
            }
        }
        if !ok {
            continue;
        }
        // Canonical relabeling by first occurrence.
        let mut remap = vec![usize::MAX; k];
        let mut next = 0;
        for &label in &labels {
            if remap[label] == usize::MAX {
                remap[label] = next;
                next += 1;
            }
        }
        let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
        let mut mass = vec![0.0; k];
        let mut means = DMatrix::zeros(pred.m(), k);
        for u in 0..j {
            mass[labels[u]] += f[u];
            for row in 0..pred.m() {
                means[(row, labels[u])] += x[(row, u)] * f[u];
            }
        }
        for c in 0..k {
            for row in 0..pred.m() {
                means[(row, c)] /= mass[c];
            }
        }
        return Ok((labels, means));
    }
    Err(Error::EmptyClusterAfterConvergence { restarts })
}

// ---------------------------------------------------------------------
// QCQP export
// ---------------------------------------------------------------------

/// Export the base design as canonical QCQP matrices over the stacked
/// decision vector `(w, v)`: minimize `W'P⁰W + q⁰'W` subject to `e₁'W = 1`,
/// `e₂'W = 1`, `W'P¹W = 0`, `W ≥ 0`. The quadratic form plus `2‖X̄‖²`
/// reproduces the base design objective.
pub fn export_qcqp(pred: &PredictorSet) -> QcqpExport {
    let j = pred.j();
    let m = pred.m();
    let x = pred.x();
    let gram = x.tr_mul(x);
    let lin = x.tr_mul(pred.xbar());
    let mut p0 = DMatrix::zeros(2 * j, 2 * j);
    let mut p1 = DMatrix::zeros(2 * j, 2 * j);
    let mut q0 = DVector::zeros(2 * j);
    let mut e1 = DVector::zeros(2 * j);
    let mut e2 = DVector::zeros(2 * j);
    for a in 0..j {
        for b in 0..j {
            p0[(a, b)] = gram[(a, b)];
            p0[(j + a, j + b)] = gram[(a, b)];
        }
        q0[a] = -2.0 * lin[a];
        q0[j + a] = -2.0 * lin[a];
        p1[(a, j + a)] = 1.0;
        p1[(j + a, a)] = 1.0;
        e1[a] = 1.0;
        e2[j + a] = 1.0;
    }
    QcqpExport { p0, q0, p1, e1, e2, j, m }
}
