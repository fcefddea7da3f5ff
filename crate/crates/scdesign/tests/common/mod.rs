//! Shared test oracles: exhaustive subset enumeration plus simplex grid
//! search, independent of the production solver path.

use std::collections::HashMap;

/// Minimize `‖target - Σ w_i cols[i]‖² + Σ w_i pen[i]` over the simplex grid
/// with `steps` subdivisions per coordinate. Coordinates beyond the true
/// dimension are zero-padded.
pub fn grid_fit(cols: &[[f64; 3]], target: [f64; 3], pen: &[f64], steps: usize) -> f64 {
    let n = cols.len();
    assert!(n >= 1);
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    rec(cols, pen, h, 0, steps, target, 0.0, &mut best);
    return best;

    fn rec(
        cols: &[[f64; 3]],
        pen: &[f64],
        h: f64,
        depth: usize,
        rem: usize,
        res: [f64; 3],
        acc_pen: f64,
        best: &mut f64,
    ) {
        let n = cols.len();
        if depth + 1 == n {
            let wt = rem as f64 * h;
            let r0 = res[0] - wt * cols[depth][0];
            let r1 = res[1] - wt * cols[depth][1];
            let r2 = res[2] - wt * cols[depth][2];
            let obj = r0 * r0 + r1 * r1 + r2 * r2 + acc_pen + wt * pen[depth];
            if obj < *best {
                *best = obj;
            }
            return;
        }
        if depth + 2 == n {
            // Innermost pair: walk the weight split incrementally.
            let last = n - 1;
            let rem_h = rem as f64 * h;
            let mut r = [
                res[0] - rem_h * cols[last][0],
                res[1] - rem_h * cols[last][1],
                res[2] - rem_h * cols[last][2],
            ];
            let d = [
                h * (cols[last][0] - cols[depth][0]),
                h * (cols[last][1] - cols[depth][1]),
                h * (cols[last][2] - cols[depth][2]),
            ];
            let mut pen_acc = acc_pen + rem_h * pen[last];
            let pen_step = h * (pen[depth] - pen[last]);
            for _ in 0..=rem {
                let obj = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + pen_acc;
                if obj < *best {
                    *best = obj;
                }
                r[0] += d[0];
                r[1] += d[1];
                r[2] += d[2];
                pen_acc += pen_step;
            }
            return;
        }
        for c in 0..=rem {
            let wt = c as f64 * h;
            let next = [
                res[0] - wt * cols[depth][0],
                res[1] - wt * cols[depth][1],
                res[2] - wt * cols[depth][2],
            ];
            rec(cols, pen, h, depth + 1, rem - c, next, acc_pen + wt * pen[depth], best);
        }
    }
}

/// A small design instance: `j` predictor columns (zero-padded to three
/// rows) and normalized population weights.
pub struct Instance {
    pub cols: Vec<[f64; 3]>,
    pub f: Vec<f64>,
}

impl Instance {
    pub fn j(&self) -> usize {
        self.cols.len()
    }

    pub fn xbar(&self) -> [f64; 3] {
        let mut target = [0.0; 3];
        for (col, &weight) in self.cols.iter().zip(&self.f) {
            for dim in 0..3 {
                target[dim] += weight * col[dim];
            }
        }
        target
    }

    fn dist_to_xbar(&self, unit: usize) -> f64 {
        let xbar = self.xbar();
        (0..3).map(|dim| (xbar[dim] - self.cols[unit][dim]).powi(2)).sum()
    }
}

pub enum OracleKind {
    /// Base design; `lambda` adds the distance penalties of the penalized
    /// variant (zero recovers the plain program).
    Base { lambda: f64 },
    UnitLevel { xi: f64 },
}

pub struct OracleOutcome {
    pub objective: f64,
    pub support: Vec<usize>,
    /// Gap between the best and the best *other* support, ignoring the
    /// complement of the winner for the swap-symmetric base designs.
    pub margin: f64,
}

/// Per-instance caches shared across oracle calls.
#[derive(Default)]
pub struct OracleCaches {
    /// (support mask, lambda bits) -> grid fit of Xbar on the support.
    base: HashMap<(u64, u64), f64>,
    /// (pool mask, unit) -> grid fit of the unit's column on the pool.
    unit: HashMap<(u64, usize), f64>,
}

fn mask_of(support: &[usize]) -> u64 {
    support.iter().fold(0, |mask, &u| mask | (1 << u))
}

fn subsets_by_size(j: usize, m_lo: usize, m_hi: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = Vec::new();
    for mask in 1u64..(1 << j) {
        let size = mask.count_ones() as usize;
        if size >= m_lo && size <= m_hi {
            all.push((0..j).filter(|&u| mask & (1 << u) != 0).collect());
        }
    }
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

const STEPS: usize = 100;

fn base_fit(inst: &Instance, support: &[usize], lambda: f64, caches: &mut OracleCaches) -> f64 {
    let key = (mask_of(support), lambda.to_bits());
    if let Some(&hit) = caches.base.get(&key) {
        return hit;
    }
    let cols: Vec<[f64; 3]> = support.iter().map(|&u| inst.cols[u]).collect();
    let pen: Vec<f64> = support.iter().map(|&u| lambda * inst.dist_to_xbar(u)).collect();
    let value = grid_fit(&cols, inst.xbar(), &pen, STEPS);
    caches.base.insert(key, value);
    value
}

fn unit_fit(inst: &Instance, pool: &[usize], unit: usize, caches: &mut OracleCaches) -> f64 {
    let key = (mask_of(pool), unit);
    if let Some(&hit) = caches.unit.get(&key) {
        return hit;
    }
    let cols: Vec<[f64; 3]> = pool.iter().map(|&u| inst.cols[u]).collect();
    let pen = vec![0.0; pool.len()];
    let value = grid_fit(&cols, inst.cols[unit], &pen, STEPS);
    caches.unit.insert(key, value);
    value
}

/// Brute-force design solve: enumerate every admissible support, grid-search
/// the inner problems, and apply the same deterministic tie-break as the
/// production solver (lower objective, then fewer treated, then
/// lexicographic).
pub fn oracle_design(
    inst: &Instance,
    m_lo: usize,
    m_hi: usize,
    kind: &OracleKind,
    caches: &mut OracleCaches,
) -> OracleOutcome {
    let j = inst.j();
    let mut evaluated: Vec<(f64, Vec<usize>)> = Vec::new();
    for support in subsets_by_size(j, m_lo, m_hi) {
        let pool: Vec<usize> = (0..j).filter(|u| !support.contains(u)).collect();
        let objective = match kind {
            OracleKind::Base { lambda } => {
                base_fit(inst, &support, *lambda, caches) + base_fit(inst, &pool, *lambda, caches)
            }
            OracleKind::UnitLevel { xi } => {
                let pen: Vec<f64> =
                    support.iter().map(|&u| xi * unit_fit(inst, &pool, u, caches)).collect();
                let cols: Vec<[f64; 3]> = support.iter().map(|&u| inst.cols[u]).collect();
                grid_fit(&cols, inst.xbar(), &pen, STEPS)
            }
        };
        evaluated.push((objective, support));
    }
    let mut best_idx = 0;
    for idx in 1..evaluated.len() {
        let (obj, support) = &evaluated[idx];
        let (best_obj, best_support) = &evaluated[best_idx];
        if obj < best_obj
            || (obj == best_obj
                && (support.len(), support.as_slice()) < (best_support.len(), best_support))
        {
            best_idx = idx;
        }
    }
    let (objective, support) = evaluated[best_idx].clone();
    let winner_mask = mask_of(&support);
    let complement_mask = !winner_mask & ((1 << j) - 1);
    let swap_symmetric = matches!(kind, OracleKind::Base { .. });
    let mut margin = f64::INFINITY;
    for (obj, other) in &evaluated {
        let other_mask = mask_of(other);
        if other_mask == winner_mask {
            continue;
        }
        if swap_symmetric && other_mask == complement_mask {
            continue;
        }
        margin = margin.min(obj - objective);
    }
    OracleOutcome { objective, support, margin }
}
