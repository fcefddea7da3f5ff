//! Treatment-effect estimators, the bias-corrected variant, mean absolute
//! error, and the closed-form bias-bound diagnostic.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::designs::DesignSolution;
use crate::error::{Error, Result};
use crate::panel::{PanelData, PeriodPartition, PredictorSet};

/// Which average the estimator targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Att,
}

/// Per-period effect estimates over the experimental window, plus placebo
/// estimates for the blank periods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub bias_corrected: bool,
    /// Experimental period indices (0-based), ascending.
    pub periods: Vec<usize>,
    /// `τ̂_t` for each entry of `periods`.
    pub values: Vec<f64>,
    /// Blank period indices (0-based), ascending.
    pub blank_periods: Vec<usize>,
    /// Placebo estimates `û_t` for each blank period.
    pub placebo: Vec<f64>,
}

/// Weighted outcome gap `Σ_j w_j Y_jt - Σ_j v_j Y_jt` at one period.
/// Units carrying zero weight on both sides may have missing outcomes.
fn weighted_gap(
    panel: &PanelData,
    w: &DVector<f64>,
    v: &DVector<f64>,
    period: usize,
) -> Result<f64> {
    let mut gap = 0.0;
    for unit in 0..panel.j() {
        let weight = w[unit] - v[unit];
        if weight == 0.0 {
            continue;
        }
        let y = panel.y()[(unit, period)];
        if !y.is_finite() {
            return Err(Error::MissingOutcome {
                unit: panel.unit_ids()[unit].clone(),
                period: panel.period_ids()[period].clone(),
            });
        }
        gap += weight * y;
    }
    Ok(gap)
}

/// Synthetic control estimator of the average treatment effect:
/// `τ̂_t = Σ_j w_j Y_jt - Σ_j v_j Y_jt` over the experimental periods, with
/// the same contrast over blank periods as placebo estimates.
pub fn estimate_ate(
    panel: &PanelData,
    sol: &DesignSolution,
    part: &PeriodPartition,
) -> Result<EffectEstimate> {
    let (w, v) = sol.effective_weights(panel.f());
    let periods: Vec<usize> = part.experimental().collect();
    let values =
        periods.iter().map(|&t| weighted_gap(panel, &w, &v, t)).collect::<Result<Vec<_>>>()?;
    let placebo =
        part.blank().iter().map(|&t| weighted_gap(panel, &w, &v, t)).collect::<Result<Vec<_>>>()?;
    Ok(EffectEstimate {
        estimand: Estimand::Ate,
        bias_corrected: false,
        periods,
        values,
        blank_periods: part.blank().to_vec(),
        placebo,
    })
}

/// Synthetic control estimator of the effect on the treated. Computes both
/// algebraic forms — the aggregated-control contrast and the average of
/// per-treated-unit gaps `Σ_j w_j (Y_jt - Σ_i v_{ij} Y_it)` — and verifies
/// they agree to `1e-10` before returning.
pub fn estimate_att(
    panel: &PanelData,
    sol: &DesignSolution,
    part: &PeriodPartition,
) -> Result<EffectEstimate> {
    let Some(v_unit) = &sol.v_unit else {
        return Err(Error::MissingUnitLevelWeights);
    };
    let (w, v) = sol.effective_weights(panel.f());
    let unit_level_gap = |period: usize| -> Result<f64> {
        let mut total = 0.0;
        for unit in 0..panel.j() {
            if w[unit] == 0.0 {
                continue;
            }
            let y = panel.y()[(unit, period)];
            if !y.is_finite() {
                return Err(Error::MissingOutcome {
                    unit: panel.unit_ids()[unit].clone(),
                    period: panel.period_ids()[period].clone(),
                });
            }
            let mut synthetic = 0.0;
            for donor in 0..panel.j() {
                let weight = v_unit[(donor, unit)];
                if weight != 0.0 {
                    synthetic += weight * panel.y()[(donor, period)];
                }
            }
            total += w[unit] * (y - synthetic);
        }
        Ok(total)
    };
    let contrast = |period: usize| -> Result<f64> {
        let aggregated = weighted_gap(panel, &w, &v, period)?;
        let unit_level = unit_level_gap(period)?;
        let tol = 1e-10 * (1.0 + aggregated.abs());
        if (aggregated - unit_level).abs() > tol {
            return Err(Error::FormMismatch { a: aggregated, b: unit_level, tol });
        }
        Ok(aggregated)
    };
    let periods: Vec<usize> = part.experimental().collect();
    let values = periods.iter().map(|&t| contrast(t)).collect::<Result<Vec<_>>>()?;
    let placebo = part.blank().iter().map(|&t| contrast(t)).collect::<Result<Vec<_>>>()?;
    Ok(EffectEstimate {
        estimand: Estimand::Att,
        bias_corrected: false,
        periods,
        values,
        blank_periods: part.blank().to_vec(),
        placebo,
    })
}

/// Ridge-regularized linear fit of `y` on the rows of `rows`; returns the
/// coefficient vector (intercept first when `intercept` is set). The ridge
/// term is not applied to the intercept.
fn ridge_fit(
    rows: &[DVector<f64>],
    y: &[f64],
    ridge: f64,
    intercept: bool,
) -> Result<DVector<f64>> {
    let n = rows.len();
    let p_base = rows.first().map_or(0, |r| r.len());
    let p = p_base + usize::from(intercept);
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut design = DMatrix::zeros(n, p);
    for (i, row) in rows.iter().enumerate() {
        if intercept {
            design[(i, 0)] = 1.0;
        }
        for c in 0..p_base {
            design[(i, c + usize::from(intercept))] = row[c];
        }
    }
    let mut normal = design.tr_mul(&design);
    for c in usize::from(intercept)..p {
        normal[(c, c)] += ridge;
    }
    let rhs = design.tr_mul(&DVector::from_column_slice(y));
    let chol = Cholesky::new(normal).ok_or(Error::SingularRegression)?;
    Ok(chol.solve(&rhs))
}

fn predict(beta: &DVector<f64>, x: &DVector<f64>, intercept: bool) -> f64 {
    if beta.is_empty() {
        return 0.0;
    }
    let offset = usize::from(intercept);
    let mut value = if intercept { beta[0] } else { 0.0 };
    for c in 0..x.len() {
        value += beta[c + offset] * x[c];
    }
    value
}

/// Bias-corrected estimator: both weighted averages are taken over outcomes
/// residualized against a per-period regression of untreated outcomes on the
/// predictors. The regression is cross-fitted leave-one-out over the
/// untreated units; treated units use the all-untreated fit. The same
/// correction is applied to the blank-period placebos so the residual vector
/// stays comparable across periods.
pub fn estimate_bias_corrected(
    panel: &PanelData,
    pred: &PredictorSet,
    sol: &DesignSolution,
    part: &PeriodPartition,
    ridge: f64,
    intercept: bool,
) -> Result<EffectEstimate> {
    let j = panel.j();
    let untreated: Vec<usize> = (0..j).filter(|u| !sol.treated.contains(u)).collect();
    if untreated.len() < 2 {
        return Err(Error::EmptyDonorPool(
            "bias correction needs at least two untreated units".into(),
        ));
    }
    let (w, v) = sol.effective_weights(panel.f());
    let x_cols: Vec<DVector<f64>> = (0..j).map(|u| pred.x().column(u).into_owned()).collect();

    let corrected_gap = |period: usize| -> Result<f64> {
        let mut y_untreated = Vec::with_capacity(untreated.len());
        for &u in &untreated {
            let y = panel.y()[(u, period)];
            if !y.is_finite() {
                return Err(Error::MissingOutcome {
                    unit: panel.unit_ids()[u].clone(),
                    period: panel.period_ids()[period].clone(),
                });
            }
            y_untreated.push(y);
        }
        let rows: Vec<DVector<f64>> = untreated.iter().map(|&u| x_cols[u].clone()).collect();
        let beta_all = ridge_fit(&rows, &y_untreated, ridge, intercept)?;
        let mut gap = 0.0;
        for unit in 0..j {
            let weight = w[unit] - v[unit];
            if weight == 0.0 {
                continue;
            }
            let y = panel.y()[(unit, period)];
            if !y.is_finite() {
                return Err(Error::MissingOutcome {
                    unit: panel.unit_ids()[unit].clone(),
                    period: panel.period_ids()[period].clone(),
                });
            }
            let mu = if let Some(pos) = untreated.iter().position(|&u| u == unit) {
                // Leave-one-out fit for an untreated unit.
                let loo_rows: Vec<DVector<f64>> = untreated
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != pos)
                    .map(|(_, &u)| x_cols[u].clone())
                    .collect();
                let loo_y: Vec<f64> = y_untreated
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != pos)
                    .map(|(_, &value)| value)
                    .collect();
                let beta = ridge_fit(&loo_rows, &loo_y, ridge, intercept)?;
                predict(&beta, &x_cols[unit], intercept)
            } else {
                predict(&beta_all, &x_cols[unit], intercept)
            };
            gap += weight * (y - mu);
        }
        Ok(gap)
    };

    let periods: Vec<usize> = part.experimental().collect();
    let values = periods.iter().map(|&t| corrected_gap(t)).collect::<Result<Vec<_>>>()?;
    let placebo = part.blank().iter().map(|&t| corrected_gap(t)).collect::<Result<Vec<_>>>()?;
    Ok(EffectEstimate {
        estimand: Estimand::Ate,
        bias_corrected: true,
        periods,
        values,
        blank_periods: part.blank().to_vec(),
        placebo,
    })
}

/// Mean absolute error between estimated and true per-period effects.
pub fn mae(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::LengthMismatch { left: estimates.len(), right: truth.len() });
    }
    Ok(estimates.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / estimates.len() as f64)
}

/// Primitives of the bias-bound diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasBoundInputs {
    /// Bound on the latent-factor loadings of the untreated model.
    pub lambda_bar: f64,
    /// Bound on the latent-factor loadings of the treated model.
    pub eta_bar: f64,
    /// Latent factor count.
    pub factors: usize,
    /// Scaled smallest eigenvalue of the fitting-window loading Gram.
    pub zeta_lo: f64,
    pub j: usize,
    /// Sub-Gaussian variance proxy of the noise.
    pub sigma_bar: f64,
    /// Moment order; any positive integer.
    pub q: u32,
    /// Number of fitting periods.
    pub t_e: usize,
}

impl BiasBoundInputs {
    fn validate(&self) -> Result<()> {
        let positive = self.lambda_bar > 0.0
            && self.eta_bar > 0.0
            && self.factors > 0
            && self.zeta_lo > 0.0
            && self.j > 0
            && self.sigma_bar > 0.0
            && self.q >= 1
            && self.t_e > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidSpec("bias-bound inputs must all be positive".into()))
        }
    }
}

/// Closed-form bound on `|E[τ̂_t - τ_t]|` under perfect pre-period fit:
/// `λ̄(η̄+λ̄)F/ζ̲ · J^(1/q) · √2·σ̄·(qΓ(q/2))^(1/q) · T_E^(-1/2)`.
pub fn bias_bound(inputs: &BiasBoundInputs) -> Result<f64> {
    inputs.validate()?;
    let q = f64::from(inputs.q);
    let front = inputs.lambda_bar * (inputs.eta_bar + inputs.lambda_bar) * inputs.factors as f64
        / inputs.zeta_lo;
    let j_term = (inputs.j as f64).powf(1.0 / q);
    let moment = ((q.ln() + ln_gamma(q / 2.0)) / q).exp();
    Ok(front * j_term * std::f64::consts::SQRT_2 * inputs.sigma_bar * moment
        / (inputs.t_e as f64).sqrt())
}
