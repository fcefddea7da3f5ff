//! Linear factor-model data generator and end-to-end replication harness.
//!
//! Potential outcomes follow
//! `Y^N_jt = δ_t + θ_t'Z_j + λ_t'μ_j + ε_jt` and
//! `Y^I_jt = υ_t + γ_t'Z_j + η_t'μ_j + ξ_jt`; under the no-effect null the
//! treated equation reuses the untreated coefficients with fresh noise, so
//! both potential outcomes share one distribution.
//!
//! Randomness is a ChaCha8 stream cipher seeded from the config seed, with
//! one stream per replication, so panels are reproducible across platforms.
//! The draw order is fixed: δ (T draws, then sorted), υ (same), `Z`
//! row-major, `μ` row-major, then per period θ_t, γ_t, λ_t, η_t, then `ε`
//! row-major, then `ξ` row-major. All draws happen in both null and
//! alternative mode so the latent sample paths coincide across modes at the
//! same seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{solve_design, DesignSpec};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ate, mae};
use crate::inference::{build_residuals, p_value, SamplingMode, StatisticKind};
use crate::panel::{build_predictors, default_partition, PanelData};

/// Factor-model configuration. The default mirrors the simulation study
/// setup: 15 units, 30 periods (25 pre-intervention, 20 fitting), 7 observed
/// and 11 latent covariates, unit-variance Gaussian noise, time effects
/// uniform on [0, 20], loadings uniform on [0, 10], unit traits uniform on
/// [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorModelConfig {
    pub j: usize,
    pub t: usize,
    pub t0: usize,
    pub t_e: usize,
    pub r: usize,
    pub factors: usize,
    pub sigma2: f64,
    pub delta_range: (f64, f64),
    pub upsilon_range: (f64, f64),
    pub loading_range: (f64, f64),
    pub unit_range: (f64, f64),
    /// Generate treated potential outcomes from the untreated coefficients
    /// (fresh noise only), making the no-effect null true.
    pub null_mode: bool,
    pub seed: u64,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        FactorModelConfig {
            j: 15,
            t: 30,
            t0: 25,
            t_e: 20,
            r: 7,
            factors: 11,
            sigma2: 1.0,
            delta_range: (0.0, 20.0),
            upsilon_range: (0.0, 20.0),
            loading_range: (0.0, 10.0),
            unit_range: (0.0, 1.0),
            null_mode: false,
            seed: 0,
        }
    }
}

impl FactorModelConfig {
    fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::InvalidSpec("factor model needs at least two units".into()));
        }
        if self.factors == 0 {
            return Err(Error::InvalidSpec("factor count must be positive".into()));
        }
        if !(self.t_e >= 1 && self.t_e <= self.t0 && self.t0 < self.t) {
            return Err(Error::InvalidSpec(
                "periods must satisfy 1 <= T_E <= T0 < T".into(),
            ));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidSpec("sigma2 must be positive".into()));
        }
        Ok(())
    }
}

/// Latent draws retained for diagnostics.
#[derive(Debug, Clone)]
pub struct Latents {
    pub delta: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub z: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub eta: DMatrix<f64>,
    pub epsilon: DMatrix<f64>,
    pub xi: DMatrix<f64>,
}

/// A generated panel with both potential-outcome matrices and the true
/// per-period average effects.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    panel: PanelData,
    y_n: DMatrix<f64>,
    y_i: DMatrix<f64>,
    tau: Vec<f64>,
    latents: Latents,
}

impl SimulatedPanel {
    /// Panel as observable at design time: pre-intervention outcomes are the
    /// untreated potential outcomes, post-intervention outcomes are missing.
    pub fn panel(&self) -> &PanelData {
        &self.panel
    }

    pub fn y_n(&self) -> &DMatrix<f64> {
        &self.y_n
    }

    pub fn y_i(&self) -> &DMatrix<f64> {
        &self.y_i
    }

    /// True effects `τ_t = Σ_j f_j (Y^I_jt - Y^N_jt)` over the experimental
    /// periods.
    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn latents(&self) -> &Latents {
        &self.latents
    }

    /// Observed panel once the experiment has run: treated units switch to
    /// their treated potential outcomes after the pre-intervention window.
    pub fn realize(&self, treated: &[usize]) -> PanelData {
        let t = self.panel.t();
        let t0 = self.panel.t0();
        let mut y = self.y_n.clone();
        for &unit in treated {
            for period in t0..t {
                y[(unit, period)] = self.y_i[(unit, period)];
            }
        }
        PanelData::new(
            self.panel.unit_ids().to_vec(),
            self.panel.period_ids().to_vec(),
            t0,
            y,
            self.panel.z().clone(),
            None,
        )
        .expect("realized panel is valid by construction")
    }
}

/// Generate a panel on RNG stream 0.
pub fn generate_panel(cfg: &FactorModelConfig) -> Result<SimulatedPanel> {
    generate_panel_stream(cfg, 0)
}

/// Generate a panel on the given RNG stream (one stream per replication).
pub fn generate_panel_stream(cfg: &FactorModelConfig, stream: u64) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let uniform = |rng: &mut ChaCha8Rng, range: (f64, f64)| -> f64 {
        rng.gen::<f64>() * (range.1 - range.0) + range.0
    };
    let (j, t, r, factors) = (cfg.j, cfg.t, cfg.r, cfg.factors);

    let mut delta: Vec<f64> = (0..t).map(|_| uniform(&mut rng, cfg.delta_range)).collect();
    delta.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut upsilon: Vec<f64> = (0..t).map(|_| uniform(&mut rng, cfg.upsilon_range)).collect();
    upsilon.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut z = DMatrix::zeros(j, r);
    for row in 0..j {
        for col in 0..r {
            z[(row, col)] = uniform(&mut rng, cfg.unit_range);
        }
    }
    let mut mu = DMatrix::zeros(j, factors);
    for row in 0..j {
        for col in 0..factors {
            mu[(row, col)] = uniform(&mut rng, cfg.unit_range);
        }
    }
    let mut theta = DMatrix::zeros(t, r);
    let mut gamma = DMatrix::zeros(t, r);
    let mut lambda = DMatrix::zeros(t, factors);
    let mut eta = DMatrix::zeros(t, factors);
    for period in 0..t {
        for col in 0..r {
            theta[(period, col)] = uniform(&mut rng, cfg.loading_range);
        }
        for col in 0..r {
            gamma[(period, col)] = uniform(&mut rng, cfg.loading_range);
        }
        for col in 0..factors {
            lambda[(period, col)] = uniform(&mut rng, cfg.loading_range);
        }
        for col in 0..factors {
            eta[(period, col)] = uniform(&mut rng, cfg.loading_range);
        }
    }
    let noise = Normal::new(0.0, cfg.sigma2.sqrt())
        .map_err(|e| Error::InvalidSpec(format!("bad noise scale: {e}")))?;
    let mut epsilon = DMatrix::zeros(j, t);
    for row in 0..j {
        for col in 0..t {
            epsilon[(row, col)] = noise.sample(&mut rng);
        }
    }
    let mut xi = DMatrix::zeros(j, t);
    for row in 0..j {
        for col in 0..t {
            xi[(row, col)] = noise.sample(&mut rng);
        }
    }

    let systematic_n = |unit: usize, period: usize| -> f64 {
        let mut value = delta[period];
        for col in 0..r {
            value += theta[(period, col)] * z[(unit, col)];
        }
        for col in 0..factors {
            value += lambda[(period, col)] * mu[(unit, col)];
        }
        value
    };
    let systematic_i = |unit: usize, period: usize| -> f64 {
        let mut value = upsilon[period];
        for col in 0..r {
            value += gamma[(period, col)] * z[(unit, col)];
        }
        for col in 0..factors {
            value += eta[(period, col)] * mu[(unit, col)];
        }
        value
    };

    let mut y_n = DMatrix::zeros(j, t);
    let mut y_i = DMatrix::zeros(j, t);
    for unit in 0..j {
        for period in 0..t {
            y_n[(unit, period)] = systematic_n(unit, period) + epsilon[(unit, period)];
            let base = if cfg.null_mode {
                systematic_n(unit, period)
            } else {
                systematic_i(unit, period)
            };
            y_i[(unit, period)] = base + xi[(unit, period)];
        }
    }

    let f = DVector::from_element(j, 1.0 / j as f64);
    let tau: Vec<f64> = (cfg.t0..t)
        .map(|period| {
            (0..j).map(|unit| f[unit] * (y_i[(unit, period)] - y_n[(unit, period)])).sum()
        })
        .collect();

    let mut observed = y_n.clone();
    for unit in 0..j {
        for period in cfg.t0..t {
            observed[(unit, period)] = f64::NAN;
        }
    }
    let panel = PanelData::new(
        (1..=j).map(|u| format!("unit{u:02}")).collect(),
        (1..=t).map(|p| p.to_string()).collect(),
        cfg.t0,
        observed,
        z.clone(),
        None,
    )?;
    Ok(SimulatedPanel {
        panel,
        y_n,
        y_i,
        tau,
        latents: Latents { delta, upsilon, z, mu, theta, gamma, lambda, eta, epsilon, xi },
    })
}

/// Aggregate results of a replication batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sigma2: f64,
    pub n_reps: usize,
    pub alphas: Vec<f64>,
    /// Fraction of successful replications with `p̂ <= α`, per alpha.
    pub rejection_rates: Vec<f64>,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Mean over replications of the average absolute blank-period placebo.
    pub placebo_mean_abs: f64,
    pub failures: usize,
    pub p_values: Vec<f64>,
    pub maes: Vec<f64>,
}

impl CalibrationReport {
    /// Median of the replication p-values (average of the middle pair for
    /// even counts).
    pub fn median_p(&self) -> f64 {
        let mut sorted = self.p_values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            return f64::NAN;
        }
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

/// Run `n_reps` end-to-end replications: generate a panel, build predictors
/// (scaling on), solve the design, assign treatment per the solution,
/// estimate, and test. Per-replication failures are recorded without
/// aborting the batch. Replications run in parallel, one RNG stream each.
pub fn run_replications(
    cfg: &FactorModelConfig,
    spec: &DesignSpec,
    n_reps: usize,
    alphas: &[f64],
) -> Result<CalibrationReport> {
    if n_reps == 0 {
        return Err(Error::InvalidSpec("n_reps must be at least 1".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<std::result::Result<(f64, f64, f64), String>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| replicate_once(cfg, spec, rep as u64).map_err(|e| e.to_string()))
        .collect();

    let mut p_values = Vec::new();
    let mut maes = Vec::new();
    let mut placebo_sum = 0.0;
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok((p, mae_value, placebo_abs)) => {
                p_values.push(p);
                maes.push(mae_value);
                placebo_sum += placebo_abs;
            }
            Err(_) => failures += 1,
        }
    }
    let successes = p_values.len().max(1);
    let rejection_rates = alphas
        .iter()
        .map(|&alpha| {
            p_values.iter().filter(|&&p| p <= alpha).count() as f64 / successes as f64
        })
        .collect();
    let mae_mean = maes.iter().sum::<f64>() / successes as f64;
    let mae_std = (maes.iter().map(|m| (m - mae_mean).powi(2)).sum::<f64>() / successes as f64)
        .sqrt();
    Ok(CalibrationReport {
        sigma2: cfg.sigma2,
        n_reps,
        alphas: alphas.to_vec(),
        rejection_rates,
        mae_mean,
        mae_std,
        placebo_mean_abs: placebo_sum / successes as f64,
        failures,
        p_values,
        maes,
    })
}

fn replicate_once(cfg: &FactorModelConfig, spec: &DesignSpec, stream: u64) -> Result<(f64, f64, f64)> {
    let sim = generate_panel_stream(cfg, stream)?;
    let part = default_partition(sim.panel(), cfg.t_e)?;
    let pred = build_predictors(sim.panel(), &part, true)?;
    let sol = solve_design(&pred, spec)?;
    let realized = sim.realize(&sol.treated);
    let est = estimate_ate(&realized, &sol, &part)?;
    let residuals = build_residuals(&est)?;
    let result = p_value(&residuals, StatisticKind::MeanAbs, SamplingMode::Exact)?;
    let mae_value = mae(&est.values, sim.tau())?;
    let placebo_abs =
        est.placebo.iter().map(|u| u.abs()).sum::<f64>() / est.placebo.len() as f64;
    Ok((result.p_value, mae_value, placebo_abs))
}

/// Run a replication batch per noise level and return one report per σ².
pub fn noise_sweep(
    cfg: &FactorModelConfig,
    spec: &DesignSpec,
    sigma2_list: &[f64],
    n_reps: usize,
    alphas: &[f64],
) -> Result<Vec<CalibrationReport>> {
    if sigma2_list.is_empty() {
        return Err(Error::InvalidSpec("sigma2 sweep needs at least one value".into()));
    }
    sigma2_list
        .iter()
        .map(|&sigma2| {
            if !(sigma2 > 0.0) {
                return Err(Error::InvalidSpec("sigma2 must be positive".into()));
            }
            let sweep_cfg = FactorModelConfig { sigma2, ..cfg.clone() };
            run_replications(&sweep_cfg, spec, n_reps, alphas)
        })
        .collect()
}
