//! Panel data model: outcomes, covariates, population weights, period
//! partitioning, and predictor assembly.
//!
//! A panel holds `J` units observed over `T` periods, the first `T0` of
//! which are pre-intervention. Pre-intervention periods are split into
//! fitting periods (whose outcomes enter the predictor vectors) and blank
//! periods (withheld for placebo inference). Post-intervention outcomes may
//! be missing while the experiment is being designed; they are stored as
//! `NaN` and rejected only by the estimation operations that need them.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Observed panel: outcomes `Y` (J×T), covariates `Z` (J×r), and population
/// weights `f` normalized to sum to one.
#[derive(Debug, Clone)]
pub struct PanelData {
    unit_ids: Vec<String>,
    period_ids: Vec<String>,
    t0: usize,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    f: DVector<f64>,
}

impl PanelData {
    /// Validate and construct a panel. Input weights are rescaled to sum to
    /// one; omitting them yields the equal-weight default `f_j = 1/J`.
    /// Post-intervention outcomes may be `NaN` (not yet observed); any other
    /// missing value is rejected.
    pub fn new(
        unit_ids: Vec<String>,
        period_ids: Vec<String>,
        t0: usize,
        y: DMatrix<f64>,
        z: DMatrix<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let j = unit_ids.len();
        let t = period_ids.len();
        if j == 0 || t == 0 {
            return Err(Error::DimensionMismatch("panel must have units and periods".into()));
        }
        if y.nrows() != j || y.ncols() != t {
            return Err(Error::DimensionMismatch(format!(
                "Y is {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                j,
                t
            )));
        }
        if z.nrows() != j {
            return Err(Error::DimensionMismatch(format!(
                "Z has {} rows, expected {}",
                z.nrows(),
                j
            )));
        }
        if t0 == 0 || t0 >= t {
            return Err(Error::InvalidPartition(format!("T0 = {t0} must satisfy 1 <= T0 < T = {t}")));
        }
        let mut seen = HashMap::new();
        for (idx, id) in unit_ids.iter().enumerate() {
            if seen.insert(id.clone(), idx).is_some() {
                return Err(Error::DuplicateUnit(id.clone()));
            }
        }
        for row in 0..j {
            for col in 0..t0 {
                if !y[(row, col)].is_finite() {
                    return Err(Error::MissingPrePeriodValue {
                        unit: unit_ids[row].clone(),
                        period: period_ids[col].clone(),
                    });
                }
            }
            for col in 0..z.ncols() {
                if !z[(row, col)].is_finite() {
                    return Err(Error::MalformedFile {
                        path: "<covariates>".into(),
                        reason: format!("non-finite covariate for unit {}", unit_ids[row]),
                    });
                }
            }
        }
        let f = match weights {
            Some(w) => {
                if w.len() != j {
                    return Err(Error::LengthMismatch { left: w.len(), right: j });
                }
                for (idx, &value) in w.iter().enumerate() {
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(Error::NonpositiveWeight { unit: unit_ids[idx].clone(), value });
                    }
                }
                let total: f64 = w.iter().sum();
                DVector::from_iterator(j, w.iter().map(|&x| x / total))
            }
            None => DVector::from_element(j, 1.0 / j as f64),
        };
        Ok(PanelData { unit_ids, period_ids, t0, y, z, f })
    }

    pub fn j(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn t(&self) -> usize {
        self.period_ids.len()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Number of experimental periods, `T1 = T - T0`.
    pub fn t1(&self) -> usize {
        self.t() - self.t0
    }

    pub fn r(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn f(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_ids(&self) -> &[String] {
        &self.period_ids
    }
}

/// Split of the pre-intervention window into fitting periods and blank
/// periods; experimental periods are `T0..T`. Period indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodPartition {
    fitting: Vec<usize>,
    blank: Vec<usize>,
    t0: usize,
    t: usize,
}

impl PeriodPartition {
    /// Fitting periods `0..t_e`, blank periods `t_e..t0`.
    pub fn prefix(panel: &PanelData, t_e: usize) -> Result<Self> {
        if t_e == 0 || t_e > panel.t0() {
            return Err(Error::InvalidFittingCount { t_e, t0: panel.t0() });
        }
        Ok(PeriodPartition {
            fitting: (0..t_e).collect(),
            blank: (t_e..panel.t0()).collect(),
            t0: panel.t0(),
            t: panel.t(),
        })
    }

    /// Partition from an explicit ascending list of fitting-period indices;
    /// the remaining pre-intervention periods become blank periods.
    pub fn from_fitting(panel: &PanelData, fitting: &[usize]) -> Result<Self> {
        if fitting.is_empty() {
            return Err(Error::EmptyFittingSet);
        }
        let mut sorted = fitting.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != fitting.len() {
            return Err(Error::InvalidPartition("fitting indices contain duplicates".into()));
        }
        if *sorted.last().unwrap() >= panel.t0() {
            return Err(Error::InvalidPartition(format!(
                "fitting index {} is not pre-intervention (T0 = {})",
                sorted.last().unwrap(),
                panel.t0()
            )));
        }
        let blank = (0..panel.t0()).filter(|idx| !sorted.contains(idx)).collect();
        Ok(PeriodPartition { fitting: sorted, blank, t0: panel.t0(), t: panel.t() })
    }

    pub fn fitting(&self) -> &[usize] {
        &self.fitting
    }

    pub fn blank(&self) -> &[usize] {
        &self.blank
    }

    pub fn experimental(&self) -> std::ops::Range<usize> {
        self.t0..self.t
    }

    pub fn t_e(&self) -> usize {
        self.fitting.len()
    }

    pub fn t_b(&self) -> usize {
        self.blank.len()
    }
}

/// Default partition: fitting periods are the first `t_e` pre-intervention
/// periods, the rest of the pre-intervention window is blank.
pub fn default_partition(panel: &PanelData, t_e: usize) -> Result<PeriodPartition> {
    PeriodPartition::prefix(panel, t_e)
}

/// Per-unit predictor vectors. Column `j` of `x` stacks unit `j`'s fitting
/// period outcomes (in fitting order) above its covariates, so `M = T_E + r`.
/// `xbar` is the f-weighted average of the columns.
#[derive(Debug, Clone)]
pub struct PredictorSet {
    x: DMatrix<f64>,
    xbar: DVector<f64>,
    f: DVector<f64>,
    scale: DVector<f64>,
    unscaled_rows: Vec<usize>,
}

impl PredictorSet {
    /// Predictor matrix, `M` rows by `J` columns.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn xbar(&self) -> &DVector<f64> {
        &self.xbar
    }

    /// Population weights carried over from the panel.
    pub fn f(&self) -> &DVector<f64> {
        &self.f
    }

    /// Per-row divisors applied to `x` (all ones when scaling is off).
    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    /// Rows left unscaled because their cross-unit variance was zero.
    pub fn unscaled_rows(&self) -> &[usize] {
        &self.unscaled_rows
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn j(&self) -> usize {
        self.x.ncols()
    }

    /// Build a predictor set directly from a matrix whose columns are the
    /// unit predictor vectors, with the given population weights.
    pub fn from_matrix(x: DMatrix<f64>, f: DVector<f64>) -> Result<Self> {
        if x.ncols() != f.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictor columns vs {} weights",
                x.ncols(),
                f.len()
            )));
        }
        let xbar = &x * &f;
        let m = x.nrows();
        Ok(PredictorSet { x, xbar, f, scale: DVector::from_element(m, 1.0), unscaled_rows: vec![] })
    }
}

/// Assemble predictor vectors from fitting-period outcomes and covariates.
///
/// With `scaling` enabled, each predictor row is divided by its cross-unit
/// standard deviation (population formula) so rows are unit-free; rows with
/// zero variance are left unscaled and reported in `unscaled_rows`. The
/// population target `xbar` is computed from the scaled matrix.
pub fn build_predictors(
    panel: &PanelData,
    part: &PeriodPartition,
    scaling: bool,
) -> Result<PredictorSet> {
    if part.fitting().is_empty() {
        return Err(Error::EmptyFittingSet);
    }
    let j = panel.j();
    let t_e = part.t_e();
    let r = panel.r();
    let m = t_e + r;
    let mut x = DMatrix::zeros(m, j);
    for (row, &period) in part.fitting().iter().enumerate() {
        for unit in 0..j {
            x[(row, unit)] = panel.y()[(unit, period)];
        }
    }
    for row in 0..r {
        for unit in 0..j {
            x[(t_e + row, unit)] = panel.z()[(unit, row)];
        }
    }
    let mut scale = DVector::from_element(m, 1.0);
    let mut unscaled_rows = Vec::new();
    if scaling {
        for row in 0..m {
            let mean: f64 = (0..j).map(|unit| x[(row, unit)]).sum::<f64>() / j as f64;
            let var: f64 =
                (0..j).map(|unit| (x[(row, unit)] - mean).powi(2)).sum::<f64>() / j as f64;
            let sd = var.sqrt();
            if sd <= 1e-12 * (1.0 + mean.abs()) {
                unscaled_rows.push(row);
            } else {
                scale[row] = sd;
                for unit in 0..j {
                    x[(row, unit)] /= sd;
                }
            }
        }
    }
    let xbar = &x * panel.f();
    Ok(PredictorSet { x, xbar, f: panel.f().clone(), scale, unscaled_rows })
}

#[derive(Debug, Deserialize)]
struct OutcomeRow {
    unit: String,
    period: String,
    value: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct WeightRow {
    unit: String,
    f: f64,
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile { path: path.display().to_string(), reason: reason.into() }
}

/// Load a panel from a long-form outcome CSV (`unit,period,value`) and a
/// wide covariate CSV (`unit,z1,...,zr`). Unit and period order follow first
/// appearance in the outcome file. Outcome rows may be omitted for
/// post-intervention periods; omitted pre-intervention rows are an error.
pub fn load_panel(
    outcome_file: &Path,
    covariate_file: &Path,
    weights: Option<Vec<f64>>,
    t0: usize,
) -> Result<PanelData> {
    let mut units: Vec<String> = Vec::new();
    let mut periods: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut period_index: HashMap<String, usize> = HashMap::new();
    let mut values: HashMap<(usize, usize), f64> = HashMap::new();

    let mut reader = open_reader(outcome_file)?;
    {
        let headers = reader.headers().map_err(|e| malformed(outcome_file, e.to_string()))?;
        let expected = ["unit", "period", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(malformed(outcome_file, "header must be `unit,period,value`"));
        }
    }
    for record in reader.deserialize() {
        let row: OutcomeRow = record.map_err(|e| malformed(outcome_file, e.to_string()))?;
        let u = *unit_index.entry(row.unit.clone()).or_insert_with(|| {
            units.push(row.unit.clone());
            units.len() - 1
        });
        let p = *period_index.entry(row.period.clone()).or_insert_with(|| {
            periods.push(row.period.clone());
            periods.len() - 1
        });
        if let Some(value) = row.value {
            if values.insert((u, p), value).is_some() {
                return Err(Error::DuplicateUnit(format!(
                    "outcome row ({}, {}) appears twice",
                    row.unit, row.period
                )));
            }
        }
    }
    let j = units.len();
    let t = periods.len();
    if j == 0 || t == 0 {
        return Err(malformed(outcome_file, "no outcome rows"));
    }
    let mut y = DMatrix::from_element(j, t, f64::NAN);
    for ((u, p), value) in &values {
        y[(*u, *p)] = *value;
    }

    let mut reader = open_reader(covariate_file)?;
    let r = {
        let headers = reader.headers().map_err(|e| malformed(covariate_file, e.to_string()))?;
        if headers.get(0) != Some("unit") {
            return Err(malformed(covariate_file, "first column must be `unit`"));
        }
        headers.len() - 1
    };
    let mut z = DMatrix::from_element(j, r, f64::NAN);
    let mut seen_cov = vec![false; j];
    for record in reader.records() {
        let record = record.map_err(|e| malformed(covariate_file, e.to_string()))?;
        let unit = record.get(0).unwrap_or_default().to_string();
        let Some(&u) = unit_index.get(&unit) else {
            return Err(malformed(covariate_file, format!("unit {unit} not in outcome file")));
        };
        if seen_cov[u] {
            return Err(Error::DuplicateUnit(unit));
        }
        seen_cov[u] = true;
        if record.len() != r + 1 {
            return Err(malformed(covariate_file, format!("row for unit {unit} has wrong width")));
        }
        for col in 0..r {
            let raw = record.get(col + 1).unwrap_or_default();
            let value: f64 = raw
                .trim()
                .parse()
                .map_err(|_| malformed(covariate_file, format!("bad number `{raw}`")))?;
            z[(u, col)] = value;
        }
    }
    if let Some(missing) = seen_cov.iter().position(|&s| !s) {
        return Err(malformed(
            covariate_file,
            format!("unit {} has no covariate row", units[missing]),
        ));
    }

    PanelData::new(units, periods, t0, y, z, weights)
}

/// Load a weights CSV (`unit,f`) aligned to the given unit order.
pub fn load_weights(path: &Path, unit_ids: &[String]) -> Result<Vec<f64>> {
    let mut reader = open_reader(path)?;
    let mut map: HashMap<String, f64> = HashMap::new();
    for record in reader.deserialize() {
        let row: WeightRow = record.map_err(|e| malformed(path, e.to_string()))?;
        if map.insert(row.unit.clone(), row.f).is_some() {
            return Err(Error::DuplicateUnit(row.unit));
        }
    }
    unit_ids
        .iter()
        .map(|id| {
            map.get(id).copied().ok_or_else(|| malformed(path, format!("unit {id} has no weight")))
        })
        .collect()
}

/// Write a panel back to the CSV formats accepted by [`load_panel`].
/// Missing (`NaN`) post-period outcomes become rows with an empty value
/// field, so the period set survives a round trip.
pub fn save_panel(
    panel: &PanelData,
    outcome_file: &Path,
    covariate_file: &Path,
    weights_file: Option<&Path>,
) -> Result<()> {
    let mut out = String::from("unit,period,value\n");
    for u in 0..panel.j() {
        for p in 0..panel.t() {
            let value = panel.y()[(u, p)];
            let unit = &panel.unit_ids()[u];
            let period = &panel.period_ids()[p];
            if value.is_finite() {
                out.push_str(&format!("{unit},{period},{value}\n"));
            } else {
                out.push_str(&format!("{unit},{period},\n"));
            }
        }
    }
    write_text(outcome_file, &out)?;

    let mut cov = String::from("unit");
    for col in 0..panel.r() {
        cov.push_str(&format!(",z{}", col + 1));
    }
    cov.push('\n');
    for u in 0..panel.j() {
        cov.push_str(&panel.unit_ids()[u]);
        for col in 0..panel.r() {
            cov.push_str(&format!(",{}", panel.z()[(u, col)]));
        }
        cov.push('\n');
    }
    write_text(covariate_file, &cov)?;

    if let Some(path) = weights_file {
        let mut w = String::from("unit,f\n");
        for u in 0..panel.j() {
            w.push_str(&format!("{},{}\n", panel.unit_ids()[u], panel.f()[u]));
        }
        write_text(path, &w)?;
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(content.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}
