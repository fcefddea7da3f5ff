//! Command-line front end: `design`, `estimate`, `infer`, `simulate`,
//! `export-qcqp`, and `report`.
//!
//! Options may come from flags or from a flat JSON config file given with
//! `--config`; flags override file values and unknown config keys are
//! rejected. Output files are written with stable key order and floats
//! rounded to 12 significant digits, so identical inputs and seeds produce
//! byte-identical artifacts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 infeasible
//! design, 5 estimation/inference error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::designs::{
    export_qcqp, solve_design, Budget, DesignKind, DesignSolution, DesignSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_ate, estimate_att, estimate_bias_corrected, mae, Estimand,
};
use crate::inference::{
    p_value_with_cap, InferenceResult, ResidualVector, SamplingMode, StatisticKind,
    DEFAULT_EXACT_CAP,
};
use crate::panel::{
    build_predictors, load_panel, load_weights, save_panel, write_text, PanelData,
    PeriodPartition, PredictorSet,
};
use crate::simulate::{generate_panel, noise_sweep, run_replications, FactorModelConfig};

#[derive(Debug, Parser)]
#[command(
    name = "scdesign",
    about = "Synthetic control designs for experiments on aggregate units",
    version,
    after_help = "Exit codes: 0 ok, 2 config error, 3 data error, 4 infeasible design, \
                  5 estimation/inference error."
)]
pub struct Cli {
    /// Flat JSON config file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for simulation and sampled inference.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select treated and control units and their weights.
    Design(DesignArgs),
    /// Estimate per-period treatment effects from a solved design.
    Estimate(EstimateArgs),
    /// Combination test of the no-effect null from an estimate file.
    Infer(InferArgs),
    /// Generate factor-model panels, or run replication batches with --reps.
    Simulate(SimulateArgs),
    /// Export the base design as canonical QCQP matrices.
    ExportQcqp(PanelArgs),
    /// Emit plot-data CSVs and a run summary from pipeline artifacts.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone)]
pub struct PanelArgs {
    /// Outcome CSV (`unit,period,value`, long form).
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    /// Covariate CSV (`unit,z1,...,zr`).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Optional weights CSV (`unit,f`).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Number of pre-intervention periods.
    #[arg(long)]
    pub t0: Option<usize>,
    /// Number of fitting periods (prefix of the pre-intervention window).
    #[arg(long)]
    pub t_e: Option<usize>,
    /// Disable per-row scaling of the predictors.
    #[arg(long)]
    pub no_scaling: bool,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// unconstrained | constrained | penalized | unit-level | clustered
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub m_lo: Option<usize>,
    #[arg(long)]
    pub m_hi: Option<usize>,
    /// Common penalty constant (penalized kind).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Fit trade-off for unit-level and clustered kinds.
    #[arg(long)]
    pub xi: Option<f64>,
    /// Cluster count (clustered kind).
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Per-unit treatment costs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub budget_costs: Option<Vec<f64>>,
    #[arg(long)]
    pub budget_bound: Option<f64>,
    #[arg(long)]
    pub enumeration_cap: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Design solution JSON from `design`.
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// ate | att
    #[arg(long)]
    pub estimand: Option<String>,
    /// Apply the regression-based bias correction.
    #[arg(long)]
    pub bias_correct: bool,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Truth JSON (written by `simulate`) for MAE reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Estimate JSON from `estimate`.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// mean-abs | lp:<p> | one-sided-pos | one-sided-neg
    #[arg(long)]
    pub statistic: Option<String>,
    /// Sample this many combinations instead of exact enumeration.
    #[arg(long)]
    pub sample: Option<u64>,
    /// Cap on |Π| for exact enumeration.
    #[arg(long)]
    pub exact_cap: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub t_e: Option<usize>,
    /// Observed covariate count.
    #[arg(long)]
    pub r: Option<usize>,
    /// Latent factor count.
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Generate under the no-effect null.
    #[arg(long)]
    pub null_mode: bool,
    /// Realize observed outcomes for an existing design solution: the
    /// panel is regenerated from the same seed and treated units switch to
    /// their treated potential outcomes after the pre-intervention window.
    #[arg(long)]
    pub realize: Option<PathBuf>,
    /// Run this many end-to-end replications instead of writing one panel.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Rejection thresholds for the replication report.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Noise levels for a sweep (requires --reps).
    #[arg(long, value_delimiter = ',')]
    pub sigma2_list: Option<Vec<f64>>,
    /// Design kind used inside replication batches.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub m_lo: Option<usize>,
    #[arg(long)]
    pub m_hi: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Inference JSON; optional, the summary omits the p-value without it.
    #[arg(long)]
    pub inference: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Flat config file mirroring the command-line options. Unknown keys are
/// rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub outcomes: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub t0: Option<usize>,
    pub t_e: Option<usize>,
    pub scaling: Option<bool>,
    pub kind: Option<String>,
    pub m_lo: Option<usize>,
    pub m_hi: Option<usize>,
    pub lambda: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub xi: Option<f64>,
    pub clusters: Option<usize>,
    pub budget_costs: Option<Vec<f64>>,
    pub budget_bound: Option<f64>,
    pub enumeration_cap: Option<u64>,
    pub design: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub inference: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub estimand: Option<String>,
    pub bias_correct: Option<bool>,
    pub ridge: Option<f64>,
    pub statistic: Option<String>,
    pub sample: Option<u64>,
    pub exact_cap: Option<u64>,
    pub j: Option<usize>,
    pub t: Option<usize>,
    pub r: Option<usize>,
    pub factors: Option<usize>,
    pub sigma2: Option<f64>,
    pub null_mode: Option<bool>,
    pub reps: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub sigma2_list: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Parse the process arguments, run the selected command, and map errors to
/// the documented exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::InvalidFittingCount { .. }
        | Error::InvalidPartition(_)
        | Error::EmptyFittingSet
        | Error::DimensionMismatch(_)
        | Error::LengthMismatch { .. } => 2,
        Error::MalformedFile { .. }
        | Error::DuplicateUnit(_)
        | Error::NonpositiveWeight { .. }
        | Error::MissingPrePeriodValue { .. }
        | Error::MissingOutcome { .. }
        | Error::MissingUpstreamArtifact(_)
        | Error::MissingUnitLevelWeights
        | Error::Io { .. }
        | Error::Json { .. } => 3,
        Error::EnumerationCapExceeded { .. }
        | Error::InfeasibleBudget
        | Error::EmptyDonorPool(_)
        | Error::EmptyClusterAfterConvergence { .. } => 4,
        Error::NoBlankPeriods
        | Error::CombinationCapExceeded { .. }
        | Error::SampleLargerThanPopulation { .. }
        | Error::FormMismatch { .. }
        | Error::SingularRegression => 5,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(cli.out.display().to_string(), e))?;
    match &cli.command {
        Command::Design(args) => cmd_design(cli, &config, args),
        Command::Estimate(args) => cmd_estimate(cli, &config, args),
        Command::Infer(args) => cmd_infer(cli, &config, args),
        Command::Simulate(args) => cmd_simulate(cli, &config, args),
        Command::ExportQcqp(args) => cmd_export_qcqp(cli, &config, args),
        Command::Report(args) => cmd_report(cli, &config, args),
    }
}

// ---------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------

struct LoadedPanel {
    panel: PanelData,
    part: PeriodPartition,
    pred: PredictorSet,
    scaling: bool,
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required option `{what}`")))
}

fn load_panel_inputs(args: &PanelArgs, config: &FileConfig) -> Result<LoadedPanel> {
    let outcomes = require(args.outcomes.clone().or_else(|| config.outcomes.clone()), "outcomes")?;
    let covariates =
        require(args.covariates.clone().or_else(|| config.covariates.clone()), "covariates")?;
    let weights_path = args.weights.clone().or_else(|| config.weights.clone());
    let t0 = require(args.t0.or(config.t0), "t0")?;
    let t_e = require(args.t_e.or(config.t_e), "t-e")?;
    let scaling = if args.no_scaling { false } else { config.scaling.unwrap_or(true) };
    let mut panel = load_panel(&outcomes, &covariates, None, t0)?;
    if let Some(path) = weights_path {
        let weights = load_weights(&path, panel.unit_ids())?;
        panel = load_panel(&outcomes, &covariates, Some(weights), t0)?;
    }
    let part = PeriodPartition::prefix(&panel, t_e)?;
    let pred = build_predictors(&panel, &part, scaling)?;
    Ok(LoadedPanel { panel, part, pred, scaling })
}

fn design_spec_from(
    kind: Option<&str>,
    m_lo: Option<usize>,
    m_hi: Option<usize>,
    lambda: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    xi: Option<f64>,
    clusters: Option<usize>,
    budget_costs: Option<Vec<f64>>,
    budget_bound: Option<f64>,
    enumeration_cap: Option<u64>,
    seed: u64,
) -> Result<DesignSpec> {
    let kind = kind.unwrap_or("unconstrained");
    let mut spec = match kind {
        "unconstrained" => DesignSpec::unconstrained(),
        "constrained" => {
            DesignSpec::constrained(require(m_hi, "m-hi (constrained design)")?)
        }
        "penalized" => match (lambda, lambda1, lambda2) {
            (Some(l), None, None) => DesignSpec::penalized(l),
            (None, Some(l1), Some(l2)) => DesignSpec::penalized_asymmetric(l1, l2),
            (None, None, None) => {
                return Err(Error::Config("penalized design needs --lambda".into()))
            }
            _ => {
                return Err(Error::Config(
                    "give either --lambda or both --lambda1 and --lambda2".into(),
                ))
            }
        },
        "unit-level" => DesignSpec::unit_level(xi.unwrap_or(1.0)),
        "clustered" => {
            DesignSpec::clustered(xi.unwrap_or(1.0), require(clusters, "clusters")?, seed)
        }
        other => return Err(Error::Config(format!("unknown design kind `{other}`"))),
    };
    if let Some(m_lo) = m_lo {
        spec.m_lo = m_lo;
    }
    if m_hi.is_some() && !matches!(spec.kind, DesignKind::Constrained) {
        spec.m_hi = m_hi;
    }
    match (budget_costs, budget_bound) {
        (Some(costs), Some(bound)) => spec.budget = Some(Budget { costs, bound }),
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "budget needs both --budget-costs and --budget-bound".into(),
            ))
        }
    }
    if let Some(cap) = enumeration_cap {
        spec.enumeration_cap = cap as u128;
    }
    Ok(spec)
}

// ---------------------------------------------------------------------
// Artifact schemas
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DesignFile {
    treated: Vec<usize>,
    w: Vec<f64>,
    v: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_unit: Option<Vec<Vec<f64>>>,
    objective: f64,
    spec: DesignSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_assignment: Option<Vec<usize>>,
    evaluated_subsets: u64,
    unit_ids: Vec<String>,
    scaling: bool,
}

impl DesignFile {
    fn from_solution(sol: &DesignSolution, unit_ids: &[String], scaling: bool) -> Self {
        DesignFile {
            treated: sol.treated.clone(),
            w: sol.w.iter().copied().collect(),
            v: sol.v.iter().copied().collect(),
            v_unit: sol.v_unit.as_ref().map(|m| {
                (0..m.nrows())
                    .map(|row| (0..m.ncols()).map(|col| m[(row, col)]).collect())
                    .collect()
            }),
            objective: sol.objective,
            spec: sol.spec.clone(),
            cluster_assignment: sol.cluster_assignment.clone(),
            evaluated_subsets: sol.evaluated_subsets,
            unit_ids: unit_ids.to_vec(),
            scaling,
        }
    }

    fn into_solution(self) -> DesignSolution {
        let j = self.w.len();
        DesignSolution {
            treated: self.treated,
            w: nalgebra::DVector::from_vec(self.w),
            v: nalgebra::DVector::from_vec(self.v),
            v_unit: self.v_unit.map(|rows| {
                DMatrix::from_fn(j, j, |r, c| rows[r][c])
            }),
            objective: self.objective,
            cluster_assignment: self.cluster_assignment,
            evaluated_subsets: self.evaluated_subsets,
            spec: self.spec,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateFile {
    estimand: Estimand,
    bias_corrected: bool,
    periods: Vec<String>,
    tau_hat: Vec<f64>,
    blank_periods: Vec<String>,
    placebo: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    periods: Vec<String>,
    tau: Vec<f64>,
}

// ---------------------------------------------------------------------
// Deterministic JSON output
// ---------------------------------------------------------------------

/// Round every float in a JSON tree to 12 significant digits.
fn round_floats(value: &mut Value) {
    match value {
        Value::Number(num) => {
            if !num.is_i64() && !num.is_u64() {
                if let Some(f) = num.as_f64() {
                    let rounded: f64 = format!("{f:.11e}").parse().unwrap_or(f);
                    if let Some(n) = serde_json::Number::from_f64(rounded) {
                        *num = n;
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn write_json<T: Serialize>(path: &Path, artifact: &T) -> Result<()> {
    let mut value = serde_json::to_value(artifact)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    round_floats(&mut value);
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_text(path, &format!("{text}\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::MissingUpstreamArtifact(path.display().to_string())
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

// ---------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------

fn cmd_design(cli: &Cli, config: &FileConfig, args: &DesignArgs) -> Result<()> {
    let loaded = load_panel_inputs(&args.panel, config)?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let spec = design_spec_from(
        args.kind.as_deref().or(config.kind.as_deref()),
        args.m_lo.or(config.m_lo),
        args.m_hi.or(config.m_hi),
        args.lambda.or(config.lambda),
        args.lambda1.or(config.lambda1),
        args.lambda2.or(config.lambda2),
        args.xi.or(config.xi),
        args.clusters.or(config.clusters),
        args.budget_costs.clone().or_else(|| config.budget_costs.clone()),
        args.budget_bound.or(config.budget_bound),
        args.enumeration_cap.or(config.enumeration_cap),
        seed,
    )?;
    let sol = solve_design(&loaded.pred, &spec)?;
    print!("{}", weight_table(&sol, loaded.panel.unit_ids()));
    write_json(
        &cli.out.join("design.json"),
        &DesignFile::from_solution(&sol, loaded.panel.unit_ids(), loaded.scaling),
    )
}

/// Fixed-width table of the design weights, two decimals per entry.
fn weight_table(sol: &DesignSolution, unit_ids: &[String]) -> String {
    let width = unit_ids.iter().map(|s| s.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$} {:>8} {:>8}\n", "unit", "w", "v");
    for (unit, id) in unit_ids.iter().enumerate() {
        out.push_str(&format!(
            "{id:<width$} {:>8.2} {:>8.2}\n",
            sol.w[unit], sol.v[unit]
        ));
    }
    out.push_str(&format!(
        "{:<width$} {:>8.2} {:>8.2}\n",
        "sum",
        sol.w.iter().sum::<f64>(),
        sol.v.iter().sum::<f64>()
    ));
    out
}

fn cmd_estimate(cli: &Cli, config: &FileConfig, args: &EstimateArgs) -> Result<()> {
    let loaded = load_panel_inputs(&args.panel, config)?;
    let design_path = require(args.design.clone().or_else(|| config.design.clone()), "design")?;
    let design: DesignFile = read_json(&design_path)?;
    let sol = design.into_solution();
    let estimand = match args
        .estimand
        .as_deref()
        .or(config.estimand.as_deref())
        .unwrap_or("ate")
    {
        "ate" => Estimand::Ate,
        "att" => Estimand::Att,
        other => return Err(Error::Config(format!("unknown estimand `{other}`"))),
    };
    let bias_correct = args.bias_correct || config.bias_correct.unwrap_or(false);
    let est = if bias_correct {
        let ridge = args.ridge.or(config.ridge).unwrap_or(1e-8);
        estimate_bias_corrected(&loaded.panel, &loaded.pred, &sol, &loaded.part, ridge, true)?
    } else {
        match estimand {
            Estimand::Ate => estimate_ate(&loaded.panel, &sol, &loaded.part)?,
            Estimand::Att => estimate_att(&loaded.panel, &sol, &loaded.part)?,
        }
    };
    let truth_path = args.truth.clone().or_else(|| config.truth.clone());
    let (truth, mae_value) = match truth_path {
        Some(path) => {
            let truth: TruthFile = read_json(&path)?;
            let value = mae(&est.values, &truth.tau)?;
            (Some(truth.tau), Some(value))
        }
        None => (None, None),
    };
    let labels = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&t| loaded.panel.period_ids()[t].clone()).collect()
    };
    write_json(
        &cli.out.join("estimate.json"),
        &EstimateFile {
            estimand: est.estimand,
            bias_corrected: est.bias_corrected,
            periods: labels(&est.periods),
            tau_hat: est.values.clone(),
            blank_periods: labels(&est.blank_periods),
            placebo: est.placebo.clone(),
            truth,
            mae: mae_value,
        },
    )
}

fn parse_statistic(text: Option<&str>) -> Result<StatisticKind> {
    match text.unwrap_or("mean-abs") {
        "mean-abs" => Ok(StatisticKind::MeanAbs),
        "one-sided-pos" => Ok(StatisticKind::OneSidedPos),
        "one-sided-neg" => Ok(StatisticKind::OneSidedNeg),
        other => match other.strip_prefix("lp:") {
            Some(p) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lp order in `{other}`")))?;
                if p <= 0.0 {
                    return Err(Error::Config("lp order must be positive".into()));
                }
                Ok(StatisticKind::Lp(p))
            }
            None => Err(Error::Config(format!("unknown statistic `{other}`"))),
        },
    }
}

fn cmd_infer(cli: &Cli, config: &FileConfig, args: &InferArgs) -> Result<()> {
    let estimate_path =
        require(args.estimate.clone().or_else(|| config.estimate.clone()), "estimate")?;
    let est: EstimateFile = read_json(&estimate_path)?;
    let residuals = ResidualVector::new(&est.tau_hat, &est.placebo)?;
    let kind = parse_statistic(args.statistic.as_deref().or(config.statistic.as_deref()))?;
    let mode = match args.sample.or(config.sample) {
        Some(m) => SamplingMode::Sampled { m, seed: cli.seed.or(config.seed).unwrap_or(0) },
        None => SamplingMode::Exact,
    };
    let cap = args.exact_cap.or(config.exact_cap).map_or(DEFAULT_EXACT_CAP, |c| c as u128);
    let result = p_value_with_cap(&residuals, kind, mode, cap)?;
    write_json(&cli.out.join("inference.json"), &inference_file(&result))
}

fn inference_file(result: &InferenceResult) -> Value {
    let mut root = json!({
        "p_value": {
            "numerator": result.numerator,
            "denominator": result.denominator,
            "value": result.p_value,
        },
        "n_combinations": result.n_combinations,
        "statistic": {
            "kind": result.statistic_kind,
            "observed": result.observed,
        },
    });
    let mode = match result.mode {
        SamplingMode::Exact => json!("exact"),
        SamplingMode::Sampled { m, seed } => json!({"sampled": {"m": m, "seed": seed}}),
    };
    root["mode"] = mode;
    root
}

fn cmd_simulate(cli: &Cli, config: &FileConfig, args: &SimulateArgs) -> Result<()> {
    let defaults = FactorModelConfig::default();
    let cfg = FactorModelConfig {
        j: args.j.or(config.j).unwrap_or(defaults.j),
        t: args.t.or(config.t).unwrap_or(defaults.t),
        t0: args.t0.or(config.t0).unwrap_or(defaults.t0),
        t_e: args.t_e.or(config.t_e).unwrap_or(defaults.t_e),
        r: args.r.or(config.r).unwrap_or(defaults.r),
        factors: args.factors.or(config.factors).unwrap_or(defaults.factors),
        sigma2: args.sigma2.or(config.sigma2).unwrap_or(defaults.sigma2),
        null_mode: args.null_mode || config.null_mode.unwrap_or(false),
        seed: cli.seed.or(config.seed).unwrap_or(0),
        ..defaults
    };
    match args.reps.or(config.reps) {
        None => {
            // Write one panel: CSV inputs for the pipeline plus the truth.
            // Without --realize the outcome file carries pre-intervention
            // values only, which is what the design stage may see.
            let sim = generate_panel(&cfg)?;
            let panel = match &args.realize {
                None => sim.panel().clone(),
                Some(design_path) => {
                    let design: DesignFile = read_json(design_path)?;
                    sim.realize(&design.treated)
                }
            };
            save_panel(
                &panel,
                &cli.out.join("outcomes.csv"),
                &cli.out.join("covariates.csv"),
                Some(&cli.out.join("weights.csv")),
            )?;
            let periods: Vec<String> =
                (cfg.t0..cfg.t).map(|t| sim.panel().period_ids()[t].clone()).collect();
            write_json(
                &cli.out.join("truth.json"),
                &TruthFile { periods, tau: sim.tau().to_vec() },
            )?;
            write_json(
                &cli.out.join("potential_outcomes.json"),
                &json!({
                    "y_n": matrix_rows(sim.y_n()),
                    "y_i": matrix_rows(sim.y_i()),
                }),
            )
        }
        Some(reps) => {
            let spec = design_spec_from(
                args.kind.as_deref().or(config.kind.as_deref()),
                args.m_lo.or(config.m_lo),
                args.m_hi.or(config.m_hi),
                args.lambda.or(config.lambda),
                None,
                None,
                args.xi.or(config.xi),
                args.clusters.or(config.clusters),
                None,
                None,
                config.enumeration_cap,
                cfg.seed,
            )?;
            let alphas = args
                .alphas
                .clone()
                .or_else(|| config.alphas.clone())
                .unwrap_or_else(|| vec![0.05, 0.1]);
            match args.sigma2_list.clone().or_else(|| config.sigma2_list.clone()) {
                Some(list) => {
                    let reports = noise_sweep(&cfg, &spec, &list, reps, &alphas)?;
                    write_json(&cli.out.join("sweep.json"), &reports)
                }
                None => {
                    let report = run_replications(&cfg, &spec, reps, &alphas)?;
                    write_json(&cli.out.join("calibration.json"), &report)
                }
            }
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

fn cmd_export_qcqp(cli: &Cli, config: &FileConfig, args: &PanelArgs) -> Result<()> {
    let loaded = load_panel_inputs(args, config)?;
    let export = export_qcqp(&loaded.pred);
    write_json(
        &cli.out.join("qcqp.json"),
        &json!({
            "J": export.j,
            "M": export.m,
            "P0": matrix_rows(&export.p0),
            "q0": export.q0.iter().copied().collect::<Vec<f64>>(),
            "P1": matrix_rows(&export.p1),
            "e1": export.e1.iter().copied().collect::<Vec<f64>>(),
            "e2": export.e2.iter().copied().collect::<Vec<f64>>(),
        }),
    )
}

fn cmd_report(cli: &Cli, config: &FileConfig, args: &ReportArgs) -> Result<()> {
    let loaded = load_panel_inputs(&args.panel, config)?;
    let design_path = require(args.design.clone().or_else(|| config.design.clone()), "design")?;
    let design: DesignFile = read_json(&design_path)?;
    let sol = design.into_solution();
    let (w, v) = sol.effective_weights(loaded.panel.f());

    // paths.csv: synthetic treated and synthetic control outcome series.
    let mut paths = String::from("period,synthetic_treated,synthetic_control\n");
    let mut gap = String::from("period,tau_hat\n");
    for period in 0..loaded.panel.t() {
        let mut treated = 0.0;
        let mut control = 0.0;
        let mut complete = true;
        for unit in 0..loaded.panel.j() {
            let y = loaded.panel.y()[(unit, period)];
            if (w[unit] != 0.0 || v[unit] != 0.0) && !y.is_finite() {
                complete = false;
                break;
            }
            if w[unit] != 0.0 {
                treated += w[unit] * y;
            }
            if v[unit] != 0.0 {
                control += v[unit] * y;
            }
        }
        if complete {
            let id = &loaded.panel.period_ids()[period];
            paths.push_str(&format!("{id},{},{}\n", sig12(treated), sig12(control)));
            gap.push_str(&format!("{id},{}\n", sig12(treated - control)));
        }
    }
    write_text(&cli.out.join("paths.csv"), &paths)?;
    write_text(&cli.out.join("gap.csv"), &gap)?;

    let mut summary = json!({
        "treated": sol.treated,
        "objective": sol.objective,
    });
    let estimate_path = args.estimate.clone().or_else(|| config.estimate.clone());
    if let Some(path) = estimate_path {
        let est: EstimateFile = read_json(&path)?;
        summary["estimand"] = serde_json::to_value(est.estimand).unwrap();
        summary["tau_hat"] = serde_json::to_value(&est.tau_hat).unwrap();
        if let Some(value) = est.mae {
            summary["mae"] = json!(value);
        } else if let Some(truth_path) = args.truth.clone().or_else(|| config.truth.clone()) {
            let truth: TruthFile = read_json(&truth_path)?;
            summary["mae"] = json!(mae(&est.tau_hat, &truth.tau)?);
        }
    }
    if let Some(path) = args.inference.clone().or_else(|| config.inference.clone()) {
        let inference: Value = read_json(&path)?;
        summary["p_value"] = inference["p_value"].clone();
    }
    write_json(&cli.out.join("summary.json"), &summary)
}

/// Format a float at 12 significant digits for CSV output.
fn sig12(value: f64) -> String {
    let text = format!("{value:.11e}");
    let rounded: f64 = text.parse().unwrap_or(value);
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistic_parsing() {
        assert_eq!(parse_statistic(None).unwrap(), StatisticKind::MeanAbs);
        assert_eq!(parse_statistic(Some("mean-abs")).unwrap(), StatisticKind::MeanAbs);
        assert_eq!(parse_statistic(Some("lp:2")).unwrap(), StatisticKind::Lp(2.0));
        assert_eq!(parse_statistic(Some("one-sided-pos")).unwrap(), StatisticKind::OneSidedPos);
        assert!(parse_statistic(Some("median")).is_err());
        assert!(parse_statistic(Some("lp:-1")).is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<FileConfig>("{\"bogus\": 1}").unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn float_rounding_is_stable() {
        let mut value = json!({"x": 0.1 + 0.2, "n": 3, "list": [1.0000000000001]});
        round_floats(&mut value);
        assert_eq!(value["x"], json!(0.3));
        assert_eq!(value["n"], json!(3));
        assert_eq!(value["list"][0], json!(1.0));
    }

    #[test]
    fn design_spec_parsing_rejects_partial_budget() {
        let err = design_spec_from(
            Some("unconstrained"),
            None,
            None,
            None,
            None,
            None,
            None,
            None,
            Some(vec![1.0]),
            None,
            None,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exit_codes_cover_the_documented_map() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::MalformedFile { path: "p".into(), reason: "r".into() }),
            3
        );
        assert_eq!(exit_code(&Error::InfeasibleBudget), 4);
        assert_eq!(exit_code(&Error::NoBlankPeriods), 5);
    }
}
