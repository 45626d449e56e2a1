//! End-to-end experiment pipelines: simulate, tune, filter, score.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IskfError, Result};
use crate::filters::{
    huberized_solve, iskf_step, kf_step, ss_iskf_step, ss_kf_step, FilterState, IskfParams,
};
use crate::model::{
    build_model, cstr_model, validate_model, vehicle_model, ModelDiagnostics, OutlierSpec,
    SystemModel,
};
use crate::riccati::{solve_steady, GainSet, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::satfun::Threshold;
use crate::sim::{simulate, Trajectory};
use crate::tune::{grid_search, score_estimates, state_rmse, ScoringMode, TuneGrid, TuneResult};

/// Steady-state KF over `y₁ … y_T`, from `x̂₀ = 0`.
pub fn run_ss_kf(gains: &GainSet, measurements: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(measurements.len() + 1);
    out.push(DVector::zeros(gains.n()));
    for y in measurements {
        let next = ss_kf_step(out.last().unwrap(), y, gains)?;
        out.push(next);
    }
    Ok(out)
}

pub fn run_ss_iskf(
    gains: &GainSet,
    params: &IskfParams,
    measurements: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    params.validate()?;
    let mut out = Vec::with_capacity(measurements.len() + 1);
    out.push(DVector::zeros(gains.n()));
    for y in measurements {
        let next = ss_iskf_step(out.last().unwrap(), y, gains, params)?;
        out.push(next);
    }
    Ok(out)
}

/// Time-varying KF from `x̂₀ = 0`, `P₀ = P`.
pub fn run_tv_kf(
    model: &SystemModel,
    gains: &GainSet,
    measurements: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut state = FilterState::initial(gains);
    let mut out = vec![state.x_hat.clone()];
    for y in measurements {
        state = kf_step(&state, y, model)?;
        out.push(state.x_hat.clone());
    }
    Ok(out)
}

pub fn run_tv_iskf(
    model: &SystemModel,
    gains: &GainSet,
    params: &IskfParams,
    measurements: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut state = FilterState::initial(gains);
    let mut out = vec![state.x_hat.clone()];
    for y in measurements {
        state = iskf_step(&state, y, model, params)?;
        out.push(state.x_hat.clone());
    }
    Ok(out)
}

/// Per-step converged minimizer of the Huberized objective with steady gains.
pub fn run_huberized(
    gains: &GainSet,
    params: &IskfParams,
    measurements: &[DVector<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(measurements.len() + 1);
    out.push(DVector::zeros(gains.n()));
    for y in measurements {
        let x_pred = &gains.a * out.last().unwrap();
        let next = huberized_solve(&x_pred, y, gains, params, tol, max_iter)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Steady,
    TimeVarying,
}

/// One filter to evaluate. Missing thresholds mean "tune by grid search".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterSpec {
    Kf {
        #[serde(default)]
        variant: Variant,
    },
    Iskf {
        k_tilde: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda_x: Option<Threshold>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda_y: Option<Threshold>,
        #[serde(default = "unit_step")]
        eta: f64,
        /// Search `η` jointly with the thresholds.
        #[serde(default)]
        tune_eta: bool,
        #[serde(default)]
        variant: Variant,
    },
    Huber {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda_x: Option<Threshold>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda_y: Option<Threshold>,
    },
}

fn unit_step() -> f64 {
    1.0
}

impl FilterSpec {
    pub fn label(&self) -> String {
        let prefix = |v: &Variant| if *v == Variant::TimeVarying { "tv_" } else { "" };
        match self {
            FilterSpec::Kf { variant } => format!("{}kf", prefix(variant)),
            FilterSpec::Iskf {
                k_tilde,
                tune_eta,
                variant,
                ..
            } => format!(
                "{}iskf_k{k_tilde}{}",
                prefix(variant),
                if *tune_eta { "_eta" } else { "" }
            ),
            FilterSpec::Huber { .. } => "huber".into(),
        }
    }

    fn fixed_thresholds(
        lambda_x: Option<Threshold>,
        lambda_y: Option<Threshold>,
    ) -> Result<Option<(Threshold, Threshold)>> {
        match (lambda_x, lambda_y) {
            (Some(x), Some(y)) => Ok(Some((x, y))),
            (None, None) => Ok(None),
            _ => Err(IskfError::InvalidParameter(
                "give both lambda_x and lambda_y, or neither to tune them".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Vehicle {
        #[serde(default = "default_h")]
        h: f64,
        #[serde(default = "default_h")]
        gamma: f64,
    },
    Cstr {
        #[serde(default = "default_h")]
        h: f64,
    },
    Matrices(Box<SystemModel>),
}

impl ModelSource {
    pub fn build(&self) -> Result<(SystemModel, OutlierSpec)> {
        match self {
            ModelSource::Vehicle { h, gamma } => vehicle_model(*h, *gamma),
            ModelSource::Cstr { h } => cstr_model(*h),
            ModelSource::Matrices(m) => Ok((m.as_ref().clone(), OutlierSpec::gaussian())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSource::Vehicle { .. } => "vehicle",
            ModelSource::Cstr { .. } => "cstr",
            ModelSource::Matrices(_) => "custom",
        }
    }
}

fn default_h() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub tune: u64,
    pub test: u64,
}

/// Explicit grid values; anything left out falls back to the default
/// log-spaced grids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_x: Option<Vec<Threshold>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_y: Option<Vec<Threshold>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

impl GridConfig {
    pub fn grid(&self, k_tilde: usize, search_eta: bool) -> TuneGrid {
        let mut g = TuneGrid::default_for(k_tilde);
        if let Some(v) = &self.lambda_x {
            g.lambda_x_values = v.clone();
        }
        if let Some(v) = &self.lambda_y {
            g.lambda_y_values = v.clone();
        }
        if search_eta {
            g = g.with_step_size_search();
            if let Some(v) = &self.eta {
                g.eta_values = Some(v.clone());
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_riccati_tol")]
    pub riccati: f64,
    #[serde(default = "default_riccati_iter")]
    pub riccati_max_iter: usize,
    #[serde(default = "default_huber_tol")]
    pub huber: f64,
    #[serde(default = "default_huber_iter")]
    pub huber_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            riccati: DEFAULT_TOL,
            riccati_max_iter: DEFAULT_MAX_ITER,
            huber: default_huber_tol(),
            huber_max_iter: default_huber_iter(),
        }
    }
}

fn default_riccati_tol() -> f64 {
    DEFAULT_TOL
}
fn default_riccati_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_huber_tol() -> f64 {
    1e-8
}
fn default_huber_iter() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub k_tilde: Vec<usize>,
    /// `state` grid-searches on the test trajectory's true states;
    /// `predicted_measurement` tunes on the tuning trajectory.
    #[serde(default = "state_scoring")]
    pub scoring: ScoringMode,
}

fn state_scoring() -> ScoringMode {
    ScoringMode::State
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeConfig {
    #[serde(default = "two")]
    pub k_tilde: usize,
}

fn two() -> usize {
    2
}

/// Full description of an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Defaults to the benchmark's mixture, or Gaussian noise for inline matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<OutlierSpec>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub seeds: Seeds,
    /// Test trajectory to ingest instead of simulating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_file: Option<String>,
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub scoring: ScoringMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size_study: Option<StepSizeConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_steps() -> usize {
    1000
}

impl ExperimentConfig {
    /// Benchmark reproduction: KF, ISKF k̃ ∈ {1,2,3} and the Huberized
    /// reference, all tuned on a separate trajectory, plus the k̃ sweep and
    /// the step-size study.
    pub fn reproduce(example: &str, seed_tune: u64, seed_test: u64) -> Result<Self> {
        let model = match example {
            "vehicle" => ModelSource::Vehicle { h: 0.05, gamma: 0.05 },
            "cstr" => ModelSource::Cstr { h: 0.05 },
            other => {
                return Err(IskfError::InvalidParameter(format!(
                    "unknown example {other:?}, expected vehicle or cstr"
                )))
            }
        };
        let iskf = |k| FilterSpec::Iskf {
            k_tilde: k,
            lambda_x: None,
            lambda_y: None,
            eta: 1.0,
            tune_eta: false,
            variant: Variant::Steady,
        };
        Ok(ExperimentConfig {
            model,
            outliers: None,
            steps: 1000,
            seeds: Seeds {
                tune: seed_tune,
                test: seed_test,
            },
            trajectory_file: None,
            filters: vec![
                FilterSpec::Kf {
                    variant: Variant::Steady,
                },
                iskf(1),
                iskf(2),
                iskf(3),
                FilterSpec::Huber {
                    lambda_x: None,
                    lambda_y: None,
                },
            ],
            grid: GridConfig::default(),
            scoring: ScoringMode::PredictedMeasurement,
            sweep: Some(SweepConfig {
                k_tilde: vec![1, 2, 3, 4, 5],
                scoring: ScoringMode::State,
            }),
            step_size_study: Some(StepSizeConfig { k_tilde: 2 }),
            tolerances: Tolerances::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(IskfError::InvalidParameter("steps must be at least 1".into()));
        }
        if self.filters.is_empty() {
            return Err(IskfError::InvalidParameter("no filters selected".into()));
        }
        if let Some(o) = &self.outliers {
            o.validate()?;
        }
        for f in &self.filters {
            match f {
                FilterSpec::Iskf {
                    k_tilde,
                    lambda_x,
                    lambda_y,
                    eta,
                    ..
                } => {
                    if let Some((x, y)) = FilterSpec::fixed_thresholds(*lambda_x, *lambda_y)? {
                        IskfParams::new(x, y, *k_tilde, *eta)?;
                    } else {
                        IskfParams::new(Threshold::INFINITE, Threshold::INFINITE, *k_tilde, *eta)?;
                    }
                }
                FilterSpec::Huber { lambda_x, lambda_y } => {
                    FilterSpec::fixed_thresholds(*lambda_x, *lambda_y)?;
                }
                FilterSpec::Kf { .. } => {}
            }
        }
        if let Some(s) = &self.sweep {
            if s.k_tilde.is_empty() || s.k_tilde.contains(&0) {
                return Err(IskfError::InvalidParameter("sweep k_tilde values must be >= 1".into()));
            }
        }
        if self.step_size_study.is_some() && self.trajectory_file.is_some() {
            return Err(IskfError::InvalidParameter(
                "step_size_study needs a simulated test trajectory".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodResult {
    pub label: String,
    pub k_tilde: Option<usize>,
    pub params: Option<IskfParams>,
    pub tuned: bool,
    pub rmse: f64,
    pub improvement_pct: Option<f64>,
    #[serde(skip)]
    pub estimates: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k_tilde: usize,
    pub params: IskfParams,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub scoring: ScoringMode,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSizeRow {
    pub label: String,
    pub params: Option<IskfParams>,
    pub rmse: f64,
    pub rmse_no_outliers: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSizeStudy {
    pub k_tilde: usize,
    pub rows: Vec<StepSizeRow>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub name: String,
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub outliers: OutlierSpec,
    pub gains: GainSet,
    pub diagnostics: ModelDiagnostics,
    pub tune_traj: Option<Trajectory>,
    pub test_traj: Trajectory,
    pub methods: Vec<MethodResult>,
    pub grids: Vec<(String, TuneResult)>,
    pub sweep: Option<SweepResult>,
    pub step_size: Option<StepSizeStudy>,
}

impl Report {
    pub fn method(&self, label: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.label == label)
    }
}

struct Context<'a> {
    model: &'a SystemModel,
    gains: &'a GainSet,
    tol: Tolerances,
}

impl Context<'_> {
    fn run(&self, kind: RunKind, params: &IskfParams, ys: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        match kind {
            RunKind::Kf(Variant::Steady) => run_ss_kf(self.gains, ys),
            RunKind::Kf(Variant::TimeVarying) => run_tv_kf(self.model, self.gains, ys),
            RunKind::Iskf(Variant::Steady) => run_ss_iskf(self.gains, params, ys),
            RunKind::Iskf(Variant::TimeVarying) => run_tv_iskf(self.model, self.gains, params, ys),
            RunKind::Huber => run_huberized(self.gains, params, ys, self.tol.huber, self.tol.huber_max_iter),
        }
    }

    fn tune(
        &self,
        kind: RunKind,
        grid: &TuneGrid,
        traj: &Trajectory,
        scoring: ScoringMode,
    ) -> Result<TuneResult> {
        let runner = |p: &IskfParams, ys: &[DVector<f64>]| self.run(kind, p, ys);
        grid_search(&runner, grid, traj, self.model, scoring)
    }
}

#[derive(Debug, Clone, Copy)]
enum RunKind {
    Kf(Variant),
    Iskf(Variant),
    Huber,
}

fn need_tuning(traj: &Option<Trajectory>) -> Result<&Trajectory> {
    traj.as_ref()
        .ok_or_else(|| IskfError::InvalidParameter("tuning requires a tuning trajectory".into()))
}

/// Runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let (model, default_spec) = cfg.model.build()?;
    let spec = cfg.outliers.unwrap_or(default_spec);
    let diagnostics = validate_model(&model);
    let gains = solve_steady(&model, cfg.tolerances.riccati, cfg.tolerances.riccati_max_iter)?;

    let test_traj = match &cfg.trajectory_file {
        Some(path) => crate::io::read_trajectory_csv(std::path::Path::new(path), cfg.seeds.test)
            .map_err(|e| IskfError::InvalidParameter(format!("reading {path}: {e}")))?,
        None => simulate(&model, &spec, cfg.steps, cfg.seeds.test, None)?,
    };
    test_traj.validate()?;
    if test_traj.states[0].len() != model.n() || test_traj.measurements[0].len() != model.p() {
        return Err(IskfError::DimensionMismatch(
            "trajectory dimensions do not match the model".into(),
        ));
    }

    let needs_tuning = cfg.filters.iter().any(|f| match f {
        FilterSpec::Iskf { lambda_x, .. } | FilterSpec::Huber { lambda_x, .. } => lambda_x.is_none(),
        FilterSpec::Kf { .. } => false,
    }) || cfg.step_size_study.is_some()
        || cfg
            .sweep
            .as_ref()
            .is_some_and(|s| s.scoring == ScoringMode::PredictedMeasurement);
    let tune_traj = if needs_tuning {
        Some(simulate(&model, &spec, cfg.steps, cfg.seeds.tune, None)?)
    } else {
        None
    };

    let ctx = Context {
        model: &model,
        gains: &gains,
        tol: cfg.tolerances,
    };
    let truth = &test_traj.states[1..];
    let mut methods = Vec::new();
    let mut grids = Vec::new();

    for f in &cfg.filters {
        let label = f.label();
        let (kind, k_tilde, fixed, eta, search_eta) = match f {
            FilterSpec::Kf { variant } => (RunKind::Kf(*variant), None, None, 1.0, false),
            FilterSpec::Iskf {
                k_tilde,
                lambda_x,
                lambda_y,
                eta,
                tune_eta,
                variant,
            } => (
                RunKind::Iskf(*variant),
                Some(*k_tilde),
                FilterSpec::fixed_thresholds(*lambda_x, *lambda_y)?,
                *eta,
                *tune_eta,
            ),
            FilterSpec::Huber { lambda_x, lambda_y } => (
                RunKind::Huber,
                None,
                FilterSpec::fixed_thresholds(*lambda_x, *lambda_y)?,
                1.0,
                false,
            ),
        };

        let (params, tuned) = match (kind, fixed) {
            (RunKind::Kf(_), _) => (None, false),
            (_, Some((lx, ly))) => (Some(IskfParams::new(lx, ly, k_tilde.unwrap_or(1), eta)?), false),
            (_, None) => {
                let mut grid = cfg.grid.grid(k_tilde.unwrap_or(1), search_eta);
                if !search_eta {
                    grid.eta_values = Some(vec![eta]);
                }
                let res = ctx.tune(kind, &grid, need_tuning(&tune_traj)?, cfg.scoring)?;
                if !res.best_score.is_finite() {
                    return Err(IskfError::InvalidParameter(format!(
                        "every grid cell failed while tuning {label}"
                    )));
                }
                let p = res.best_params;
                grids.push((label.clone(), res));
                (Some(p), true)
            }
        };

        let estimates = ctx.run(kind, &params.unwrap_or_else(IskfParams::kf), &test_traj.measurements)?;
        let rmse = state_rmse(truth, &estimates[1..])?;
        methods.push(MethodResult {
            label,
            k_tilde,
            params,
            tuned,
            rmse,
            improvement_pct: None,
            estimates,
        });
    }

    let baseline = methods
        .iter()
        .find(|m| m.label == "kf")
        .or_else(|| methods.iter().find(|m| m.label == "tv_kf"))
        .map(|m| m.rmse);
    if let Some(kf) = baseline {
        for m in &mut methods {
            m.improvement_pct = Some(100.0 * (kf - m.rmse) / kf);
        }
    }

    let sweep = cfg
        .sweep
        .as_ref()
        .map(|s| run_sweep(&ctx, s, cfg, &tune_traj, &test_traj, &mut grids))
        .transpose()?;

    let step_size = cfg
        .step_size_study
        .map(|s| run_step_size_study(&ctx, s.k_tilde, cfg, &spec, need_tuning(&tune_traj)?, &test_traj, &mut grids))
        .transpose()?;

    Ok(Report {
        name: cfg.model.name().into(),
        config: cfg.clone(),
        model,
        outliers: spec,
        gains,
        diagnostics,
        tune_traj,
        test_traj,
        methods,
        grids,
        sweep,
        step_size,
    })
}

fn run_sweep(
    ctx: &Context<'_>,
    sweep: &SweepConfig,
    cfg: &ExperimentConfig,
    tune_traj: &Option<Trajectory>,
    test_traj: &Trajectory,
    grids: &mut Vec<(String, TuneResult)>,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for &k in &sweep.k_tilde {
        let grid = cfg.grid.grid(k, false);
        let kind = RunKind::Iskf(Variant::Steady);
        let (res, rmse) = match sweep.scoring {
            ScoringMode::State => {
                let res = ctx.tune(kind, &grid, test_traj, ScoringMode::State)?;
                let rmse = res.best_score;
                (res, rmse)
            }
            ScoringMode::PredictedMeasurement => {
                let res = ctx.tune(kind, &grid, need_tuning(tune_traj)?, sweep.scoring)?;
                let est = ctx.run(kind, &res.best_params, &test_traj.measurements)?;
                let rmse = score_estimates(ScoringMode::State, &est, test_traj, ctx.model)?;
                (res, rmse)
            }
        };
        rows.push(SweepRow {
            k_tilde: k,
            params: res.best_params,
            rmse,
        });
        grids.push((format!("sweep_k{k}"), res));
    }
    Ok(SweepResult {
        scoring: sweep.scoring,
        rows,
    })
}

/// Compares `η = 1` against a jointly tuned `η` on the test trajectory and
/// on the same test trajectory with the outliers removed.
fn run_step_size_study(
    ctx: &Context<'_>,
    k_tilde: usize,
    cfg: &ExperimentConfig,
    spec: &OutlierSpec,
    tune_traj: &Trajectory,
    test_traj: &Trajectory,
    grids: &mut Vec<(String, TuneResult)>,
) -> Result<StepSizeStudy> {
    let clean = simulate(ctx.model, &spec.without_outliers(), test_traj.len(), cfg.seeds.test, None)?;
    let kind = RunKind::Iskf(Variant::Steady);
    let eval = |kind: RunKind, p: &IskfParams| -> Result<(f64, f64)> {
        let noisy = ctx.run(kind, p, &test_traj.measurements)?;
        let quiet = ctx.run(kind, p, &clean.measurements)?;
        Ok((
            state_rmse(&test_traj.states[1..], &noisy[1..])?,
            state_rmse(&clean.states[1..], &quiet[1..])?,
        ))
    };

    let mut rows = Vec::new();
    let (r, rc) = eval(RunKind::Kf(Variant::Steady), &IskfParams::kf())?;
    rows.push(StepSizeRow {
        label: "kf".into(),
        params: None,
        rmse: r,
        rmse_no_outliers: rc,
    });

    let unit_grid = cfg.grid.grid(k_tilde, false);
    let unit = ctx.tune(kind, &unit_grid, tune_traj, cfg.scoring)?;
    let (r, rc) = eval(kind, &unit.best_params)?;
    rows.push(StepSizeRow {
        label: format!("iskf_k{k_tilde}_eta1"),
        params: Some(unit.best_params),
        rmse: r,
        rmse_no_outliers: rc,
    });
    grids.push((format!("step_size_k{k_tilde}_eta1"), unit));

    let joint_grid = cfg.grid.grid(k_tilde, true);
    let joint = ctx.tune(kind, &joint_grid, tune_traj, cfg.scoring)?;
    let (r, rc) = eval(kind, &joint.best_params)?;
    rows.push(StepSizeRow {
        label: format!("iskf_k{k_tilde}_eta_tuned"),
        params: Some(joint.best_params),
        rmse: r,
        rmse_no_outliers: rc,
    });
    grids.push((format!("step_size_k{k_tilde}_eta_tuned"), joint));

    Ok(StepSizeStudy { k_tilde, rows })
}

/// Timing of the full ISKF step against the steady-state step.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub k_tilde: usize,
    pub steps: usize,
    pub median_full_ns: f64,
    pub median_steady_ns: f64,
    pub ratio: f64,
}

/// Random system with spectral radius 0.9, `F = 0.3 I`, `G = I`.
pub fn synthetic_system(n: usize, p: usize, seed: u64) -> Result<SystemModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let mut a = uniform(n, n);
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if rho > 0.0 {
        a *= 0.9 / rho;
    }
    let c = uniform(p, n);
    build_model(a, c, DMatrix::identity(n, n) * 0.3, DMatrix::identity(p, p))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn bench_filters(n: usize, p: usize, k_tilde: usize, steps: usize, seed: u64) -> Result<BenchRow> {
    if steps == 0 {
        return Err(IskfError::InvalidParameter("steps must be at least 1".into()));
    }
    let model = synthetic_system(n, p, seed)?;
    let gains = solve_steady(&model, 1e-10, DEFAULT_MAX_ITER)?;
    let (_, spec) = vehicle_model(0.05, 0.05)?;
    let traj = simulate(&model, &spec, steps, seed, None)?;
    let params = IskfParams::new(Threshold::new(1.0)?, Threshold::new(2.0)?, k_tilde, 1.0)?;

    let mut full = Vec::with_capacity(steps);
    let mut state = FilterState::initial(&gains);
    for y in &traj.measurements {
        let t0 = Instant::now();
        state = iskf_step(&state, y, &model, &params)?;
        full.push(t0.elapsed().as_nanos() as f64);
    }
    let mut steady = Vec::with_capacity(steps);
    let mut x = DVector::zeros(n);
    for y in &traj.measurements {
        let t0 = Instant::now();
        x = ss_iskf_step(&x, y, &gains, &params)?;
        steady.push(t0.elapsed().as_nanos() as f64);
    }
    let (mf, ms) = (median(full), median(steady));
    Ok(BenchRow {
        n,
        p,
        k_tilde,
        steps,
        median_full_ns: mf,
        median_steady_ns: ms,
        ratio: mf / ms.max(1.0),
    })
}
