//! RMSE metrics and grid-search parameter selection.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IskfError, Result};
use crate::filters::IskfParams;
use crate::model::SystemModel;
use crate::satfun::Threshold;
use crate::sim::Trajectory;

/// `√((1/T) Σ ‖x_t − x̂_t‖²)`.
pub fn state_rmse(truth: &[DVector<f64>], estimates: &[DVector<f64>]) -> Result<f64> {
    if truth.is_empty() {
        return Err(IskfError::EmptyInput);
    }
    if truth.len() != estimates.len() {
        return Err(IskfError::DimensionMismatch(format!(
            "{} true states vs {} estimates",
            truth.len(),
            estimates.len()
        )));
    }
    let mut acc = 0.0;
    for (x, e) in truth.iter().zip(estimates) {
        if x.len() != e.len() {
            return Err(IskfError::DimensionMismatch("state and estimate lengths differ".into()));
        }
        acc += (x - e).norm_squared();
    }
    Ok((acc / truth.len() as f64).sqrt())
}

/// RMSE of the predicted measurements `y_t − C A x̂_{t−1|t−1}`, where
/// `posterior[i]` is the estimate available before `measurements[i]`.
pub fn pred_meas_rmse(
    model: &SystemModel,
    posterior: &[DVector<f64>],
    measurements: &[DVector<f64>],
) -> Result<f64> {
    if measurements.is_empty() {
        return Err(IskfError::EmptyInput);
    }
    if posterior.len() != measurements.len() {
        return Err(IskfError::DimensionMismatch(format!(
            "{} estimates vs {} measurements",
            posterior.len(),
            measurements.len()
        )));
    }
    let ca = model.c() * model.a();
    let mut acc = 0.0;
    for (x, y) in posterior.iter().zip(measurements) {
        if x.len() != model.n() || y.len() != model.p() {
            return Err(IskfError::DimensionMismatch("estimate or measurement length".into()));
        }
        acc += (y - &ca * x).norm_squared();
    }
    Ok((acc / measurements.len() as f64).sqrt())
}

/// `n` logarithmically spaced values on `[lo, hi]`, endpoints included.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Predicted-measurement RMSE; needs no true states.
    #[default]
    PredictedMeasurement,
    /// State RMSE against the true trajectory.
    State,
}

impl ScoringMode {
    pub fn label(self) -> &'static str {
        match self {
            ScoringMode::PredictedMeasurement => "predicted_measurement",
            ScoringMode::State => "state",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub lambda_x_values: Vec<Threshold>,
    pub lambda_y_values: Vec<Threshold>,
    /// `None` fixes `η = 1`.
    pub eta_values: Option<Vec<f64>>,
    pub k_tilde: usize,
}

pub const DEFAULT_GRID_POINTS: usize = 20;

impl TuneGrid {
    /// 20 log-spaced thresholds on `[0.1, 10]` for both `λx` and `λy`.
    pub fn default_for(k_tilde: usize) -> Self {
        let values: Vec<Threshold> = logspace(0.1, 10.0, DEFAULT_GRID_POINTS)
            .into_iter()
            .map(|v| Threshold::new(v).expect("grid values are positive"))
            .collect();
        TuneGrid {
            lambda_x_values: values.clone(),
            lambda_y_values: values,
            eta_values: None,
            k_tilde,
        }
    }

    /// Adds 20 log-spaced step sizes on `[0.1, 100]`.
    pub fn with_step_size_search(mut self) -> Self {
        self.eta_values = Some(logspace(0.1, 100.0, DEFAULT_GRID_POINTS));
        self
    }

    /// Cells in evaluation order: `λx` outer, `λy` inner, `η` innermost.
    pub fn cells(&self) -> Result<Vec<IskfParams>> {
        let etas = self.eta_values.clone().unwrap_or_else(|| vec![1.0]);
        if self.lambda_x_values.is_empty() || self.lambda_y_values.is_empty() || etas.is_empty() {
            return Err(IskfError::InvalidParameter("grid has no cells".into()));
        }
        let mut out = Vec::with_capacity(self.lambda_x_values.len() * self.lambda_y_values.len() * etas.len());
        for &lx in &self.lambda_x_values {
            for &ly in &self.lambda_y_values {
                for &eta in &etas {
                    out.push(IskfParams::new(lx, ly, self.k_tilde, eta)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub params: IskfParams,
    /// `+∞` when the filter failed on this cell.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub best_params: IskfParams,
    pub best_score: f64,
    pub best_index: usize,
    pub scoring: ScoringMode,
    pub table: Vec<GridCell>,
}

/// Produces posterior estimates `x̂₀ … x̂_T` (the initial estimate first)
/// from measurements `y₁ … y_T`.
pub trait FilterRunner: Sync {
    fn run(&self, params: &IskfParams, measurements: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>;
}

impl<F> FilterRunner for F
where
    F: Fn(&IskfParams, &[DVector<f64>]) -> Result<Vec<DVector<f64>>> + Sync,
{
    fn run(&self, params: &IskfParams, measurements: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        self(params, measurements)
    }
}

/// Scores a run of estimates `x̂₀ … x̂_T` against a trajectory.
pub fn score_estimates(
    scoring: ScoringMode,
    estimates: &[DVector<f64>],
    traj: &Trajectory,
    model: &SystemModel,
) -> Result<f64> {
    let t = traj.len();
    if estimates.len() != t + 1 {
        return Err(IskfError::DimensionMismatch(format!(
            "expected {} estimates, got {}",
            t + 1,
            estimates.len()
        )));
    }
    match scoring {
        ScoringMode::PredictedMeasurement => pred_meas_rmse(model, &estimates[..t], &traj.measurements),
        ScoringMode::State => state_rmse(&traj.states[1..], &estimates[1..]),
    }
}

/// Evaluates every grid cell (in parallel) and returns the best one. Ties
/// go to the earliest cell in evaluation order; failed cells score `+∞`.
pub fn grid_search<R: FilterRunner + ?Sized>(
    runner: &R,
    grid: &TuneGrid,
    traj: &Trajectory,
    model: &SystemModel,
    scoring: ScoringMode,
) -> Result<TuneResult> {
    traj.validate()?;
    let cells = grid.cells()?;
    let table: Vec<GridCell> = cells
        .par_iter()
        .map(|params| {
            let score = runner
                .run(params, &traj.measurements)
                .and_then(|est| score_estimates(scoring, &est, traj, model))
                .ok()
                .filter(|s| !s.is_nan())
                .unwrap_or(f64::INFINITY);
            GridCell {
                params: *params,
                score,
            }
        })
        .collect();
    Ok(select_best(table, scoring))
}

fn select_best(table: Vec<GridCell>, scoring: ScoringMode) -> TuneResult {
    let mut best = 0;
    for (i, cell) in table.iter().enumerate() {
        if cell.score < table[best].score {
            best = i;
        }
    }
    TuneResult {
        best_params: table[best].params,
        best_score: table[best].score,
        best_index: best,
        scoring,
        table,
    }
}
