//! Kalman and iteratively saturated Kalman filters.
//!
//! The ISKF update starts from the prediction `x⁰ = A x̂` and runs
//!
//! ```text
//! xᵏ = xᵏ⁻¹ + η K σ(y − C xᵏ⁻¹) + η (I − K C) ρ(x⁰ − xᵏ⁻¹)
//! ```
//!
//! for `k = 1..k̃`, where `σ` saturates in `V`-whitened coordinates at `λy`
//! and `ρ` saturates in `Σ`-whitened coordinates at `λx`. This is a scaled
//! gradient method on the Huberized objective `f` with scaling matrix
//! `M = Σ⁻¹ + Cᵀ V⁻¹ C`; see [`objective`] and [`huberized_solve`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IskfError, Result};
use crate::matrix;
use crate::model::SystemModel;
use crate::riccati::{covariance_predict, gain_and_update_with, GainSet};
use crate::satfun::{phi, phi_grad, saturate_unchecked, Threshold, Whitener};

/// Largest step size accepted. The descent guarantee only covers `η < 2`;
/// larger values are allowed for step-size sweeps.
pub const MAX_STEP_SIZE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IskfParams {
    pub lambda_x: Threshold,
    pub lambda_y: Threshold,
    pub k_tilde: usize,
    #[serde(default = "unit_step")]
    pub eta: f64,
}

fn unit_step() -> f64 {
    1.0
}

impl IskfParams {
    pub fn new(lambda_x: Threshold, lambda_y: Threshold, k_tilde: usize, eta: f64) -> Result<Self> {
        let p = IskfParams {
            lambda_x,
            lambda_y,
            k_tilde,
            eta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Infinite thresholds: the Kalman filter.
    pub fn kf() -> Self {
        IskfParams {
            lambda_x: Threshold::INFINITE,
            lambda_y: Threshold::INFINITE,
            k_tilde: 1,
            eta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_tilde == 0 {
            return Err(IskfError::InvalidParameter("k_tilde must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= MAX_STEP_SIZE) {
            return Err(IskfError::InvalidParameter(format!(
                "eta must lie in (0, {MAX_STEP_SIZE}], got {}",
                self.eta
            )));
        }
        // thresholds are positive by construction
        Ok(())
    }
}

/// Posterior mean, and posterior covariance for the time-varying filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    #[serde(with = "matrix::vector")]
    pub x_hat: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_matrix")]
    pub p_post: Option<DMatrix<f64>>,
    pub t: usize,
}

mod opt_matrix {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(matrix::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|rows| matrix::from_rows(&rows).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>, p_post: DMatrix<f64>) -> Self {
        FilterState {
            x_hat,
            p_post: Some(p_post),
            t: 0,
        }
    }

    /// State for the steady-state filters, which carry no covariance.
    pub fn steady(x_hat: DVector<f64>) -> Self {
        FilterState {
            x_hat,
            p_post: None,
            t: 0,
        }
    }

    /// `x̂₀ = 0`, `P₀ = P` from the steady-state solution.
    pub fn initial(gains: &GainSet) -> Self {
        Self::new(DVector::zeros(gains.n()), gains.p.clone())
    }

    fn covariance(&self, n: usize) -> Result<&DMatrix<f64>> {
        let p = self.p_post.as_ref().ok_or_else(|| {
            IskfError::InvalidParameter("time-varying filter needs a posterior covariance".into())
        })?;
        if p.shape() != (n, n) || self.x_hat.len() != n {
            return Err(IskfError::DimensionMismatch(format!(
                "filter state has x of length {} and P of shape {:?}, model has n = {n}",
                self.x_hat.len(),
                p.shape()
            )));
        }
        Ok(p)
    }
}

fn check_len(what: &str, v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(IskfError::DimensionMismatch(format!(
            "{what}: expected length {expected}, found {}",
            v.len()
        )))
    }
}

/// Runs the saturated update iterations from `x0`, calling `visit` on every
/// iterate `x¹ … x^k̃`.
#[allow(clippy::too_many_arguments)]
fn saturated_update(
    x0: &DVector<f64>,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
    ikc: &DMatrix<f64>,
    v_whitener: &Whitener,
    sigma_whitener: &Whitener,
    params: &IskfParams,
    mut visit: impl FnMut(&DVector<f64>),
) -> DVector<f64> {
    let mut x = x0.clone();
    for _ in 0..params.k_tilde {
        let innovation = y - c * &x;
        let sigma = saturate_unchecked(&innovation, v_whitener, params.lambda_y);
        let correction = x0 - &x;
        let rho = saturate_unchecked(&correction, sigma_whitener, params.lambda_x);
        let step = k * sigma + ikc * rho;
        if params.eta == 1.0 {
            x += step;
        } else {
            x += step * params.eta;
        }
        visit(&x);
    }
    x
}

/// Standard Kalman filter predict + update.
pub fn kf_step(state: &FilterState, y: &DVector<f64>, model: &SystemModel) -> Result<FilterState> {
    let p = state.covariance(model.n())?;
    check_len("measurement", y, model.p())?;
    let sigma = covariance_predict(p, model)?;
    let (k, p_post) = gain_and_update_with(&sigma, model.c(), model.v())?;
    let x_pred = model.a() * &state.x_hat;
    let x_hat = &x_pred + k * (y - model.c() * &x_pred);
    Ok(FilterState {
        x_hat,
        p_post: Some(p_post),
        t: state.t + 1,
    })
}

fn time_varying_update(
    state: &FilterState,
    y: &DVector<f64>,
    model: &SystemModel,
    c: &DMatrix<f64>,
    v: &DMatrix<f64>,
    v_whitener: &Whitener,
    params: &IskfParams,
) -> Result<FilterState> {
    params.validate()?;
    let n = model.n();
    let p = state.covariance(n)?;
    check_len("measurement", y, c.nrows())?;
    let sigma = covariance_predict(p, model)?;
    let (k, p_post) = gain_and_update_with(&sigma, c, v)?;
    let sigma_whitener = Whitener::cholesky(&sigma).ok_or(IskfError::SingularPriorCovariance)?;
    let ikc = DMatrix::identity(n, n) - &k * c;
    let x0 = model.a() * &state.x_hat;
    let x_hat = saturated_update(&x0, y, c, &k, &ikc, v_whitener, &sigma_whitener, params, |_| {});
    Ok(FilterState {
        x_hat,
        p_post: Some(p_post),
        t: state.t + 1,
    })
}

/// Time-varying ISKF step. The covariance recursion is the Kalman one and
/// does not depend on `y`.
pub fn iskf_step(
    state: &FilterState,
    y: &DVector<f64>,
    model: &SystemModel,
    params: &IskfParams,
) -> Result<FilterState> {
    time_varying_update(state, y, model, model.c(), model.v(), model.v_whitener(), params)
}

/// Steady-state Kalman filter step `A x̂ + K (y − C A x̂)`.
pub fn ss_kf_step(x_hat: &DVector<f64>, y: &DVector<f64>, gains: &GainSet) -> Result<DVector<f64>> {
    check_len("state", x_hat, gains.n())?;
    check_len("measurement", y, gains.p_dim())?;
    let x_pred = &gains.a * x_hat;
    Ok(&x_pred + &gains.k * (y - &gains.c * &x_pred))
}

/// Steady-state ISKF step: prediction followed by [`ss_iskf_update`].
pub fn ss_iskf_step(
    x_hat: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> Result<DVector<f64>> {
    check_len("state", x_hat, gains.n())?;
    let x_pred = &gains.a * x_hat;
    ss_iskf_update(&x_pred, y, gains, params)
}

/// Steady-state saturated update from a given prediction.
pub fn ss_iskf_update(
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> Result<DVector<f64>> {
    check_len("prediction", x_pred, gains.n())?;
    check_len("measurement", y, gains.p_dim())?;
    Ok(saturated_update(
        x_pred,
        y,
        &gains.c,
        &gains.k,
        &gains.ikc,
        &gains.v_whitener,
        &gains.sigma_whitener,
        params,
        |_| {},
    ))
}

/// All iterates `x⁰ … x^k̃` of the steady-state update.
pub fn ss_iskf_iterates(
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> Result<Vec<DVector<f64>>> {
    check_len("prediction", x_pred, gains.n())?;
    check_len("measurement", y, gains.p_dim())?;
    let mut out = vec![x_pred.clone()];
    saturated_update(
        x_pred,
        y,
        &gains.c,
        &gains.k,
        &gains.ikc,
        &gains.v_whitener,
        &gains.sigma_whitener,
        params,
        |x| out.push(x.clone()),
    );
    Ok(out)
}

fn check_objective_dims(x: &DVector<f64>, x_pred: &DVector<f64>, y: &DVector<f64>, gains: &GainSet) -> Result<()> {
    check_len("x", x, gains.n())?;
    check_len("prediction", x_pred, gains.n())?;
    check_len("measurement", y, gains.p_dim())
}

/// Huberized MAP objective
/// `φ(Σ^{-1/2}(x − x̂_pred); λx) + φ(V^{-1/2}(y − C x); λy)`.
pub fn objective(
    x: &DVector<f64>,
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> Result<f64> {
    check_objective_dims(x, x_pred, y, gains)?;
    let prior = gains.sigma_whitener.apply(&(x - x_pred));
    let meas = gains.v_whitener.apply(&(y - &gains.c * x));
    Ok(phi(&prior, params.lambda_x) + phi(&meas, params.lambda_y))
}

pub fn objective_grad(
    x: &DVector<f64>,
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> Result<DVector<f64>> {
    check_objective_dims(x, x_pred, y, gains)?;
    let prior = gains.sigma_whitener.apply(&(x - x_pred));
    let meas = gains.v_whitener.apply(&(y - &gains.c * x));
    let gp = gains.sigma_whitener.apply_transpose(&phi_grad(&prior, params.lambda_x));
    let gm = gains.v_whitener.apply_transpose(&phi_grad(&meas, params.lambda_y));
    Ok(gp - gains.c.tr_mul(&gm))
}

/// `M⁻¹ ∇f(x) = −K σ(y − C x) − (I − K C) ρ(x̂_pred − x)`.
pub fn scaled_gradient(
    x: &DVector<f64>,
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
) -> DVector<f64> {
    let sigma = saturate_unchecked(&(y - &gains.c * x), &gains.v_whitener, params.lambda_y);
    let rho = saturate_unchecked(&(x_pred - x), &gains.sigma_whitener, params.lambda_x);
    -(&gains.k * sigma + &gains.ikc * rho)
}

/// Minimizes [`objective`] by unit-step scaled gradient iterations started
/// at `x_pred`, stopping once `‖M⁻¹∇f(x)‖ ≤ tol (1 + ‖x‖)`. `params.eta` and
/// `params.k_tilde` are ignored.
pub fn huberized_solve(
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    huberized_solve_counted(x_pred, y, gains, params, tol, max_iter).map(|(x, _)| x)
}

/// [`huberized_solve`], also returning the number of iterations taken.
pub fn huberized_solve_counted(
    x_pred: &DVector<f64>,
    y: &DVector<f64>,
    gains: &GainSet,
    params: &IskfParams,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(IskfError::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    check_objective_dims(x_pred, x_pred, y, gains)?;
    let mut x = x_pred.clone();
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let step = scaled_gradient(&x, x_pred, y, gains, params);
        residual = step.norm();
        if residual <= tol * (1.0 + x.norm()) {
            return Ok((x, it));
        }
        x -= step;
    }
    Err(IskfError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// ISKF step using only the measurement entries selected by `mask`.
///
/// `y_obs` may hold all `p` entries (unselected ones are ignored) or only
/// the selected ones, in order. With nothing selected the update is skipped
/// and the prediction is returned.
pub fn masked_update(
    state: &FilterState,
    y_obs: &DVector<f64>,
    mask: &[bool],
    model: &SystemModel,
    params: &IskfParams,
) -> Result<FilterState> {
    let p = model.p();
    if mask.len() != p {
        return Err(IskfError::DimensionMismatch(format!(
            "mask has length {}, model has p = {p}",
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..p).filter(|&i| mask[i]).collect();
    let y = if y_obs.len() == p {
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| y_obs[i]))
    } else if y_obs.len() == rows.len() {
        y_obs.clone()
    } else {
        return Err(IskfError::DimensionMismatch(format!(
            "observed measurement has length {}, expected {p} or {}",
            y_obs.len(),
            rows.len()
        )));
    };

    if rows.is_empty() {
        let p_prev = state.covariance(model.n())?;
        return Ok(FilterState {
            x_hat: model.a() * &state.x_hat,
            p_post: Some(covariance_predict(p_prev, model)?),
            t: state.t + 1,
        });
    }

    let c = model.c().select_rows(rows.iter());
    let v = model.v().select_rows(rows.iter()).select_columns(rows.iter());
    let v_whitener = Whitener::cholesky(&v).ok_or(IskfError::SingularMeasurementNoise)?;
    time_varying_update(state, &y, model, &c, &v, &v_whitener, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, vehicle_model};
    use crate::riccati::{solve_steady, DEFAULT_MAX_ITER, DEFAULT_TOL};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn th(v: f64) -> Threshold {
        Threshold::new(v).unwrap()
    }

    /// A = 0, C = W = V = 1: Σ = 1, K = 0.5, P = 0.5.
    fn scalar_setup() -> (SystemModel, GainSet) {
        let m = build_model(scalar(0.0), scalar(1.0), scalar(1.0), scalar(1.0)).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        (m, g)
    }

    fn params(lx: f64, ly: f64, k: usize) -> IskfParams {
        IskfParams::new(th(lx), th(ly), k, 1.0).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(IskfParams::new(th(1.0), th(1.0), 0, 1.0).is_err());
        assert!(IskfParams::new(th(1.0), th(1.0), 1, 0.0).is_err());
        assert!(IskfParams::new(th(1.0), th(1.0), 1, 101.0).is_err());
        assert!(IskfParams::new(th(1.0), th(1.0), 1, 2.64).is_ok());
        let p: IskfParams =
            serde_json::from_str(r#"{"lambda_x": "inf", "lambda_y": 2.0, "k_tilde": 2}"#).unwrap();
        assert!(p.lambda_x.is_infinite());
        assert_eq!(p.eta, 1.0);
        assert!(serde_json::from_str::<IskfParams>(r#"{"lambda_x":1,"lambda_y":1,"k_tilde":1,"x":1}"#).is_err());
    }

    #[test]
    fn kf_step_scalar() {
        let (m, _) = scalar_setup();
        let s = FilterState::new(dvector![0.0], scalar(1.0));
        let out = kf_step(&s, &dvector![10.0], &m).unwrap();
        assert_relative_eq!(out.x_hat[0], 5.0, epsilon = 1e-14);
        assert_relative_eq!(out.p_post.as_ref().unwrap()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_eq!(out.t, 1);
    }

    #[test]
    fn kf_step_zero_innovation() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let x = dvector![1.0, -2.0, 0.5, 0.3];
        let s = FilterState::new(x.clone(), DMatrix::identity(4, 4));
        let y = m.c() * m.a() * &x;
        let out = kf_step(&s, &y, &m).unwrap();
        assert_relative_eq!(out.x_hat, m.a() * &x, epsilon = 1e-14);
    }

    #[test]
    fn kf_step_requires_covariance() {
        let (m, _) = scalar_setup();
        let s = FilterState::steady(dvector![0.0]);
        assert!(kf_step(&s, &dvector![1.0], &m).is_err());
        let s = FilterState::new(dvector![0.0], scalar(1.0));
        assert!(matches!(
            kf_step(&s, &dvector![1.0, 2.0], &m),
            Err(IskfError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn iskf_hand_computed_iterates() {
        let (m, _) = scalar_setup();
        // P_post = 1 → Σ = A·1·A + W = 1
        let s = FilterState::new(dvector![0.0], scalar(1.0));
        let y = dvector![10.0];
        let one = iskf_step(&s, &y, &m, &params(0.1, 1.0, 1)).unwrap();
        assert_relative_eq!(one.x_hat[0], 0.5, epsilon = 1e-14);
        let two = iskf_step(&s, &y, &m, &params(0.1, 1.0, 2)).unwrap();
        assert_relative_eq!(two.x_hat[0], 0.95, epsilon = 1e-14);
        assert_eq!(two.p_post, one.p_post);
    }

    #[test]
    fn iskf_with_infinite_thresholds_is_kf() {
        let (m, g) = {
            let (m, _) = vehicle_model(0.05, 0.05).unwrap();
            let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            (m, g)
        };
        let s = FilterState::new(dvector![1.0, 2.0, -1.0, 0.5], g.p.clone() * 2.0);
        let y = dvector![40.0, -30.0];
        let kf = kf_step(&s, &y, &m).unwrap();
        for k in 1..5 {
            let p = IskfParams::new(Threshold::INFINITE, Threshold::INFINITE, k, 1.0).unwrap();
            let out = iskf_step(&s, &y, &m, &p).unwrap();
            assert!((&out.x_hat - &kf.x_hat).amax() < 1e-12);
            assert_eq!(out.p_post, kf.p_post);
        }
        // iterates stay at the KF estimate
        let x_pred = m.a() * &s.x_hat;
        let its = ss_iskf_iterates(&x_pred, &y, &g, &IskfParams { k_tilde: 6, ..IskfParams::kf() }).unwrap();
        for w in its[1..].windows(2) {
            assert!((&w[1] - &w[0]).amax() < 1e-12);
        }
    }

    #[test]
    fn covariance_is_measurement_independent() {
        let (m, g) = {
            let (m, _) = vehicle_model(0.05, 0.05).unwrap();
            let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            (m, g)
        };
        let p = params(0.2, 1.5, 3);
        let mut a = FilterState::new(DVector::zeros(4), DMatrix::identity(4, 4));
        let mut b = a.clone();
        for t in 0..20 {
            let tf = t as f64;
            a = iskf_step(&a, &dvector![tf, -tf], &m, &p).unwrap();
            b = iskf_step(&b, &dvector![100.0 * tf.sin(), 7.0], &m, &p).unwrap();
            assert_eq!(a.p_post, b.p_post);
        }
        let _ = g;
    }

    #[test]
    fn ss_steps_scalar() {
        let (_, g) = scalar_setup();
        let x = dvector![0.0];
        let y = dvector![10.0];
        assert_relative_eq!(ss_kf_step(&x, &y, &g).unwrap()[0], 5.0, epsilon = 1e-12);
        let out = ss_iskf_step(&x, &y, &g, &params(0.1, 1.0, 2)).unwrap();
        assert_relative_eq!(out[0], 0.95, epsilon = 1e-12);
        let kf = ss_iskf_step(&x, &y, &g, &IskfParams::kf()).unwrap();
        assert_relative_eq!(kf[0], 5.0, epsilon = 1e-12);
        assert!(ss_kf_step(&dvector![0.0, 1.0], &y, &g).is_err());
    }

    #[test]
    fn ss_kf_matches_converged_time_varying() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let x = dvector![1.0, 2.0, 3.0, 4.0];
        let y = dvector![2.5, -1.0];
        let tv = kf_step(&FilterState::new(x.clone(), g.p.clone()), &y, &m).unwrap();
        let ss = ss_kf_step(&x, &y, &g).unwrap();
        assert!((tv.x_hat - ss).amax() < 1e-10);
    }

    #[test]
    fn single_saturated_step_is_clamped_innovation() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let x = dvector![0.0, 0.0, 1.0, -1.0];
        let x_pred = &g.a * &x;
        let y = &g.c * &x_pred + dvector![30.0, 40.0];
        let p = params(0.5, 1.5, 1);
        let out = ss_iskf_step(&x, &y, &g, &p).unwrap();
        let innov = &y - &g.c * &x_pred;
        let r = g.v_whitener.whitened_norm(&innov);
        assert!(r > 1.5);
        let clamped = &innov * (1.5 / r);
        assert_relative_eq!(g.v_whitener.whitened_norm(&clamped), 1.5, epsilon = 1e-12);
        let expected = &x_pred + &g.k * clamped;
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let (_, g) = scalar_setup();
        let p = params(1.0, 1.0, 1);
        let x = dvector![0.0];
        assert_relative_eq!(objective(&x, &x, &dvector![2.0], &g, &p).unwrap(), 1.5, epsilon = 1e-12);
        let grad = objective_grad(&x, &x, &dvector![2.0], &g, &p).unwrap();
        assert_relative_eq!(grad[0], -1.0, epsilon = 1e-12);

        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let xp = dvector![1.0, 1.0, 0.0, 0.0];
        let x = dvector![1.5, 0.0, 0.2, -0.1];
        let y = dvector![3.0, -2.0];
        let f = objective(&x, &xp, &y, &g, &IskfParams::kf()).unwrap();
        let sinv = g.sigma.clone().try_inverse().unwrap();
        let vinv = m.v().clone().try_inverse().unwrap();
        let dx = &x - &xp;
        let r = &y - m.c() * &x;
        let quad = 0.5 * dx.dot(&(&sinv * &dx)) + 0.5 * r.dot(&(&vinv * &r));
        assert_relative_eq!(f, quad, epsilon = 1e-10);

        let zero = objective_grad(&xp, &xp, &(m.c() * &xp), &g, &params(0.3, 0.3, 1)).unwrap();
        assert!(zero.amax() < 1e-14);

        let kf = ss_kf_step(&dvector![0.4, -0.2, 1.0, 0.0], &y, &g).unwrap();
        let xp = &g.a * dvector![0.4, -0.2, 1.0, 0.0];
        let grad = objective_grad(&kf, &xp, &y, &g, &IskfParams::kf()).unwrap();
        assert!(grad.norm() < 1e-10);
    }

    #[test]
    fn huberized_scalar_solution() {
        let (_, g) = scalar_setup();
        let p = params(0.1, 1.0, 1);
        let xp = dvector![0.0];
        let y = dvector![10.0];
        let x = huberized_solve(&xp, &y, &g, &p, 1e-12, 100_000).unwrap();
        // stationarity: 0.1 = 10 − x
        assert_relative_eq!(x[0], 9.9, epsilon = 1e-9);

        let its = ss_iskf_iterates(&xp, &y, &g, &IskfParams { k_tilde: 40, ..p }).unwrap();
        let fs: Vec<f64> = its.iter().map(|x| objective(x, &xp, &y, &g, &p).unwrap()).collect();
        for w in fs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let f_star = objective(&x, &xp, &y, &g, &p).unwrap();
        assert!(fs.iter().all(|f| *f >= f_star - 1e-12));
    }

    #[test]
    fn huberized_quadratic_is_one_step() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let x = dvector![0.3, 0.1, -1.0, 2.0];
        let y = dvector![5.0, 6.0];
        let xp = &g.a * &x;
        let (sol, iters) = huberized_solve_counted(&xp, &y, &g, &IskfParams::kf(), 1e-10, 10).unwrap();
        assert!(iters <= 2);
        assert!((sol - ss_kf_step(&x, &y, &g).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn huberized_reports_non_convergence() {
        let (_, g) = scalar_setup();
        let err = huberized_solve(&dvector![0.0], &dvector![10.0], &g, &params(0.1, 1.0, 1), 1e-12, 3);
        assert!(matches!(err, Err(IskfError::NoConvergence { iterations: 3, .. })));
    }

    #[test]
    fn outlier_free_solution_satisfies_threshold_bounds() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let g = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let xp = dvector![0.0, 0.0, 0.5, 0.5];
        let y = &g.c * &xp + dvector![0.5, -0.4];
        let p = params(1.0, 2.0, 1);
        let x = huberized_solve(&xp, &y, &g, &p, 1e-12, 10_000).unwrap();
        assert!(g.v_whitener.whitened_norm(&(&y - &g.c * &x)) <= 2.0);
        assert!(g.sigma_whitener.whitened_norm(&(&x - &xp)) <= 1.0);
        let kf = &xp + &g.k * (&y - &g.c * &xp);
        assert!((x - kf).amax() < 1e-10);
    }

    #[test]
    fn masked_update_cases() {
        let (m, _) = vehicle_model(0.05, 0.05).unwrap();
        let s = FilterState::new(dvector![1.0, -1.0, 0.5, 0.2], DMatrix::identity(4, 4));
        let y = dvector![3.0, 40.0];
        let p = params(0.2, 1.5, 2);

        let full = iskf_step(&s, &y, &m, &p).unwrap();
        assert_eq!(masked_update(&s, &y, &[true, true], &m, &p).unwrap(), full);

        let skip = masked_update(&s, &y, &[false, false], &m, &p).unwrap();
        assert_eq!(skip.x_hat, m.a() * &s.x_hat);
        assert_eq!(skip.p_post.unwrap(), covariance_predict(&DMatrix::identity(4, 4), &m).unwrap());

        let partial = masked_update(&s, &y, &[true, false], &m, &p).unwrap();
        let reduced = build_model(
            m.a().clone(),
            m.c().rows(0, 1).into_owned(),
            m.f().clone(),
            scalar(m.v()[(0, 0)].sqrt()),
        )
        .unwrap();
        let direct = iskf_step(&s, &dvector![3.0], &reduced, &p).unwrap();
        assert!((&partial.x_hat - &direct.x_hat).amax() < 1e-12);
        let short = masked_update(&s, &dvector![3.0], &[true, false], &m, &p).unwrap();
        assert_eq!(short, partial);

        assert!(masked_update(&s, &y, &[true], &m, &p).is_err());
        assert!(masked_update(&s, &dvector![1.0, 2.0, 3.0], &[true, false], &m, &p).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
            DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
        }

        /// Random stable system, its gains, a prediction and a measurement.
        fn instance(seed: u64, spread: f64) -> (GainSet, DVector<f64>, DVector<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=5);
            let p = rng.random_range(1..=3);
            let a = gauss(&mut rng, n, n) * (0.8 / (n as f64).sqrt() / 2.0);
            let c = gauss(&mut rng, p, n);
            let f = gauss(&mut rng, n, n) * 0.3 + DMatrix::identity(n, n) * 0.3;
            let g = DMatrix::identity(p, p);
            let m = build_model(a, c, f, g).unwrap();
            let gains = solve_steady(&m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let x_pred = gauss(&mut rng, n, 1).column(0).into_owned();
            let y = m.c() * &x_pred + gauss(&mut rng, p, 1).column(0) * spread;
            (gains, x_pred, y)
        }

        proptest! {
            #[test]
            fn inactive_saturation_reproduces_kf(seed in any::<u64>(), k in 1usize..6) {
                let (gains, x_pred, y) = instance(seed, 0.1);
                // Thresholds far beyond every whitened norm the iterates reach.
                let p = IskfParams::new(th(1e8), th(1e8), k, 1.0).unwrap();
                let iskf = ss_iskf_update(&x_pred, &y, &gains, &p).unwrap();
                let kf = &x_pred + &gains.k * (&y - &gains.c * &x_pred);
                if k == 1 {
                    prop_assert_eq!(iskf, kf);
                } else {
                    prop_assert!((&iskf - &kf).amax() <= 1e-12 * (1.0 + kf.amax()));
                }
            }

            #[test]
            fn single_step_is_saturated_innovation(seed in any::<u64>(), lx in 0.05f64..5.0, ly in 0.05f64..5.0) {
                let (gains, x_pred, y) = instance(seed, 10.0);
                let p = IskfParams::new(th(lx), th(ly), 1, 1.0).unwrap();
                let x = ss_iskf_update(&x_pred, &y, &gains, &p).unwrap();
                let sigma = saturate_unchecked(&(&y - &gains.c * &x_pred), &gains.v_whitener, th(ly));
                prop_assert_eq!(x, &x_pred + &gains.k * sigma);
            }

            #[test]
            fn saturated_terms_are_bounded(seed in any::<u64>(), lx in 0.05f64..5.0, ly in 0.05f64..5.0) {
                let (gains, x_pred, y) = instance(seed, 20.0);
                let p = IskfParams::new(th(lx), th(ly), 6, 1.0).unwrap();
                let iterates = ss_iskf_iterates(&x_pred, &y, &gains, &p).unwrap();
                for x in &iterates[..iterates.len() - 1] {
                    let sigma = saturate_unchecked(&(&y - &gains.c * x), &gains.v_whitener, th(ly));
                    let rho = saturate_unchecked(&(&x_pred - x), &gains.sigma_whitener, th(lx));
                    prop_assert!(gains.v_whitener.whitened_norm(&sigma) <= ly * (1.0 + 1e-12));
                    prop_assert!(gains.sigma_whitener.whitened_norm(&rho) <= lx * (1.0 + 1e-12));
                }
            }
        }
    }
}
