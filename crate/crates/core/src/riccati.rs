//! Covariance recursions, steady-state gains and the scaling matrix.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::Serialize;

use crate::error::{check_dims, IskfError, Result};
use crate::matrix::{self, symmetrize};
use crate::model::SystemModel;
use crate::satfun::Whitener;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

/// Prediction `A P Aᵀ + W`.
pub fn covariance_predict(p_post: &DMatrix<f64>, model: &SystemModel) -> Result<DMatrix<f64>> {
    let n = model.n();
    check_dims("posterior covariance", (n, n), p_post.shape())?;
    let a = model.a();
    Ok(symmetrize(a * p_post * a.transpose() + model.w()))
}

/// Gain `K = P Cᵀ (C P Cᵀ + V)⁻¹` and posterior `(I − K C) P`.
pub fn gain_and_update(
    p_prior: &DMatrix<f64>,
    model: &SystemModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.n();
    check_dims("prior covariance", (n, n), p_prior.shape())?;
    gain_and_update_with(p_prior, model.c(), model.v())
}

pub(crate) fn gain_and_update_with(
    p_prior: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cp = c * p_prior;
    let s = symmetrize(&cp * c.transpose() + v);
    let chol = Cholesky::new(s).ok_or(IskfError::SingularInnovationCovariance)?;
    // S Kᵀ = C P, with S and P symmetric
    let k = chol.solve(&cp).transpose();
    let p_post = symmetrize(p_prior - &k * cp);
    Ok((k, p_post))
}

/// Steady-state covariances and gain, with the factors the steady-state
/// filters need at every step.
#[derive(Debug, Clone, Serialize)]
pub struct GainSet {
    /// Posterior covariance `P`.
    #[serde(rename = "P", with = "matrix::nested")]
    pub p: DMatrix<f64>,
    /// Prior covariance `Σ = A P Aᵀ + W`.
    #[serde(rename = "Sigma", with = "matrix::nested")]
    pub sigma: DMatrix<f64>,
    #[serde(rename = "K", with = "matrix::nested")]
    pub k: DMatrix<f64>,
    /// `I − K C`.
    #[serde(rename = "IKC", with = "matrix::nested")]
    pub ikc: DMatrix<f64>,
    #[serde(skip)]
    pub a: DMatrix<f64>,
    #[serde(skip)]
    pub c: DMatrix<f64>,
    #[serde(skip)]
    pub sigma_whitener: Whitener,
    #[serde(skip)]
    pub v_whitener: Whitener,
    pub iterations: usize,
}

impl GainSet {
    /// Builds the gain set from a prior covariance `Σ`.
    pub fn from_prior(sigma: DMatrix<f64>, model: &SystemModel, iterations: usize) -> Result<Self> {
        let (k, p) = gain_and_update(&sigma, model)?;
        let sigma_whitener =
            Whitener::cholesky(&sigma).ok_or(IskfError::SingularPriorCovariance)?;
        let n = model.n();
        let ikc = DMatrix::identity(n, n) - &k * model.c();
        Ok(GainSet {
            p,
            sigma,
            k,
            ikc,
            a: model.a().clone(),
            c: model.c().clone(),
            sigma_whitener,
            v_whitener: model.v_whitener().clone(),
            iterations,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Fixed-point Riccati iteration from `P₀ = W` until
/// `‖P_{k+1} − P_k‖_F ≤ tol · max(1, ‖P_k‖_F)`.
pub fn solve_steady(model: &SystemModel, tol: f64, max_iter: usize) -> Result<GainSet> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(IskfError::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let mut p = model.w().clone();
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let sigma = covariance_predict(&p, model)?;
        let (_, next) = gain_and_update(&sigma, model)?;
        let diff = (&next - &p).norm();
        let scale = p.norm().max(1.0);
        p = next;
        last = diff / scale;
        if !last.is_finite() {
            break;
        }
        if diff <= tol * scale {
            let sigma = covariance_predict(&p, model)?;
            return GainSet::from_prior(sigma, model, it);
        }
    }
    Err(IskfError::NoConvergence {
        iterations: max_iter,
        residual: last,
    })
}

/// Relative residuals of the steady-state equations, as
/// `(prior-form DARE on Σ, posterior fixed point on P)`, each normalized by
/// `max(1, ‖·‖_F)`.
pub fn dare_residuals(gains: &GainSet, model: &SystemModel) -> Result<(f64, f64)> {
    let a = model.a();
    let c = model.c();
    let s = &gains.sigma;
    let innov = symmetrize(c * s * c.transpose() + model.v());
    let chol = Cholesky::new(innov).ok_or(IskfError::SingularInnovationCovariance)?;
    let csa = c * s * a.transpose();
    let rhs = a * s * a.transpose() + model.w() - csa.transpose() * chol.solve(&csa);
    let prior = (&rhs - s).norm() / s.norm().max(1.0);

    let sigma_next = covariance_predict(&gains.p, model)?;
    let (_, p_next) = gain_and_update(&sigma_next, model)?;
    let post = (&p_next - &gains.p).norm() / gains.p.norm().max(1.0);
    Ok((prior, post))
}

/// Cholesky factorization of `M = Σ⁻¹ + Cᵀ V⁻¹ C`.
#[derive(Debug, Clone)]
pub struct ScalingMatrix {
    m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ScalingMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `M⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `L` with `L Lᵀ = M⁻¹`.
    pub fn inverse_factor(&self) -> Result<DMatrix<f64>> {
        Cholesky::new(symmetrize(self.inverse()))
            .map(|c| c.unpack())
            .ok_or(IskfError::SingularScalingMatrix)
    }

    /// `M⁻¹ Cᵀ V⁻¹`, equal to the Kalman gain by the Woodbury identity.
    pub fn woodbury_gain(&self, model: &SystemModel) -> DMatrix<f64> {
        let v_inv = Cholesky::new(model.v().clone())
            .expect("V is positive definite by construction")
            .inverse();
        self.solve(&(model.c().transpose() * v_inv))
    }
}

pub fn scaling_matrix(gains: &GainSet, model: &SystemModel) -> Result<ScalingMatrix> {
    let sigma_inv = Cholesky::new(gains.sigma.clone())
        .ok_or(IskfError::SingularPriorCovariance)?
        .inverse();
    let v_inv = Cholesky::new(model.v().clone())
        .ok_or(IskfError::SingularMeasurementNoise)?
        .inverse();
    let c = model.c();
    let m = symmetrize(sigma_inv + c.transpose() * v_inv * c);
    let chol = Cholesky::new(m.clone()).ok_or(IskfError::SingularScalingMatrix)?;
    Ok(ScalingMatrix { m, chol })
}

/// Largest entrywise deviation `|a − b|` relative to `max(1, max|b|)`.
pub fn max_relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
