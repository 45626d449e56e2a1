//! Circular Huber function, its gradient, and whitened saturation.
//!
//! The circular Huber function with threshold `λ` is
//!
//! ```text
//! φ(a; λ) = ½‖a‖²            if ‖a‖ ≤ λ
//!         = λ(‖a‖ − λ/2)      otherwise
//! ```
//!
//! and its gradient is `a` inside the ball and `λ a / ‖a‖` outside. The
//! saturation operators used by the filters apply this gradient in whitened
//! coordinates, which reduces to radially shrinking the input whenever its
//! whitened norm exceeds the threshold.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{IskfError, Result};

/// Saturation threshold. Either a positive finite value or `+∞`.
///
/// An infinite threshold turns every saturation into the identity, which
/// makes the robust filters coincide exactly with the Kalman filter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub const INFINITE: Threshold = Threshold(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 {
            Ok(Threshold(value))
        } else {
            Err(IskfError::InvalidParameter(format!(
                "threshold must be positive, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Threshold {
    type Err = IskfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "+inf" | "infinity" | "Infinity" => Ok(Threshold::INFINITE),
            other => {
                let v: f64 = other.parse().map_err(|_| {
                    IskfError::InvalidParameter(format!("cannot parse threshold {other:?}"))
                })?;
                Threshold::new(v)
            }
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let t = match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Threshold::new(v),
            Raw::Text(s) => s.parse(),
        };
        t.map_err(serde::de::Error::custom)
    }
}

/// Circular Huber function `φ(a; λ)`.
pub fn phi(a: &DVector<f64>, lambda: Threshold) -> f64 {
    let sq = a.norm_squared();
    if lambda.is_infinite() {
        return 0.5 * sq;
    }
    let norm = sq.sqrt();
    let l = lambda.value();
    if norm <= l {
        0.5 * sq
    } else {
        l * (norm - 0.5 * l)
    }
}

/// Gradient of [`phi`]. The division by `‖a‖` only happens outside the ball.
pub fn phi_grad(a: &DVector<f64>, lambda: Threshold) -> DVector<f64> {
    if lambda.is_infinite() {
        return a.clone();
    }
    let norm = a.norm();
    let l = lambda.value();
    if norm <= l {
        a.clone()
    } else {
        a * (l / norm)
    }
}

#[derive(Debug, Clone)]
enum Factor {
    /// Lower-triangular Cholesky factor.
    Cholesky,
    /// `Q Λ^{1/2}` from a symmetric eigendecomposition; stores `Λ^{-1/2} Qᵀ`.
    Eigen { inverse: DMatrix<f64> },
}

/// A square-root factor `L` with `L Lᵀ = S` for a symmetric covariance `S`.
///
/// `apply(z)` computes `L⁻¹ z`, so `‖apply(z)‖² = zᵀ S⁻¹ z` regardless of
/// which square root is stored.
#[derive(Debug, Clone)]
pub struct Whitener {
    factor: DMatrix<f64>,
    kind: Factor,
}

impl Whitener {
    /// Cholesky-based whitener. Returns `None` when `s` is not positive definite.
    pub fn cholesky(s: &DMatrix<f64>) -> Option<Self> {
        if !s.is_square() || s.nrows() == 0 {
            return None;
        }
        let chol = Cholesky::new(s.clone())?;
        let factor = chol.unpack();
        if factor.diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return None;
        }
        Some(Whitener {
            factor,
            kind: Factor::Cholesky,
        })
    }

    /// Eigendecomposition-based whitener for PSD inputs. Eigenvalues are
    /// clamped below at `1e-14 · λ_max`.
    pub fn psd(s: &DMatrix<f64>) -> Option<Self> {
        if !s.is_square() || s.nrows() == 0 {
            return None;
        }
        let sym = (s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let max = eig.eigenvalues.max();
        if max.is_nan() || max <= 0.0 || !max.is_finite() {
            return None;
        }
        let floor = 1e-14 * max;
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        let sqrt = DMatrix::from_diagonal(&vals.map(f64::sqrt));
        let inv_sqrt = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
        let q = eig.eigenvectors;
        Some(Whitener {
            factor: &q * sqrt,
            kind: Factor::Eigen {
                inverse: inv_sqrt * q.transpose(),
            },
        })
    }

    /// Cholesky when possible, otherwise the clamped eigendecomposition.
    pub fn new(s: &DMatrix<f64>) -> Option<Self> {
        Self::cholesky(s).or_else(|| Self::psd(s))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn is_triangular(&self) -> bool {
        matches!(self.kind, Factor::Cholesky)
    }

    /// `L⁻¹ z`.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Factor::Cholesky => self
                .factor
                .solve_lower_triangular(z)
                .expect("cholesky factor has a positive diagonal"),
            Factor::Eigen { inverse } => inverse * z,
        }
    }

    /// `L⁻ᵀ g`, the adjoint of [`Whitener::apply`].
    pub fn apply_transpose(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Factor::Cholesky => self
                .factor
                .tr_solve_lower_triangular(g)
                .expect("cholesky factor has a positive diagonal"),
            Factor::Eigen { inverse } => inverse.tr_mul(g),
        }
    }

    /// `L u`, mapping whitened coordinates back.
    pub fn unwhiten(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.factor * u
    }

    pub fn whitened_norm(&self, z: &DVector<f64>) -> f64 {
        self.apply(z).norm()
    }
}

/// Radial saturation `min(1, λ / ‖L⁻¹ z‖) · z`.
pub fn saturate(z: &DVector<f64>, w: &Whitener, lambda: Threshold) -> Result<DVector<f64>> {
    if z.len() != w.dim() {
        return Err(IskfError::DimensionMismatch(format!(
            "saturate: vector has length {}, whitener has dimension {}",
            z.len(),
            w.dim()
        )));
    }
    Ok(saturate_unchecked(z, w, lambda))
}

pub(crate) fn saturate_unchecked(z: &DVector<f64>, w: &Whitener, lambda: Threshold) -> DVector<f64> {
    if lambda.is_infinite() {
        return z.clone();
    }
    let r = w.whitened_norm(z);
    let l = lambda.value();
    if r <= l {
        z.clone()
    } else {
        z * (l / r)
    }
}
