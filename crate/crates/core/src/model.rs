//! Linear time-invariant system models and the two benchmark systems.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, IskfError, Result};
use crate::matrix::{self, symmetrize};
use crate::satfun::Whitener;

/// `x_{t+1} = A x_t + w_t`, `y_t = C x_t + v_t` with `w_t = F(·)` and
/// `v_t = G(·)` driven by whitened noise, so `W = F Fᵀ` and `V = G Gᵀ`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    v_whitener: Whitener,
}

impl SystemModel {
    /// Validates dimensions and caches `W`, `V` and the Cholesky factor of `V`.
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(IskfError::DimensionMismatch("A must be non-empty".into()));
        }
        check_dims("A", (n, n), a.shape())?;
        let p = c.nrows();
        if p == 0 {
            return Err(IskfError::DimensionMismatch("C must have at least one row".into()));
        }
        check_dims("C", (p, n), c.shape())?;
        if f.nrows() != n || f.ncols() == 0 {
            return Err(IskfError::DimensionMismatch(format!(
                "F: expected {n} rows and at least one column, found {}x{}",
                f.nrows(),
                f.ncols()
            )));
        }
        check_dims("G", (p, p), g.shape())?;

        let w = symmetrize(&f * f.transpose());
        let v = symmetrize(&g * g.transpose());
        let v_whitener = Whitener::cholesky(&v).ok_or(IskfError::SingularMeasurementNoise)?;
        Ok(SystemModel {
            a,
            c,
            f,
            g,
            w,
            v,
            v_whitener,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.f.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Process noise covariance `F Fᵀ`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Measurement noise covariance `G Gᵀ`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn v_whitener(&self) -> &Whitener {
        &self.v_whitener
    }
}

/// Same as [`SystemModel::new`].
pub fn build_model(
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
) -> Result<SystemModel> {
    SystemModel::new(a, c, f, g)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRepr {
    #[serde(rename = "A", with = "matrix::nested")]
    a: DMatrix<f64>,
    #[serde(rename = "C", with = "matrix::nested")]
    c: DMatrix<f64>,
    #[serde(rename = "F", with = "matrix::nested")]
    f: DMatrix<f64>,
    #[serde(rename = "G", with = "matrix::nested")]
    g: DMatrix<f64>,
}

impl PartialEq for SystemModel {
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a && self.c == other.c && self.f == other.f && self.g == other.g
    }
}

impl Serialize for SystemModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelRepr {
            a: self.a.clone(),
            c: self.c.clone(),
            f: self.f.clone(),
            g: self.g.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SystemModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ModelRepr::deserialize(d)?;
        SystemModel::new(r.a, r.c, r.f, r.g).map_err(serde::de::Error::custom)
    }
}

/// Two-branch Gaussian mixture for process and measurement noise: with
/// probability `p_*` a step is an outlier and its noise covariance is
/// multiplied by `scale_*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub p_process: f64,
    pub scale_process: f64,
    pub p_meas: f64,
    pub scale_meas: f64,
}

impl OutlierSpec {
    pub fn new(p_process: f64, scale_process: f64, p_meas: f64, scale_meas: f64) -> Result<Self> {
        let spec = OutlierSpec {
            p_process,
            scale_process,
            p_meas,
            scale_meas,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Pure Gaussian noise.
    pub fn gaussian() -> Self {
        OutlierSpec {
            p_process: 0.0,
            scale_process: 1.0,
            p_meas: 0.0,
            scale_meas: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_process", self.p_process), ("p_meas", self.p_meas)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(IskfError::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        for (name, s) in [("scale_process", self.scale_process), ("scale_meas", self.scale_meas)] {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(IskfError::InvalidParameter(format!(
                    "{name} must be finite and >= 1, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Keeps the branch probabilities (and therefore the random stream
    /// consumed by the simulator) but sets both outlier scales to one, so a
    /// simulation with the same seed yields the same trajectory with the
    /// outliers removed.
    pub fn without_outliers(&self) -> Self {
        OutlierSpec {
            scale_process: 1.0,
            scale_meas: 1.0,
            ..*self
        }
    }
}

/// Planar unit-mass vehicle with drag, position measurements and a random
/// applied force. State is `(position, velocity)` in two dimensions.
pub fn vehicle_model(h: f64, gamma: f64) -> Result<(SystemModel, OutlierSpec)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(IskfError::InvalidParameter(format!("time step must be positive, got {h}")));
    }
    if !(gamma >= 0.0 && gamma * h < 1.0) {
        return Err(IskfError::InvalidParameter(format!(
            "drag must satisfy 0 <= gamma*h < 1, got gamma={gamma}, h={h}"
        )));
    }
    let gh = gamma * h;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, (1.0 - gh / 2.0) * h, 0.0,
            0.0, 1.0, 0.0, (1.0 - gh / 2.0) * h,
            0.0, 0.0, 1.0 - gh, 0.0,
            0.0, 0.0, 0.0, 1.0 - gh,
        ],
    );
    let b = vehicle_input_matrix(h);
    let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let f = b * 10f64.sqrt();
    let g = DMatrix::identity(2, 2) * 5f64.sqrt();
    // force N(0,10I) vs N(0,100I); noise N(0,5I) vs N(0,500I)
    let spec = OutlierSpec::new(0.1, 10.0, 0.1, 100.0)?;
    Ok((SystemModel::new(a, c, f, g)?, spec))
}

/// Input matrix `B` of the vehicle model.
pub fn vehicle_input_matrix(h: f64) -> DMatrix<f64> {
    let h2 = h * h / 2.0;
    DMatrix::from_row_slice(4, 2, &[h2, 0.0, 0.0, h2, h, 0.0, 0.0, h])
}

/// Single linearized CSTR: `(Ã, B̃, C̃)`.
pub fn cstr_reactor(h: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let h2 = h * h;
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[
            1.0 - 5.0 * h + 4.33 * h2,
            -0.34 * h + 0.38 * h2,
            47.68 * h - 52.81 * h2,
            1.0 + 2.79 * h - 4.29 * h2,
        ],
    );
    let b = DMatrix::from_row_slice(
        2,
        2,
        &[h - 2.5 * h2, -0.05 * h2, 23.84 * h2, 0.3 * h + 0.42 * h2],
    );
    let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    (a, b, c)
}

/// Cascade of three CSTRs, each reactor's state driving the next.
pub fn cstr_model(h: f64) -> Result<(SystemModel, OutlierSpec)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(IskfError::InvalidParameter(format!("time step must be positive, got {h}")));
    }
    let (at, bt, ct) = cstr_reactor(h);
    let mut a = DMatrix::zeros(6, 6);
    let mut c = DMatrix::zeros(3, 6);
    let mut f = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&at);
        if i > 0 {
            a.view_mut((2 * i, 2 * (i - 1)), (2, 2)).copy_from(&bt);
        }
        c.view_mut((i, 2 * i), (1, 2)).copy_from(&ct);
        f.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&(&bt / 10f64.sqrt()));
    }
    let g = DMatrix::identity(3, 3);
    let spec = OutlierSpec::new(0.1, 100.0, 0.1, 100.0)?;
    Ok((SystemModel::new(a, c, f, g)?, spec))
}

/// Result of the PBH tests. Advisory only.
#[derive(Debug, Clone, Serialize)]
pub struct ModelDiagnostics {
    pub detectable: bool,
    pub stabilizable: bool,
    /// Eigenvalues of `A` with modulus `>= 1`, as `(re, im)`.
    pub marginal_or_unstable_modes: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

const PBH_RANK_TOL: f64 = 1e-9;

fn numerical_rank(m: DMatrix<Complex<f64>>) -> usize {
    let sv = m.singular_values();
    let max = sv.max();
    if max.is_nan() || max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > PBH_RANK_TOL * max).count()
}

/// PBH rank tests of `(A, C)` detectability and `(A, W^{1/2})`
/// stabilizability at every eigenvalue of `A` on or outside the unit circle.
pub fn validate_model(model: &SystemModel) -> ModelDiagnostics {
    let n = model.n();
    let a = model.a().map(|x| Complex::new(x, 0.0));
    let c = model.c().map(|x| Complex::new(x, 0.0));
    // range(F) = range(W^{1/2})
    let f = model.f().map(|x| Complex::new(x, 0.0));
    let eigs = model.a().complex_eigenvalues();

    let mut detectable = true;
    let mut stabilizable = true;
    let mut modes = Vec::new();
    let mut warnings = Vec::new();
    for lam in eigs.iter().copied() {
        if lam.norm() < 1.0 - 1e-9 {
            continue;
        }
        modes.push((lam.re, lam.im));
        let shifted = DMatrix::<Complex<f64>>::identity(n, n) * lam - &a;

        let mut obs = DMatrix::zeros(n + model.p(), n);
        obs.view_mut((0, 0), (n, n)).copy_from(&shifted);
        obs.view_mut((n, 0), (model.p(), n)).copy_from(&c);
        if numerical_rank(obs) < n {
            detectable = false;
            warnings.push(format!(
                "mode {:.6}{:+.6}i is unobservable: (A, C) is not detectable",
                lam.re, lam.im
            ));
        }

        let mut ctrb = DMatrix::zeros(n, n + model.m());
        ctrb.view_mut((0, 0), (n, n)).copy_from(&shifted);
        ctrb.view_mut((0, n), (n, model.m())).copy_from(&f);
        if numerical_rank(ctrb) < n {
            stabilizable = false;
            warnings.push(format!(
                "mode {:.6}{:+.6}i is not excited by process noise: (A, W^1/2) is not stabilizable",
                lam.re, lam.im
            ));
        }
    }
    ModelDiagnostics {
        detectable,
        stabilizable,
        marginal_or_unstable_modes: modes,
        warnings,
    }
}
