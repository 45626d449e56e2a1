//! Seeded simulation of trajectories with mixture (outlier) noise.
//!
//! The random source is ChaCha8 seeded from a `u64`. Within each step the
//! stream is consumed in a fixed order:
//!
//! 1. one uniform on `[0, 1)` selecting the process-noise branch,
//! 2. `m` standard normals for the process noise,
//! 3. one uniform selecting the measurement-noise branch,
//! 4. `p` standard normals for the measurement noise.
//!
//! Standard normals come from `rand_distr::StandardNormal` (ziggurat). The
//! draws do not depend on the outlier scales, so changing only the scales
//! reuses the exact same random numbers. Prefix stability across different
//! `T` is not promised.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{IskfError, Result};
use crate::model::{OutlierSpec, SystemModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x₀ … x_T`.
    pub states: Vec<DVector<f64>>,
    /// `y₁ … y_T`.
    pub measurements: Vec<DVector<f64>>,
    /// Whether `w_{t−1}` (driving `x_t`) was drawn from the outlier branch.
    pub process_outlier_flags: Vec<bool>,
    /// Whether `v_t` was drawn from the outlier branch.
    pub meas_outlier_flags: Vec<bool>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of measurements `T`.
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.measurements.len();
        if t == 0 {
            return Err(IskfError::EmptyInput);
        }
        if self.states.len() != t + 1
            || self.process_outlier_flags.len() != t
            || self.meas_outlier_flags.len() != t
        {
            return Err(IskfError::DimensionMismatch(format!(
                "trajectory has {} states, {t} measurements, {} and {} flags",
                self.states.len(),
                self.process_outlier_flags.len(),
                self.meas_outlier_flags.len()
            )));
        }
        Ok(())
    }
}

fn normals(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Simulates `T` steps from `x0` (zero when `None`).
pub fn simulate(
    model: &SystemModel,
    spec: &OutlierSpec,
    steps: usize,
    seed: u64,
    x0: Option<DVector<f64>>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(IskfError::InvalidParameter("T must be at least 1".into()));
    }
    spec.validate()?;
    let x0 = x0.unwrap_or_else(|| DVector::zeros(model.n()));
    if x0.len() != model.n() {
        return Err(IskfError::DimensionMismatch(format!(
            "x0 has length {}, model has n = {}",
            x0.len(),
            model.n()
        )));
    }
    let proc_gain = spec.scale_process.sqrt();
    let meas_gain = spec.scale_meas.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut proc_flags = Vec::with_capacity(steps);
    let mut meas_flags = Vec::with_capacity(steps);
    states.push(x0);
    for _ in 0..steps {
        let proc_outlier = rng.random::<f64>() < spec.p_process;
        let mut w = model.f() * normals(&mut rng, model.m());
        if proc_outlier {
            w *= proc_gain;
        }
        let meas_outlier = rng.random::<f64>() < spec.p_meas;
        let mut v = model.g() * normals(&mut rng, model.p());
        if meas_outlier {
            v *= meas_gain;
        }
        let x = model.a() * states.last().unwrap() + w;
        measurements.push(model.c() * &x + v);
        states.push(x);
        proc_flags.push(proc_outlier);
        meas_flags.push(meas_outlier);
    }
    Ok(Trajectory {
        states,
        measurements,
        process_outlier_flags: proc_flags,
        meas_outlier_flags: meas_flags,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, vehicle_model};
    use nalgebra::{dvector, DMatrix};

    fn empirical_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
        let d = samples[0].len();
        let mut acc = DMatrix::zeros(d, d);
        for s in samples {
            acc += s * s.transpose();
        }
        acc / samples.len() as f64
    }

    #[test]
    fn noise_free_rollout() {
        // G = 0 is rejected by the model, so use a G whose noise is far below
        // the rounding of y.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let g = DMatrix::from_element(1, 1, 1e-150);
        let m = build_model(a.clone(), c.clone(), DMatrix::zeros(2, 1), g).unwrap();
        let x0 = dvector![8.0, 4.0];
        let traj = simulate(&m, &OutlierSpec::new(0.5, 4.0, 0.5, 4.0).unwrap(), 20, 3, Some(x0.clone())).unwrap();
        let mut x = x0;
        for t in 0..20 {
            x = &a * x;
            assert_eq!(traj.states[t + 1], x);
            assert_eq!(traj.measurements[t], &c * &x);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, spec) = vehicle_model(0.05, 0.05).unwrap();
        let a = simulate(&m, &spec, 200, 7, None).unwrap();
        let b = simulate(&m, &spec, 200, 7, None).unwrap();
        assert_eq!(a, b);
        let c = simulate(&m, &spec, 200, 8, None).unwrap();
        assert_ne!(a.measurements, c.measurements);
        a.validate().unwrap();
        assert_eq!(a.states.len(), 201);
    }

    #[test]
    fn scales_do_not_change_stream() {
        let (m, spec) = vehicle_model(0.05, 0.05).unwrap();
        let a = simulate(&m, &spec, 300, 11, None).unwrap();
        let clean = simulate(&m, &spec.without_outliers(), 300, 11, None).unwrap();
        assert_eq!(a.meas_outlier_flags, clean.meas_outlier_flags);
        // measurement noise on inlier steps is identical
        for t in 0..300 {
            let va = &a.measurements[t] - m.c() * &a.states[t + 1];
            let vc = &clean.measurements[t] - m.c() * &clean.states[t + 1];
            if !a.meas_outlier_flags[t] {
                assert!((va - vc).amax() < 1e-9);
            } else {
                assert!((va - vc * 10.0).amax() < 1e-9);
            }
        }
        // probability zero, scale one is the same as the Gaussian spec
        let g1 = simulate(&m, &OutlierSpec::gaussian(), 50, 2, None).unwrap();
        let g2 = simulate(&m, &OutlierSpec::new(0.0, 10.0, 0.0, 100.0).unwrap(), 50, 2, None).unwrap();
        assert_eq!(g1.measurements, g2.measurements);
    }

    #[test]
    fn outlier_flag_frequency() {
        let (m, spec) = vehicle_model(0.05, 0.05).unwrap();
        let traj = simulate(&m, &spec, 100_000, 5, None).unwrap();
        for flags in [&traj.process_outlier_flags, &traj.meas_outlier_flags] {
            let freq = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
            assert!((0.094..=0.106).contains(&freq), "frequency {freq}");
        }
    }

    #[test]
    fn empirical_covariances() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let g = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, -0.3, 0.7]);
        let m = build_model(a, DMatrix::identity(2, 2), f, g).unwrap();

        let traj = simulate(&m, &OutlierSpec::gaussian(), 100_000, 9, None).unwrap();
        let w: Vec<_> = (0..traj.len()).map(|t| &traj.states[t + 1] - m.a() * &traj.states[t]).collect();
        let v: Vec<_> = (0..traj.len()).map(|t| &traj.measurements[t] - m.c() * &traj.states[t + 1]).collect();
        let close = |emp: &DMatrix<f64>, exact: &DMatrix<f64>| (emp - exact).amax() / exact.amax() < 0.05;
        assert!(close(&empirical_cov(&w), m.w()));
        assert!(close(&empirical_cov(&v), m.v()));

        // residual covariance of flagged measurement outliers
        let spec = OutlierSpec::new(0.5, 1.0, 0.2, 100.0).unwrap();
        let traj = simulate(&m, &spec, 60_000, 10, None).unwrap();
        let flagged: Vec<_> = (0..traj.len())
            .filter(|&t| traj.meas_outlier_flags[t])
            .map(|t| &traj.measurements[t] - m.c() * &traj.states[t + 1])
            .collect();
        assert!(flagged.len() > 10_000);
        let emp = empirical_cov(&flagged);
        assert!((&emp - m.v() * 100.0).amax() / (m.v() * 100.0).amax() < 0.1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (m, spec) = vehicle_model(0.05, 0.05).unwrap();
        assert!(simulate(&m, &spec, 0, 1, None).is_err());
        assert!(simulate(&m, &spec, 5, 1, Some(dvector![1.0])).is_err());
    }
}
