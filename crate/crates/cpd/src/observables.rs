//! Conserved and adiabatic quantities, velocity projections, and the error
//! metrics reported by the experiment harness.
//!
//! Conservation observables are always evaluated at midpoint pairs
//! `(x_{n+1/2}, v_{n+1/2})`; drift series subtract the first midpoint sample
//! from every later one.

use thiserror::Error;

use crate::fields::{FieldError, FieldModel};
use crate::linalg3::Vec3;

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("momentum requested for model {0:?} without an invariance generator S")]
    MissingGenerator(String),
    #[error("magnetic moment undefined where |B(x)| = 0")]
    ZeroField,
}

/// Energy `H(x, v) = |v|^2/2 + U(x)`.
pub fn energy(model: &FieldModel, x: Vec3, v: Vec3) -> Result<f64, ObservableError> {
    Ok(0.5 * v.dot(v) + model.potential_u(x)?)
}

/// Momentum `M(x, v) = (v + A(x))^T S x`; requires the model's rotation
/// generator.
pub fn momentum(model: &FieldModel, x: Vec3, v: Vec3) -> Result<f64, ObservableError> {
    let s = model
        .s_matrix
        .ok_or_else(|| ObservableError::MissingGenerator(model.label.clone()))?;
    let a = model.total_potential(x)?;
    Ok((v + a).dot(s * x))
}

/// Magnetic moment `I(x, v) = (1/2eps) |v x B(x)|^2 / |B(x)|^3`, the
/// adiabatic invariant. Uses the full field `B(x)`.
pub fn magnetic_moment(model: &FieldModel, x: Vec3, v: Vec3) -> Result<f64, ObservableError> {
    let b = model.total_field(x)?;
    let mag = b.norm();
    if mag == 0.0 {
        return Err(ObservableError::ZeroField);
    }
    let c = v.cross(b);
    Ok(c.dot(c) / (2.0 * model.epsilon * mag * mag * mag))
}

/// Split `v` into components parallel and perpendicular to the unit
/// direction `b0`: `v_par = b0 (b0 . v)`, `v_perp = v - v_par`.
pub fn project_parallel(b0: Vec3, v: Vec3) -> (Vec3, Vec3) {
    let v_par = b0 * b0.dot(v);
    (v_par, v - v_par)
}

/// Relative errors of a numeric state against the exact state, with the
/// exact norms as denominators. Denominators below 1e-12 switch the metric
/// to an absolute difference and set the corresponding flag.
#[derive(Debug, Clone, Copy)]
pub struct ErrorRecord {
    pub error_x: f64,
    pub error_v: f64,
    pub error_vpar: f64,
    pub error_vperp: f64,
    /// Per-metric flags marking degenerate denominators (absolute metric
    /// used): x, v, v_par, v_perp.
    pub absolute: [bool; 4],
}

pub fn relative_errors(
    b0: Vec3,
    numeric_x: Vec3,
    numeric_v: Vec3,
    exact_x: Vec3,
    exact_v: Vec3,
) -> ErrorRecord {
    fn ratio(diff: f64, denom: f64) -> (f64, bool) {
        if denom < 1e-12 {
            (diff, true)
        } else {
            (diff / denom, false)
        }
    }
    let (num_par, num_perp) = project_parallel(b0, numeric_v);
    let (ex_par, ex_perp) = project_parallel(b0, exact_v);
    let (error_x, ax) = ratio((numeric_x - exact_x).norm(), exact_x.norm());
    let (error_v, av) = ratio((numeric_v - exact_v).norm(), exact_v.norm());
    let (error_vpar, ap) = ratio((num_par - ex_par).norm(), ex_par.norm());
    let (error_vperp, aq) = ratio((num_perp - ex_perp).norm(), ex_perp.norm());
    ErrorRecord {
        error_x,
        error_v,
        error_vpar,
        error_vperp,
        absolute: [ax, av, ap, aq],
    }
}

/// One observable sample along a trajectory, taken at a midpoint pair.
#[derive(Debug, Clone, Copy)]
pub struct ObservableSample {
    pub t: f64,
    pub energy: f64,
    pub momentum: Option<f64>,
    pub magnetic_moment: f64,
    pub v_par: Vec3,
    pub v_perp: Vec3,
}

pub fn sample_observables(
    model: &FieldModel,
    t: f64,
    x: Vec3,
    v: Vec3,
) -> Result<ObservableSample, ObservableError> {
    let (v_par, v_perp) = project_parallel(model.b0, v);
    Ok(ObservableSample {
        t,
        energy: energy(model, x, v)?,
        momentum: model
            .s_matrix
            .map(|_| momentum(model, x, v))
            .transpose()?,
        magnetic_moment: magnetic_moment(model, x, v)?,
        v_par,
        v_perp,
    })
}

/// Drift statistics of one scalar series relative to its first sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriftStats {
    pub max: f64,
    pub first_decile_max: f64,
    pub last_decile_max: f64,
}

/// Drift record over a stream of observable samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriftRecord {
    pub energy: DriftStats,
    pub momentum: Option<DriftStats>,
    pub magnetic_moment: DriftStats,
    pub samples: usize,
}

fn drift_stats(values: &[f64]) -> DriftStats {
    if values.is_empty() {
        return DriftStats::default();
    }
    let reference = values[0];
    let n = values.len();
    let decile = (n / 10).max(1);
    let mut stats = DriftStats::default();
    for (i, v) in values.iter().enumerate() {
        let d = (v - reference).abs();
        stats.max = stats.max.max(d);
        if i < decile {
            stats.first_decile_max = stats.first_decile_max.max(d);
        }
        if i >= n - decile {
            stats.last_decile_max = stats.last_decile_max.max(d);
        }
    }
    stats
}

/// Fold a sample stream into per-quantity drifts relative to the first
/// (`t_{1/2}`) sample. An empty stream yields an empty record.
pub fn drift_series(samples: &[ObservableSample]) -> DriftRecord {
    if samples.is_empty() {
        return DriftRecord::default();
    }
    let energies: Vec<f64> = samples.iter().map(|s| s.energy).collect();
    let moments: Vec<f64> = samples.iter().map(|s| s.magnetic_moment).collect();
    let momenta: Option<Vec<f64>> = samples.iter().map(|s| s.momentum).collect();
    DriftRecord {
        energy: drift_stats(&energies),
        momentum: momenta.as_deref().map(drift_stats),
        magnetic_moment: drift_stats(&moments),
        samples: samples.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{problem1, problem2, problem3};
    use crate::integrators::{fvi_run, reference_solve, SamplePolicy, SolverConfig};
    use crate::linalg3::ZERO3;

    const E3: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[test]
    fn energy_rest_at_zero_potential() {
        let m = problem3(1.0).unwrap();
        assert_eq!(energy(&m, ZERO3, ZERO3).unwrap(), 0.0);
    }

    #[test]
    fn energy_problem1_initial() {
        let m = problem1();
        let h = energy(&m, m.x_init, m.v_init).unwrap();
        assert!((h - 0.0353).abs() < 1e-12);
    }

    #[test]
    fn energy_quadratic_kinetic_scaling() {
        let m = problem2();
        let x = Vec3::new(0.4, 0.1, -0.2);
        let v = Vec3::new(0.3, -0.5, 0.7);
        let diff = energy(&m, x, v * 2.0).unwrap() - energy(&m, x, v).unwrap();
        assert!((diff - 1.5 * v.dot(v)).abs() < 1e-14);
    }

    #[test]
    fn momentum_vanishes_at_origin() {
        let m = problem2();
        assert_eq!(momentum(&m, ZERO3, Vec3::new(1.0, 2.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn momentum_problem1_initial() {
        let m = problem1();
        let val = momentum(&m, m.x_init, m.v_init).unwrap();
        assert!((val - (0.09 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn momentum_matches_printed_componentwise_formula() {
        // (v+A)^T S x against the componentwise form
        // (v1 + A1(x)) x2 - (v2 + A2(x)) x1 for problem 2, at quasi-random
        // points
        let m = problem2();
        for i in 1..=20 {
            let s = i as f64 / 20.0;
            let x = Vec3::new(0.9 * s - 0.3, 1.1 * s * s - 0.5, 0.3 - s);
            let v = Vec3::new(s - 0.2, 0.4 * s, 0.7 - 0.5 * s);
            let a = m.total_potential(x).unwrap();
            let printed = (v.x + a.x) * x.y - (v.y + a.y) * x.x;
            assert!((momentum(&m, x, v).unwrap() - printed).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_vanishes_parallel() {
        let m = problem3(0.1).unwrap();
        let x = Vec3::new(0.2, -0.1, 0.4);
        let b = m.total_field(x).unwrap();
        assert!(magnetic_moment(&m, x, b * 0.3).unwrap().abs() < 1e-18);
    }

    #[test]
    fn moment_constant_field_value() {
        // B1 = 0, eps = 0.1: |v x B|^2 = 100, |B|^3 = 1000, prefactor 5
        use crate::fields::{FieldModel, FieldModelSpec};
        use crate::linalg3::Mat3;
        use std::sync::Arc;
        let m = FieldModel::from_spec(FieldModelSpec {
            label: "const".into(),
            epsilon: 0.1,
            b0: E3,
            b1: Arc::new(|_| Ok(ZERO3)),
            a1: Arc::new(|_| Ok(ZERO3)),
            a1_jac: Some(Arc::new(|_| Ok(Mat3::zero()))),
            u: Arc::new(|_| Ok(0.0)),
            f: Arc::new(|_| Ok(ZERO3)),
            s_matrix: None,
            x_init: ZERO3,
            v_init: ZERO3,
            default_t_end: 1.0,
        })
        .unwrap();
        let i = magnetic_moment(&m, ZERO3, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((i - 0.5).abs() < 1e-14);
    }

    #[test]
    fn moment_rotation_invariance() {
        let m = problem3(0.05).unwrap();
        let x = Vec3::new(0.3, 0.2, -1.4);
        let b = m.total_field(x).unwrap();
        let bn = b / b.norm();
        let v = Vec3::new(-0.7, 0.08, 0.2);
        // rotate v about b by 90 degrees: v -> cos v + sin (bn x v) + ...
        let (v_par, v_perp) = project_parallel(bn, v);
        let v_rot = v_par + bn.cross(v_perp);
        let i0 = magnetic_moment(&m, x, v).unwrap();
        let i1 = magnetic_moment(&m, x, v_rot).unwrap();
        assert!((i0 - i1).abs() < 1e-13 * i0.abs().max(1.0));
    }

    #[test]
    fn moment_epsilon_invariance_constant_field() {
        // with B1 = 0, |B| = 1/eps: the 1/(2 eps) prefactor, the 1/eps^2 in
        // |v x B|^2, and the 1/eps^3 in |B|^3 cancel, so I does not depend
        // on eps at all
        use crate::fields::{FieldModel, FieldModelSpec};
        use crate::linalg3::Mat3;
        use std::sync::Arc;
        let make = |eps: f64| {
            FieldModel::from_spec(FieldModelSpec {
                label: "const".into(),
                epsilon: eps,
                b0: E3,
                b1: Arc::new(|_| Ok(ZERO3)),
                a1: Arc::new(|_| Ok(ZERO3)),
                a1_jac: Some(Arc::new(|_| Ok(Mat3::zero()))),
                u: Arc::new(|_| Ok(0.0)),
                f: Arc::new(|_| Ok(ZERO3)),
                s_matrix: None,
                x_init: ZERO3,
                v_init: ZERO3,
                default_t_end: 1.0,
            })
            .unwrap()
        };
        let v = Vec3::new(0.3, -0.4, 0.5);
        let i1 = magnetic_moment(&make(0.1), ZERO3, v).unwrap();
        let i2 = magnetic_moment(&make(0.2), ZERO3, v).unwrap();
        assert!((i1 - i2).abs() < 1e-14);
        // and both equal the closed form |v_perp|^2/2
        let expect = (v.x * v.x + v.y * v.y) / 2.0;
        assert!((i1 - expect).abs() < 1e-14);
    }

    #[test]
    fn projection_cases() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let (par, perp) = project_parallel(E3, v);
        assert_eq!(par, Vec3::new(0.0, 0.0, 3.0));
        assert_eq!(perp, Vec3::new(1.0, 2.0, 0.0));
        let (p2, q2) = project_parallel(E3, par);
        assert_eq!(p2, par);
        assert_eq!(q2, ZERO3);
        let (p3, q3) = project_parallel(E3, perp);
        assert_eq!(p3, ZERO3);
        assert_eq!(q3, perp);
    }

    #[test]
    fn relative_error_cases() {
        let x = Vec3::new(0.5, -0.4, 1.0);
        let v = Vec3::new(0.3, 0.2, -0.6);
        let same = relative_errors(E3, x, v, x, v);
        assert_eq!(same.error_x, 0.0);
        assert_eq!(same.error_v, 0.0);
        let scaled = relative_errors(E3, x * 1.01, v * 1.01, x, v);
        assert!((scaled.error_x - 0.01).abs() < 1e-12);
        assert!((scaled.error_v - 0.01).abs() < 1e-12);
        // perturbing v_perp leaves the parallel error unchanged
        let perturbed = relative_errors(E3, x, v + Vec3::new(0.1, -0.2, 0.0), x, v);
        assert_eq!(perturbed.error_vpar, 0.0);
    }

    #[test]
    fn drift_series_cases() {
        let mk = |vals: &[f64]| -> Vec<ObservableSample> {
            vals.iter()
                .enumerate()
                .map(|(i, &e)| ObservableSample {
                    t: i as f64,
                    energy: e,
                    momentum: None,
                    magnetic_moment: e,
                    v_par: ZERO3,
                    v_perp: ZERO3,
                })
                .collect()
        };
        let constant = drift_series(&mk(&[2.0, 2.0, 2.0]));
        assert_eq!(constant.energy.max, 0.0);
        let varied = drift_series(&mk(&[1.0, 1.1, 0.95]));
        assert!((varied.energy.max - 0.1).abs() < 1e-15);
        assert!((varied.energy.last_decile_max - 0.05).abs() < 1e-15);
        assert_eq!(drift_series(&[]).samples, 0);
    }

    #[test]
    fn fvi_long_run_energy_drift_small() {
        // problem 1, h = 0.01, T = 100: max |e_H| below 1e-3
        let m = problem1();
        let cfg = SolverConfig::new(0.01, 100.0);
        let run = fvi_run(&m, cfg, m.x_init, m.v_init, SamplePolicy::every(10)).unwrap();
        let samples: Vec<ObservableSample> = run
            .records
            .iter()
            .map(|r| sample_observables(&m, r.t_mid, r.x_mid, r.v_mid).unwrap())
            .collect();
        let drift = drift_series(&samples);
        assert!(drift.energy.max < 1e-3, "max |e_H| = {}", drift.energy.max);
    }

    #[test]
    fn reference_conserves_energy_and_momentum_problem1() {
        let m = problem1();
        let tol = 1e-11;
        let sol = reference_solve(&m, m.x_init, m.v_init, 1.0, tol).unwrap();
        let h0 = energy(&m, m.x_init, m.v_init).unwrap();
        let m0 = momentum(&m, m.x_init, m.v_init).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let (x, v) = sol.sample(t);
            assert!((energy(&m, x, v).unwrap() - h0).abs() <= 10.0 * tol * (1.0 + t));
            assert!((momentum(&m, x, v).unwrap() - m0).abs() <= 10.0 * tol * (1.0 + t));
        }
    }

    #[test]
    fn momentum_missing_generator() {
        let m = problem3(0.5).unwrap();
        assert!(matches!(
            momentum(&m, Vec3::new(0.1, 0.2, 0.3), ZERO3),
            Err(ObservableError::MissingGenerator(_))
        ));
    }
}
