//! Electromagnetic problem definitions.
//!
//! A [`FieldModel`] carries the field-strength parameter epsilon, the constant
//! unit direction `b0` of the strong field component, the smooth remainder
//! fields `B1`, `A1`, the Jacobian of `A1`, the scalar potential `U` and the
//! electric field `F = -grad U`. The composite quantities consumed by the
//! integrators are
//!
//! * total field     `B(x)  = b0/eps + B1(x)`
//! * total potential `A(x)  = (1/(2 eps)) hat(b0) x + A1(x)`
//! * its Jacobian    `A'(x) = (1/(2 eps)) hat(b0) + A1'(x)`
//!
//! Four built-in problems are shipped, selectable by label `p1`..`p4`.

use std::sync::Arc;

use thiserror::Error;

use crate::linalg3::{hat, Mat3, Vec3};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field evaluation outside domain at ({x:?}): {reason}")]
    Domain { x: Vec3, reason: &'static str },
    #[error("invalid field model: {0}")]
    InvalidModel(String),
    #[error("unknown problem label {0:?} (expected p1..p4)")]
    UnknownLabel(String),
}

pub type ScalarField = Arc<dyn Fn(Vec3) -> Result<f64, FieldError> + Send + Sync>;
pub type VectorField = Arc<dyn Fn(Vec3) -> Result<Vec3, FieldError> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(Vec3) -> Result<Mat3, FieldError> + Send + Sync>;

/// Immutable problem definition; shareable across concurrent runs.
pub struct FieldModel {
    pub label: String,
    pub epsilon: f64,
    pub b0: Vec3,
    b1: VectorField,
    a1: VectorField,
    a1_jac: MatrixField,
    u: ScalarField,
    f: VectorField,
    /// Rotation generator for the momentum invariant `(v+A)^T S x`, present
    /// only when the potentials have the matching rotational invariance.
    pub s_matrix: Option<Mat3>,
    /// Initial state and default horizon bundled with the built-in problems.
    pub x_init: Vec3,
    pub v_init: Vec3,
    pub default_t_end: f64,
}

pub struct FieldModelSpec {
    pub label: String,
    pub epsilon: f64,
    pub b0: Vec3,
    pub b1: VectorField,
    pub a1: VectorField,
    /// Analytic Jacobian of `a1`. When absent a central-difference fallback
    /// (step `1e-6 * (1+|x|)`) is used, with a corresponding accuracy loss.
    pub a1_jac: Option<MatrixField>,
    pub u: ScalarField,
    pub f: VectorField,
    pub s_matrix: Option<Mat3>,
    pub x_init: Vec3,
    pub v_init: Vec3,
    pub default_t_end: f64,
}

impl FieldModel {
    pub fn from_spec(spec: FieldModelSpec) -> Result<FieldModel, FieldError> {
        if !(spec.epsilon > 0.0) {
            return Err(FieldError::InvalidModel(format!(
                "epsilon must be positive, got {}",
                spec.epsilon
            )));
        }
        if (spec.b0.norm() - 1.0).abs() > 1e-12 {
            return Err(FieldError::InvalidModel(format!(
                "|b0| must be 1, got {}",
                spec.b0.norm()
            )));
        }
        if let Some(s) = spec.s_matrix {
            if (s + s.transpose()).max_abs_entry() > 1e-14 {
                return Err(FieldError::InvalidModel(
                    "s_matrix must be skew-symmetric".into(),
                ));
            }
        }
        let a1_jac = match spec.a1_jac {
            Some(j) => j,
            None => {
                let a1 = spec.a1.clone();
                Arc::new(move |x: Vec3| central_difference_jacobian(a1.as_ref(), x))
                    as MatrixField
            }
        };
        Ok(FieldModel {
            label: spec.label,
            epsilon: spec.epsilon,
            b0: spec.b0,
            b1: spec.b1,
            a1: spec.a1,
            a1_jac,
            u: spec.u,
            f: spec.f,
            s_matrix: spec.s_matrix,
            x_init: spec.x_init,
            v_init: spec.v_init,
            default_t_end: spec.default_t_end,
        })
    }

    pub fn b1(&self, x: Vec3) -> Result<Vec3, FieldError> {
        (self.b1)(x)
    }

    pub fn a1(&self, x: Vec3) -> Result<Vec3, FieldError> {
        (self.a1)(x)
    }

    pub fn a1_jacobian(&self, x: Vec3) -> Result<Mat3, FieldError> {
        (self.a1_jac)(x)
    }

    pub fn potential_u(&self, x: Vec3) -> Result<f64, FieldError> {
        (self.u)(x)
    }

    pub fn electric_field(&self, x: Vec3) -> Result<Vec3, FieldError> {
        (self.f)(x)
    }

    /// Total vector potential `A(x) = (1/(2 eps)) hat(b0) x + A1(x)`.
    pub fn total_potential(&self, x: Vec3) -> Result<Vec3, FieldError> {
        Ok(hat(self.b0) * x * (0.5 / self.epsilon) + self.a1(x)?)
    }

    /// Jacobian `A'(x) = (1/(2 eps)) hat(b0) + A1'(x)` with entries
    /// `d_j A_i`.
    pub fn total_potential_jacobian(&self, x: Vec3) -> Result<Mat3, FieldError> {
        Ok(hat(self.b0) * (0.5 / self.epsilon) + self.a1_jacobian(x)?)
    }

    /// Total magnetic field `B(x) = b0/eps + B1(x)`.
    pub fn total_field(&self, x: Vec3) -> Result<Vec3, FieldError> {
        Ok(self.b0 / self.epsilon + self.b1(x)?)
    }

    /// Look up a built-in problem by label. `epsilon` is only consulted for
    /// `p3` and `p4`; `p1` and `p2` fix `epsilon = 1`.
    pub fn by_label(label: &str, epsilon: f64) -> Result<FieldModel, FieldError> {
        match label {
            "p1" => Ok(problem1()),
            "p2" => Ok(problem2()),
            "p3" => problem3(epsilon),
            "p4" => problem4(epsilon),
            other => Err(FieldError::UnknownLabel(other.to_string())),
        }
    }
}

fn central_difference_jacobian(
    a1: &(dyn Fn(Vec3) -> Result<Vec3, FieldError> + Send + Sync),
    x: Vec3,
) -> Result<Mat3, FieldError> {
    let step = 1e-6 * (1.0 + x.norm());
    let mut rows = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut dx = Vec3::default();
        match j {
            0 => dx.x = step,
            1 => dx.y = step,
            _ => dx.z = step,
        }
        let plus = a1(x + dx)?;
        let minus = a1(x - dx)?;
        let col = (plus - minus) / (2.0 * step);
        rows[0][j] = col.x;
        rows[1][j] = col.y;
        rows[2][j] = col.z;
    }
    Ok(Mat3::new(rows))
}

/// Generator of rotations about the x3-axis: `S x = (x2, -x1, 0)`.
fn rotation_generator_z() -> Mat3 {
    Mat3::new([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
}

const AXIS_EPS: f64 = 1e-12;

fn cylinder_radius(x: Vec3) -> Result<f64, FieldError> {
    let r2 = x.x * x.x + x.y * x.y;
    if r2 < AXIS_EPS {
        return Err(FieldError::Domain {
            x,
            reason: "potential is singular on the x3-axis",
        });
    }
    Ok(r2.sqrt())
}

/// Moderate field (`eps = 1`) with the rotational invariance that makes the
/// momentum an exact invariant.
///
/// `B(x) = (0, 0, r)` with `r = sqrt(x1^2 + x2^2)`,
/// `A(x) = (-x2 r/3, x1 r/3, 0)`, `U(x) = 1/(100 r)`.
pub fn problem1() -> FieldModel {
    // A1 = A - (1/2) hat(e3) x = (-x2 g, x1 g, 0) with g = r/3 - 1/2
    let a1: VectorField = Arc::new(|x: Vec3| {
        let r = cylinder_radius(x)?;
        let g = r / 3.0 - 0.5;
        Ok(Vec3::new(-x.y * g, x.x * g, 0.0))
    });
    let a1_jac: MatrixField = Arc::new(|x: Vec3| {
        let r = cylinder_radius(x)?;
        let g = r / 3.0 - 0.5;
        Ok(Mat3::new([
            [-x.x * x.y / (3.0 * r), -g - x.y * x.y / (3.0 * r), 0.0],
            [g + x.x * x.x / (3.0 * r), x.x * x.y / (3.0 * r), 0.0],
            [0.0, 0.0, 0.0],
        ]))
    });
    let b1: VectorField = Arc::new(|x: Vec3| {
        let r = cylinder_radius(x)?;
        Ok(Vec3::new(0.0, 0.0, r - 1.0))
    });
    let u: ScalarField = Arc::new(|x: Vec3| Ok(0.01 / cylinder_radius(x)?));
    let f: VectorField = Arc::new(|x: Vec3| {
        let r = cylinder_radius(x)?;
        let scale = 0.01 / (r * r * r);
        Ok(Vec3::new(x.x * scale, x.y * scale, 0.0))
    });
    FieldModel::from_spec(FieldModelSpec {
        label: "p1".into(),
        epsilon: 1.0,
        b0: Vec3::new(0.0, 0.0, 1.0),
        b1,
        a1,
        a1_jac: Some(a1_jac),
        u,
        f,
        s_matrix: Some(rotation_generator_z()),
        x_init: Vec3::new(0.0, 1.0, 0.1),
        v_init: Vec3::new(0.09, 0.05, 0.2),
        default_t_end: 1.0,
    })
    .expect("problem1 definition is valid")
}

/// Moderate field (`eps = 1`) without the rotational invariance; the
/// momentum drifts over long times.
///
/// `A(x) = (x3^2 - x2^2 - x2, x3^2 - x1^2 + x1, x2^2 - x1^2)/2`,
/// `B(x) = (x2 - x3, x1 + x3, x2 - x1 + 1)`,
/// `U(x) = x1^2 + 2 x2^2 + 3 x3^2 - x1`.
pub fn problem2() -> FieldModel {
    let a1: VectorField = Arc::new(|x: Vec3| {
        Ok(Vec3::new(
            0.5 * (x.z * x.z - x.y * x.y),
            0.5 * (x.z * x.z - x.x * x.x),
            0.5 * (x.y * x.y - x.x * x.x),
        ))
    });
    let a1_jac: MatrixField = Arc::new(|x: Vec3| {
        Ok(Mat3::new([
            [0.0, -x.y, x.z],
            [-x.x, 0.0, x.z],
            [-x.x, x.y, 0.0],
        ]))
    });
    let b1: VectorField = Arc::new(|x: Vec3| Ok(Vec3::new(x.y - x.z, x.x + x.z, x.y - x.x)));
    let u: ScalarField = Arc::new(|x: Vec3| {
        Ok(x.x * x.x + 2.0 * x.y * x.y + 3.0 * x.z * x.z - x.x)
    });
    let f: VectorField =
        Arc::new(|x: Vec3| Ok(Vec3::new(1.0 - 2.0 * x.x, -4.0 * x.y, -6.0 * x.z)));
    FieldModel::from_spec(FieldModelSpec {
        label: "p2".into(),
        epsilon: 1.0,
        b0: Vec3::new(0.0, 0.0, 1.0),
        b1,
        a1,
        a1_jac: Some(a1_jac),
        u,
        f,
        s_matrix: Some(rotation_generator_z()),
        x_init: Vec3::new(0.0, 0.1, 0.5),
        v_init: Vec3::new(0.02, 0.1, 0.7),
        default_t_end: 1.0,
    })
    .expect("problem2 definition is valid")
}

/// Strong field with `b0 = e3` and `A1(x) = x1 x2 x3 (1,1,1)`,
/// `U(x) = |x|^2 / 2`. `epsilon` is a free parameter.
pub fn problem3(epsilon: f64) -> Result<FieldModel, FieldError> {
    let a1: VectorField = Arc::new(|x: Vec3| {
        let p = x.x * x.y * x.z;
        Ok(Vec3::new(p, p, p))
    });
    let a1_jac: MatrixField = Arc::new(|x: Vec3| {
        let row = [x.y * x.z, x.x * x.z, x.x * x.y];
        Ok(Mat3::new([row, row, row]))
    });
    // B1 = curl A1
    let b1: VectorField = Arc::new(|x: Vec3| {
        Ok(Vec3::new(
            x.x * (x.z - x.y),
            x.y * (x.x - x.z),
            x.z * (x.y - x.x),
        ))
    });
    let u: ScalarField = Arc::new(|x: Vec3| Ok(0.5 * x.dot(x)));
    let f: VectorField = Arc::new(|x: Vec3| Ok(-x));
    FieldModel::from_spec(FieldModelSpec {
        label: "p3".into(),
        epsilon,
        b0: Vec3::new(0.0, 0.0, 1.0),
        b1,
        a1,
        a1_jac: Some(a1_jac),
        u,
        f,
        s_matrix: None,
        x_init: Vec3::new(0.3, 0.2, -1.4),
        v_init: Vec3::new(-0.7, 0.08, 0.2),
        default_t_end: std::f64::consts::FRAC_PI_2,
    })
}

/// Maximal ordering scaling `B(x) = Bhat(eps x)/eps` with
/// `Bhat(y) = (1 + y2/s(y), 1 - y1/s(y), 0)`, `s(y) = sqrt(1 + |y|^2)`,
/// split about the initial position `x_init`:
///
/// `B0 = Bhat(eps x_init)`, `B1(x) = (Bhat(eps x) - Bhat(eps x_init))/eps`.
///
/// Since `|B0| != 1`, the stored direction is `b0 = B0/|B0|` and the stored
/// parameter is `eps/|B0|`, so that `b0/eps_stored + B1` reproduces `B`
/// exactly.
///
/// `B1` splits into the constant field `w = (-c2, c1, 0)` with
/// `c_i = x_init_i / s(eps x_init)` plus `(x2, -x1, 0)/s(eps x)`; a vector
/// potential is
///
/// `A1(x) = (1/2) w x x + (0, 0, |x|^2 / (1 + s(eps x)))`,
///
/// where `|x|^2/(1+s)` is the cancellation-free form of
/// `(s - 1)/eps^2` whose gradient is `x/s`. The curl identity
/// `curl A1 = B1` is exercised by the finite-difference consistency tests.
pub fn problem4(epsilon: f64) -> Result<FieldModel, FieldError> {
    if !(epsilon > 0.0) {
        return Err(FieldError::InvalidModel(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let x_init = Vec3::new(0.1, 0.03, -0.04);
    let v_init = Vec3::new(-0.2, 0.01, 0.7);
    let s0 = (1.0 + epsilon * epsilon * x_init.dot(x_init)).sqrt();
    let c1 = x_init.x / s0;
    let c2 = x_init.y / s0;
    let b0_raw = Vec3::new(1.0 + epsilon * c2, 1.0 - epsilon * c1, 0.0);
    let beta = b0_raw.norm();
    let b0 = b0_raw / beta;
    let eps_stored = epsilon / beta;

    let s_at = move |x: Vec3| (1.0 + epsilon * epsilon * x.dot(x)).sqrt();

    let b1: VectorField = Arc::new(move |x: Vec3| {
        let s = s_at(x);
        Ok(Vec3::new(x.y / s - c2, c1 - x.x / s, 0.0))
    });
    let a1: VectorField = Arc::new(move |x: Vec3| {
        let s = s_at(x);
        let g = x.dot(x) / (1.0 + s);
        Ok(Vec3::new(
            0.5 * c1 * x.z,
            0.5 * c2 * x.z,
            g - 0.5 * (c1 * x.x + c2 * x.y),
        ))
    });
    let a1_jac: MatrixField = Arc::new(move |x: Vec3| {
        let s = s_at(x);
        Ok(Mat3::new([
            [0.0, 0.0, 0.5 * c1],
            [0.0, 0.0, 0.5 * c2],
            [x.x / s - 0.5 * c1, x.y / s - 0.5 * c2, x.z / s],
        ]))
    });
    let u: ScalarField = Arc::new(|x: Vec3| {
        Ok(x.x * x.x + 2.0 * x.y * x.y + 3.0 * x.z * x.z - x.x)
    });
    let f: VectorField =
        Arc::new(|x: Vec3| Ok(Vec3::new(1.0 - 2.0 * x.x, -4.0 * x.y, -6.0 * x.z)));
    FieldModel::from_spec(FieldModelSpec {
        label: "p4".into(),
        epsilon: eps_stored,
        b0,
        b1,
        a1,
        a1_jac: Some(a1_jac),
        u,
        f,
        s_matrix: None,
        x_init,
        v_init,
        default_t_end: std::f64::consts::FRAC_PI_2,
    })
}
