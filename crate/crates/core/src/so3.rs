//! Exact algebraic operations on SO(3), 𝔰𝔬(3) and its dual.
//!
//! Algebra and coalgebra elements are stored as plain `Vector3<f64>` under the
//! usual hat-map identification 𝔰𝔬(3) ≅ ℝ³; skew matrices appear only at API
//! boundaries ([`hat`]/[`vee`]). The pairing between 𝔰𝔬(3) and its dual is the
//! Euclidean dot product, so `Ad*_g` is just multiplication by `gᵀ`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Element of the Lie algebra 𝔰𝔬(3) ≅ ℝ³ (rad/s when it is a body angular velocity).
pub type AlgebraVec = Vector3<f64>;
/// Element of the dual 𝔰𝔬(3)* ≅ ℝ³ (momentum units).
pub type CoalgebraVec = Vector3<f64>;

/// Frobenius tolerance for the orthonormality / determinant checks of [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SkewError {
    #[error("matrix is not skew-symmetric: ||m + m^T|| = {0:.3e}")]
    NonSkewInput(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum RotationError {
    #[error("matrix is not orthonormal: ||r^T r - I||_F = {0:.3e}")]
    NotOrthonormal(f64),
    #[error("matrix has det = {0}, expected +1")]
    WrongDeterminant(f64),
}

/// A rotation matrix, the configuration variable on SO(3).
///
/// Values are only produced by [`Rotation::identity`], retractions, and products
/// of existing rotations, so no re-orthonormalization is performed internally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: Matrix3::identity(),
        }
    }

    /// Wraps a matrix after checking `rᵀr = I` and `det r = +1` to within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, RotationError> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        if ortho > ROTATION_TOL {
            return Err(RotationError::NotOrthonormal(ortho));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(RotationError::WrongDeterminant(det));
        }
        Ok(Rotation { m })
    }

    /// Wraps a matrix that is already known to lie on SO(3) (retraction images,
    /// products of rotations).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// g⁻¹ = gᵀ.
    pub fn inverse(&self) -> Self {
        Rotation {
            m: self.m.transpose(),
        }
    }

    /// Ad_g v, the adjoint action. Under the ℝ³ identification this is `g·v`,
    /// and `hat(Ad_g v) = g · hat(v) · gᵀ`.
    pub fn adjoint(&self, v: &AlgebraVec) -> AlgebraVec {
        self.m * v
    }

    /// Ad*_g p, the coadjoint action: `gᵀ·p`. Dual to [`Rotation::adjoint`]:
    /// ⟨Ad*_g p, v⟩ = ⟨p, Ad_g v⟩.
    pub fn coadjoint(&self, p: &CoalgebraVec) -> CoalgebraVec {
        self.m.transpose() * p
    }

    /// Deviation from orthonormality, `||gᵀg - I||_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.m.transpose() * self.m - Matrix3::identity()).norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation { m: self.m * rhs.m }
    }
}

/// Hat map: `hat(v)·w = v × w`.
#[rustfmt::skip]
pub fn hat(v: &AlgebraVec) -> Matrix3<f64> {
    Matrix3::new(
        0.0,  -v.z,  v.y,
        v.z,   0.0, -v.x,
       -v.y,   v.x,  0.0,
    )
}

/// Inverse of [`hat`]. Errors with [`SkewError::NonSkewInput`] when
/// `||m + mᵀ|| > 1e-10`.
pub fn vee(m: &Matrix3<f64>) -> Result<AlgebraVec, SkewError> {
    let defect = (m + m.transpose()).norm();
    if defect > 1e-10 {
        return Err(SkewError::NonSkewInput(defect));
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Extracts the skew part without checking; used on matrices that are skew by
/// construction (e.g. `R - Rᵀ` up to scale).
pub fn vee_unchecked(m: &Matrix3<f64>) -> AlgebraVec {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// ad_ξ η = ξ × η.
pub fn ad(xi: &AlgebraVec, eta: &AlgebraVec) -> AlgebraVec {
    xi.cross(eta)
}

/// ad*_ξ μ = μ × ξ, dual of [`ad`].
pub fn coad(xi: &AlgebraVec, mu: &CoalgebraVec) -> CoalgebraVec {
    mu.cross(xi)
}

/// Rotation about the x-axis.
pub fn rot_x(theta: f64) -> Rotation {
    let (s, c) = theta.sin_cos();
    #[rustfmt::skip]
    let m = Matrix3::new(
        1.0, 0.0, 0.0,
        0.0,   c,  -s,
        0.0,   s,   c,
    );
    Rotation { m }
}

/// Rotation about the y-axis.
pub fn rot_y(theta: f64) -> Rotation {
    let (s, c) = theta.sin_cos();
    #[rustfmt::skip]
    let m = Matrix3::new(
          c, 0.0,   s,
        0.0, 1.0, 0.0,
         -s, 0.0,   c,
    );
    Rotation { m }
}

/// Rotation about the z-axis.
pub fn rot_z(theta: f64) -> Rotation {
    let (s, c) = theta.sin_cos();
    #[rustfmt::skip]
    let m = Matrix3::new(
          c,  -s, 0.0,
          s,   c, 0.0,
        0.0, 0.0, 1.0,
    );
    Rotation { m }
}

/// Composition `R_z(t3) R_y(t2) R_x(t1)` of Tait-Bryan angles.
pub fn from_tait_bryan(t1: f64, t2: f64, t3: f64) -> Rotation {
    rot_z(t3) * rot_y(t2) * rot_x(t1)
}

/// Tait-Bryan angles `(θ1, θ2, θ3)` of `g = R_z(θ3) R_y(θ2) R_x(θ1)`,
/// plus a gimbal-lock flag. Near `|θ2| = π/2` (within 1e-3 of the lock) the
/// decomposition is degenerate and `θ1`, `θ3` are returned as NaN.
pub fn to_tait_bryan(g: &Rotation) -> (f64, f64, f64, bool) {
    let m = g.matrix();
    let t2 = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    if t2.abs() >= std::f64::consts::FRAC_PI_2 - 1e-3 {
        return (f64::NAN, t2, f64::NAN, true);
    }
    let t1 = m[(2, 1)].atan2(m[(2, 2)]);
    let t3 = m[(1, 0)].atan2(m[(0, 0)]);
    (t1, t2, t3, false)
}
