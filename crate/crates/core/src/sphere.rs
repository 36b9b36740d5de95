//! The homogeneous-space structure of S² under SO(3).
//!
//! The origin is fixed to the north pole x₀ = (0,0,1), so the isotropy algebra
//! 𝔥 is spanned by x₀, the reduced constraint is φ(η) = η₃, and 𝔪 (the
//! velocities that actually move points on the sphere) is the plane η₃ = 0.

use crate::so3::{AlgebraVec, Rotation};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SphereError {
    #[error("vector has norm {0}, expected a unit vector")]
    NotUnit(f64),
}

/// A point on the unit sphere S² ⊂ ℝ³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint {
    x: Vector3<f64>,
}

impl SpherePoint {
    pub fn new(x: Vector3<f64>) -> Result<Self, SphereError> {
        let n = x.norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(SphereError::NotUnit(n));
        }
        Ok(SpherePoint { x })
    }

    /// Normalizes a nearby vector onto the sphere; errors if the input is more
    /// than 1e-3 from unit length.
    pub fn project(x: Vector3<f64>) -> Result<Self, SphereError> {
        let n = x.norm();
        if (n - 1.0).abs() > 1e-3 {
            return Err(SphereError::NotUnit(n));
        }
        Ok(SpherePoint { x: x / n })
    }

    pub fn coords(&self) -> &Vector3<f64> {
        &self.x
    }
}

/// The fixed origin x₀ = (0,0,1), the north pole.
pub fn origin() -> SpherePoint {
    SpherePoint {
        x: Vector3::z(),
    }
}

/// σ(g, x) = g·x, the transitive action of SO(3).
pub fn act(g: &Rotation, x: &SpherePoint) -> SpherePoint {
    SpherePoint {
        x: g.matrix() * x.x,
    }
}

/// Infinitesimal action at x: D₁σ_{(e,x)}(η) = η × x, tangent to the sphere.
pub fn inf_action(eta: &AlgebraVec, x: &SpherePoint) -> Vector3<f64> {
    eta.cross(&x.x)
}

/// The reduced nonholonomic constraint φ(η) = η·x₀ = η₃.
pub fn phi(eta: &AlgebraVec) -> f64 {
    eta.z
}

/// Constant gradient of φ, namely x₀.
pub fn phi_gradient() -> Vector3<f64> {
    Vector3::z()
}

/// Orthogonal projection onto 𝔪 = {η : η·x₀ = 0}.
pub fn project_m(eta: &AlgebraVec) -> AlgebraVec {
    Vector3::new(eta.x, eta.y, 0.0)
}
