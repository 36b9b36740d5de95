//! Retractions τ: 𝔰𝔬(3) → SO(3) and their trivialized tangent maps.
//!
//! Two retractions are provided, the exponential map (Rodrigues form) and the
//! Cayley map. For each we expose the left-trivialized tangent dᴸτ, its
//! inverse, the second tangent ddᴸτ, their duals, and the directional
//! derivatives of the corresponding 3×3 matrices. All of these appear inside
//! the stage equations and the Newton Jacobian of the integrator, so they are
//! closed forms rather than finite differences; the tests validate every one
//! of them against series or finite-difference oracles.
//!
//! Conventions: `tau(ξ)⁻¹ · d/dε tau(ξ+εη)|₀ = hat(dᴸτ_ξ η)` and
//! `ddᴸτ_ξ(η,ζ) = ζ-directional derivative of ξ ↦ dᴸτ_ξ η`.

use crate::so3::{hat, vee_unchecked, AlgebraVec, CoalgebraVec, Rotation};
use nalgebra::Matrix3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RetractionError {
    #[error("rotation angle {angle:.6} outside the injectivity domain (limit {limit:.6}); step size too large")]
    OutOfInjectivityDomain { angle: f64, limit: f64 },
}

/// Which retraction parametrizes the group updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetractionKind {
    Exponential,
    Cayley,
}

/// Scalar coefficient functions of the exponential map and their derivatives,
/// as functions of θ² (θ = ‖ξ‖).
///
/// `sinc = sin θ/θ`, `b = (1-cos θ)/θ²`, `c = (θ-sin θ)/θ³`,
/// `e = (1 - (θ/2)cot(θ/2))/θ²`, `db = b'/θ`, `dc = c'/θ`,
/// `ddb = (db)'/θ`, `ddc = (dc)'/θ`.
struct ExpCoeffs {
    sinc: f64,
    b: f64,
    c: f64,
    e: f64,
    db: f64,
    dc: f64,
    ddb: f64,
    ddc: f64,
}

fn exp_coeffs(th2: f64) -> ExpCoeffs {
    let th = th2.sqrt();
    let (sinc, b, c, e, db, dc);
    if th < 1e-4 {
        // 4th-order Taylor branch: avoids the 0/0 cancellation at ξ = 0.
        sinc = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
        c = 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0;
        e = 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0;
        db = -1.0 / 12.0 + th2 / 180.0 - th2 * th2 / 6720.0;
        dc = -1.0 / 60.0 + th2 / 1260.0 - th2 * th2 / 60480.0;
    } else {
        let s = th.sin();
        sinc = s / th;
        // 2 sin²(θ/2) instead of 1 - cos θ: no cancellation for small θ.
        let half_sin = (th / 2.0).sin();
        let one_m_cos = 2.0 * half_sin * half_sin;
        b = one_m_cos / th2;
        c = (th - s) / (th2 * th);
        e = (1.0 - (th / 2.0) * (th / 2.0).cos() / half_sin) / th2;
        db = (th * s - 2.0 * one_m_cos) / (th2 * th2);
        dc = (th * one_m_cos - 3.0 * (th - s)) / (th2 * th2 * th);
    }
    let (ddb, ddc);
    if th < 1e-2 {
        // θ⁴-level cancellation in the closed forms; switch earlier.
        ddb = 1.0 / 90.0 - th2 / 1680.0 + th2 * th2 / 75600.0;
        ddc = 1.0 / 630.0 - th2 / 15120.0 + th2 * th2 / 831600.0;
    } else {
        let (s, co) = th.sin_cos();
        let one_m_cos = {
            let hs = (th / 2.0).sin();
            2.0 * hs * hs
        };
        let th4 = th2 * th2;
        ddb = (th2 * co - 5.0 * th * s + 8.0 * one_m_cos) / (th4 * th2);
        ddc = (th2 * s - 7.0 * th * one_m_cos + 15.0 * (th - s)) / (th4 * th2 * th);
    }
    ExpCoeffs {
        sinc,
        b,
        c,
        e,
        db,
        dc,
        ddb,
        ddc,
    }
}

/// `4/(4 + ‖ξ‖²)`, the Cayley coefficient.
fn cay_a(th2: f64) -> f64 {
    4.0 / (4.0 + th2)
}

impl RetractionKind {
    /// τ(ξ): Rodrigues formula for the exponential,
    /// `cay(ξ) = I + a(hat ξ + hat²ξ/2)` with `a = 4/(4+‖ξ‖²)` for Cayley.
    pub fn tau(&self, xi: &AlgebraVec) -> Rotation {
        let th2 = xi.norm_squared();
        let h = hat(xi);
        let m = match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                Matrix3::identity() + co.sinc * h + co.b * (h * h)
            }
            RetractionKind::Cayley => {
                let a = cay_a(th2);
                Matrix3::identity() + a * (h + (h * h) / 2.0)
            }
        };
        Rotation::from_matrix_unchecked(m)
    }

    /// τ⁻¹(g). For the exponential the rotation angle must be strictly below
    /// π − 1e-6; for Cayley `tr g` must stay away from −1 (angle-π rotations).
    pub fn tau_inv(&self, g: &Rotation) -> Result<AlgebraVec, RetractionError> {
        let m = g.matrix();
        let w = vee_unchecked(&(m - m.transpose())); // 2 sin θ · axis
        match self {
            RetractionKind::Exponential => {
                let s = (w.norm() / 2.0).clamp(-1.0, 1.0);
                let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
                let angle = s.atan2(c);
                let limit = std::f64::consts::PI - 1e-6;
                if angle >= limit {
                    return Err(RetractionError::OutOfInjectivityDomain { angle, limit });
                }
                // θ/(2 sin θ) with Taylor branch near 0
                let factor = if angle < 1e-4 {
                    let a2 = angle * angle;
                    0.5 * (1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0)
                } else {
                    angle / (2.0 * angle.sin())
                };
                Ok(factor * w)
            }
            RetractionKind::Cayley => {
                let denom = 1.0 + m.trace();
                if denom < 1e-6 {
                    return Err(RetractionError::OutOfInjectivityDomain {
                        angle: std::f64::consts::PI,
                        limit: std::f64::consts::PI,
                    });
                }
                Ok(2.0 / denom * w)
            }
        }
    }

    /// Matrix of the left-trivialized tangent dᴸτ_ξ.
    pub fn dtau_l_matrix(&self, xi: &AlgebraVec) -> Matrix3<f64> {
        let th2 = xi.norm_squared();
        let h = hat(xi);
        match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                Matrix3::identity() - co.b * h + co.c * (h * h)
            }
            RetractionKind::Cayley => {
                let a = cay_a(th2);
                a * (Matrix3::identity() - h / 2.0)
            }
        }
    }

    /// dᴸτ_ξ(η).
    pub fn dtau_l(&self, xi: &AlgebraVec, eta: &AlgebraVec) -> AlgebraVec {
        self.dtau_l_matrix(xi) * eta
    }

    /// Matrix of (dᴸτ_ξ)⁻¹.
    pub fn dtau_l_inv_matrix(&self, xi: &AlgebraVec) -> Matrix3<f64> {
        let th2 = xi.norm_squared();
        let h = hat(xi);
        match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                Matrix3::identity() + h / 2.0 + co.e * (h * h)
            }
            RetractionKind::Cayley => {
                Matrix3::identity() + h / 2.0 + xi * xi.transpose() / 4.0
            }
        }
    }

    /// (dᴸτ_ξ)⁻¹(η).
    pub fn dtau_l_inv(&self, xi: &AlgebraVec, eta: &AlgebraVec) -> AlgebraVec {
        self.dtau_l_inv_matrix(xi) * eta
    }

    /// Dual map (dᴸτ_ξ)*: ⟨(dᴸτ_ξ)* p, η⟩ = ⟨p, dᴸτ_ξ η⟩.
    pub fn dtau_l_dual(&self, xi: &AlgebraVec, p: &CoalgebraVec) -> CoalgebraVec {
        self.dtau_l_matrix(xi).transpose() * p
    }

    /// Dual map (dᴸτ⁻¹_ξ)*.
    pub fn dtau_l_inv_dual(&self, xi: &AlgebraVec, p: &CoalgebraVec) -> CoalgebraVec {
        self.dtau_l_inv_matrix(xi).transpose() * p
    }

    /// Matrix (in ζ) of the second trivialized tangent ζ ↦ ddᴸτ_ξ(η, ζ).
    pub fn ddtau_l_matrix(&self, xi: &AlgebraVec, eta: &AlgebraVec) -> Matrix3<f64> {
        let th2 = xi.norm_squared();
        match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                let xe = xi.cross(eta);
                -co.db * xe * xi.transpose()
                    + co.dc * xi.cross(&xe) * xi.transpose()
                    + co.b * hat(eta)
                    - co.c * hat(&xe)
                    - co.c * hat(xi) * hat(eta)
            }
            RetractionKind::Cayley => {
                let a = cay_a(th2);
                let w = eta - xi.cross(eta) / 2.0;
                -(a * a / 2.0) * w * xi.transpose() + (a / 2.0) * hat(eta)
            }
        }
    }

    /// ddᴸτ_ξ(η, ζ), the ζ-directional derivative of ξ ↦ dᴸτ_ξ η.
    pub fn ddtau_l(&self, xi: &AlgebraVec, eta: &AlgebraVec, zeta: &AlgebraVec) -> AlgebraVec {
        self.ddtau_l_matrix(xi, eta) * zeta
    }

    /// Dual of ζ ↦ ddᴸτ_ξ(η, ζ).
    pub fn ddtau_l_dual(
        &self,
        xi: &AlgebraVec,
        eta: &AlgebraVec,
        p: &CoalgebraVec,
    ) -> CoalgebraVec {
        self.ddtau_l_matrix(xi, eta).transpose() * p
    }

    /// Directional derivative of the matrix ξ ↦ dᴸτ_ξ along `dxi`.
    /// Satisfies `dtau_l_matrix_deriv(ξ, ζ) · η = ddᴸτ_ξ(η, ζ)`.
    pub fn dtau_l_matrix_deriv(&self, xi: &AlgebraVec, dxi: &AlgebraVec) -> Matrix3<f64> {
        let th2 = xi.norm_squared();
        let h = hat(xi);
        let hd = hat(dxi);
        let dot = xi.dot(dxi);
        match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                -co.db * dot * h - co.b * hd + co.dc * dot * (h * h) + co.c * (hd * h + h * hd)
            }
            RetractionKind::Cayley => {
                let a = cay_a(th2);
                let da = -(a * a / 2.0) * dot;
                da * (Matrix3::identity() - h / 2.0) - (a / 2.0) * hd
            }
        }
    }

    /// Directional derivative of ξ ↦ (dᴸτ_ξ)⁻¹ along `dxi`, via
    /// `dE = -E (dD) E` for the exponential and the explicit form for Cayley.
    pub fn dtau_l_inv_matrix_deriv(&self, xi: &AlgebraVec, dxi: &AlgebraVec) -> Matrix3<f64> {
        match self {
            RetractionKind::Exponential => {
                let e = self.dtau_l_inv_matrix(xi);
                -e * self.dtau_l_matrix_deriv(xi, dxi) * e
            }
            RetractionKind::Cayley => {
                hat(dxi) / 2.0 + (dxi * xi.transpose() + xi * dxi.transpose()) / 4.0
            }
        }
    }

    /// Directional derivative of (ξ, η) ↦ ddtau_l_matrix(ξ, η) along (dxi, deta).
    /// Needed for the analytic Newton Jacobian of the stage equations.
    pub fn ddtau_l_matrix_deriv(
        &self,
        xi: &AlgebraVec,
        eta: &AlgebraVec,
        dxi: &AlgebraVec,
        deta: &AlgebraVec,
    ) -> Matrix3<f64> {
        let th2 = xi.norm_squared();
        let dot = xi.dot(dxi);
        match self {
            RetractionKind::Exponential => {
                let co = exp_coeffs(th2);
                let xe = xi.cross(eta);
                let dxe = dxi.cross(eta) + xi.cross(deta);
                let xxe = xi.cross(&xe);
                let dxxe = dxi.cross(&xe) + xi.cross(&dxe);
                -(co.ddb * dot) * xe * xi.transpose()
                    - co.db * (dxe * xi.transpose() + xe * dxi.transpose())
                    + (co.ddc * dot) * xxe * xi.transpose()
                    + co.dc * (dxxe * xi.transpose() + xxe * dxi.transpose())
                    + (co.db * dot) * hat(eta)
                    + co.b * hat(deta)
                    - (co.dc * dot) * hat(&xe)
                    - co.c * hat(&dxe)
                    - (co.dc * dot) * hat(xi) * hat(eta)
                    - co.c * (hat(dxi) * hat(eta) + hat(xi) * hat(deta))
            }
            RetractionKind::Cayley => {
                let a = cay_a(th2);
                let adot = -(a * a / 2.0) * dot;
                let w = eta - xi.cross(eta) / 2.0;
                let dw = deta - (dxi.cross(eta) + xi.cross(deta)) / 2.0;
                -(a * adot) * w * xi.transpose()
                    - (a * a / 2.0) * (dw * xi.transpose() + w * dxi.transpose())
                    + (adot / 2.0) * hat(eta)
                    + (a / 2.0) * hat(deta)
            }
        }
    }
}
