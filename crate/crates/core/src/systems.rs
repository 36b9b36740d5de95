//! Trivialized regularized Lagrangians on SO(3) × 𝔰𝔬(3).
//!
//! Both example systems share the kinetic form
//! `(m/2)‖η×x₀‖² + (M/2)(η·x₀)²` whose fiber Hessian diag(m, m, M) is
//! invertible, unlike the singular pullback Lagrangian it extends; the two
//! agree on the constraint distribution η₃ = 0. `force` is the left-trivialized
//! configuration gradient: ⟨force(g), ζ⟩ = d/dε ℓ(g·τ(εζ), η)|₀.

use crate::sphere;
use crate::so3::{hat, AlgebraVec, CoalgebraVec, Rotation};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SystemError {
    #[error("trajectory within {dist:.3e} of the potential singularity (attractor or antipode)")]
    NearSingularPotential { dist: f64 },
    #[error("parameter {name} = {value} is invalid: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// A regular left-trivialized Lagrangian ℓ(g, η) with exact first derivatives
/// and invertible fiber derivative.
pub trait LagrangianSystem {
    /// ℓ(g, η).
    fn lagrangian(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError>;

    /// Left-trivialized configuration gradient of ℓ.
    fn force(&self, g: &Rotation) -> Result<CoalgebraVec, SystemError>;

    /// Directional-derivative matrix J of the force: d/dε force(g·τ(εζ))|₀ = J·ζ.
    fn force_jacobian(&self, g: &Rotation) -> Result<Matrix3<f64>, SystemError>;

    /// Fiber derivative D₂ℓ(η), the body momentum.
    fn momentum(&self, eta: &AlgebraVec) -> CoalgebraVec;

    /// Inverse of [`LagrangianSystem::momentum`].
    fn momentum_inv(&self, p: &CoalgebraVec) -> AlgebraVec;

    /// Diagonal of the (constant) fiber Hessian.
    fn mass_diagonal(&self) -> Vector3<f64>;

    /// Total energy: kinetic part of ℓ minus its potential term.
    fn energy(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError>;
}

fn kinetic(m: f64, m_reg: f64, eta: &AlgebraVec) -> f64 {
    0.5 * m * (eta.x * eta.x + eta.y * eta.y) + 0.5 * m_reg * eta.z * eta.z
}

/// Spherical pendulum parameters.
#[derive(Debug, Clone, Copy)]
pub struct PendulumParams {
    /// Bob mass (kg).
    pub m: f64,
    /// Regularization parameter (kg), must be nonzero.
    pub m_reg: f64,
    /// Field intensity vector; `(0, 0, -alpha)` for gravity of strength alpha.
    pub gamma: Vector3<f64>,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            m: 1.0,
            m_reg: 1.0,
            gamma: Vector3::new(0.0, 0.0, -1.0),
        }
    }
}

/// Spherical pendulum: ℓ = (m/2)‖η×x₀‖² + (M/2)(η·x₀)² + γ·(g x₀).
#[derive(Debug, Clone, Copy)]
pub struct Pendulum {
    params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self, SystemError> {
        if params.m <= 0.0 {
            return Err(SystemError::InvalidParameter {
                name: "m",
                value: params.m,
                reason: "mass must be positive",
            });
        }
        if params.m_reg == 0.0 {
            return Err(SystemError::InvalidParameter {
                name: "M_reg",
                value: params.m_reg,
                reason: "regularization parameter must be nonzero",
            });
        }
        Ok(Pendulum { params })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }
}

impl LagrangianSystem for Pendulum {
    fn lagrangian(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        let p = &self.params;
        let x = g.matrix() * sphere::origin().coords();
        Ok(kinetic(p.m, p.m_reg, eta) + p.gamma.dot(&x))
    }

    fn force(&self, g: &Rotation) -> Result<CoalgebraVec, SystemError> {
        // d/dε γ·(g τ(εζ) x₀) = ⟨x₀ × (gᵀγ), ζ⟩
        let w = g.matrix().transpose() * self.params.gamma;
        Ok(sphere::origin().coords().cross(&w))
    }

    fn force_jacobian(&self, g: &Rotation) -> Result<Matrix3<f64>, SystemError> {
        let w = g.matrix().transpose() * self.params.gamma;
        Ok(hat(sphere::origin().coords()) * hat(&w))
    }

    fn momentum(&self, eta: &AlgebraVec) -> CoalgebraVec {
        let p = &self.params;
        Vector3::new(p.m * eta.x, p.m * eta.y, p.m_reg * eta.z)
    }

    fn momentum_inv(&self, p: &CoalgebraVec) -> AlgebraVec {
        let q = &self.params;
        Vector3::new(p.x / q.m, p.y / q.m, p.z / q.m_reg)
    }

    fn mass_diagonal(&self) -> Vector3<f64> {
        Vector3::new(self.params.m, self.params.m, self.params.m_reg)
    }

    fn energy(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        let p = &self.params;
        let x = g.matrix() * sphere::origin().coords();
        Ok(kinetic(p.m, p.m_reg, eta) - p.gamma.dot(&x))
    }
}

/// Spherical Kepler parameters.
#[derive(Debug, Clone, Copy)]
pub struct KeplerParams {
    pub m: f64,
    pub m_reg: f64,
    /// Potential strength.
    pub rho: f64,
    /// Attractor position on the sphere (unit vector).
    pub attractor: Vector3<f64>,
}

impl Default for KeplerParams {
    fn default() -> Self {
        KeplerParams {
            m: 1.0,
            m_reg: 1.0,
            rho: 1.0,
            attractor: Vector3::new(0.437, 0.0, 0.899).normalize(),
        }
    }
}

/// Spherical Kepler problem:
/// ℓ = (m/2)‖η×x₀‖² + (M/2)(η·x₀)² + ρ c/√(1−c²) with c = X·(g x₀).
#[derive(Debug, Clone, Copy)]
pub struct Kepler {
    params: KeplerParams,
}

/// Distance guard for the attractor/antipode singularity of the potential.
const SINGULARITY_GUARD: f64 = 1e-10;

impl Kepler {
    pub fn new(mut params: KeplerParams) -> Result<Self, SystemError> {
        if params.m <= 0.0 {
            return Err(SystemError::InvalidParameter {
                name: "m",
                value: params.m,
                reason: "mass must be positive",
            });
        }
        if params.m_reg == 0.0 {
            return Err(SystemError::InvalidParameter {
                name: "M_reg",
                value: params.m_reg,
                reason: "regularization parameter must be nonzero",
            });
        }
        let n = params.attractor.norm();
        if (n - 1.0).abs() > 1e-3 {
            return Err(SystemError::InvalidParameter {
                name: "X",
                value: n,
                reason: "attractor must be a unit vector",
            });
        }
        params.attractor /= n;
        Ok(Kepler { params })
    }

    pub fn params(&self) -> &KeplerParams {
        &self.params
    }

    /// c = X·(g x₀), guarded away from ±1.
    fn cosine(&self, g: &Rotation) -> Result<f64, SystemError> {
        let c = self
            .params
            .attractor
            .dot(&(g.matrix() * sphere::origin().coords()));
        if c.abs() >= 1.0 - SINGULARITY_GUARD {
            return Err(SystemError::NearSingularPotential {
                dist: 1.0 - c.abs(),
            });
        }
        Ok(c)
    }
}

impl LagrangianSystem for Kepler {
    fn lagrangian(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        let p = &self.params;
        let c = self.cosine(g)?;
        Ok(kinetic(p.m, p.m_reg, eta) + p.rho * c / (1.0 - c * c).sqrt())
    }

    fn force(&self, g: &Rotation) -> Result<CoalgebraVec, SystemError> {
        let c = self.cosine(g)?;
        let w = g.matrix().transpose() * self.params.attractor;
        let dv = self.params.rho * (1.0 - c * c).powf(-1.5);
        Ok(dv * sphere::origin().coords().cross(&w))
    }

    fn force_jacobian(&self, g: &Rotation) -> Result<Matrix3<f64>, SystemError> {
        let c = self.cosine(g)?;
        let w = g.matrix().transpose() * self.params.attractor;
        let x0 = sphere::origin();
        let grad_c = x0.coords().cross(&w);
        let s2 = 1.0 - c * c;
        let rho = self.params.rho;
        Ok(3.0 * rho * c * s2.powf(-2.5) * grad_c * grad_c.transpose()
            + rho * s2.powf(-1.5) * hat(x0.coords()) * hat(&w))
    }

    fn momentum(&self, eta: &AlgebraVec) -> CoalgebraVec {
        let p = &self.params;
        Vector3::new(p.m * eta.x, p.m * eta.y, p.m_reg * eta.z)
    }

    fn momentum_inv(&self, p: &CoalgebraVec) -> AlgebraVec {
        let q = &self.params;
        Vector3::new(p.x / q.m, p.y / q.m, p.z / q.m_reg)
    }

    fn mass_diagonal(&self) -> Vector3<f64> {
        Vector3::new(self.params.m, self.params.m, self.params.m_reg)
    }

    fn energy(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        let p = &self.params;
        let c = self.cosine(g)?;
        Ok(kinetic(p.m, p.m_reg, eta) - p.rho * c / (1.0 - c * c).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{fd_grad_algebra, fd_grad_group};
    use crate::retraction::RetractionKind;
    use crate::so3::{from_tait_bryan, rot_y};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_3;

    fn rand_rotation(rng: &mut impl Rng) -> Rotation {
        RetractionKind::Exponential.tau(&Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ))
    }

    #[test]
    fn pendulum_lagrangian_examples() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let eta = Vector3::new(1.0 / 3.0, 0.0, 0.0);
        let val = p.lagrangian(&Rotation::identity(), &eta).unwrap();
        assert_abs_diff_eq!(val, 1.0 / 18.0 - 1.0, epsilon = 1e-15);
        let rest = p
            .lagrangian(&Rotation::identity(), &Vector3::zeros())
            .unwrap();
        assert_abs_diff_eq!(rest, -1.0, epsilon = 1e-15);
    }

    /// On the distribution η₃ = 0 the regularized Lagrangian equals the
    /// unregularized pullback (the M-term vanishes identically).
    #[test]
    fn regularization_restricts_to_pullback() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for m_reg in [1.0, 7.5] {
            let p = Pendulum::new(PendulumParams {
                m_reg,
                ..Default::default()
            })
            .unwrap();
            for _ in 0..250 {
                let g = rand_rotation(&mut rng);
                let eta = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
                let x = g.matrix() * sphere::origin().coords();
                let pullback = 0.5 * (eta.cross(sphere::origin().coords())).norm_squared()
                    + p.params().gamma.dot(&x);
                assert_abs_diff_eq!(
                    p.lagrangian(&g, &eta).unwrap(),
                    pullback,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn pendulum_force_vanishes_at_pole() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        assert_eq!(
            p.force(&Rotation::identity()).unwrap(),
            Vector3::zeros()
        );
        // third component always vanishes: the field exerts no 𝔥-torque
        let g = from_tait_bryan(0.7, -0.3, 1.1);
        assert_eq!(p.force(&g).unwrap().z, 0.0);
    }

    #[test]
    fn pendulum_force_matches_finite_differences() {
        let p = Pendulum::new(PendulumParams::default()).unwrap();
        let g = rot_y(FRAC_PI_3);
        let analytic = p.force(&g).unwrap();
        let fd = fd_grad_group(|gg| p.lagrangian(gg, &Vector3::zeros()).unwrap(), &g, 1e-6);
        assert!((analytic - fd).norm() <= 1e-6);
    }

    #[test]
    fn pendulum_momentum_examples() {
        let p = Pendulum::new(PendulumParams {
            m: 1.0,
            m_reg: 2.0,
            ..Default::default()
        })
        .unwrap();
        let eta = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(p.momentum(&eta), Vector3::new(1.0, 1.0, 2.0));
        assert_eq!(p.momentum_inv(&p.momentum(&eta)), eta);
        // 𝔪 maps into 𝔪*
        assert_eq!(p.momentum(&Vector3::new(0.3, -0.4, 0.0)).z, 0.0);
    }

    /// The fiber derivative is the gradient of ℓ in η.
    #[test]
    fn momentum_matches_finite_differences() {
        let p = Pendulum::new(PendulumParams {
            m: 1.3,
            m_reg: 0.7,
            ..Default::default()
        })
        .unwrap();
        let g = from_tait_bryan(0.2, 0.5, -0.1);
        let eta = Vector3::new(0.4, -0.6, 0.9);
        let fd = fd_grad_algebra(|e| p.lagrangian(&g, e).unwrap(), &eta, 1e-6);
        assert!((p.momentum(&eta) - fd).norm() <= 1e-8);
    }

    #[test]
    fn kepler_perpendicular_configuration() {
        // g x₀ ⊥ X: potential zero, |force| = ρ ‖x₀ × gᵀX‖
        let k = Kepler::new(KeplerParams {
            attractor: Vector3::x(),
            ..Default::default()
        })
        .unwrap();
        let g = Rotation::identity(); // g x₀ = e3 ⊥ e1
        let ell = k.lagrangian(&g, &Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(ell, 0.0, epsilon = 1e-15);
        let f = k.force(&g).unwrap();
        let w = g.matrix().transpose() * Vector3::x();
        assert_abs_diff_eq!(
            f.norm(),
            k.params().rho * sphere::origin().coords().cross(&w).norm(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn kepler_force_matches_finite_differences() {
        let k = Kepler::new(KeplerParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let g = rand_rotation(&mut rng);
            if k.cosine(&g).map(|c| c.abs() > 0.95).unwrap_or(true) {
                continue;
            }
            let analytic = k.force(&g).unwrap();
            let fd = fd_grad_group(|gg| k.lagrangian(gg, &Vector3::zeros()).unwrap(), &g, 1e-6);
            assert!((analytic - fd).norm() <= 1e-6);
        }
    }

    #[test]
    fn force_jacobians_match_finite_differences() {
        let pend = Pendulum::new(PendulumParams::default()).unwrap();
        let kep = Kepler::new(KeplerParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let eps = 1e-6;
        let kinds = [RetractionKind::Exponential];
        for _ in 0..40 {
            let g = rand_rotation(&mut rng);
            for kind in kinds {
                for col in 0..3 {
                    let mut zeta = Vector3::zeros();
                    zeta[col] = 1.0;
                    let gp = g * kind.tau(&(eps * zeta));
                    let gm = g * kind.tau(&(-eps * zeta));
                    let fd = (pend.force(&gp).unwrap() - pend.force(&gm).unwrap()) / (2.0 * eps);
                    let col_a = pend.force_jacobian(&g).unwrap() * zeta;
                    assert!((fd - col_a).norm() <= 1e-6);
                    if kep.cosine(&g).map(|c| c.abs() < 0.9).unwrap_or(false) {
                        let fd = (kep.force(&gp).unwrap() - kep.force(&gm).unwrap()) / (2.0 * eps);
                        let col_a = kep.force_jacobian(&g).unwrap() * zeta;
                        assert!((fd - col_a).norm() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn kepler_guards_singularity() {
        let k = Kepler::new(KeplerParams {
            attractor: Vector3::z(),
            ..Default::default()
        })
        .unwrap();
        // g x₀ = x₀ = X: on top of the attractor
        let err = k.force(&Rotation::identity()).unwrap_err();
        assert!(matches!(err, SystemError::NearSingularPotential { .. }));
    }

    /// E = 2T − ℓ: energy flips the sign of the potential term.
    #[test]
    fn energy_consistent_with_lagrangian() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pend = Pendulum::new(PendulumParams::default()).unwrap();
        let kep = Kepler::new(KeplerParams::default()).unwrap();
        for _ in 0..100 {
            let g = rand_rotation(&mut rng);
            let eta = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let t = kinetic(1.0, 1.0, &eta);
            let e = pend.energy(&g, &eta).unwrap();
            let l = pend.lagrangian(&g, &eta).unwrap();
            assert_abs_diff_eq!(e + l, 2.0 * t, epsilon = 1e-13);
            if kep.cosine(&g).map(|c| c.abs() < 0.99).unwrap_or(false) {
                let e = kep.energy(&g, &eta).unwrap();
                let l = kep.lagrangian(&g, &eta).unwrap();
                assert_abs_diff_eq!(e + l, 2.0 * t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(Pendulum::new(PendulumParams {
            m: -1.0,
            ..Default::default()
        })
        .is_err());
        assert!(Pendulum::new(PendulumParams {
            m_reg: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(Kepler::new(KeplerParams {
            attractor: Vector3::new(2.0, 0.0, 0.0),
            ..Default::default()
        })
        .is_err());
        // near-unit attractors are normalized exactly
        let k = Kepler::new(KeplerParams::default()).unwrap();
        assert!((k.params().attractor.norm() - 1.0).abs() < 1e-15);
    }
}
