//! High-accuracy reference solutions of the continuous constrained equations,
//! used by the convergence studies and tests, plus finite-difference helpers.
//!
//! The multiplier is eliminated analytically: φ is linear with gradient x₀ and
//! the fiber Hessian is diagonal, so the 𝔥-row of the momentum balance yields
//! λ directly and the constrained system becomes an ODE on (g, η) with
//! η₃ ≡ 0. That ODE is integrated with a classical 4th-order Runge-Kutta in
//! the exponential chart of each step (σ̇ = (dᴸτ_σ)⁻¹ η, g ↦ g·exp(σ)).

use crate::retraction::RetractionKind;
use crate::so3::{AlgebraVec, Rotation};
use crate::systems::{LagrangianSystem, SystemError};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("system evaluation failed: {0}")]
    System(#[from] SystemError),
    #[error("Richardson gap {gap:.3e} above target {target:.3e}; reference step too large")]
    ToleranceNotReached { gap: f64, target: f64 },
}

/// State of the continuous system along a reference trajectory.
#[derive(Debug, Clone, Copy)]
pub struct ContinuousState {
    pub t: f64,
    pub g: Rotation,
    pub eta: AlgebraVec,
    /// The analytically eliminated multiplier at this state.
    pub lambda: f64,
}

/// Right-hand side of the constrained equations with λ eliminated from the
/// 𝔥-row: diag(m,m,M)·η̇ = ad*_η p + force + λ x₀ with λ chosen so η̇₃ = 0.
pub fn continuous_rhs(
    system: &dyn LagrangianSystem,
    g: &Rotation,
    eta: &AlgebraVec,
) -> Result<(AlgebraVec, f64), SystemError> {
    let p = system.momentum(eta);
    let r = p.cross(eta) + system.force(g)?;
    let lambda = -r.z;
    let mass = system.mass_diagonal();
    let eta_dot = Vector3::new(r.x / mass.x, r.y / mass.y, (r.z + lambda) / mass.z);
    Ok((eta_dot, lambda))
}

/// The continuous multiplier consistent with initial data `(g₀, η₀)`,
/// obtained by differentiating the constraint: λ₀ = −(ad*_η p + force)·x₀.
pub fn initial_multiplier(
    system: &dyn LagrangianSystem,
    g0: &Rotation,
    eta0: &AlgebraVec,
) -> Result<f64, SystemError> {
    let (_, lambda) = continuous_rhs(system, g0, eta0)?;
    Ok(lambda)
}

fn rk4_step(
    system: &dyn LagrangianSystem,
    g: &Rotation,
    eta: &AlgebraVec,
    h: f64,
) -> Result<(Rotation, AlgebraVec, f64), SystemError> {
    let kind = RetractionKind::Exponential;
    let f = |sigma: &AlgebraVec,
             eta: &AlgebraVec|
     -> Result<(AlgebraVec, AlgebraVec, f64), SystemError> {
        let gg = *g * kind.tau(sigma);
        let (eta_dot, lambda) = continuous_rhs(system, &gg, eta)?;
        Ok((kind.dtau_l_inv(sigma, eta), eta_dot, lambda))
    };
    let (k1s, k1e, lambda) = f(&Vector3::zeros(), eta)?;
    let (k2s, k2e, _) = f(&(0.5 * h * k1s), &(eta + 0.5 * h * k1e))?;
    let (k3s, k3e, _) = f(&(0.5 * h * k2s), &(eta + 0.5 * h * k2e))?;
    let (k4s, k4e, _) = f(&(h * k3s), &(eta + h * k3e))?;
    let sigma = h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
    let eta_next = eta + h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
    Ok((*g * kind.tau(&sigma), eta_next, lambda))
}

fn integrate(
    system: &dyn LagrangianSystem,
    g0: &Rotation,
    eta0: &AlgebraVec,
    t_end: f64,
    n: usize,
    sample_every: usize,
) -> Result<Vec<ContinuousState>, SystemError> {
    let h = t_end / n.max(1) as f64;
    let mut g = *g0;
    let mut eta = *eta0;
    let mut out = Vec::with_capacity(n / sample_every.max(1) + 2);
    let (_, lambda0) = continuous_rhs(system, &g, &eta)?;
    out.push(ContinuousState {
        t: 0.0,
        g,
        eta,
        lambda: lambda0,
    });
    for k in 0..n {
        let (gn, en, _) = rk4_step(system, &g, &eta, h)?;
        g = gn;
        eta = en;
        if (k + 1) % sample_every.max(1) == 0 || k + 1 == n {
            let (_, lambda) = continuous_rhs(system, &g, &eta)?;
            out.push(ContinuousState {
                t: (k + 1) as f64 * h,
                g,
                eta,
                lambda,
            });
        }
    }
    Ok(out)
}

/// Integrates the continuous system at step `h_ref` (rounded so it divides
/// `t_end`), sampling every `sample_every`-th internal step, without any
/// accuracy certification. Prefer [`reference_solve`] when the trajectory is
/// used as an error reference.
pub fn solve_trajectory(
    system: &dyn LagrangianSystem,
    g0: &Rotation,
    eta0: &AlgebraVec,
    t_end: f64,
    h_ref: f64,
    sample_every: usize,
) -> Result<Vec<ContinuousState>, ReferenceError> {
    if t_end == 0.0 {
        return Ok(integrate(system, g0, eta0, 0.0, 0, 1)?);
    }
    let n = (t_end / h_ref).round().max(1.0) as usize;
    Ok(integrate(system, g0, eta0, t_end, n, sample_every)?)
}

/// Reference trajectory sampled every `sample_every`-th internal step.
///
/// `h_ref` is the requested internal step (rounded so it divides `t_end`);
/// the result is accepted only if a run at `h_ref/2` lands within 1e-12 of the
/// final state (Richardson verification). Trajectories whose sensitivity
/// amplifies roundoff past that level (close encounters with a potential
/// singularity) cannot be certified and report `ToleranceNotReached` at any
/// step size.
pub fn reference_solve(
    system: &dyn LagrangianSystem,
    g0: &Rotation,
    eta0: &AlgebraVec,
    t_end: f64,
    h_ref: f64,
    sample_every: usize,
) -> Result<Vec<ContinuousState>, ReferenceError> {
    const TARGET: f64 = 1e-12;
    if t_end == 0.0 {
        return Ok(integrate(system, g0, eta0, 0.0, 0, 1)?);
    }
    let n = (t_end / h_ref).round().max(1.0) as usize;
    let coarse = integrate(system, g0, eta0, t_end, n, sample_every)?;
    let fine = integrate(system, g0, eta0, t_end, 2 * n, 2 * n)?;
    let cl = coarse.last().unwrap();
    let fl = fine.last().unwrap();
    let gap = (cl.g.matrix() - fl.g.matrix()).norm() + (cl.eta - fl.eta).norm();
    if gap > TARGET {
        return Err(ReferenceError::ToleranceNotReached {
            gap,
            target: TARGET,
        });
    }
    Ok(coarse)
}

/// Central finite-difference gradient of a scalar field on the group along
/// left-trivialized basis directions: component i is
/// (f(g·exp(ε eᵢ)) − f(g·exp(−ε eᵢ)))/(2ε).
pub fn fd_grad_group(f: impl Fn(&Rotation) -> f64, g: &Rotation, eps: f64) -> Vector3<f64> {
    let kind = RetractionKind::Exponential;
    let mut out = Vector3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = eps;
        let fp = f(&(*g * kind.tau(&e)));
        let fm = f(&(*g * kind.tau(&(-e))));
        out[i] = (fp - fm) / (2.0 * eps);
    }
    out
}

/// Central finite-difference gradient of a scalar field on the algebra.
pub fn fd_grad_algebra(
    f: impl Fn(&AlgebraVec) -> f64,
    v: &AlgebraVec,
    eps: f64,
) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = eps;
        out[i] = (f(&(v + e)) - f(&(v - e))) / (2.0 * eps);
    }
    out
}

/// Max residual between an analytic group gradient and central differences
/// over `samples` quasi-random configurations.
pub fn fd_check_group(
    f: impl Fn(&Rotation) -> f64,
    analytic: impl Fn(&Rotation) -> Vector3<f64>,
    samples: usize,
) -> f64 {
    let kind = RetractionKind::Exponential;
    let mut worst: f64 = 0.0;
    for k in 0..samples {
        // low-discrepancy-ish spread of rotation vectors
        let q = k as f64 + 0.5;
        let v = Vector3::new(
            (q * 0.754877666).fract() * 4.0 - 2.0,
            (q * 0.569840291).fract() * 4.0 - 2.0,
            (q * 0.362456091).fract() * 4.0 - 2.0,
        );
        let g = kind.tau(&v);
        let fd = fd_grad_group(&f, &g, 1e-6);
        worst = worst.max((analytic(&g) - fd).norm());
    }
    worst
}
