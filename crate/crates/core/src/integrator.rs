//! The nonholonomic partitioned RKMK step on SO(3).
//!
//! Each step solves an implicit system in the stage velocities Ξ̇ⁱ ∈ ℝ³ and
//! stage multipliers Λⁱ ∈ ℝ (3s + s unknowns):
//!
//!   * s momentum-match equations (ℝ³ each): the trivialized stage momentum
//!     (dᴸτ⁻¹_{ξ})*(dᴸτ_{Ξⁱ})* Π₀ⁱ must equal the coadjoint-transported
//!     combination of μ_k and the stage loads Ν₀ʲ = force(Gʲ) + Λʲ·∇φ;
//!   * s−1 constraint equations φ(Ηⁱ) = 0 for i = 2..s, where the stage
//!     velocity Ηⁱ comes from the inner-momentum recovery
//!     Μ₀ⁱ = Ad*_{τ(Ξⁱ)}[μ_k + h Σ_j a_ij Ad*_{τ(−Ξʲ)} Ν₀ʲ]
//!     (the i = 1 equation is implied by consistent step data);
//!   * one closure equation tying the multipliers together
//!     ([`ClosureStrategy`]).
//!
//! After the solve, g_{k+1} = g_k τ(ξ) with ξ = h Σ b_j Ξ̇ʲ and μ_{k+1} is the
//! coadjoint update; stiff accuracy makes the last stage coincide with the
//! step point. A free (unconstrained) variant drops the multiplier block, and
//! a holonomic variant replaces φ(Ηⁱ) = 0 by Φ(Gⁱ) = 0 plus a tangency
//! condition at the step end.
//!
//! Newton uses an analytic Jacobian assembled from the closed-form tangent
//! maps and their derivatives (a finite-difference Jacobian is kept as a debug
//! mode), with step halving on residual increase. The weighted-zero closure is
//! rank-deficient whenever the force has no 𝔥-component (both bundled systems),
//! so its Newton updates are computed as minimum-norm least-squares solutions.

use crate::reference;
use crate::retraction::{RetractionError, RetractionKind};
use crate::so3::{AlgebraVec, CoalgebraVec, Rotation};
use crate::sphere;
use crate::systems::{LagrangianSystem, SystemError};
use crate::tableau::ButcherTableau;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("system evaluation failed: {0}")]
    System(#[from] SystemError),
    #[error("retraction domain exceeded: {0}")]
    RetractionDomainExceeded(#[from] RetractionError),
    #[error("Newton iteration did not reach tol in {iterations} iterations; final residual {residual:.3e}")]
    NewtonDivergence { residual: f64, iterations: usize },
    #[error("linear solve of the Newton system failed")]
    LinearSolveFailed,
    #[error("initial momentum violates the constraint: phi = {phi:.3e}")]
    InconsistentInitialData { phi: f64 },
    #[error("holonomic constraint violated at step start: {value:.3e}")]
    ConstraintViolatedAtStart { value: f64 },
}

/// How the underdetermined multiplier block is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosureStrategy {
    /// Λ¹_{k+1} = Λˢ_k: the last multiplier of one step seeds the next.
    Concatenation,
    /// Λ¹_k = 0, matching the continuous multiplier of the bundled systems.
    ZeroFirst,
    /// Σ_j b_j Λʲ_k = 0.
    WeightedZeroSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

/// Newton solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub jacobian: JacobianMode,
    pub retraction: RetractionKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-12,
            max_iter: 50,
            jacobian: JacobianMode::Analytic,
            retraction: RetractionKind::Cayley,
        }
    }
}

/// Per-step propagated state.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    pub g: Rotation,
    pub mu: CoalgebraVec,
    /// Multiplier carried across steps under Λ-concatenation.
    pub lambda_carry: f64,
    pub t: f64,
}

impl StepState {
    /// Initial state from `(g₀, η₀, λ₀)`.
    pub fn new(g: Rotation, eta: AlgebraVec, lambda: f64, system: &dyn LagrangianSystem) -> Self {
        StepState {
            g,
            mu: system.momentum(&eta),
            lambda_carry: lambda,
            t: 0.0,
        }
    }
}

/// Converged data of one internal stage.
#[derive(Debug, Clone, Copy)]
pub struct Stage {
    /// Ξⁱ, the chart position of the stage.
    pub xi: AlgebraVec,
    /// Ξ̇ⁱ, the stage derivative (an unknown of the solve).
    pub xi_dot: AlgebraVec,
    /// Gⁱ = g_k τ(Ξⁱ).
    pub g: Rotation,
    /// Stage multiplier Λⁱ.
    pub lambda: f64,
    /// ηⁱ = dᴸτ_{Ξⁱ} Ξ̇ⁱ, the raw stage velocity.
    pub eta: AlgebraVec,
    /// Ν₀ⁱ = force(Gⁱ) + Λⁱ·∇φ, the trivialized stage load.
    pub n0: CoalgebraVec,
    /// Μ₀ⁱ, the recovered stage momentum.
    pub m0: CoalgebraVec,
    /// Ηⁱ = momentum⁻¹(Μ₀ⁱ), the constrained stage velocity.
    pub eta_constraint: AlgebraVec,
}

/// Stage bundle of an accepted step.
#[derive(Debug, Clone)]
pub struct StageSolution {
    pub stages: Vec<Stage>,
    /// ξ_k = h Σ b_j Ξ̇ʲ, so that g_{k+1} = g_k τ(ξ_k).
    pub xi_step: AlgebraVec,
    pub newton_iterations: usize,
    pub residual_norm: f64,
    /// max_{i=2..s} |φ(Ηⁱ)| at convergence.
    pub phi_max: f64,
}

/// A configuration-level constraint Φ: G → ℝ for the holonomic variant.
pub trait HolonomicConstraint {
    fn value(&self, g: &Rotation) -> f64;
    /// Body gradient: ⟨grad_body(g), ζ⟩ = d/dε Φ(g·τ(εζ))|₀.
    fn grad_body(&self, g: &Rotation) -> Vector3<f64>;
    /// Directional-derivative matrix of `grad_body`.
    fn grad_body_jacobian(&self, g: &Rotation) -> Matrix3<f64>;
}

/// Φ(g) = n·(g x₀) − offset: the point g·x₀ stays on the circle cut by a
/// plane with unit normal n.
pub struct PlaneCircle {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl PlaneCircle {
    /// The horizontal circle at polar angle `angle` (normal x₀).
    pub fn latitude(angle: f64) -> Self {
        PlaneCircle {
            normal: *sphere::origin().coords(),
            offset: angle.cos(),
        }
    }
}

impl HolonomicConstraint for PlaneCircle {
    fn value(&self, g: &Rotation) -> f64 {
        self.normal.dot(&(g.matrix() * sphere::origin().coords())) - self.offset
    }

    fn grad_body(&self, g: &Rotation) -> Vector3<f64> {
        let x0 = sphere::origin().coords().clone_owned();
        x0.cross(&(g.matrix().transpose() * self.normal))
    }

    fn grad_body_jacobian(&self, g: &Rotation) -> Matrix3<f64> {
        let x0 = sphere::origin().coords().clone_owned();
        crate::so3::hat(&x0) * crate::so3::hat(&(g.matrix().transpose() * self.normal))
    }
}

enum Mode<'a> {
    Nonholonomic(ClosureStrategy),
    Free,
    Holonomic(&'a dyn HolonomicConstraint),
}

impl Mode<'_> {
    fn unknowns(&self, s: usize) -> usize {
        match self {
            Mode::Free => 3 * s,
            _ => 4 * s,
        }
    }
}

/// Ν₀ⁱ for the nonholonomic problem: the trivialized force plus the constraint
/// force Λⁱ·∇φ. φ is linear, so ∇φ = x₀ independently of the stage velocity.
pub fn assemble_n0(
    system: &dyn LagrangianSystem,
    g_i: &Rotation,
    lambda_i: f64,
) -> Result<CoalgebraVec, IntegratorError> {
    Ok(system.force(g_i)? + lambda_i * sphere::phi_gradient())
}

/// The continuous multiplier matching the initial data, Λ¹₀ of the first step
/// under concatenation. Zero for both bundled systems.
pub fn initial_multiplier(
    system: &dyn LagrangianSystem,
    g0: &Rotation,
    eta0: &AlgebraVec,
) -> Result<f64, IntegratorError> {
    Ok(reference::initial_multiplier(system, g0, eta0)?)
}

/// Everything the residual and Jacobian share for one candidate `u`.
struct Assembly {
    s: usize,
    h: f64,
    xi: Vec<AlgebraVec>,
    xi_dot: Vec<AlgebraVec>,
    lambda: Vec<f64>,
    tau_i: Vec<Rotation>,
    g_i: Vec<Rotation>,
    d_i: Vec<Matrix3<f64>>,
    m_i: Vec<Matrix3<f64>>,
    eta: Vec<AlgebraVec>,
    n0: Vec<CoalgebraVec>,
    p0: Vec<CoalgebraVec>,
    nn: Vec<CoalgebraVec>,
    nhat: Vec<CoalgebraVec>,
    m0: Vec<CoalgebraVec>,
    force_jac: Vec<Matrix3<f64>>,
    grad_hol: Vec<Vector3<f64>>,
    grad_hol_jac: Vec<Matrix3<f64>>,
    xi_step: AlgebraVec,
    tau_xi: Rotation,
    e_xi: Matrix3<f64>,
    mu_next: CoalgebraVec,
}

fn guard_domain(kind: RetractionKind, v: &AlgebraVec) -> Result<(), IntegratorError> {
    if kind == RetractionKind::Exponential {
        let limit = std::f64::consts::PI - 1e-6;
        let angle = v.norm();
        if angle >= limit {
            return Err(IntegratorError::RetractionDomainExceeded(
                RetractionError::OutOfInjectivityDomain { angle, limit },
            ));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    mode: &Mode,
    h: f64,
    u: &DVector<f64>,
    with_jacobian: bool,
) -> Result<Assembly, IntegratorError> {
    let s = tableau.s;
    let kind = config.retraction;
    let mut xi_dot = Vec::with_capacity(s);
    let mut lambda = vec![0.0; s];
    for i in 0..s {
        xi_dot.push(Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]));
        if !matches!(mode, Mode::Free) {
            lambda[i] = u[3 * s + i];
        }
    }
    let mut xi = Vec::with_capacity(s);
    for i in 0..s {
        let mut v = Vector3::zeros();
        for (j, xd) in xi_dot.iter().enumerate() {
            v += tableau.a(i, j) * xd;
        }
        xi.push(h * v);
        guard_domain(kind, &xi[i])?;
    }
    let mut xi_step = Vector3::zeros();
    for (j, xd) in xi_dot.iter().enumerate() {
        xi_step += tableau.b[j] * xd;
    }
    xi_step *= h;
    guard_domain(kind, &xi_step)?;

    let tau_i: Vec<Rotation> = xi.iter().map(|x| kind.tau(x)).collect();
    let g_i: Vec<Rotation> = tau_i.iter().map(|t| state.g * *t).collect();
    let d_i: Vec<Matrix3<f64>> = xi.iter().map(|x| kind.dtau_l_matrix(x)).collect();
    let m_i: Vec<Matrix3<f64>> = (0..s)
        .map(|i| kind.ddtau_l_matrix(&xi[i], &xi_dot[i]))
        .collect();
    let eta: Vec<AlgebraVec> = (0..s).map(|i| d_i[i] * xi_dot[i]).collect();

    let mut grad_hol = vec![Vector3::zeros(); s];
    let mut grad_hol_jac = vec![Matrix3::zeros(); s];
    let mut n0 = Vec::with_capacity(s);
    for i in 0..s {
        let base = system.force(&g_i[i])?;
        let v = match mode {
            Mode::Free => base,
            Mode::Nonholonomic(_) => base + lambda[i] * sphere::phi_gradient(),
            Mode::Holonomic(c) => {
                grad_hol[i] = c.grad_body(&g_i[i]);
                if with_jacobian {
                    grad_hol_jac[i] = c.grad_body_jacobian(&g_i[i]);
                }
                base + lambda[i] * grad_hol[i]
            }
        };
        n0.push(v);
    }
    let p0: Vec<CoalgebraVec> = eta.iter().map(|e| system.momentum(e)).collect();

    let tau_xi = kind.tau(&xi_step);
    let e_xi = kind.dtau_l_inv_matrix(&xi_step);

    // μ_{k+1} = Ad*_{τ(ξ)} [ μ_k + h Σ b_j Ad*_{τ(-Ξʲ)} Ν₀ʲ ]
    let mut s_vec = state.mu;
    for j in 0..s {
        s_vec += h * tableau.b[j] * (tau_i[j].matrix() * n0[j]);
    }
    let mu_next = tau_xi.matrix().transpose() * s_vec;

    // Ν̂ʲ = (dᴸτ⁻¹_ξ)* [ (dᴸτ_Ξ)* Ν₀ʲ + (ddᴸτ_Ξ Ξ̇)* Π₀ʲ ]
    let nn: Vec<CoalgebraVec> = (0..s)
        .map(|j| d_i[j].transpose() * n0[j] + m_i[j].transpose() * p0[j])
        .collect();
    let nhat: Vec<CoalgebraVec> = nn.iter().map(|n| e_xi.transpose() * n).collect();

    // Μ₀ⁱ = Ad*_{τ(Ξⁱ)} [ μ_k + h Σ a_ij Ad*_{τ(-Ξʲ)} Ν₀ʲ ]
    let m0: Vec<CoalgebraVec> = (0..s)
        .map(|i| {
            let mut acc = state.mu;
            for j in 0..s {
                acc += h * tableau.a(i, j) * (tau_i[j].matrix() * n0[j]);
            }
            tau_i[i].matrix().transpose() * acc
        })
        .collect();

    let force_jac = if with_jacobian {
        g_i.iter()
            .map(|g| system.force_jacobian(g))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    Ok(Assembly {
        s,
        h,
        xi,
        xi_dot,
        lambda,
        tau_i,
        g_i,
        d_i,
        m_i,
        eta,
        n0,
        p0,
        nn,
        nhat,
        m0,
        force_jac,
        grad_hol,
        grad_hol_jac,
        xi_step,
        tau_xi,
        e_xi,
        mu_next,
    })
}

fn residual_from(
    asm: &Assembly,
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    mode: &Mode,
) -> DVector<f64> {
    let s = asm.s;
    let n = mode.unknowns(s);
    let mut r = DVector::zeros(n);
    for i in 0..s {
        let lhs = asm.e_xi.transpose() * (asm.d_i[i].transpose() * asm.p0[i]);
        let mut corr = Vector3::zeros();
        for j in 0..s {
            corr += tableau.b[j] * tableau.a(j, i) * asm.nhat[j];
        }
        let row = lhs - asm.mu_next + (asm.h / tableau.b[i]) * corr;
        r[3 * i] = row.x;
        r[3 * i + 1] = row.y;
        r[3 * i + 2] = row.z;
    }
    match mode {
        Mode::Free => {}
        Mode::Nonholonomic(closure) => {
            for i in 1..s {
                r[3 * s + i - 1] = sphere::phi(&system.momentum_inv(&asm.m0[i]));
            }
            r[4 * s - 1] = match closure {
                ClosureStrategy::Concatenation => asm.lambda[0] - state.lambda_carry,
                ClosureStrategy::ZeroFirst => asm.lambda[0],
                ClosureStrategy::WeightedZeroSum => {
                    (0..s).map(|j| tableau.b[j] * asm.lambda[j]).sum()
                }
            };
        }
        Mode::Holonomic(c) => {
            for i in 1..s {
                r[3 * s + i - 1] = c.value(&asm.g_i[i]);
            }
            // tangency at the step end: ⟨DΦ(g_{k+1}), ġ_{k+1}⟩ = 0 with the
            // velocity read back from μ_{k+1}
            let eta_next = system.momentum_inv(&asm.mu_next);
            r[4 * s - 1] = c.grad_body(&asm.g_i[s - 1]).dot(&eta_next);
        }
    }
    r
}

/// One directional derivative of the residual along unknown `idx`.
fn jacobian_column(
    asm: &Assembly,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    mode: &Mode,
    idx: usize,
) -> DVector<f64> {
    let s = asm.s;
    let h = asm.h;
    let kind = config.retraction;
    let n = mode.unknowns(s);
    let mut col = DVector::zeros(n);
    let mass = system.mass_diagonal();

    // direction of the perturbation
    let (stage_dir, comp, is_lambda) = if idx < 3 * s {
        (idx / 3, idx % 3, false)
    } else {
        (idx - 3 * s, 0, true)
    };

    let mut d_xid = vec![Vector3::zeros(); s];
    let mut d_lam = vec![0.0; s];
    if is_lambda {
        d_lam[stage_dir] = 1.0;
    } else {
        d_xid[stage_dir][comp] = 1.0;
    }

    // chart perturbations
    let d_xi: Vec<AlgebraVec> = (0..s)
        .map(|i| h * tableau.a(i, stage_dir) * d_xid[stage_dir])
        .collect();
    let d_xi_step = if is_lambda {
        Vector3::zeros()
    } else {
        h * tableau.b[stage_dir] * d_xid[stage_dir]
    };

    // body directions of the stage configurations and the step end
    let zeta: Vec<AlgebraVec> = (0..s).map(|i| asm.d_i[i] * d_xi[i]).collect();
    let zeta_step = kind.dtau_l(&asm.xi_step, &d_xi_step);

    let mut d_d = vec![Matrix3::zeros(); s];
    let mut d_eta = vec![Vector3::zeros(); s];
    let mut d_p0 = vec![Vector3::zeros(); s];
    let mut d_n0 = vec![Vector3::zeros(); s];
    let mut d_m = vec![Matrix3::zeros(); s];
    for i in 0..s {
        if !is_lambda {
            d_d[i] = kind.dtau_l_matrix_deriv(&asm.xi[i], &d_xi[i]);
            d_eta[i] = d_d[i] * asm.xi_dot[i] + asm.d_i[i] * d_xid[i];
            d_p0[i] = Vector3::new(
                mass.x * d_eta[i].x,
                mass.y * d_eta[i].y,
                mass.z * d_eta[i].z,
            );
            d_n0[i] = asm.force_jac[i] * zeta[i];
            if let Mode::Holonomic(_) = mode {
                d_n0[i] += asm.lambda[i] * (asm.grad_hol_jac[i] * zeta[i]);
            }
            d_m[i] = kind.ddtau_l_matrix_deriv(&asm.xi[i], &asm.xi_dot[i], &d_xi[i], &d_xid[i]);
        } else if i == stage_dir {
            d_n0[i] = match mode {
                Mode::Nonholonomic(_) => sphere::phi_gradient(),
                Mode::Holonomic(_) => asm.grad_hol[i],
                Mode::Free => Vector3::zeros(),
            };
        }
    }

    // δ(τ(Ξʲ)·Ν₀ʲ) = τ(Ξʲ)(ζʲ × Ν₀ʲ + δΝ₀ʲ)
    let d_transported: Vec<Vector3<f64>> = (0..s)
        .map(|j| asm.tau_i[j].matrix() * (zeta[j].cross(&asm.n0[j]) + d_n0[j]))
        .collect();

    let mut d_s_vec = Vector3::zeros();
    for (bj, dt) in tableau.b.iter().zip(&d_transported) {
        d_s_vec += h * *bj * dt;
    }
    let d_mu_next =
        -zeta_step.cross(&asm.mu_next) + asm.tau_xi.matrix().transpose() * d_s_vec;

    let d_e = if is_lambda {
        Matrix3::zeros()
    } else {
        kind.dtau_l_inv_matrix_deriv(&asm.xi_step, &d_xi_step)
    };

    // δΝ̂ʲ
    let d_nhat: Vec<Vector3<f64>> = (0..s)
        .map(|j| {
            let d_nn = d_d[j].transpose() * asm.n0[j]
                + asm.d_i[j].transpose() * d_n0[j]
                + d_m[j].transpose() * asm.p0[j]
                + asm.m_i[j].transpose() * d_p0[j];
            d_e.transpose() * asm.nn[j] + asm.e_xi.transpose() * d_nn
        })
        .collect();

    for i in 0..s {
        let d_lhs = d_e.transpose() * (asm.d_i[i].transpose() * asm.p0[i])
            + asm.e_xi.transpose() * (d_d[i].transpose() * asm.p0[i])
            + asm.e_xi.transpose() * (asm.d_i[i].transpose() * d_p0[i]);
        let mut d_corr = Vector3::zeros();
        for (j, dn) in d_nhat.iter().enumerate() {
            d_corr += tableau.b[j] * tableau.a(j, i) * dn;
        }
        let row = d_lhs - d_mu_next + (h / tableau.b[i]) * d_corr;
        col[3 * i] = row.x;
        col[3 * i + 1] = row.y;
        col[3 * i + 2] = row.z;
    }

    match mode {
        Mode::Free => {}
        Mode::Nonholonomic(closure) => {
            for i in 1..s {
                // δΜ₀ⁱ = -ζⁱ × Μ₀ⁱ + τ(Ξⁱ)ᵀ (h Σ a_ij δ(τ(Ξʲ)Ν₀ʲ))
                let mut d_acc = Vector3::zeros();
                for (j, dt) in d_transported.iter().enumerate() {
                    d_acc += h * tableau.a(i, j) * dt;
                }
                let d_m0 =
                    -zeta[i].cross(&asm.m0[i]) + asm.tau_i[i].matrix().transpose() * d_acc;
                col[3 * s + i - 1] = d_m0.z / mass.z;
            }
            col[4 * s - 1] = match closure {
                ClosureStrategy::Concatenation | ClosureStrategy::ZeroFirst => d_lam[0],
                ClosureStrategy::WeightedZeroSum => {
                    (0..s).map(|j| tableau.b[j] * d_lam[j]).sum()
                }
            };
        }
        Mode::Holonomic(c) => {
            for i in 1..s {
                col[3 * s + i - 1] = c.grad_body(&asm.g_i[i]).dot(&zeta[i]);
            }
            let eta_next = system.momentum_inv(&asm.mu_next);
            let d_eta_next = Vector3::new(
                d_mu_next.x / mass.x,
                d_mu_next.y / mass.y,
                d_mu_next.z / mass.z,
            );
            let g_end = &asm.g_i[s - 1];
            col[4 * s - 1] = (c.grad_body_jacobian(g_end) * zeta[s - 1]).dot(&eta_next)
                + c.grad_body(g_end).dot(&d_eta_next);
        }
    }
    col
}

struct Solved {
    asm: Assembly,
    iterations: usize,
    residual_norm: f64,
}

fn build_jacobian(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    mode: &Mode,
    h: f64,
    u: &DVector<f64>,
) -> Result<DMatrix<f64>, IntegratorError> {
    let n = mode.unknowns(tableau.s);
    let mut j = DMatrix::zeros(n, n);
    match config.jacobian {
        JacobianMode::Analytic => {
            let asm_j = assemble(state, system, tableau, config, mode, h, u, true)?;
            for cix in 0..n {
                j.set_column(
                    cix,
                    &jacobian_column(&asm_j, system, tableau, config, mode, cix),
                );
            }
        }
        JacobianMode::FiniteDifference => {
            for cix in 0..n {
                let eps = 1e-7 * u[cix].abs().max(1.0);
                let mut up = u.clone();
                up[cix] += eps;
                let mut um = u.clone();
                um[cix] -= eps;
                let rp = residual_from(
                    &assemble(state, system, tableau, config, mode, h, &up, false)?,
                    state,
                    system,
                    tableau,
                    mode,
                );
                let rm = residual_from(
                    &assemble(state, system, tableau, config, mode, h, &um, false)?,
                    state,
                    system,
                    tableau,
                    mode,
                );
                j.set_column(cix, &((rp - rm) / (2.0 * eps)));
            }
        }
    }
    Ok(j)
}

/// Damped Newton iteration on `u`; returns the converged assembly, the number
/// of iterations spent, and the final residual norm.
#[allow(clippy::too_many_arguments)]
fn newton_iterate(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    mode: &Mode,
    h: f64,
    u: &mut DVector<f64>,
    max_iter: usize,
) -> Result<(Assembly, usize, f64), IntegratorError> {
    let min_norm = matches!(mode, Mode::Nonholonomic(ClosureStrategy::WeightedZeroSum));
    let mut asm = assemble(state, system, tableau, config, mode, h, u, false)?;
    let mut r = residual_from(&asm, state, system, tableau, mode);
    let mut rn = r.norm();

    for iter in 0..max_iter {
        if rn <= config.newton_tol {
            return Ok((asm, iter, rn));
        }
        let jac = build_jacobian(state, system, tableau, config, mode, h, u)?;
        let delta = solve_newton_system(jac, &-&r, min_norm)?;

        // damped update: halve on residual increase, up to 8 times
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=8 {
            let u_try = &*u + alpha * &delta;
            // a failed assembly means the trial left the retraction or
            // potential domain; treat it like a residual increase
            if let Ok(asm_try) = assemble(state, system, tableau, config, mode, h, &u_try, false) {
                let r_try = residual_from(&asm_try, state, system, tableau, mode);
                let rn_try = r_try.norm();
                if rn_try < rn || alpha <= 1.0 / 256.0 {
                    accepted = Some((u_try, asm_try, r_try, rn_try));
                    break;
                }
            }
            alpha /= 2.0;
        }
        match accepted {
            Some((u_new, asm_new, r_new, rn_new)) => {
                *u = u_new;
                asm = asm_new;
                r = r_new;
                rn = rn_new;
            }
            None => {
                return Err(IntegratorError::NewtonDivergence {
                    residual: rn,
                    iterations: iter + 1,
                })
            }
        }
    }
    if rn <= config.newton_tol {
        return Ok((asm, max_iter, rn));
    }
    Err(IntegratorError::NewtonDivergence {
        residual: rn,
        iterations: max_iter,
    })
}

fn newton_solve(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    mode: &Mode,
    h: f64,
) -> Result<Solved, IntegratorError> {
    let s = tableau.s;
    let n = mode.unknowns(s);
    // constant-velocity predictor; multipliers from the carry (exact at
    // equilibria, O(h) otherwise)
    let eta0 = system.momentum_inv(&state.mu);
    let mut u = DVector::zeros(n);
    for i in 0..s {
        u[3 * i] = eta0.x;
        u[3 * i + 1] = eta0.y;
        u[3 * i + 2] = eta0.z;
        if let Mode::Nonholonomic(closure) = mode {
            u[3 * s + i] = match closure {
                ClosureStrategy::Concatenation => state.lambda_carry,
                // zero is on the solution branch; keeps the minimum-norm
                // updates of the degenerate weighted closure anchored there
                ClosureStrategy::ZeroFirst | ClosureStrategy::WeightedZeroSum => 0.0,
            };
        }
    }

    let (asm, iterations, residual_norm) =
        newton_iterate(state, system, tableau, config, mode, h, &mut u, config.max_iter)?;

    // a dependent closure row leaves a Λ-gauge freedom; return that family's
    // minimal-multiplier-norm member (the projection preserves the closure
    // row, and a short re-polish absorbs its curvature error)
    if matches!(mode, Mode::Nonholonomic(ClosureStrategy::WeightedZeroSum)) {
        if let Ok(jac) = build_jacobian(state, system, tableau, config, mode, h, &u) {
            if let Some(mut u_proj) = project_multiplier_gauge(&jac, &u, s) {
                if let Ok((asm2, extra, rn2)) =
                    newton_iterate(state, system, tableau, config, mode, h, &mut u_proj, 10)
                {
                    return Ok(Solved {
                        asm: asm2,
                        iterations: iterations + extra,
                        residual_norm: rn2,
                    });
                }
            }
        }
    }

    Ok(Solved {
        asm,
        iterations,
        residual_norm,
    })
}

/// Relative cutoff separating the structurally-null valley of the
/// weighted-zero closure (singular values at roundoff) from the legitimate
/// spectrum (smallest values ~ h·b_min on the study runs).
const MIN_NORM_CUTOFF: f64 = 1e-8;

/// LU solve for the regular closures; minimum-norm SVD solve where the closure
/// row is linearly dependent (weighted-zero on systems with force ⊥ 𝔥).
fn solve_newton_system(
    jac: DMatrix<f64>,
    rhs: &DVector<f64>,
    min_norm: bool,
) -> Result<DVector<f64>, IntegratorError> {
    if !min_norm {
        if let Some(sol) = jac.clone().lu().solve(rhs) {
            if sol.iter().all(|x| x.is_finite()) {
                return Ok(sol);
            }
        }
    }
    let svd = jac.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = if min_norm { MIN_NORM_CUTOFF } else { 1e-12 };
    svd.solve(rhs, cutoff * sigma_max.max(1e-300))
        .map_err(|_| IntegratorError::LinearSolveFailed)
}

/// Moves a converged solution of a rank-deficient stage system to the
/// minimal-multiplier-norm point of its solution family: the Λ-gauge freedom
/// of a dependent closure row is fixed by minimizing ‖Λ‖ along the Jacobian
/// null directions (which preserve the closure row). Returns `None` when the
/// system is actually full-rank.
fn project_multiplier_gauge(jac: &DMatrix<f64>, u: &DVector<f64>, s: usize) -> Option<DVector<f64>> {
    let n = u.len();
    let svd = jac.clone().svd(false, true);
    let v_t = svd.v_t.as_ref()?;
    let sigma_max = svd.singular_values.max();
    let mut null_dirs: Vec<DVector<f64>> = Vec::new();
    for (i, sv) in svd.singular_values.iter().enumerate() {
        if *sv <= MIN_NORM_CUTOFF * sigma_max {
            null_dirs.push(v_t.row(i).transpose());
        }
    }
    if null_dirs.is_empty() {
        return None;
    }
    // least squares for min ‖Λ(u + N c)‖ over the null coefficients c
    let k = null_dirs.len();
    let mut a = DMatrix::zeros(s, k);
    let mut b = DVector::zeros(s);
    for i in 0..s {
        b[i] = -u[3 * s + i];
        for (j, dir) in null_dirs.iter().enumerate() {
            a[(i, j)] = dir[3 * s + i];
        }
    }
    let c = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let mut out = u.clone();
    for (j, dir) in null_dirs.iter().enumerate() {
        for r in 0..n {
            out[r] += c[j] * dir[r];
        }
    }
    Some(out)
}

fn extract_solution(asm: &Assembly, system: &dyn LagrangianSystem) -> (Vec<Stage>, f64) {
    let s = asm.s;
    let mut stages = Vec::with_capacity(s);
    let mut phi_max = 0.0_f64;
    for i in 0..s {
        let eta_constraint = system.momentum_inv(&asm.m0[i]);
        if i > 0 {
            phi_max = phi_max.max(sphere::phi(&eta_constraint).abs());
        }
        stages.push(Stage {
            xi: asm.xi[i],
            xi_dot: asm.xi_dot[i],
            g: asm.g_i[i],
            lambda: asm.lambda[i],
            eta: asm.eta[i],
            n0: asm.n0[i],
            m0: asm.m0[i],
            eta_constraint,
        });
    }
    (stages, phi_max)
}

/// Residual of the full stage system at a candidate unknown vector
/// `[Ξ̇¹..Ξ̇ˢ, Λ¹..Λˢ]`. Zero residual defines the step.
pub fn stage_residual(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    closure: ClosureStrategy,
    h: f64,
    unknowns: &DVector<f64>,
) -> Result<DVector<f64>, IntegratorError> {
    let mode = Mode::Nonholonomic(closure);
    let asm = assemble(state, system, tableau, config, &mode, h, unknowns, false)?;
    Ok(residual_from(&asm, state, system, tableau, &mode))
}

/// Residual of the free (unconstrained variational) stage system at
/// `[Ξ̇¹..Ξ̇ˢ]`.
pub fn stage_residual_free(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    h: f64,
    unknowns: &DVector<f64>,
) -> Result<DVector<f64>, IntegratorError> {
    let asm = assemble(state, system, tableau, config, &Mode::Free, h, unknowns, false)?;
    Ok(residual_from(&asm, state, system, tableau, &Mode::Free))
}

fn advance(
    state: &StepState,
    solved: Solved,
    system: &dyn LagrangianSystem,
    h: f64,
) -> (StepState, StageSolution) {
    let (stages, phi_max) = extract_solution(&solved.asm, system);
    let lambda_carry = stages.last().map(|st| st.lambda).unwrap_or(0.0);
    let next = StepState {
        g: state.g * solved.asm.tau_xi,
        mu: solved.asm.mu_next,
        lambda_carry,
        t: state.t + h,
    };
    let sol = StageSolution {
        stages,
        xi_step: solved.asm.xi_step,
        newton_iterations: solved.iterations,
        residual_norm: solved.residual_norm,
        phi_max,
    };
    (next, sol)
}

/// One step of the nonholonomic scheme. Under
/// [`ClosureStrategy::Concatenation`] the returned state carries Λˢ into the
/// next step.
pub fn step(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    closure: ClosureStrategy,
    h: f64,
) -> Result<(StepState, StageSolution), IntegratorError> {
    let phi0 = sphere::phi(&system.momentum_inv(&state.mu));
    if phi0.abs() > 1e-10 {
        return Err(IntegratorError::InconsistentInitialData { phi: phi0 });
    }
    let mode = Mode::Nonholonomic(closure);
    let solved = newton_solve(state, system, tableau, config, &mode, h)?;
    Ok(advance(state, solved, system, h))
}

/// One step of the free variational scheme (no constraint block, no
/// multipliers); the stage bundle reports Λⁱ = 0 and φ residuals of the
/// recovered momenta.
pub fn step_free(
    state: &StepState,
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    h: f64,
) -> Result<(StepState, StageSolution), IntegratorError> {
    let solved = newton_solve(state, system, tableau, config, &Mode::Free, h)?;
    Ok(advance(state, solved, system, h))
}

/// One step of the holonomic variant: Φ(Gⁱ) = 0 on the inner and final stages
/// plus the tangency condition at g_{k+1}.
pub fn step_holonomic(
    state: &StepState,
    system: &dyn LagrangianSystem,
    constraint: &dyn HolonomicConstraint,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    h: f64,
) -> Result<(StepState, StageSolution), IntegratorError> {
    let at_start = constraint.value(&state.g);
    if at_start.abs() > 1e-8 {
        return Err(IntegratorError::ConstraintViolatedAtStart { value: at_start });
    }
    let tangency = constraint
        .grad_body(&state.g)
        .dot(&system.momentum_inv(&state.mu));
    if tangency.abs() > 1e-8 {
        return Err(IntegratorError::ConstraintViolatedAtStart { value: tangency });
    }
    let mode = Mode::Holonomic(constraint);
    let solved = newton_solve(state, system, tableau, config, &mode, h)?;
    Ok(advance(state, solved, system, h))
}

/// Re-evaluates the inner momentum recovery
/// Μ₀ⁱ = Ad*_{τ(Ξⁱ)}[μ_k + h Σ_j a_ij Ad*_{τ(−Ξʲ)} Ν₀ʲ] with Ηⁱ = D₂ℓ⁻¹(Μ₀ⁱ),
/// as a post-processing layer over converged (or free/symplectic) stages.
pub fn recover_inner_momenta(
    state: &StepState,
    stages: &[Stage],
    system: &dyn LagrangianSystem,
    tableau: &ButcherTableau,
    config: &SolverConfig,
    h: f64,
) -> Vec<(CoalgebraVec, AlgebraVec)> {
    let s = tableau.s;
    let kind = config.retraction;
    let taus: Vec<Rotation> = stages.iter().map(|st| kind.tau(&st.xi)).collect();
    (0..s)
        .map(|i| {
            let mut acc = state.mu;
            for j in 0..s {
                acc += h * tableau.a(i, j) * (taus[j].matrix() * stages[j].n0);
            }
            let m0 = taus[i].matrix().transpose() * acc;
            let eta = system.momentum_inv(&m0);
            (m0, eta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::so3::from_tait_bryan;
    use crate::systems::{Kepler, KeplerParams, Pendulum, PendulumParams};
    use crate::tableau::lobatto;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_3;

    fn pendulum() -> Pendulum {
        Pendulum::new(PendulumParams::default()).unwrap()
    }

    fn benchmark_ic(system: &dyn LagrangianSystem) -> StepState {
        let g0 = from_tait_bryan(0.0, FRAC_PI_3, 0.0);
        let eta0 = Vector3::new(1.0 / 3.0, 0.0, 0.0);
        StepState::new(g0, eta0, 0.0, system)
    }

    fn config(kind: RetractionKind) -> SolverConfig {
        SolverConfig {
            retraction: kind,
            ..Default::default()
        }
    }

    #[test]
    fn assemble_n0_examples() {
        let p = pendulum();
        let n0 = assemble_n0(&p, &Rotation::identity(), 0.0).unwrap();
        assert_eq!(n0, Vector3::zeros());
        // with zero field the load is the pure constraint force
        let free = Pendulum::new(PendulumParams {
            gamma: Vector3::zeros(),
            ..Default::default()
        })
        .unwrap();
        let n0 = assemble_n0(&free, &from_tait_bryan(0.3, 0.2, -0.4), 2.0).unwrap();
        assert_eq!(n0, Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn initial_multiplier_examples() {
        let p = pendulum();
        let st = benchmark_ic(&p);
        let eta = Vector3::new(1.0 / 3.0, 0.0, 0.0);
        assert_abs_diff_eq!(
            initial_multiplier(&p, &st.g, &eta).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let k = Kepler::new(KeplerParams::default()).unwrap();
        let g0 = from_tait_bryan(
            0.940125174120388,
            -0.693184358892293,
            3.007331043590061,
        );
        let eta0 = Vector3::new(1.53418408426885, 0.0, 0.0);
        assert_abs_diff_eq!(initial_multiplier(&k, &g0, &eta0).unwrap(), 0.0, epsilon = 1e-13);
    }

    /// A force with an 𝔥-component f₃ requires λ₀ = −f₃ to keep the
    /// constraint differentiated along the flow.
    #[test]
    fn initial_multiplier_balances_h_forces() {
        struct Coupled;
        impl LagrangianSystem for Coupled {
            fn lagrangian(&self, _: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
                Ok(0.5 * eta.norm_squared())
            }
            fn force(&self, _: &Rotation) -> Result<CoalgebraVec, SystemError> {
                Ok(Vector3::new(0.1, -0.2, 0.7))
            }
            fn force_jacobian(&self, _: &Rotation) -> Result<Matrix3<f64>, SystemError> {
                Ok(Matrix3::zeros())
            }
            fn momentum(&self, eta: &AlgebraVec) -> CoalgebraVec {
                *eta
            }
            fn momentum_inv(&self, p: &CoalgebraVec) -> AlgebraVec {
                *p
            }
            fn mass_diagonal(&self) -> Vector3<f64> {
                Vector3::new(1.0, 1.0, 1.0)
            }
            fn energy(&self, _: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
                Ok(0.5 * eta.norm_squared())
            }
        }
        let lam = initial_multiplier(&Coupled, &Rotation::identity(), &Vector3::x()).unwrap();
        assert_abs_diff_eq!(lam, -0.7, epsilon = 1e-15);
    }

    #[test]
    fn converged_solution_is_a_fixed_point_of_the_residual() {
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let st = benchmark_ic(&p);
        let (_, sol) = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1).unwrap();
        let mut u = DVector::zeros(12);
        for (i, stage) in sol.stages.iter().enumerate() {
            u[3 * i] = stage.xi_dot.x;
            u[3 * i + 1] = stage.xi_dot.y;
            u[3 * i + 2] = stage.xi_dot.z;
            u[9 + i] = stage.lambda;
        }
        let r = stage_residual(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1, &u)
            .unwrap();
        assert!(r.norm() <= cfg.newton_tol * 10.0);
    }

    /// As h → 0 the residual evaluated at the continuous data
    /// (Ξ̇ⁱ = η₀, Λⁱ = λ₀) vanishes linearly.
    #[test]
    fn residual_consistent_with_continuous_limit() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let cfg = config(RetractionKind::Exponential);
        let st = benchmark_ic(&p);
        let eta0 = p.momentum_inv(&st.mu);
        let mut u = DVector::zeros(8);
        for i in 0..2 {
            u[3 * i] = eta0.x;
            u[3 * i + 1] = eta0.y;
            u[3 * i + 2] = eta0.z;
        }
        let norms: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| {
                stage_residual(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, h, &u)
                    .unwrap()
                    .norm()
            })
            .collect();
        for w in norms.windows(2) {
            let order = (w[0] / w[1]).log10();
            assert!(order > 0.9, "residual should shrink ~linearly: {norms:?}");
        }
    }

    /// With the multipliers pinned to zero the constrained residual's momentum
    /// block coincides with the free system's residual.
    #[test]
    fn free_case_is_a_structural_reduction() {
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let st = benchmark_ic(&p);
        let mut u_free = DVector::zeros(9);
        for i in 0..3 {
            u_free[3 * i] = 0.21 + 0.01 * i as f64;
            u_free[3 * i + 1] = -0.13;
            u_free[3 * i + 2] = 0.05;
        }
        let mut u_full = DVector::zeros(12);
        u_full.rows_mut(0, 9).copy_from(&u_free);
        let r_free = stage_residual_free(&st, &p, &t, &cfg, 0.1, &u_free).unwrap();
        let r_full =
            stage_residual(&st, &p, &t, &cfg, ClosureStrategy::ZeroFirst, 0.1, &u_full).unwrap();
        for i in 0..9 {
            assert_eq!(r_free[i], r_full[i]);
        }
    }

    #[test]
    fn equilibrium_is_bit_stable() {
        // no field, zero velocity: the step must reproduce the state exactly
        let free = Pendulum::new(PendulumParams {
            gamma: Vector3::zeros(),
            ..Default::default()
        })
        .unwrap();
        let g0 = from_tait_bryan(0.4, -0.2, 0.9);
        for s in [2usize, 3, 4] {
            let t = lobatto(s).unwrap();
            for kind in [RetractionKind::Exponential, RetractionKind::Cayley] {
                let mut st = StepState::new(g0, Vector3::zeros(), 0.0, &free);
                for _ in 0..100 {
                    let (next, sol) =
                        step(&st, &free, &t, &config(kind), ClosureStrategy::Concatenation, 0.1)
                            .unwrap();
                    assert_eq!(next.g.matrix(), g0.matrix());
                    assert_eq!(next.mu, Vector3::zeros());
                    assert!(sol.stages.iter().all(|stage| stage.lambda == 0.0));
                    st = next;
                }
            }
        }
    }

    #[test]
    fn stages_satisfy_structural_identities() {
        let p = pendulum();
        let cfg = config(RetractionKind::Cayley);
        for s in [2usize, 3, 4] {
            let t = lobatto(s).unwrap();
            let st = benchmark_ic(&p);
            let (next, sol) = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1).unwrap();
            // Ξ¹ = 0, G¹ = g_k (a_1j = 0); Ξˢ = ξ, Gˢ = g_{k+1} (stiff accuracy)
            assert_eq!(sol.stages[0].xi, Vector3::zeros());
            assert_eq!(sol.stages[0].g.matrix(), st.g.matrix());
            assert!((sol.stages[s - 1].xi - sol.xi_step).norm() <= 1e-15);
            assert!((sol.stages[s - 1].g.matrix() - next.g.matrix()).norm() <= 1e-14);
            // momentum recovery boundary identities
            assert!((sol.stages[0].m0 - st.mu).norm() <= 1e-15);
            assert!((sol.stages[s - 1].m0 - next.mu).norm() <= 1e-13);
        }
    }

    #[test]
    fn benchmark_initial_conditions_run_and_satisfy_constraints() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let mut st = benchmark_ic(&p);
        let n = 50;
        for _ in 0..n {
            let (next, sol) = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1).unwrap();
            assert!(sol.phi_max <= 1e-12);
            st = next;
        }
        // global error at t = 5 sits at the measured order-2 level
        let traj = reference::reference_solve(
            &p,
            &benchmark_ic(&p).g,
            &Vector3::new(1.0 / 3.0, 0.0, 0.0),
            5.0,
            1e-4,
            50_000,
        )
        .unwrap();
        let exact = traj.last().unwrap();
        let err = (st.g.matrix() - exact.g.matrix()).norm();
        assert!(err < 1e-2, "err = {err:.3e}");
    }

    /// Single-step errors against the continuous flow: order p+1 locally.
    #[test]
    fn one_step_local_order() {
        let p = pendulum();
        let cfg = config(RetractionKind::Exponential);
        let g0 = from_tait_bryan(0.0, FRAC_PI_3, 0.0);
        let eta0 = Vector3::new(1.0 / 3.0, 0.0, 0.0);
        let hs = [0.2, 0.1, 0.05, 0.025];
        for (s, expected) in [(2usize, 3.0), (3, 5.0), (4, 7.0)] {
            let t = lobatto(s).unwrap();
            let errs: Vec<f64> = hs
                .iter()
                .map(|&h| {
                    let st = StepState::new(g0, eta0, 0.0, &p);
                    let (next, _) =
                        step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, h).unwrap();
                    let traj =
                        reference::reference_solve(&p, &g0, &eta0, h, h / 2000.0, 4000).unwrap();
                    let exact = traj.last().unwrap();
                    (next.g.matrix() - exact.g.matrix()).norm() + (next.mu - exact.eta).norm()
                })
                .collect();
            // points below the Newton-tolerance floor carry no order signal
            let above: Vec<f64> = errs.iter().copied().filter(|e| *e > 1e-13).collect();
            assert!(above.len() >= 2, "s={s}: all errors at the solver floor");
            let mut slopes = Vec::new();
            for w in above.windows(2) {
                slopes.push((w[0] / w[1]).log2());
            }
            let slope = slopes.iter().sum::<f64>() / slopes.len() as f64;
            assert!(
                (slope - expected).abs() <= 0.5,
                "s={s}: local order {slope:.2}, expected {expected} ({errs:?})"
            );
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let st = benchmark_ic(&p);
        let h = 0.13;
        for kind in [RetractionKind::Exponential, RetractionKind::Cayley] {
            let cfg = config(kind);
            for mode in [
                Mode::Nonholonomic(ClosureStrategy::Concatenation),
                Mode::Free,
            ] {
                let n = mode.unknowns(3);
                let mut u = DVector::zeros(n);
                for i in 0..3 {
                    u[3 * i] = 0.31 - 0.02 * i as f64;
                    u[3 * i + 1] = 0.11;
                    u[3 * i + 2] = -0.07;
                    if n == 12 {
                        u[9 + i] = 0.03 * (i as f64 - 1.0);
                    }
                }
                let asm = assemble(&st, &p, &t, &cfg, &mode, h, &u, true).unwrap();
                for cix in 0..n {
                    let eps = 1e-7;
                    let mut up = u.clone();
                    up[cix] += eps;
                    let mut um = u.clone();
                    um[cix] -= eps;
                    let rp = residual_from(
                        &assemble(&st, &p, &t, &cfg, &mode, h, &up, false).unwrap(),
                        &st,
                        &p,
                        &t,
                        &mode,
                    );
                    let rm = residual_from(
                        &assemble(&st, &p, &t, &cfg, &mode, h, &um, false).unwrap(),
                        &st,
                        &p,
                        &t,
                        &mode,
                    );
                    let fd = (rp - rm) / (2.0 * eps);
                    let analytic = jacobian_column(&asm, &p, &t, &cfg, &mode, cix);
                    assert!(
                        (&analytic - &fd).norm() <= 1e-6,
                        "kind {kind:?} column {cix}: |analytic - fd| = {:.3e}",
                        (&analytic - &fd).norm()
                    );
                }
            }
        }
    }

    #[test]
    fn fd_jacobian_mode_reaches_the_same_solution() {
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let st = benchmark_ic(&p);
        let mut cfg = config(RetractionKind::Cayley);
        let (next_a, _) = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1).unwrap();
        cfg.jacobian = JacobianMode::FiniteDifference;
        let (next_f, _) = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.1).unwrap();
        assert!((next_a.g.matrix() - next_f.g.matrix()).norm() <= 1e-11);
        assert!((next_a.mu - next_f.mu).norm() <= 1e-11);
    }

    /// With no load the recovered stage momenta are pure coadjoint transports:
    /// the spatial momentum is constant across stages.
    #[test]
    fn free_rigid_body_inner_momenta() {
        let free = Pendulum::new(PendulumParams {
            gamma: Vector3::zeros(),
            ..Default::default()
        })
        .unwrap();
        let t = lobatto(4).unwrap();
        let cfg = config(RetractionKind::Exponential);
        let st = StepState::new(
            from_tait_bryan(0.2, 0.4, -0.6),
            Vector3::new(0.5, -0.3, 0.0),
            0.0,
            &free,
        );
        let (_, sol) = step_free(&st, &free, &t, &cfg, 0.1).unwrap();
        let recovered = recover_inner_momenta(&st, &sol.stages, &free, &t, &cfg, 0.1);
        let spatial0 = st.g.matrix() * st.mu;
        for (i, (m0, eta)) in recovered.iter().enumerate() {
            let spatial = sol.stages[i].g.matrix() * m0;
            assert!((spatial - spatial0).norm() <= 1e-12);
            assert!((eta - free.momentum_inv(m0)).norm() == 0.0);
        }
    }

    #[test]
    fn inconsistent_initial_data_is_rejected() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let st = StepState::new(
            Rotation::identity(),
            Vector3::new(0.1, 0.0, 0.5),
            0.0,
            &p,
        );
        let err = step(&st, &p, &t, &config(RetractionKind::Cayley), ClosureStrategy::Concatenation, 0.1)
            .unwrap_err();
        assert!(matches!(err, IntegratorError::InconsistentInitialData { .. }));
    }

    #[test]
    fn oversized_steps_exceed_the_retraction_domain() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let st = StepState::new(Rotation::identity(), Vector3::new(3.0, 0.0, 0.0), 0.0, &p);
        let err = step(
            &st,
            &p,
            &t,
            &config(RetractionKind::Exponential),
            ClosureStrategy::Concatenation,
            1.2,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            IntegratorError::RetractionDomainExceeded(_)
        ));
    }

    #[test]
    fn newton_divergence_reports_residual() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let cfg = SolverConfig {
            max_iter: 1,
            retraction: RetractionKind::Cayley,
            ..Default::default()
        };
        let st = benchmark_ic(&p);
        let err = step(&st, &p, &t, &cfg, ClosureStrategy::Concatenation, 0.4).unwrap_err();
        match err {
            IntegratorError::NewtonDivergence { residual, .. } => assert!(residual > 0.0),
            other => panic!("expected NewtonDivergence, got {other}"),
        }
    }

    #[test]
    fn holonomic_latitude_circle_is_preserved() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let circle = PlaneCircle::latitude(FRAC_PI_3);
        // start on the circle with a horizontal velocity (η ∥ x₀ components
        // allowed: the fiber motion is unconstrained here)
        let g0 = from_tait_bryan(0.0, FRAC_PI_3, 0.0);
        let eta0 = Vector3::new(0.4, 0.0, 0.0);
        assert!(circle.value(&g0).abs() < 1e-15);
        let mut st = StepState::new(g0, eta0, 0.0, &p);
        let e0 = p.energy(&g0, &eta0).unwrap();
        let mut e_worst = 0.0_f64;
        for _ in 0..1000 {
            let (next, _) = step_holonomic(&st, &p, &circle, &t, &cfg, 0.05).unwrap();
            st = next;
            assert!(circle.value(&st.g).abs() <= 1e-10);
            let e = p.energy(&st.g, &p.momentum_inv(&st.mu)).unwrap();
            e_worst = e_worst.max((e - e0).abs());
        }
        // bounded energy oscillation, no blow-up over t = 50
        assert!(e_worst < 1e-2, "energy error {e_worst:.3e}");
    }

    /// The horizontal latitude circle turns gravity off along the constraint:
    /// the azimuth advances uniformly, which is the 1-D oracle.
    #[test]
    fn holonomic_matches_uniform_circle_motion() {
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let cfg = config(RetractionKind::Exponential);
        let circle = PlaneCircle::latitude(FRAC_PI_3);
        let g0 = from_tait_bryan(0.0, FRAC_PI_3, 0.0);
        let eta0 = Vector3::new(0.4, 0.0, 0.0);
        let mut st = StepState::new(g0, eta0, 0.0, &p);
        let h = 0.05;
        let n = 400;
        // azimuth of x = g x₀ advances at the fixed initial rate
        let x0 = g0.matrix() * sphere::origin().coords();
        let xdot0 = g0.matrix() * eta0.cross(sphere::origin().coords());
        let r2 = x0.x * x0.x + x0.y * x0.y;
        let omega = (x0.x * xdot0.y - x0.y * xdot0.x) / r2;
        let psi0 = x0.y.atan2(x0.x);
        let mut worst = 0.0_f64;
        for k in 0..n {
            let (next, _) = step_holonomic(&st, &p, &circle, &t, &cfg, h).unwrap();
            st = next;
            let x = st.g.matrix() * sphere::origin().coords();
            let psi = x.y.atan2(x.x);
            let expect = psi0 + omega * (k + 1) as f64 * h;
            let diff = (psi - expect + std::f64::consts::PI)
                .rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            worst = worst.max(diff.abs());
        }
        assert!(worst <= 1e-6, "azimuth deviation {worst:.3e}");
    }

    /// A trivial constraint (value and gradient identically zero) leaves the
    /// holonomic system rank-deficient in Λ but its dynamics must coincide
    /// with the free variational step.
    #[test]
    fn holonomic_with_trivial_constraint_reduces_to_free_step() {
        struct NoConstraint;
        impl HolonomicConstraint for NoConstraint {
            fn value(&self, _: &Rotation) -> f64 {
                0.0
            }
            fn grad_body(&self, _: &Rotation) -> Vector3<f64> {
                Vector3::zeros()
            }
            fn grad_body_jacobian(&self, _: &Rotation) -> Matrix3<f64> {
                Matrix3::zeros()
            }
        }
        let p = pendulum();
        let t = lobatto(3).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let st = benchmark_ic(&p);
        let (free_next, _) = step_free(&st, &p, &t, &cfg, 0.1).unwrap();
        let (hol_next, _) = step_holonomic(&st, &p, &NoConstraint, &t, &cfg, 0.1).unwrap();
        assert!((free_next.g.matrix() - hol_next.g.matrix()).norm() <= 1e-12);
        assert!((free_next.mu - hol_next.mu).norm() <= 1e-12);
    }

    /// Long-run energy behavior of the holonomic variant on a tilted circle
    /// (a bead-on-circle pendulum, so the energy error genuinely oscillates):
    /// bounded oscillation without secular growth over t = 100.
    #[test]
    fn holonomic_energy_has_no_secular_drift() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let cfg = config(RetractionKind::Cayley);
        let beta = 0.3_f64;
        let circle = PlaneCircle {
            normal: Vector3::new(beta.sin(), 0.0, beta.cos()),
            offset: 1.0_f64.cos(),
        };
        let g0 = crate::so3::rot_y(beta + 1.0);
        // tangential speed plus a fiber component: both stay on the circle
        let eta0 = Vector3::new(0.25, 0.0, 0.1);
        let mut st = StepState::new(g0, eta0, 0.0, &p);
        let e0 = p.energy(&g0, &eta0).unwrap();
        let h = 0.1;
        let mut ts = Vec::new();
        let mut es = Vec::new();
        let mut early_max = 0.0_f64;
        for k in 0..1000 {
            let (next, _) = step_holonomic(&st, &p, &circle, &t, &cfg, h).unwrap();
            st = next;
            let e = p.energy(&st.g, &p.momentum_inv(&st.mu)).unwrap() - e0;
            ts.push((k + 1) as f64 * h);
            es.push(e);
            if ts.len() <= 100 {
                early_max = early_max.max(e.abs());
            }
        }
        let overall_max = es.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        // bounded: the late oscillation stays at the early amplitude scale
        assert!(
            overall_max <= 3.0 * early_max.max(1e-14),
            "energy grows: early {early_max:.3e}, overall {overall_max:.3e}"
        );
        // and the fitted drift stays within the resolution of a 100 s fit
        let (slope, _) = crate::experiments::linear_fit(&ts, &es);
        let amp = overall_max.max(1e-14);
        assert!(
            (slope * 100.0).abs() <= 0.3 * amp,
            "secular drift: slope {slope:.3e}, amplitude {amp:.3e}"
        );
    }

    #[test]
    fn holonomic_rejects_offconstraint_start() {
        let p = pendulum();
        let t = lobatto(2).unwrap();
        let circle = PlaneCircle {
            normal: Vector3::z(),
            offset: 0.3,
        };
        let st = StepState::new(Rotation::identity(), Vector3::zeros(), 0.0, &p);
        let err = step_holonomic(&st, &p, &circle, &t, &config(RetractionKind::Cayley), 0.1)
            .unwrap_err();
        assert!(matches!(err, IntegratorError::ConstraintViolatedAtStart { .. }));
    }
}
