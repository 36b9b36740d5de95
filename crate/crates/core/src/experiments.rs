//! Experiment drivers: trajectory runs, convergence-order studies, and
//! energy/multiplier studies, each with deterministic CSV output.

use crate::integrator::{
    self, ClosureStrategy, IntegratorError, SolverConfig, StepState,
};
use crate::reference::{self, ReferenceError};
use crate::retraction::RetractionKind;
use crate::so3::{from_tait_bryan, to_tait_bryan, AlgebraVec, Rotation};
use crate::sphere;
use crate::systems::{
    Kepler, KeplerParams, LagrangianSystem, Pendulum, PendulumParams, SystemError,
};
use crate::tableau::{lobatto, TableauError};
use nalgebra::{Matrix3, Vector3};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Integrator(#[from] IntegratorError),
    #[error("{0}")]
    Reference(#[from] ReferenceError),
    #[error("{0}")]
    System(#[from] SystemError),
    #[error("{0}")]
    Tableau(#[from] TableauError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemChoice {
    Pendulum,
    Kepler,
}

/// How the `ic_g` triple is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcFormat {
    /// Tait-Bryan angles of R_z(θ₃) R_y(θ₂) R_x(θ₁).
    TaitBryan,
    /// Exponential coordinates: g₀ = exp(hat(v)).
    Exponential,
}

/// One fully-resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub system: SystemChoice,
    pub stages: usize,
    pub retraction: RetractionKind,
    pub closure: ClosureStrategy,
    pub h: f64,
    pub t_end: f64,
    pub ic_g: [f64; 3],
    pub ic_eta: [f64; 3],
    /// Initial multiplier; `None` derives it from the continuous equations.
    pub ic_lambda: Option<f64>,
    pub ic_format: IcFormat,
    pub pendulum: PendulumParams,
    pub kepler: KeplerParams,
}

impl ExperimentConfig {
    /// Pendulum defaults: g₀ = (0, π/3, 0), η₀ = (1/3, 0, 0), λ₀ = 0,
    /// h = 0.1 with the Cayley map.
    pub fn pendulum_defaults() -> Self {
        ExperimentConfig {
            system: SystemChoice::Pendulum,
            stages: 2,
            retraction: RetractionKind::Cayley,
            closure: ClosureStrategy::Concatenation,
            h: 0.1,
            t_end: 10.0,
            ic_g: [0.0, std::f64::consts::FRAC_PI_3, 0.0],
            ic_eta: [1.0 / 3.0, 0.0, 0.0],
            ic_lambda: Some(0.0),
            ic_format: IcFormat::TaitBryan,
            pendulum: PendulumParams::default(),
            kepler: KeplerParams::default(),
        }
    }

    /// Kepler defaults: the g₀, η₀ triple of the orbit runs, h = 0.01 with
    /// the exponential map.
    pub fn kepler_defaults() -> Self {
        ExperimentConfig {
            system: SystemChoice::Kepler,
            stages: 4,
            retraction: RetractionKind::Exponential,
            closure: ClosureStrategy::Concatenation,
            h: 0.01,
            t_end: 10.0,
            ic_g: [0.940125174120388, -0.693184358892293, 3.007331043590061],
            ic_eta: [1.53418408426885, 0.0, 0.0],
            ic_lambda: Some(0.0),
            ic_format: IcFormat::TaitBryan,
            pendulum: PendulumParams::default(),
            kepler: KeplerParams::default(),
        }
    }

    pub fn defaults_for(system: SystemChoice) -> Self {
        match system {
            SystemChoice::Pendulum => Self::pendulum_defaults(),
            SystemChoice::Kepler => Self::kepler_defaults(),
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.h <= 0.0 {
            return Err(ExperimentError::Config(format!(
                "step size must be positive, got {}",
                self.h
            )));
        }
        if self.t_end < 0.0 {
            return Err(ExperimentError::Config(format!(
                "duration must be nonnegative, got {}",
                self.t_end
            )));
        }
        if !(2..=4).contains(&self.stages) {
            return Err(ExperimentError::Config(format!(
                "stages must be 2, 3 or 4, got {}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Concrete system dispatch; keeps experiment runs `Send` for the concurrent
/// order study.
#[derive(Debug, Clone, Copy)]
pub enum AnySystem {
    Pendulum(Pendulum),
    Kepler(Kepler),
}

impl AnySystem {
    fn as_dyn(&self) -> &dyn LagrangianSystem {
        match self {
            AnySystem::Pendulum(p) => p,
            AnySystem::Kepler(k) => k,
        }
    }
}

impl LagrangianSystem for AnySystem {
    fn lagrangian(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        self.as_dyn().lagrangian(g, eta)
    }
    fn force(&self, g: &Rotation) -> Result<Vector3<f64>, SystemError> {
        self.as_dyn().force(g)
    }
    fn force_jacobian(&self, g: &Rotation) -> Result<Matrix3<f64>, SystemError> {
        self.as_dyn().force_jacobian(g)
    }
    fn momentum(&self, eta: &AlgebraVec) -> Vector3<f64> {
        self.as_dyn().momentum(eta)
    }
    fn momentum_inv(&self, p: &Vector3<f64>) -> AlgebraVec {
        self.as_dyn().momentum_inv(p)
    }
    fn mass_diagonal(&self) -> Vector3<f64> {
        self.as_dyn().mass_diagonal()
    }
    fn energy(&self, g: &Rotation, eta: &AlgebraVec) -> Result<f64, SystemError> {
        self.as_dyn().energy(g, eta)
    }
}

pub fn build_system(cfg: &ExperimentConfig) -> Result<AnySystem, ExperimentError> {
    Ok(match cfg.system {
        SystemChoice::Pendulum => AnySystem::Pendulum(Pendulum::new(cfg.pendulum)?),
        SystemChoice::Kepler => AnySystem::Kepler(Kepler::new(cfg.kepler)?),
    })
}

/// Initial rotation from the configured triple.
pub fn initial_rotation(cfg: &ExperimentConfig) -> Rotation {
    match cfg.ic_format {
        IcFormat::TaitBryan => from_tait_bryan(cfg.ic_g[0], cfg.ic_g[1], cfg.ic_g[2]),
        IcFormat::Exponential => RetractionKind::Exponential.tau(&Vector3::new(
            cfg.ic_g[0],
            cfg.ic_g[1],
            cfg.ic_g[2],
        )),
    }
}

/// Initial step state; the multiplier defaults to the continuous one.
pub fn initial_state(
    cfg: &ExperimentConfig,
    system: &AnySystem,
) -> Result<StepState, ExperimentError> {
    let g0 = initial_rotation(cfg);
    let eta0 = Vector3::new(cfg.ic_eta[0], cfg.ic_eta[1], cfg.ic_eta[2]);
    let lambda = match cfg.ic_lambda {
        Some(v) => v,
        None => integrator::initial_multiplier(system, &g0, &eta0)?,
    };
    Ok(StepState::new(g0, eta0, lambda, system))
}

fn solver_config(cfg: &ExperimentConfig) -> SolverConfig {
    SolverConfig {
        retraction: cfg.retraction,
        ..Default::default()
    }
}

/// One output row of a trajectory run.
#[derive(Debug, Clone, Copy)]
pub struct SimRow {
    pub t: f64,
    pub g: [f64; 9],
    pub theta: [f64; 3],
    pub gimbal: bool,
    pub eta: [f64; 3],
    pub x: [f64; 3],
    pub e_err: f64,
    /// Λˢ of the step that produced this row (λ₀ on the first row).
    pub lambda_s: f64,
    /// max_{i≥2} |φ(Ηⁱ)| of the step (|φ(η₀)| on the first row).
    pub phi_max: f64,
}

fn make_row(
    system: &AnySystem,
    state: &StepState,
    e0: f64,
    lambda_s: f64,
    phi_max: f64,
) -> Result<SimRow, ExperimentError> {
    let eta = system.momentum_inv(&state.mu);
    let m = state.g.matrix();
    let (t1, t2, t3, gimbal) = to_tait_bryan(&state.g);
    let x = m * sphere::origin().coords();
    Ok(SimRow {
        t: state.t,
        g: [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ],
        theta: [t1, t2, t3],
        gimbal,
        eta: [eta.x, eta.y, eta.z],
        x: [x.x, x.y, x.z],
        e_err: system.energy(&state.g, &eta)? - e0,
        lambda_s,
        phi_max,
    })
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub rows: Vec<SimRow>,
}

/// Runs a trajectory of ⌈t_end/h⌉ steps, producing one row per state
/// including the initial one.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimData, ExperimentError> {
    cfg.validate()?;
    let system = build_system(cfg)?;
    let tableau = lobatto(cfg.stages)?;
    let solver = solver_config(cfg);
    let mut state = initial_state(cfg, &system)?;
    let eta0 = system.momentum_inv(&state.mu);
    let e0 = system.energy(&state.g, &eta0)?;
    let n_steps = (cfg.t_end / cfg.h).ceil() as usize;
    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(make_row(
        &system,
        &state,
        e0,
        state.lambda_carry,
        sphere::phi(&eta0).abs(),
    )?);
    for k in 0..n_steps {
        let (next, sol) = integrator::step(&state, &system, &tableau, &solver, cfg.closure, cfg.h)?;
        state = next;
        state.t = (k + 1) as f64 * cfg.h;
        rows.push(make_row(
            &system,
            &state,
            e0,
            sol.stages.last().map(|s| s.lambda).unwrap_or(0.0),
            sol.phi_max,
        )?);
    }
    Ok(SimData { rows })
}

pub fn write_simulate_csv(data: &SimData, path: &Path) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "t,g11,g12,g13,g21,g22,g23,g31,g32,g33,theta1,theta2,theta3,eta1,eta2,eta3,x1,x2,x3,E_err,lambda_s,phi_max,gimbal"
    )?;
    for r in &data.rows {
        write!(w, "{}", r.t)?;
        for v in r.g {
            write!(w, ",{v}")?;
        }
        write!(w, ",{},{},{}", r.theta[0], r.theta[1], r.theta[2])?;
        write!(w, ",{},{},{}", r.eta[0], r.eta[1], r.eta[2])?;
        write!(w, ",{},{},{}", r.x[0], r.x[1], r.x[2])?;
        writeln!(
            w,
            ",{},{},{},{}",
            r.e_err,
            r.lambda_s,
            r.phi_max,
            if r.gimbal { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// Global and multiplier error of one (stages, h) case against the reference.
#[derive(Debug, Clone, Copy)]
pub struct OrderCase {
    pub stages: usize,
    pub h: f64,
    pub global_error: f64,
    pub lambda_error: f64,
}

/// Fitted slopes for one method; points at or below the solver floor are
/// excluded from the fit, and a fully-floored error curve reports an infinite
/// slope with zero points used.
#[derive(Debug, Clone, Copy)]
pub struct OrderSlopes {
    pub stages: usize,
    pub field_slope: f64,
    pub field_points: usize,
    pub lambda_slope: f64,
    pub lambda_points: usize,
}

#[derive(Debug, Clone)]
pub struct OrderStudyData {
    pub cases: Vec<OrderCase>,
    pub slopes: Vec<OrderSlopes>,
}

/// Error floor below which points carry no order information (solver
/// tolerance 1e-12 with one digit of slack).
pub const SOLVER_ERROR_FLOOR: f64 = 1e-11;

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = num / den;
    (slope, my - slope * mx)
}

fn fit_loglog_above_floor(hs: &[f64], errs: &[f64], floor: f64) -> (f64, usize) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (h, e) in hs.iter().zip(errs) {
        if *e > floor {
            xs.push(h.ln());
            ys.push(e.ln());
        }
    }
    if xs.len() < 2 {
        return (f64::INFINITY, xs.len());
    }
    (linear_fit(&xs, &ys).0, xs.len())
}

fn order_case(
    cfg: &ExperimentConfig,
    stages: usize,
    h: f64,
) -> Result<OrderCase, ExperimentError> {
    let system = build_system(cfg)?;
    let tableau = lobatto(stages)?;
    let solver = solver_config(cfg);
    let mut state = initial_state(cfg, &system)?;
    let g0 = state.g;
    let eta_init = system.momentum_inv(&state.mu);

    // reference sampled exactly at the step times of this case
    let refine = 1000;
    let traj = reference::reference_solve(
        &system,
        &g0,
        &eta_init,
        cfg.t_end,
        h / refine as f64,
        refine,
    )?;

    let n_steps = (cfg.t_end / h).round() as usize;
    let mut lambda_error = 0.0_f64;
    for k in 0..n_steps {
        let (next, sol) = integrator::step(&state, &system, &tableau, &solver, cfg.closure, h)?;
        state = next;
        let lam_ref = traj[k + 1].lambda;
        let lam = sol.stages.last().map(|s| s.lambda).unwrap_or(0.0);
        lambda_error = lambda_error.max((lam - lam_ref).abs());
    }
    let exact = traj.last().unwrap();
    let global_error = (state.g.matrix() - exact.g.matrix()).norm()
        + (system.momentum_inv(&state.mu) - exact.eta).norm();
    Ok(OrderCase {
        stages,
        h,
        global_error,
        lambda_error,
    })
}

/// Convergence study over `h_list` for each requested stage count; the
/// independent (stages, h) cases run concurrently.
pub fn order_study(
    cfg: &ExperimentConfig,
    h_list: &[f64],
    stages_list: &[usize],
) -> Result<OrderStudyData, ExperimentError> {
    cfg.validate()?;
    if h_list.len() < 4 {
        return Err(ExperimentError::Config(format!(
            "order study needs at least 4 step sizes, got {}",
            h_list.len()
        )));
    }
    if !h_list.windows(2).all(|w| w[0] > w[1]) {
        return Err(ExperimentError::Config(
            "step sizes must be strictly decreasing".into(),
        ));
    }
    let mut cases = Vec::new();
    std::thread::scope(|scope| -> Result<(), ExperimentError> {
        let mut handles = Vec::new();
        for &stages in stages_list {
            for &h in h_list {
                let cfg = cfg.clone();
                handles.push((
                    stages,
                    h,
                    scope.spawn(move || order_case(&cfg, stages, h)),
                ));
            }
        }
        for (stages, h, handle) in handles {
            let case = handle.join().map_err(|_| {
                ExperimentError::Config(format!("order case s={stages} h={h} panicked"))
            })??;
            cases.push(case);
        }
        Ok(())
    })?;
    cases.sort_by(|x, y| {
        x.stages
            .cmp(&y.stages)
            .then(y.h.partial_cmp(&x.h).unwrap())
    });

    let mut slopes = Vec::new();
    for &stages in stages_list {
        let hs: Vec<f64> = cases
            .iter()
            .filter(|c| c.stages == stages)
            .map(|c| c.h)
            .collect();
        let field: Vec<f64> = cases
            .iter()
            .filter(|c| c.stages == stages)
            .map(|c| c.global_error)
            .collect();
        let lam: Vec<f64> = cases
            .iter()
            .filter(|c| c.stages == stages)
            .map(|c| c.lambda_error)
            .collect();
        let (field_slope, field_points) = fit_loglog_above_floor(&hs, &field, SOLVER_ERROR_FLOOR);
        let (lambda_slope, lambda_points) = fit_loglog_above_floor(&hs, &lam, SOLVER_ERROR_FLOOR);
        slopes.push(OrderSlopes {
            stages,
            field_slope,
            field_points,
            lambda_slope,
            lambda_points,
        });
    }
    Ok(OrderStudyData { cases, slopes })
}

pub fn write_order_csv(data: &OrderStudyData, path: &Path) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "stages,h,global_error,lambda_error,field_slope,lambda_slope")?;
    for c in &data.cases {
        let s = data
            .slopes
            .iter()
            .find(|s| s.stages == c.stages)
            .expect("slope entry");
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.stages, c.h, c.global_error, c.lambda_error, s.field_slope, s.lambda_slope
        )?;
    }
    Ok(())
}

/// Multiplier-slope magnitude below which a run is considered drift-free;
/// the bounded closures sit at ~1e-9 on the study runs, genuine concatenation
/// drift sits orders of magnitude above.
pub const LAMBDA_SLOPE_NOISE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct EnergyStudyData {
    /// (t, E_err, Λˢ) per step.
    pub rows: Vec<(f64, f64, f64)>,
    /// Least-squares slope of E_err over the whole run.
    pub e_slope: f64,
    /// Half the peak-to-peak oscillation of E_err.
    pub e_amplitude: f64,
    /// Least-squares slope of Λˢ over the whole run.
    pub lambda_slope: f64,
    /// Running maximum of |Λˢ| before t = 10.
    pub lambda_early_max: f64,
    /// Maximum of |Λˢ| over the whole run.
    pub lambda_overall_max: f64,
    /// Λˢ slope of the 2-stage baseline with the same configuration.
    pub baseline_lambda_slope: f64,
    /// Set when the multiplier drift exceeds 10x the 2-stage baseline.
    pub instability_flag: bool,
}

/// Energy and multiplier evolution of one configuration, with the 2-stage
/// baseline comparison that flags the concatenation instability.
pub fn energy_study(cfg: &ExperimentConfig) -> Result<EnergyStudyData, ExperimentError> {
    cfg.validate()?;
    let rows = energy_rows(cfg)?;
    let baseline_lambda_slope = if cfg.stages == 2 {
        lambda_slope_of(&rows)
    } else {
        let mut base_cfg = cfg.clone();
        base_cfg.stages = 2;
        lambda_slope_of(&energy_rows(&base_cfg)?)
    };
    let ts: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let es: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (e_slope, _) = linear_fit(&ts, &es);
    let e_amplitude =
        (es.iter().cloned().fold(f64::MIN, f64::max) - es.iter().cloned().fold(f64::MAX, f64::min))
            / 2.0;
    let lambda_slope = lambda_slope_of(&rows);
    let lambda_early_max = rows
        .iter()
        .filter(|r| r.0 < 10.0)
        .map(|r| r.2.abs())
        .fold(0.0, f64::max);
    let lambda_overall_max = rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
    let instability_flag = lambda_slope.abs()
        > 10.0 * baseline_lambda_slope.abs().max(LAMBDA_SLOPE_NOISE_FLOOR);
    Ok(EnergyStudyData {
        rows,
        e_slope,
        e_amplitude,
        lambda_slope,
        lambda_early_max,
        lambda_overall_max,
        baseline_lambda_slope,
        instability_flag,
    })
}

fn lambda_slope_of(rows: &[(f64, f64, f64)]) -> f64 {
    let ts: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ls: Vec<f64> = rows.iter().map(|r| r.2).collect();
    linear_fit(&ts, &ls).0
}

fn energy_rows(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64, f64)>, ExperimentError> {
    let system = build_system(cfg)?;
    let tableau = lobatto(cfg.stages)?;
    let solver = solver_config(cfg);
    let mut state = initial_state(cfg, &system)?;
    let eta0 = system.momentum_inv(&state.mu);
    let e0 = system.energy(&state.g, &eta0)?;
    let n_steps = (cfg.t_end / cfg.h).ceil() as usize;
    let mut rows = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let (next, sol) = integrator::step(&state, &system, &tableau, &solver, cfg.closure, cfg.h)?;
        state = next;
        state.t = (k + 1) as f64 * cfg.h;
        let eta = system.momentum_inv(&state.mu);
        rows.push((
            state.t,
            system.energy(&state.g, &eta)? - e0,
            sol.stages.last().map(|s| s.lambda).unwrap_or(0.0),
        ));
    }
    Ok(rows)
}

pub fn write_energy_csv(data: &EnergyStudyData, path: &Path) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,E_err,lambda_s")?;
    for (t, e, l) in &data.rows {
        writeln!(w, "{t},{e},{l}")?;
    }
    Ok(())
}

/// Companion matplotlib script for a CSV produced by one of the writers.
pub fn write_plot_script(csv_path: &Path, script_path: &Path) -> Result<(), ExperimentError> {
    let csv = csv_path.display();
    let script = format!(
        r#"#!/usr/bin/env python3
"""Quick-look plots for {csv}."""
import csv
import sys

import matplotlib.pyplot as plt

with open("{csv}") as fh:
    rows = list(csv.DictReader(fh))
if not rows:
    sys.exit("empty csv")
cols = rows[0].keys()
t_key = "t" if "t" in cols else "h"
t = [float(r[t_key]) for r in rows]
fig, axes = plt.subplots(1, 2, figsize=(11, 4))
if "x1" in cols:
    axes[0].plot([float(r["x1"]) for r in rows], [float(r["x2"]) for r in rows])
    axes[0].set_title("trajectory (x1, x2)")
    axes[1].plot(t, [float(r["E_err"]) for r in rows])
    axes[1].set_title("E(t) - E(0)")
elif "global_error" in cols:
    for s in sorted(set(r["stages"] for r in rows)):
        sel = [r for r in rows if r["stages"] == s]
        axes[0].loglog([float(r["h"]) for r in sel],
                       [float(r["global_error"]) for r in sel], "o-", label=f"s={{s}}")
        axes[1].loglog([float(r["h"]) for r in sel],
                       [max(float(r["lambda_error"]), 1e-300) for r in sel], "o-", label=f"s={{s}}")
    axes[0].set_title("field error")
    axes[1].set_title("multiplier error")
    axes[0].legend()
else:
    axes[0].plot(t, [float(r["E_err"]) for r in rows])
    axes[0].set_title("E(t) - E(0)")
    axes[1].plot(t, [float(r["lambda_s"]) for r in rows])
    axes[1].set_title("multiplier")
fig.tight_layout()
out = "{csv}".rsplit(".", 1)[0] + ".png"
fig.savefig(out, dpi=150)
print(out)
"#
    );
    std::fs::write(script_path, script)?;
    Ok(())
}
