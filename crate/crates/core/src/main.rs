//! Experiment driver for the sphere integrators: trajectory runs, convergence
//! order studies, and energy/multiplier studies with CSV output.

use clap::{Args, Parser, Subcommand};
use homint::cli::{self, RawOptions, Resolved};
use homint::experiments::{
    energy_study, order_study, simulate, write_energy_csv, write_order_csv,
    write_plot_script, write_simulate_csv, ExperimentError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "homint",
    about = "Nonholonomic partitioned RKMK integrators on the sphere",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mechanical system to integrate
    #[arg(long, value_parser = ["pendulum", "kepler"])]
    system: Option<String>,
    /// Lobatto stage count (2, 3 or 4 for orders 2, 4, 6)
    #[arg(long)]
    stages: Option<usize>,
    /// Retraction map
    #[arg(long, value_parser = ["exp", "cay"])]
    retraction: Option<String>,
    /// Multiplier closure
    #[arg(long, value_parser = ["concat", "zero-first", "weighted-zero"])]
    closure: Option<String>,
    /// Step size
    #[arg(long)]
    h: Option<f64>,
    /// Duration of the run
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Output CSV path
    #[arg(long)]
    out: Option<PathBuf>,
    /// System parameter override (m, M_reg, alpha, rho, X=a,b,c); repeatable
    #[arg(long = "param")]
    params: Vec<String>,
    /// Initial configuration triple (interpretation set by --ic-format)
    #[arg(long = "ic-g")]
    ic_g: Option<String>,
    /// Initial body velocity
    #[arg(long = "ic-eta")]
    ic_eta: Option<String>,
    /// Initial multiplier (defaults to the continuous one)
    #[arg(long = "ic-lambda")]
    ic_lambda: Option<f64>,
    /// How --ic-g is read: Tait-Bryan angles or exponential coordinates
    #[arg(long = "ic-format", value_parser = ["taitbryan", "exp"])]
    ic_format: Option<String>,
    /// Also write a companion matplotlib script next to the CSV
    #[arg(long = "emit-plot-script")]
    emit_plot_script: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write per-step diagnostics
    Simulate(CommonArgs),
    /// Global error vs step size with fitted convergence slopes
    OrderStudy {
        #[command(flatten)]
        common: CommonArgs,
        /// Decreasing comma-separated step sizes (at least 4)
        #[arg(long = "h-list")]
        h_list: Option<String>,
    },
    /// Energy error and multiplier evolution with drift diagnostics
    EnergyStudy(CommonArgs),
}

fn resolved(
    common: &CommonArgs,
    extra_h_list: Option<String>,
) -> Result<(Resolved, RawOptions), ExperimentError> {
    let flags = RawOptions {
        system: common.system.clone(),
        stages: common.stages,
        retraction: common.retraction.clone(),
        closure: common.closure.clone(),
        h: common.h,
        t_end: common.t_end,
        out: common.out.clone(),
        params: common.params.clone(),
        ic_g: common.ic_g.clone(),
        ic_eta: common.ic_eta.clone(),
        ic_lambda: common.ic_lambda,
        ic_format: common.ic_format.clone(),
        h_list: extra_h_list,
    };
    let file = match &common.config {
        Some(path) => cli::parse_config_file(&std::fs::read_to_string(path)?)?,
        None => RawOptions::default(),
    };
    let merged = flags.or(file);
    Ok((cli::resolve(merged.clone())?, merged))
}

fn maybe_plot_script(common: &CommonArgs, csv: &Path) -> Result<(), ExperimentError> {
    if common.emit_plot_script {
        let script = csv.with_extension("plot.py");
        write_plot_script(csv, &script)?;
        eprintln!("plot script: {}", script.display());
    }
    Ok(())
}

fn run() -> Result<(), ExperimentError> {
    match Cli::parse().command {
        Command::Simulate(common) => {
            let (r, _) = resolved(&common, None)?;
            let out = r.out.unwrap_or_else(|| PathBuf::from("simulate.csv"));
            let data = simulate(&r.config)?;
            write_simulate_csv(&data, &out)?;
            eprintln!("{} rows -> {}", data.rows.len(), out.display());
            maybe_plot_script(&common, &out)?;
        }
        Command::OrderStudy { common, h_list } => {
            let (r, merged) = resolved(&common, h_list)?;
            let out = r.out.unwrap_or_else(|| PathBuf::from("order_study.csv"));
            let hs = r
                .h_list
                .unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025, 0.0125]);
            // a single method when stages was pinned by flag or file,
            // otherwise all of them
            let stages = match merged.stages {
                Some(s) => vec![s],
                None => vec![2, 3, 4],
            };
            let data = order_study(&r.config, &hs, &stages)?;
            write_order_csv(&data, &out)?;
            for s in &data.slopes {
                println!(
                    "stages={} field_slope={:.3} (points {}) lambda_slope={:.3} (points {})",
                    s.stages, s.field_slope, s.field_points, s.lambda_slope, s.lambda_points
                );
            }
            eprintln!("-> {}", out.display());
            maybe_plot_script(&common, &out)?;
        }
        Command::EnergyStudy(common) => {
            let (r, _) = resolved(&common, None)?;
            let out = r.out.unwrap_or_else(|| PathBuf::from("energy_study.csv"));
            let data = energy_study(&r.config)?;
            write_energy_csv(&data, &out)?;
            println!(
                "E_err slope {:.3e} amplitude {:.3e}; lambda slope {:.3e} (2-stage baseline {:.3e}) early max {:.3e} overall max {:.3e}",
                data.e_slope,
                data.e_amplitude,
                data.lambda_slope,
                data.baseline_lambda_slope,
                data.lambda_early_max,
                data.lambda_overall_max
            );
            if data.instability_flag {
                println!("multiplier drift detected: slope exceeds 10x the 2-stage baseline");
            }
            eprintln!("-> {}", out.display());
            maybe_plot_script(&common, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
