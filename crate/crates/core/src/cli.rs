//! Option resolution for the `homint` binary: flat `key=value` config files
//! mirroring the command-line flags, with flags taking precedence.

use crate::experiments::{ExperimentConfig, ExperimentError, IcFormat, SystemChoice};
use crate::integrator::ClosureStrategy;
use crate::retraction::RetractionKind;
use nalgebra::Vector3;
use std::path::PathBuf;

/// Options gathered from flags or a config file, before defaults fill the
/// gaps. Field names mirror the flag names.
#[derive(Debug, Clone, Default)]
pub struct RawOptions {
    pub system: Option<String>,
    pub stages: Option<usize>,
    pub retraction: Option<String>,
    pub closure: Option<String>,
    pub h: Option<f64>,
    pub t_end: Option<f64>,
    pub out: Option<PathBuf>,
    pub params: Vec<String>,
    pub ic_g: Option<String>,
    pub ic_eta: Option<String>,
    pub ic_lambda: Option<f64>,
    pub ic_format: Option<String>,
    pub h_list: Option<String>,
}

impl RawOptions {
    /// Field-wise precedence: `self` (flags) wins over `file`.
    pub fn or(self, file: RawOptions) -> RawOptions {
        RawOptions {
            system: self.system.or(file.system),
            stages: self.stages.or(file.stages),
            retraction: self.retraction.or(file.retraction),
            closure: self.closure.or(file.closure),
            h: self.h.or(file.h),
            t_end: self.t_end.or(file.t_end),
            out: self.out.or(file.out),
            params: if self.params.is_empty() {
                file.params
            } else {
                self.params
            },
            ic_g: self.ic_g.or(file.ic_g),
            ic_eta: self.ic_eta.or(file.ic_eta),
            ic_lambda: self.ic_lambda.or(file.ic_lambda),
            ic_format: self.ic_format.or(file.ic_format),
            h_list: self.h_list.or(file.h_list),
        }
    }
}

fn bad(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Parses a flat `key=value` config file; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<RawOptions, ExperimentError> {
    let mut raw = RawOptions::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key=value", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim().to_string();
        match key {
            "system" => raw.system = Some(value),
            "stages" => {
                raw.stages = Some(value.parse().map_err(|_| {
                    bad(format!("line {}: stages must be an integer", lineno + 1))
                })?)
            }
            "retraction" => raw.retraction = Some(value),
            "closure" => raw.closure = Some(value),
            "h" => {
                raw.h = Some(value.parse().map_err(|_| {
                    bad(format!("line {}: h must be a number", lineno + 1))
                })?)
            }
            "t-end" | "t_end" => {
                raw.t_end = Some(value.parse().map_err(|_| {
                    bad(format!("line {}: t-end must be a number", lineno + 1))
                })?)
            }
            "out" => raw.out = Some(PathBuf::from(value)),
            "param" => raw.params.push(value),
            "ic-g" | "ic_g" => raw.ic_g = Some(value),
            "ic-eta" | "ic_eta" => raw.ic_eta = Some(value),
            "ic-lambda" | "ic_lambda" => {
                raw.ic_lambda = Some(value.parse().map_err(|_| {
                    bad(format!("line {}: ic-lambda must be a number", lineno + 1))
                })?)
            }
            "ic-format" | "ic_format" => raw.ic_format = Some(value),
            "h-list" | "h_list" => raw.h_list = Some(value),
            other => return Err(bad(format!("line {}: unknown key `{other}`", lineno + 1))),
        }
    }
    Ok(raw)
}

pub fn parse_triple(text: &str, what: &str) -> Result<[f64; 3], ExperimentError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad(format!("{what} needs three comma-separated numbers")));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse()
            .map_err(|_| bad(format!("{what}: `{p}` is not a number")))?;
    }
    Ok(out)
}

pub fn parse_h_list(text: &str) -> Result<Vec<f64>, ExperimentError> {
    text.split(',')
        .map(str::trim)
        .map(|p| {
            p.parse()
                .map_err(|_| bad(format!("h-list: `{p}` is not a number")))
        })
        .collect()
}

fn parse_system(text: &str) -> Result<SystemChoice, ExperimentError> {
    match text {
        "pendulum" => Ok(SystemChoice::Pendulum),
        "kepler" => Ok(SystemChoice::Kepler),
        other => Err(bad(format!("unknown system `{other}`"))),
    }
}

fn parse_retraction(text: &str) -> Result<RetractionKind, ExperimentError> {
    match text {
        "exp" => Ok(RetractionKind::Exponential),
        "cay" => Ok(RetractionKind::Cayley),
        other => Err(bad(format!("unknown retraction `{other}`"))),
    }
}

fn parse_closure(text: &str) -> Result<ClosureStrategy, ExperimentError> {
    match text {
        "concat" => Ok(ClosureStrategy::Concatenation),
        "zero-first" => Ok(ClosureStrategy::ZeroFirst),
        "weighted-zero" => Ok(ClosureStrategy::WeightedZeroSum),
        other => Err(bad(format!("unknown closure `{other}`"))),
    }
}

fn parse_ic_format(text: &str) -> Result<IcFormat, ExperimentError> {
    match text {
        "taitbryan" => Ok(IcFormat::TaitBryan),
        "exp" => Ok(IcFormat::Exponential),
        other => Err(bad(format!("unknown ic-format `{other}`"))),
    }
}

fn apply_param(cfg: &mut ExperimentConfig, spec: &str) -> Result<(), ExperimentError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| bad(format!("param `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = value.trim();
    let num = |what: &str| -> Result<f64, ExperimentError> {
        value
            .parse()
            .map_err(|_| bad(format!("param {what}: `{value}` is not a number")))
    };
    match key {
        "m" => {
            let v = num("m")?;
            cfg.pendulum.m = v;
            cfg.kepler.m = v;
        }
        "M_reg" | "M" => {
            let v = num("M_reg")?;
            cfg.pendulum.m_reg = v;
            cfg.kepler.m_reg = v;
        }
        "alpha" => {
            let v = num("alpha")?;
            cfg.pendulum.gamma = Vector3::new(0.0, 0.0, -v);
        }
        "rho" => cfg.kepler.rho = num("rho")?,
        "X" => {
            let t = parse_triple(value, "param X")?;
            cfg.kepler.attractor = Vector3::new(t[0], t[1], t[2]);
        }
        other => return Err(bad(format!("unknown param `{other}`"))),
    }
    Ok(())
}

/// Resolved options: the experiment plus command-level outputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub out: Option<PathBuf>,
    pub h_list: Option<Vec<f64>>,
}

/// Applies defaults for the chosen system and folds every raw option in.
pub fn resolve(raw: RawOptions) -> Result<Resolved, ExperimentError> {
    let system = parse_system(raw.system.as_deref().unwrap_or("pendulum"))?;
    let mut cfg = ExperimentConfig::defaults_for(system);
    if let Some(s) = raw.stages {
        cfg.stages = s;
    }
    if let Some(r) = &raw.retraction {
        cfg.retraction = parse_retraction(r)?;
    }
    if let Some(c) = &raw.closure {
        cfg.closure = parse_closure(c)?;
    }
    if let Some(h) = raw.h {
        cfg.h = h;
    }
    if let Some(t) = raw.t_end {
        cfg.t_end = t;
    }
    if let Some(g) = &raw.ic_g {
        cfg.ic_g = parse_triple(g, "ic-g")?;
    }
    if let Some(e) = &raw.ic_eta {
        cfg.ic_eta = parse_triple(e, "ic-eta")?;
    }
    if let Some(l) = raw.ic_lambda {
        cfg.ic_lambda = Some(l);
    }
    if let Some(f) = &raw.ic_format {
        cfg.ic_format = parse_ic_format(f)?;
    }
    for p in &raw.params {
        apply_param(&mut cfg, p)?;
    }
    let h_list = raw.h_list.as_deref().map(parse_h_list).transpose()?;
    Ok(Resolved {
        config: cfg,
        out: raw.out,
        h_list,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_fill_gaps_flags_win() {
        let file = parse_config_file(
            "system=kepler\nstages=3\nh=0.05\nt-end=7.5\nparam=rho=2.5\n# comment\n",
        )
        .unwrap();
        let flags = RawOptions {
            stages: Some(4),
            ..Default::default()
        };
        let resolved = resolve(flags.or(file)).unwrap();
        assert_eq!(resolved.config.system, SystemChoice::Kepler);
        assert_eq!(resolved.config.stages, 4); // flag beats file
        assert_eq!(resolved.config.h, 0.05);
        assert_eq!(resolved.config.t_end, 7.5);
        assert_eq!(resolved.config.kepler.rho, 2.5);
    }

    #[test]
    fn defaults_depend_on_system() {
        let r = resolve(RawOptions::default()).unwrap();
        assert_eq!(r.config.system, SystemChoice::Pendulum);
        assert_eq!(r.config.h, 0.1);
        assert_eq!(r.config.retraction, RetractionKind::Cayley);
        let r = resolve(RawOptions {
            system: Some("kepler".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.config.h, 0.01);
        assert_eq!(r.config.retraction, RetractionKind::Exponential);
        assert_eq!(r.config.ic_eta[0], 1.53418408426885);
    }

    #[test]
    fn param_overrides() {
        let raw = RawOptions {
            params: vec!["m=2.0".into(), "alpha=3.0".into(), "X=0,1,0".into()],
            ..Default::default()
        };
        let r = resolve(raw).unwrap();
        assert_eq!(r.config.pendulum.m, 2.0);
        assert_eq!(r.config.pendulum.gamma, Vector3::new(0.0, 0.0, -3.0));
        assert_eq!(r.config.kepler.attractor, Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn rejects_unknown_keys_and_malformed_lines() {
        assert!(parse_config_file("bogus=1\n").is_err());
        assert!(parse_config_file("stages\n").is_err());
        assert!(resolve(RawOptions {
            closure: Some("nope".into()),
            ..Default::default()
        })
        .is_err());
        assert!(parse_triple("1,2", "x").is_err());
    }

    #[test]
    fn ic_overrides() {
        let raw = RawOptions {
            ic_g: Some("0.1, 0.2, 0.3".into()),
            ic_eta: Some("0.4,0,0".into()),
            ic_lambda: Some(0.5),
            ic_format: Some("exp".into()),
            ..Default::default()
        };
        let r = resolve(raw).unwrap();
        assert_eq!(r.config.ic_g, [0.1, 0.2, 0.3]);
        assert_eq!(r.config.ic_eta, [0.4, 0.0, 0.0]);
        assert_eq!(r.config.ic_lambda, Some(0.5));
        assert_eq!(r.config.ic_format, IcFormat::Exponential);
    }
}
