//! Plain `key=value` solver configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! scale=4
//! iters=40
//! mu0=0.05
//! rho=1.1
//! lambda=0.002
//! tv_iters=30
//! refine=true
//! eta=auto
//! ```
//!
//! Also accepted: `mode` (`raw` or `rgb`) and `damping` (refinement
//! Levenberg factor).

use crate::error::{Error, Result};
use crate::solver::{HqsConfig, StepSize};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

/// Sets one field.
pub fn apply_setting(cfg: &mut HqsConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "scale" => cfg.scale = parse(key, value)?,
        "iters" => cfg.iters = parse(key, value)?,
        "mu0" => cfg.mu0 = parse(key, value)?,
        "rho" => cfg.rho = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "tv_iters" => cfg.tv_inner_iters = parse(key, value)?,
        "refine" => cfg.refine_motion = parse_bool(key, value)?,
        "damping" => cfg.refine_damping = parse(key, value)?,
        "eta" => {
            cfg.eta = if value == "auto" {
                StepSize::Auto
            } else {
                StepSize::Fixed(parse(key, value)?)
            }
        }
        "mode" => {
            cfg.mosaic = match value {
                "raw" => true,
                "rgb" => false,
                _ => {
                    return Err(Error::Config(format!(
                        "mode must be raw or rgb, not {value:?}"
                    )))
                }
            }
        }
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Applies a `key=value` override.
pub fn apply_override(cfg: &mut HqsConfig, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
    apply_setting(cfg, key, value)
}

/// Parses a config file on top of `base`, then validates the result.
pub fn parse_config(text: &str, base: HqsConfig) -> Result<HqsConfig> {
    let mut cfg = base;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        apply_override(&mut cfg, line)
            .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_config(cfg: &HqsConfig) -> String {
    let eta = match cfg.eta {
        StepSize::Auto => "auto".to_string(),
        StepSize::Fixed(e) => e.to_string(),
    };
    format!(
        "mode={}\nscale={}\niters={}\nmu0={}\nrho={}\nlambda={}\ntv_iters={}\nrefine={}\ndamping={}\neta={eta}\n",
        if cfg.mosaic { "raw" } else { "rgb" },
        cfg.scale,
        cfg.iters,
        cfg.mu0,
        cfg.rho,
        cfg.lambda,
        cfg.tv_inner_iters,
        cfg.refine_motion,
        cfg.refine_damping,
    )
}
