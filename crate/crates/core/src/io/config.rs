//! DCW configuration as flat TOML. Every key is optional and defaults to
//! [`DcwConfig::default`]; unknown keys are rejected.
//!
//! ```toml
//! k_clusters = 8
//! epsilon = 0.02
//! lambda = 1.0
//! layers = 3
//! brightness = 0.7
//! contrast = 0.7
//! saturation = 0.2
//! gamma_min = 0.5
//! gamma_max = 2.0
//! normalize_by_count = true
//! independent_draws = false
//! seed = 0
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::dcw::{ColorJitter, DcwConfig};
use crate::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Flat {
    k_clusters: usize,
    epsilon: f64,
    lambda: f64,
    layers: usize,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    gamma_min: f64,
    gamma_max: f64,
    normalize_by_count: bool,
    independent_draws: bool,
    seed: u64,
}

impl Default for Flat {
    fn default() -> Self {
        let c = DcwConfig::default();
        Self {
            k_clusters: c.k_clusters,
            epsilon: c.epsilon,
            lambda: c.lambda,
            layers: c.num_layers,
            brightness: c.jitter.brightness,
            contrast: c.jitter.contrast,
            saturation: c.jitter.saturation,
            gamma_min: c.gamma_range.0,
            gamma_max: c.gamma_range.1,
            normalize_by_count: c.normalize_by_count,
            independent_draws: c.independent_draws,
            seed: c.seed,
        }
    }
}

/// Parses and validates a configuration.
pub fn parse(data: &[u8]) -> Result<DcwConfig> {
    let text = std::str::from_utf8(data)
        .map_err(|e| Error::parse(e.valid_up_to(), "config is not UTF-8"))?;
    let f: Flat = toml::from_str(text).map_err(|e| {
        let at = e.span().map_or(0, |s| s.start);
        Error::parse(at, e.message().to_string())
    })?;
    let cfg = DcwConfig {
        k_clusters: f.k_clusters,
        epsilon: f.epsilon,
        lambda: f.lambda,
        num_layers: f.layers,
        jitter: ColorJitter {
            brightness: f.brightness,
            contrast: f.contrast,
            saturation: f.saturation,
        },
        gamma_range: (f.gamma_min, f.gamma_max),
        normalize_by_count: f.normalize_by_count,
        independent_draws: f.independent_draws,
        seed: f.seed,
    };
    cfg.validate().map_err(|e| match e {
        Error::Contract(m) => Error::Validation(m),
        other => other,
    })?;
    Ok(cfg)
}

pub fn to_text(cfg: &DcwConfig) -> String {
    format!(
        "k_clusters = {}\nepsilon = {:?}\nlambda = {:?}\nlayers = {}\nbrightness = {:?}\ncontrast = {:?}\n\
         saturation = {:?}\ngamma_min = {:?}\ngamma_max = {:?}\nnormalize_by_count = {}\nindependent_draws = {}\nseed = {}\n",
        cfg.k_clusters,
        cfg.epsilon,
        cfg.lambda,
        cfg.num_layers,
        cfg.jitter.brightness,
        cfg.jitter.contrast,
        cfg.jitter.saturation,
        cfg.gamma_range.0,
        cfg.gamma_range.1,
        cfg.normalize_by_count,
        cfg.independent_draws,
        cfg.seed
    )
}

pub fn read(path: impl AsRef<Path>) -> Result<DcwConfig> {
    parse(&std::fs::read(path)?)
}
