//! Run configuration and its flat `key = value` file format.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::flow::FlowBackend;

/// Every tunable of a run. Defaults follow the published training setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Target mean luminance of normally exposed frames.
    pub y_high: f32,
    /// CDF level at which the maximum valid brightness is read.
    pub cdf_threshold: f32,
    pub safety_factor: f32,
    /// Sharpness of the occlusion mask.
    pub omega: f32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Flow is estimated at `1/flow_train_downscale` resolution while training.
    pub flow_train_downscale: usize,
    /// Pyramid levels of the temporal consistency loss.
    pub mtc_levels: usize,
    pub seed: u64,
    /// Include the temporal consistency loss in the objective.
    pub use_mtc: bool,
    /// Average RD-Net over the four geometric variants.
    pub self_ensemble: bool,
    pub flow_backend: FlowBackend,
    pub flow_checkpoint_path: Option<PathBuf>,
    /// Command used by the external flow backend.
    pub flow_command: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            y_high: 0.3,
            cdf_threshold: 0.99,
            safety_factor: 0.8,
            omega: 100.0,
            learning_rate: 5e-5,
            weight_decay: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flow_train_downscale: 3,
            mtc_levels: 4,
            seed: 0,
            use_mtc: true,
            self_ensemble: true,
            flow_backend: FlowBackend::Classical,
            flow_checkpoint_path: None,
            flow_command: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// Sets one field by its config-file key. Returns `Ok(false)` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "y_high" => self.y_high = parse(key, value)?,
            "cdf_threshold" => self.cdf_threshold = parse(key, value)?,
            "safety_factor" => self.safety_factor = parse(key, value)?,
            "omega" => self.omega = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "flow_train_downscale" => self.flow_train_downscale = parse(key, value)?,
            "mtc_levels" => self.mtc_levels = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "use_mtc" => self.use_mtc = parse(key, value)?,
            "self_ensemble" => self.self_ensemble = parse(key, value)?,
            "flow.backend" => self.flow_backend = parse(key, value)?,
            "flow.checkpoint_path" => self.flow_checkpoint_path = Some(PathBuf::from(value)),
            "flow.command" => self.flow_command = Some(value.to_string()),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are reported and returned.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !self.set(key, value)? {
                log::warn!("config line {}: unknown key {key:?} ignored", lineno + 1);
                unknown.push(key.to_string());
            }
        }
        self.validate()?;
        Ok(unknown)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Serializes every field back into the config-file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("y_high", self.y_high.to_string());
        kv("cdf_threshold", self.cdf_threshold.to_string());
        kv("safety_factor", self.safety_factor.to_string());
        kv("omega", self.omega.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("flow_train_downscale", self.flow_train_downscale.to_string());
        kv("mtc_levels", self.mtc_levels.to_string());
        kv("seed", self.seed.to_string());
        kv("use_mtc", self.use_mtc.to_string());
        kv("self_ensemble", self.self_ensemble.to_string());
        kv("flow.backend", self.flow_backend.to_string());
        if let Some(p) = &self.flow_checkpoint_path {
            kv("flow.checkpoint_path", p.display().to_string());
        }
        if let Some(c) = &self.flow_command {
            kv("flow.command", c.clone());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.y_high > 0.0 && self.y_high <= 1.0) {
            return fail(format!("y_high must be in (0,1], got {}", self.y_high));
        }
        if !(self.cdf_threshold > 0.0 && self.cdf_threshold <= 1.0) {
            return fail(format!("cdf_threshold must be in (0,1], got {}", self.cdf_threshold));
        }
        if !(self.safety_factor > 0.0) {
            return fail(format!("safety_factor must be positive, got {}", self.safety_factor));
        }
        if !(self.omega > 0.0) {
            return fail(format!("omega must be positive, got {}", self.omega));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return fail("learning_rate must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must be in [0,1)".into());
        }
        if self.flow_train_downscale == 0 {
            return fail("flow_train_downscale must be >= 1".into());
        }
        if self.mtc_levels == 0 {
            return fail("mtc_levels must be >= 1".into());
        }
        Ok(())
    }
}
