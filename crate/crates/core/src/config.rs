//! Resolved run configuration: defaults, a flat `key = value` file, then overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// λ: a neuron is activated for a frame if it is in the top λ% of that frame.
    pub lambda_top_pct: f64,
    /// Neuron-selection threshold on `p(activated | key)`, in percent.
    pub eq3_threshold_pct: f64,
    /// Fraction of a group's keys a candidate neuron must appear in.
    pub coverage: f64,
    pub metric: Metric,
    pub keep_fraction: f64,
    /// Per-layer overrides of `keep_fraction`, set with `keep_fraction.<layer> = x`.
    pub keep_fraction_layers: BTreeMap<usize, f64>,
    pub frame_period_s: f64,
    /// Keys with fewer frames are reported, not dropped.
    pub min_frames: u64,
    pub mds_dim: usize,
    pub seed: u64,
    /// Input/output paths recorded for provenance.
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda_top_pct: 1.0,
            eq3_threshold_pct: 1.0,
            coverage: 0.8,
            metric: Metric::Hamming,
            keep_fraction: 0.2,
            keep_fraction_layers: BTreeMap::new(),
            frame_period_s: 0.02,
            min_frames: 100,
            mds_dim: 2,
            seed: 0,
            paths: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "lambda_top_pct" => self.lambda_top_pct = parse(key, value)?,
            "eq3_threshold_pct" => self.eq3_threshold_pct = parse(key, value)?,
            "coverage" => self.coverage = parse(key, value)?,
            "metric" => self.metric = value.parse()?,
            "keep_fraction" => self.keep_fraction = parse(key, value)?,
            "frame_period_s" => self.frame_period_s = parse(key, value)?,
            "min_frames" => self.min_frames = parse(key, value)?,
            "mds_dim" => self.mds_dim = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            k => {
                if let Some(layer) = k.strip_prefix("keep_fraction.") {
                    let layer: usize = parse(k, layer)?;
                    self.keep_fraction_layers.insert(layer, parse(k, value)?);
                } else if let Some(name) = k.strip_prefix("paths.") {
                    self.paths.insert(name.to_owned(), value.to_owned());
                } else {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn keep_fraction_for(&self, layer: usize) -> f64 {
        self.keep_fraction_layers.get(&layer).copied().unwrap_or(self.keep_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        let pct = |name: &str, v: f64| {
            if v > 0.0 && v <= 100.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 100], got {v}")))
            }
        };
        pct("lambda_top_pct", self.lambda_top_pct)?;
        pct("eq3_threshold_pct", self.eq3_threshold_pct)?;
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        unit("coverage", self.coverage)?;
        unit("keep_fraction", self.keep_fraction)?;
        for (l, &k) in &self.keep_fraction_layers {
            unit(&format!("keep_fraction.{l}"), k)?;
        }
        if !(self.frame_period_s > 0.0) {
            return Err(Error::Config(format!("frame_period_s must be positive, got {}", self.frame_period_s)));
        }
        if self.mds_dim == 0 {
            return Err(Error::Config("mds_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lambda_top_pct, 1.0);
        assert_eq!(c.coverage, 0.8);
        assert_eq!(c.min_frames, 100);
    }

    #[test]
    fn file_text_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\ncoverage = 0.5\nmetric=jaccard\nkeep_fraction.3 = 0.05  # late layer\n\n")
            .unwrap();
        assert_eq!(c.coverage, 0.5);
        assert_eq!(c.metric, Metric::Jaccard);
        assert_eq!(c.keep_fraction_for(3), 0.05);
        assert_eq!(c.keep_fraction_for(0), 0.2);
        c.set("coverage", "0.9").unwrap();
        assert_eq!(c.coverage, 0.9);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("coverage", "lots").is_err());
        c.set("lambda_top_pct", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("coverage", "1.5").unwrap();
        assert!(c.validate().is_err());
    }
}
