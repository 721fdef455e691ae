//! Training hyperparameters, dataset profiles and the flat config file.
//!
//! The file is a flat TOML table with a version key:
//!
//! ```text
//! version = 1
//! # comments and blank lines are ignored
//! dim = 800
//! gamma = 20
//! variant = "rocone"
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::operators::{InsideDistance, Variant};

pub const CONFIG_VERSION: u32 = 1;

/// Hyperparameter presets: the grid-search optima on the two benchmarks,
/// and a small one for synthetic graphs on a desktop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Fb15k237,
    Nell995,
    /// NELL995 settings scaled to `d = 64` and graphs of about 50 entities.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fb15k237" => Ok(Profile::Fb15k237),
            "nell995" | "nell" => Ok(Profile::Nell995),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile '{s}' (expected fb15k-237, nell995 or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch: usize,
    pub negatives: usize,
    pub gamma: f64,
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub inside: InsideDistance,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Record wall-clock time in the loss log. Off makes logs reproducible
    /// byte for byte.
    pub record_time: bool,
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let base = TrainConfig {
            dim: 800,
            batch: 128,
            negatives: 512,
            gamma: 20.0,
            lr: 1e-4,
            lambda: 0.02,
            epochs: 100,
            seed: 0,
            variant: Variant::Rotate,
            inside: InsideDistance::AsPrinted,
            checkpoint_every: 0,
            record_time: true,
        };
        match p {
            Profile::Nell995 => base,
            Profile::Fb15k237 => TrainConfig { dim: 1600, gamma: 30.0, lr: 5e-5, lambda: 0.1, ..base },
            // Untrained distances at d = 64 are around 90, so the margin
            // moves up to sit between positives and negatives. With a few
            // batches per epoch the step size has to be larger, and 32
            // negatives already cover most of a 50-entity graph.
            Profile::Desk => TrainConfig { dim: 64, negatives: 32, gamma: 60.0, lr: 1e-2, epochs: 500, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.batch == 0 {
            return fail("dim and batch must be positive".into());
        }
        if self.negatives == 0 {
            return fail("at least one negative sample is required".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return fail(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
        }
        match key {
            "dim" | "d" => self.dim = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "negatives" => self.negatives = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "inside" => self.inside = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "record_time" => self.record_time = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let entries = parse_entries(text)?;
        for (key, value) in &entries {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::profile(Profile::Nell995);
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}

fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut version = None;
    let mut entries = Vec::new();
    for (k, v) in table {
        let v = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => return Err(Error::Config(format!("'{k}' must be a plain value, got {}", other.type_str()))),
        };
        if k == "version" {
            version = Some(v);
        } else {
            entries.push((k, v));
        }
    }
    match version.as_deref() {
        Some(v) if v == CONFIG_VERSION.to_string() => Ok(entries),
        Some(v) => Err(Error::Config(format!("unsupported config version '{v}'"))),
        None => Err(Error::Config("config is missing 'version'".into())),
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "version = {CONFIG_VERSION}")?;
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "negatives = {}", self.negatives)?;
        writeln!(f, "gamma = {}", self.gamma)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "variant = \"{}\"", self.variant.as_str())?;
        writeln!(f, "inside = \"{}\"", self.inside.as_str())?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "record_time = {}", self.record_time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        let nell = TrainConfig::profile("nell995".parse().unwrap());
        assert_eq!((nell.dim, nell.gamma, nell.lr, nell.lambda), (800, 20.0, 1e-4, 0.02));
        let fb = TrainConfig::profile("FB15k-237".parse().unwrap());
        assert_eq!((fb.dim, fb.gamma, fb.lr, fb.lambda), (1600, 30.0, 5e-5, 0.1));
        assert_eq!((fb.batch, fb.negatives), (128, 512));
        assert!("wn18".parse::<Profile>().is_err());
        let desk = TrainConfig::profile(Profile::Desk);
        assert_eq!((desk.dim, desk.batch, desk.negatives, desk.lambda), (64, 128, 32, 0.02));
        desk.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::profile(Profile::Fb15k237);
        cfg.variant = Variant::SigmoidExpand;
        cfg.lr = 3.5e-4;
        cfg.record_time = false;
        assert_eq!(TrainConfig::from_text(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn bad_files() {
        assert!(TrainConfig::from_text("dim = 4").is_err());
        assert!(TrainConfig::from_text("version = 2\ndim = 4").is_err());
        assert!(TrainConfig::from_text("version = 1\ndim = four").is_err());
        assert!(TrainConfig::from_text("version = 1\nwidth = 4").is_err());
        assert!(TrainConfig::from_text("version = 1\ndim = 4\ndim = 5").is_err());
        assert!(TrainConfig::from_text("version = 1\ndim").is_err());
        assert!(TrainConfig::from_text("version = 1\nvariant = rocone").is_err());
        assert!(TrainConfig::from_text("version = 1\ndim = [4]").is_err());
        let ok = TrainConfig::from_text("version = 1\n# note\n\ndim = 4\nvariant = \"base\"\n").unwrap();
        assert_eq!((ok.dim, ok.variant), (4, Variant::Base));
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::profile(Profile::Nell995);
        cfg.validate().unwrap();
        for (k, v) in [("gamma", "0"), ("lambda", "1"), ("negatives", "0"), ("lr", "-1")] {
            let mut c = cfg.clone();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}");
        }
        cfg.lambda = 0.5;
        cfg.validate().unwrap();
    }
}
