//! Run configuration: model dimensions plus training, evaluation, and design
//! settings, loadable from a `key=value` text file with `#` comments.
//! Unknown keys are rejected.

use crate::model::ModelConfig;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected key=value, got '{1}'")]
    BadLine(usize, String),
    #[error("line {0}: unknown key '{1}'")]
    UnknownKey(usize, String),
    #[error("line {0}: invalid value for '{1}': {2}")]
    BadValue(usize, String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub metric_pitch: f64,
    pub tail_points: usize,
    pub design_tol: f64,
    pub design_max_iter: usize,
    pub design_alpha: f64,
    pub arc_segments: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: None,
            seed: 0,
            epochs: 600,
            lr: 1e-3,
            batch: 8,
            metric_pitch: 1.0,
            tail_points: 64,
            design_tol: 0.5,
            design_max_iter: 20,
            design_alpha: 0.8,
            arc_segments: 16,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(lineno + 1, raw.to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| match e {
                    SetError::Unknown => ConfigError::UnknownKey(lineno + 1, key.to_string()),
                    SetError::Parse(msg) => ConfigError::BadValue(lineno + 1, key.to_string(), msg),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        fn parse<T: std::str::FromStr>(v: &str) -> Result<T, SetError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| SetError::Parse(e.to_string()))
        }
        match key {
            "m" => self.model.m = parse(value)?,
            "n" => self.model.n = parse(value)?,
            "c" => self.model.c = parse(value)?,
            "y" => self.model.y = parse(value)?,
            "s_a" => self.model.s_a = parse(value)?,
            "s_b" => self.model.s_b = parse(value)?,
            "h" => self.model.h = parse(value)?,
            "w" => self.model.w = parse(value)?,
            "ffn_hidden" => self.model.ffn_hidden = parse(value)?,
            "eps" => self.model.eps = parse(value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "lr" => self.lr = parse(value)?,
            "batch" => self.batch = parse(value)?,
            "metric_pitch" => self.metric_pitch = parse(value)?,
            "tail_points" => self.tail_points = parse(value)?,
            "design_tol" => self.design_tol = parse(value)?,
            "design_max_iter" => self.design_max_iter = parse(value)?,
            "design_alpha" => self.design_alpha = parse(value)?,
            "arc_segments" => self.arc_segments = parse(value)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch == 0 {
            return Err(ConfigError::Invalid("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if !(self.metric_pitch > 0.0) {
            return Err(ConfigError::Invalid("metric_pitch must be positive".into()));
        }
        if self.tail_points < 4 {
            return Err(ConfigError::Invalid("tail_points must be at least 4".into()));
        }
        if !(self.design_alpha > 0.0 && self.design_alpha <= 1.0) {
            return Err(ConfigError::Invalid("design_alpha must be in (0, 1]".into()));
        }
        if !(self.design_tol >= 0.0) {
            return Err(ConfigError::Invalid("design_tol must be non-negative".into()));
        }
        if self.arc_segments < 8 {
            return Err(ConfigError::Invalid("arc_segments must be at least 8".into()));
        }
        Ok(())
    }
}

enum SetError {
    Unknown,
    Parse(String),
}
