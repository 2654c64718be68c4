//! Run configuration: a flat `key=value` text format with strict keys.
//! Unknown keys are rejected; every run echoes the fully-resolved config.

use std::path::{Path, PathBuf};

use crate::data::FillingMode;
use crate::error::{Error, Result};
use crate::filling::SkipMode;
use crate::losses::{LossWeights, SiameseNorm};

/// Environment variable consulted for the default seed.
pub const SEED_ENV: &str = "SIENET_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: Option<PathBuf>,
    pub structure_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub feature_weights: Option<PathBuf>,
    pub iterations: u64,
    pub batch_size: usize,
    pub resolution: usize,
    pub seed: u64,
    pub mode: FillingMode,
    pub ratio: f64,
    pub weights: LossWeights,
    pub use_filling_conv: bool,
    pub use_siamese: bool,
    pub use_stage1_adv: bool,
    pub siamese_symmetric: bool,
    pub siamese_norm: SiameseNorm,
    pub skip: SkipMode,
    pub hflip: bool,
    pub smooth_sigma: f64,
    pub checkpoint_every: u64,
    pub fe_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let seed = std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(0);
        TrainConfig {
            data_dir: None,
            structure_dir: None,
            out_dir: PathBuf::from("runs/out"),
            feature_weights: None,
            iterations: 2000,
            batch_size: 2,
            resolution: 64,
            seed,
            mode: FillingMode::TwoDirection,
            ratio: 0.25,
            weights: LossWeights::default(),
            use_filling_conv: true,
            use_siamese: true,
            use_stage1_adv: true,
            siamese_symmetric: false,
            siamese_norm: SiameseNorm::Mse,
            skip: SkipMode::Box,
            hflip: false,
            smooth_sigma: 3.0,
            checkpoint_every: 500,
            fe_seed: 0x5eed,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| Error::Config(format!("key `{key}`: bad value `{value}`")))
}

impl TrainConfig {
    /// Apply one `key=value` setting. Unknown keys are errors that name the
    /// offending key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "structure_dir" => {
                self.structure_dir = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "feature_weights" => {
                self.feature_weights = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "iterations" => self.iterations = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "resolution" => self.resolution = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "mode" => {
                self.mode = FillingMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("key `mode`: unknown mode `{value}`")))?
            }
            "ratio" => self.ratio = parse_num(key, value)?,
            "lambda_dist" => self.weights.dist = parse_num(key, value)?,
            "lambda_adv" => self.weights.adv = parse_num(key, value)?,
            "lambda_p" => self.weights.perceptual = parse_num(key, value)?,
            "lambda_s" => self.weights.style = parse_num(key, value)?,
            "lambda_sie" => self.weights.siamese = parse_num(key, value)?,
            "use_filling_conv" => self.use_filling_conv = parse_bool(key, value)?,
            "use_siamese" => self.use_siamese = parse_bool(key, value)?,
            "use_stage1_adv" => self.use_stage1_adv = parse_bool(key, value)?,
            "siamese_symmetric" => self.siamese_symmetric = parse_bool(key, value)?,
            "siamese_norm" => {
                self.siamese_norm = SiameseNorm::parse(value)
                    .ok_or_else(|| Error::Config(format!("key `siamese_norm`: unknown value `{value}`")))?
            }
            "skip" => {
                self.skip = SkipMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("key `skip`: unknown value `{value}`")))?
            }
            "hflip" => self.hflip = parse_bool(key, value)?,
            "smooth_sigma" => self.smooth_sigma = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "fe_seed" => self.fe_seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config file onto the defaults. Lines are `key=value`;
    /// blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical echo of every field, in a fixed order. This text is what
    /// gets hashed and embedded in checkpoints.
    pub fn canonical_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("data_dir", path(&self.data_dir));
        push("structure_dir", path(&self.structure_dir));
        push("out_dir", self.out_dir.display().to_string());
        push("feature_weights", path(&self.feature_weights));
        push("iterations", self.iterations.to_string());
        push("batch_size", self.batch_size.to_string());
        push("resolution", self.resolution.to_string());
        push("seed", self.seed.to_string());
        push("mode", self.mode.as_str().to_string());
        push("ratio", self.ratio.to_string());
        push("lambda_dist", self.weights.dist.to_string());
        push("lambda_adv", self.weights.adv.to_string());
        push("lambda_p", self.weights.perceptual.to_string());
        push("lambda_s", self.weights.style.to_string());
        push("lambda_sie", self.weights.siamese.to_string());
        push("use_filling_conv", self.use_filling_conv.to_string());
        push("use_siamese", self.use_siamese.to_string());
        push("use_stage1_adv", self.use_stage1_adv.to_string());
        push("siamese_symmetric", self.siamese_symmetric.to_string());
        push("siamese_norm", self.siamese_norm.as_str().to_string());
        push("skip", self.skip.as_str().to_string());
        push("hflip", self.hflip.to_string());
        push("smooth_sigma", self.smooth_sigma.to_string());
        push("checkpoint_every", self.checkpoint_every.to_string());
        push("fe_seed", self.fe_seed.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of 16 (>= 16), got {}",
                self.resolution
            )));
        }
        if !(self.ratio > 0.0 && self.ratio < 0.5) {
            return Err(Error::Config(format!("ratio must lie in (0, 0.5), got {}", self.ratio)));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
