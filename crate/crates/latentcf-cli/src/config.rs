//! Key-value configuration file shared by all subcommands. Explicit command
//! line flags override file values; environment variables are never read.
//!
//! Recognized keys, with defaults:
//!
//! ```text
//! seed = 42               # RNG seed for training and data generation
//! epochs = 1              # training epochs
//! learning_rate = 0.001   # training learning rate
//! batch_size = 64         # minibatch size
//! hidden = 128            # hidden layer width for both networks
//! latent_dim = 64         # VAE latent dimension
//! kl_weight = 1.0         # VAE loss weights
//! l1_weight = 0.05
//! sobel_weight = 0.05
//! target = 0.75           # attack target probability, in (0, 1)
//! attack_lr = 0.01        # attack step size
//! optimizer = adam        # attack optimizer: adam | sgd
//! max_iters = 2000        # attack iteration cap
//! snapshot_stride = 10    # record every k-th latent
//! penalty = ridge:0.01    # GLM penalty: none | ridge:<l> | lasso:<l>
//! aggregation = signed    # global score mode: signed | absolute
//! normalization = mean    # global score normalization: mean | sum
//! top_k = 5               # attributes reported per ranking
//! frames = 8              # trajectory frames per exported grid
//! ```

use std::fs;
use std::path::Path;

use latentcf::attack::OptimizerKind;
use latentcf::attribution::{Aggregation, Normalization, Penalty};

use crate::checkpoint::parse_penalty;
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub l1_weight: f64,
    pub sobel_weight: f64,
    pub target: f64,
    pub attack_lr: f64,
    pub optimizer: OptimizerKind,
    pub max_iters: usize,
    pub snapshot_stride: usize,
    pub penalty: Penalty,
    pub aggregation: Aggregation,
    pub normalization: Normalization,
    pub top_k: usize,
    pub frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 64,
            hidden: 128,
            latent_dim: 64,
            kl_weight: 1.0,
            l1_weight: 0.05,
            sobel_weight: 0.05,
            target: 0.75,
            attack_lr: 0.01,
            optimizer: OptimizerKind::Adam,
            max_iters: 2000,
            snapshot_stride: 10,
            penalty: Penalty::Ridge(0.01),
            aggregation: Aggregation::Signed,
            normalization: Normalization::Mean,
            top_k: 5,
            frames: 8,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Usage(format!("config: bad value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Reads `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = fs::read_to_string(path.as_ref())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {}:{}: expected 'key = value', got '{raw}'",
                    path.as_ref().display(),
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "hidden" => cfg.hidden = parse_num(key, value)?,
                "latent_dim" => cfg.latent_dim = parse_num(key, value)?,
                "kl_weight" => cfg.kl_weight = parse_num(key, value)?,
                "l1_weight" => cfg.l1_weight = parse_num(key, value)?,
                "sobel_weight" => cfg.sobel_weight = parse_num(key, value)?,
                "target" => cfg.target = parse_num(key, value)?,
                "attack_lr" => cfg.attack_lr = parse_num(key, value)?,
                "optimizer" => {
                    cfg.optimizer = OptimizerKind::parse(value)
                        .map_err(|e| CliError::Usage(e.to_string()))?
                }
                "max_iters" => cfg.max_iters = parse_num(key, value)?,
                "snapshot_stride" => cfg.snapshot_stride = parse_num(key, value)?,
                "penalty" => cfg.penalty = parse_penalty(value)?,
                "aggregation" => {
                    cfg.aggregation = Aggregation::parse(value)
                        .map_err(|e| CliError::Usage(e.to_string()))?
                }
                "normalization" => {
                    cfg.normalization = Normalization::parse(value)
                        .map_err(|e| CliError::Usage(e.to_string()))?
                }
                "top_k" => cfg.top_k = parse_num(key, value)?,
                "frames" => cfg.frames = parse_num(key, value)?,
                other => {
                    return Err(CliError::Usage(format!("config: unknown key '{other}'")));
                }
            }
        }
        Ok(cfg)
    }

    /// Range checks run before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Usage(format!("config: {msg}")));
        if !(self.target > 0.0 && self.target < 1.0) {
            return bad(format!("target must lie in (0, 1), got {}", self.target));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.attack_lr.is_finite() && self.attack_lr > 0.0) {
            return bad(format!("attack_lr must be positive, got {}", self.attack_lr));
        }
        for (name, v) in [
            ("kl_weight", self.kl_weight),
            ("l1_weight", self.l1_weight),
            ("sobel_weight", self.sobel_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if let Penalty::Ridge(l) | Penalty::Lasso(l) = self.penalty {
            if !(l.is_finite() && l >= 0.0) {
                return bad(format!("penalty strength must be nonnegative, got {l}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.frames < 2 {
            return bad("frames must be at least 2".into());
        }
        Ok(())
    }
}
