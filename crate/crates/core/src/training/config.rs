use std::fmt;
use std::str::FromStr;

use crate::config_text::ConfigBlock;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown learning-rate schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Clouds per optimizer step; gradients are accumulated and averaged.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    /// Momentum coefficient of SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    /// AdamW, lr 1e-3, weight decay 1e-2, cosine decay, batch 4.
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            schedule: Schedule::Cosine,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn to_block(&self) -> ConfigBlock {
        let mut b = ConfigBlock::new()
            .with("train.epochs", self.epochs)
            .with("train.lr", self.learning_rate)
            .with("train.weight_decay", self.weight_decay)
            .with("train.batch_size", self.batch_size)
            .with("train.seed", self.seed)
            .with("train.optimizer", self.optimizer)
            .with("train.schedule", self.schedule);
        if self.optimizer == OptimizerKind::SgdMomentum {
            b.set("train.momentum", self.momentum);
        }
        b
    }

    pub fn from_block(block: &ConfigBlock) -> Result<Self> {
        let mut c = Self {
            epochs: block.require("train.epochs")?,
            learning_rate: block.require("train.lr")?,
            weight_decay: block.require("train.weight_decay")?,
            batch_size: block.require("train.batch_size")?,
            seed: block.require("train.seed")?,
            optimizer: block.require::<String>("train.optimizer")?.parse()?,
            schedule: block.require::<String>("train.schedule")?.parse()?,
            ..Self::default()
        };
        if block.contains("train.momentum") {
            c.momentum = block.require("train.momentum")?;
        }
        c.validate()?;
        Ok(c)
    }
}
