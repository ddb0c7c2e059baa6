use std::fmt;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::config_text::ConfigBlock;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Linear,
    BitFit,
    Adapter,
    Lora,
    Prompt,
    Gem,
    GemSaOnly,
    GemCaOnly,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Linear,
        Method::BitFit,
        Method::Adapter,
        Method::Lora,
        Method::Prompt,
        Method::Gem,
        Method::GemSaOnly,
        Method::GemCaOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::BitFit => "bitfit",
            Method::Adapter => "adapter",
            Method::Lora => "lora",
            Method::Prompt => "prompt",
            Method::Gem => "gem",
            Method::GemSaOnly => "gem_sa_only",
            Method::GemCaOnly => "gem_ca_only",
        }
    }

    pub fn uses_rank(self) -> bool {
        matches!(self, Method::Adapter | Method::Lora | Method::Gem | Method::GemSaOnly | Method::GemCaOnly)
    }

    pub fn uses_tokens(self) -> bool {
        matches!(self, Method::Prompt | Method::Gem | Method::GemCaOnly)
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, Method::Gem | Method::GemSaOnly)
    }

    pub fn has_context(self) -> bool {
        matches!(self, Method::Gem | Method::GemCaOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown PEFT method `{s}`")))
    }
}

/// How the context adapter's latent tokens travel between insertions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sharing {
    /// Every block starts from its own learned latent.
    PerBlock,
    /// Latents accumulate within a stage and restart at stage boundaries.
    PerStage,
    /// One latent accumulates across all insertions.
    Global,
}

impl Sharing {
    pub const ALL: [Sharing; 3] = [Sharing::PerBlock, Sharing::PerStage, Sharing::Global];

    pub fn name(self) -> &'static str {
        match self {
            Sharing::PerBlock => "per_block",
            Sharing::PerStage => "per_stage",
            Sharing::Global => "global",
        }
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_block" | "none" | "n/a" => Ok(Sharing::PerBlock),
            "per_stage" => Ok(Sharing::PerStage),
            "global" => Ok(Sharing::Global),
            _ => Err(Error::Config(format!("unknown sharing mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeftConfig {
    pub method: Method,
    pub rank: usize,
    pub tokens: usize,
    pub sharing: Sharing,
    /// Stencil edge of the spatial adapter.
    pub k: usize,
    /// Blocks that receive per-block hooks; `None` means all blocks.
    pub blocks: Option<Vec<usize>>,
}

impl PeftConfig {
    /// Defaults: r=8, m=4, global sharing, 3x3x3 stencil, every block.
    pub fn new(method: Method) -> Self {
        Self { method, rank: 8, tokens: 4, sharing: Sharing::Global, k: 3, blocks: None }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_tokens(mut self, tokens: usize) -> Self {
        self.tokens = tokens;
        self
    }

    pub fn with_sharing(mut self, sharing: Sharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn insertion_blocks(&self, backbone: &BackboneConfig) -> Vec<usize> {
        self.blocks.clone().unwrap_or_else(|| (0..backbone.blocks).collect())
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.rank == 0 || self.tokens == 0 {
            return Err(Error::Config("rank and tokens must be at least 1".into()));
        }
        if self.k != 3 {
            return Err(Error::Config(format!("the spatial adapter uses a 3x3x3 stencil, got k={}", self.k)));
        }
        if let Some(b) = &self.blocks {
            if b.iter().any(|&i| i >= backbone.blocks) || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("insertion blocks must be ascending and inside the backbone".into()));
            }
        }
        Ok(())
    }

    /// Only the fields the method actually uses, so that configs differing
    /// in ignored fields hash identically.
    pub fn to_block(&self) -> ConfigBlock {
        let mut b = ConfigBlock::new().with("peft.method", self.method);
        if self.method.uses_rank() {
            b.set("peft.rank", self.rank);
            b.set("peft.k", self.k);
        }
        if self.method.uses_tokens() {
            b.set("peft.tokens", self.tokens);
        }
        if self.method.has_context() {
            b.set("peft.sharing", self.sharing);
        }
        if let Some(blocks) = &self.blocks {
            let s: Vec<String> = blocks.iter().map(usize::to_string).collect();
            b.set("peft.blocks", s.join(","));
        }
        b
    }

    pub fn from_block(block: &ConfigBlock) -> Result<Self> {
        let method: Method = block.require::<String>("peft.method")?.parse()?;
        let mut cfg = Self::new(method);
        if block.contains("peft.rank") {
            cfg.rank = block.require("peft.rank")?;
        }
        if block.contains("peft.k") {
            cfg.k = block.require("peft.k")?;
        }
        if block.contains("peft.tokens") {
            cfg.tokens = block.require("peft.tokens")?;
        }
        if block.contains("peft.sharing") {
            cfg.sharing = block.require::<String>("peft.sharing")?.parse()?;
        }
        if let Some(b) = block.get("peft.blocks") {
            cfg.blocks = Some(
                b.split(',')
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad block id `{s}`"))))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(cfg)
    }
}
