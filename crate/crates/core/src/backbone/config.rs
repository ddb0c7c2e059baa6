use crate::config_text::ConfigBlock;
use crate::error::{Error, Result};
use crate::params_init::{Init, ParamSpec};

/// Shape of the miniature point transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Input feature channels.
    pub in_channels: usize,
    pub d: usize,
    pub blocks: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub classes: usize,
    /// Stage id of every block; stages are contiguous and numbered from 0.
    pub stages: Vec<usize>,
    /// Voxel edge of the 3x3x3 stencil used by the spatial adapter.
    pub voxel_size: f64,
    /// Cell edge of the serialization grid that orders points into patches.
    pub grid_size: f64,
}

impl Default for BackboneConfig {
    /// d=64, 8 blocks in 4 stages of 2, 4 heads, p=16, FFN x4.
    fn default() -> Self {
        Self {
            in_channels: crate::geometry::SCENE_CHANNELS,
            d: 64,
            blocks: 8,
            patch_size: 16,
            heads: 4,
            ffn_mult: 4,
            classes: 3,
            stages: even_stages(8, 4),
            voxel_size: 0.25,
            grid_size: 0.05,
        }
    }
}

/// `blocks` split into `num_stages` contiguous, near-equal stages.
pub fn even_stages(blocks: usize, num_stages: usize) -> Vec<usize> {
    let num_stages = num_stages.clamp(1, blocks.max(1));
    (0..blocks).map(|b| b * num_stages / blocks).collect()
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.blocks == 0 || self.d == 0 || self.heads == 0 || self.classes == 0 || self.in_channels == 0 {
            return bad("blocks, d, heads, classes and in_channels must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad("d must be divisible by heads");
        }
        if self.patch_size == 0 || self.ffn_mult == 0 {
            return bad("patch_size and ffn_mult must be positive");
        }
        if self.stages.len() != self.blocks {
            return bad("every block needs exactly one stage id");
        }
        if self.stages[0] != 0 || self.stages.windows(2).any(|w| w[1] != w[0] && w[1] != w[0] + 1) {
            return bad("stage ids must be contiguous from 0");
        }
        if !(self.voxel_size > 0.0 && self.grid_size > 0.0) {
            return bad("voxel_size and grid_size must be positive");
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.last().map_or(0, |s| s + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn to_block(&self) -> ConfigBlock {
        let stages: Vec<String> = self.stages.iter().map(usize::to_string).collect();
        ConfigBlock::new()
            .with("backbone.in_channels", self.in_channels)
            .with("backbone.d", self.d)
            .with("backbone.blocks", self.blocks)
            .with("backbone.patch_size", self.patch_size)
            .with("backbone.heads", self.heads)
            .with("backbone.ffn_mult", self.ffn_mult)
            .with("backbone.classes", self.classes)
            .with("backbone.stages", stages.join(","))
            .with("backbone.voxel_size", self.voxel_size)
            .with("backbone.grid_size", self.grid_size)
    }

    pub fn from_block(block: &ConfigBlock) -> Result<Self> {
        let stages = block
            .require::<String>("backbone.stages")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad stage id `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let cfg = Self {
            in_channels: block.require("backbone.in_channels")?,
            d: block.require("backbone.d")?,
            blocks: block.require("backbone.blocks")?,
            patch_size: block.require("backbone.patch_size")?,
            heads: block.require("backbone.heads")?,
            ffn_mult: block.require("backbone.ffn_mult")?,
            classes: block.require("backbone.classes")?,
            stages,
            voxel_size: block.require("backbone.voxel_size")?,
            grid_size: block.require("backbone.grid_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        self.to_block().hash()
    }

    /// Every `backbone.` and `head.` parameter, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d;
        let hidden = self.ffn_mult * d;
        let mut specs = Vec::new();
        let mut linear = |prefix: String, fan_in: usize, fan_out: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            specs.push(ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Uniform(b)));
            specs.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Uniform(b)));
        };
        linear("backbone.embed".into(), self.in_channels, d);
        linear("backbone.pos.fc1".into(), 3, d);
        linear("backbone.pos.fc2".into(), d, d);
        for b in 0..self.blocks {
            for proj in ["q", "k", "v", "out"] {
                linear(format!("backbone.block{b}.attn.{proj}"), d, d);
            }
            linear(format!("backbone.block{b}.ffn.fc1"), d, hidden);
            linear(format!("backbone.block{b}.ffn.fc2"), hidden, d);
        }
        linear("head".into(), d, self.classes);
        for b in 0..self.blocks {
            for norm in ["norm1", "norm2"] {
                specs.push(ParamSpec::new(format!("backbone.block{b}.{norm}.scale"), &[d], Init::Ones));
                specs.push(ParamSpec::new(format!("backbone.block{b}.{norm}.shift"), &[d], Init::Zeros));
            }
        }
        specs.push(ParamSpec::new("backbone.norm_out.scale", &[d], Init::Ones));
        specs.push(ParamSpec::new("backbone.norm_out.shift", &[d], Init::Zeros));
        specs
    }
}
