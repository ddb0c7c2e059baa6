use crate::autograd::ParamStore;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params_init::{init_into, Init, ParamSpec};
use crate::peft::{Method, PeftConfig, Sharing};
use crate::rng;

/// Which branch runs at which backbone insertion point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookTable {
    /// Spatial adapter at the input positional-encoding point.
    pub spatial: bool,
    /// Per block: context adapter after local attention.
    pub context: Vec<bool>,
    /// Per block: bottleneck adapter after the FFN.
    pub adapter: Vec<bool>,
    /// Per block: low-rank updates of the query/key projections.
    pub lora: Vec<bool>,
    /// Per block: learned key/value prompts inside attention.
    pub prompt: Vec<bool>,
}

impl HookTable {
    pub fn build(cfg: &PeftConfig, backbone: &BackboneConfig) -> Self {
        let mut active = vec![false; backbone.blocks];
        for b in cfg.insertion_blocks(backbone) {
            active[b] = true;
        }
        let per_block = |on: bool| if on { active.clone() } else { vec![false; backbone.blocks] };
        Self {
            spatial: cfg.method.has_spatial(),
            context: per_block(cfg.method.has_context()),
            adapter: per_block(cfg.method == Method::Adapter),
            lora: per_block(cfg.method == Method::Lora),
            prompt: per_block(cfg.method == Method::Prompt),
        }
    }

    pub fn any_context(&self) -> bool {
        self.context.iter().any(|&c| c)
    }
}

/// A PEFT method bound to one backbone configuration.
#[derive(Clone, Debug)]
pub struct PeftAttachment {
    pub config: PeftConfig,
    pub hooks: HookTable,
    /// Additive logit offset on every prompt key. Zero in normal use; a
    /// large negative value masks the prompts out entirely.
    pub prompt_logit_offset: f64,
}

impl PeftAttachment {
    pub fn new(config: PeftConfig, backbone: &BackboneConfig) -> Result<Self> {
        config.validate(backbone)?;
        let hooks = HookTable::build(&config, backbone);
        Ok(Self { config, hooks, prompt_logit_offset: 0.0 })
    }
}

fn latent_name(sharing: Sharing, block: usize, stage: usize) -> String {
    match sharing {
        Sharing::Global => "peft.ca.latent".to_string(),
        Sharing::PerStage => format!("peft.stage{stage}.ca.latent"),
        Sharing::PerBlock => format!("peft.block{block}.ca.latent"),
    }
}

/// Name of the learned initial latent feeding the context adapter of
/// `block` when it starts a fresh latent chain.
pub fn initial_latent_name(cfg: &PeftConfig, backbone: &BackboneConfig, block: usize) -> String {
    latent_name(cfg.sharing, block, backbone.stages[block])
}

/// Every `peft.` parameter the method adds, in declaration order.
pub fn peft_param_specs(cfg: &PeftConfig, backbone: &BackboneConfig) -> Vec<ParamSpec> {
    let (d, r, m) = (backbone.d, cfg.rank, cfg.tokens);
    let down = Init::Uniform(1.0 / (d as f64).sqrt());
    let latent = Init::Uniform(1.0 / (r as f64).sqrt());
    let blocks = cfg.insertion_blocks(backbone);
    let mut specs = Vec::new();
    match cfg.method {
        Method::Linear | Method::BitFit => {}
        Method::Adapter => {
            for b in &blocks {
                specs.push(ParamSpec::new(format!("peft.block{b}.adapter.down"), &[d, r], down));
                specs.push(ParamSpec::new(format!("peft.block{b}.adapter.up"), &[r, d], Init::Zeros));
            }
        }
        Method::Lora => {
            for b in &blocks {
                for proj in ["q", "k"] {
                    specs.push(ParamSpec::new(format!("peft.block{b}.lora.{proj}_down"), &[d, r], down));
                    specs.push(ParamSpec::new(format!("peft.block{b}.lora.{proj}_up"), &[r, d], Init::Zeros));
                }
            }
        }
        Method::Prompt => {
            for b in &blocks {
                specs.push(ParamSpec::new(format!("peft.block{b}.prompt.key"), &[m, d], down));
                specs.push(ParamSpec::new(format!("peft.block{b}.prompt.value"), &[m, d], down));
            }
        }
        Method::Gem | Method::GemSaOnly | Method::GemCaOnly => {
            if cfg.method.has_spatial() {
                specs.push(ParamSpec::new("peft.sa.down", &[d, r], down));
                for o in 0..cfg.k.pow(3) {
                    specs.push(ParamSpec::new(format!("peft.sa.kernel.{o:02}"), &[r, r], down));
                }
                specs.push(ParamSpec::new("peft.sa.up", &[r, d], Init::Zeros));
            }
            if cfg.method.has_context() {
                let mut latents: Vec<String> = Vec::new();
                for &b in &blocks {
                    for proj in ["q", "k", "v"] {
                        specs.push(ParamSpec::new(format!("peft.block{b}.ca.{proj}_down"), &[d, r], down));
                    }
                    for proj in ["q", "k", "v"] {
                        specs.push(ParamSpec::new(format!("peft.block{b}.ca.latent_{proj}"), &[r, r], latent));
                    }
                    specs.push(ParamSpec::new(format!("peft.block{b}.ca.up"), &[r, d], Init::Zeros));
                    let name = initial_latent_name(cfg, backbone, b);
                    if !latents.contains(&name) {
                        latents.push(name);
                    }
                }
                for name in latents {
                    specs.push(ParamSpec::new(name, &[m, r], latent));
                }
            }
        }
    }
    specs
}

/// Trainable parameter count of a method predicted in closed form,
/// including the always-trainable segmentation head.
pub fn closed_form_trainable(cfg: &PeftConfig, backbone: &BackboneConfig) -> usize {
    let (d, r, m) = (backbone.d, cfg.rank, cfg.tokens);
    let nb = cfg.insertion_blocks(backbone).len();
    let head = d * backbone.classes + backbone.classes;
    let k3 = cfg.k.pow(3);
    let spatial = 2 * r * d + k3 * r * r;
    let latents = match cfg.sharing {
        Sharing::Global => 1,
        Sharing::PerBlock => nb,
        Sharing::PerStage => {
            let mut stages: Vec<usize> = cfg.insertion_blocks(backbone).iter().map(|&b| backbone.stages[b]).collect();
            stages.dedup();
            stages.len()
        }
    };
    let context = nb * (3 * d * r + 3 * r * r + r * d) + latents * m * r;
    head + match cfg.method {
        Method::Linear => 0,
        Method::BitFit => {
            // every backbone bias and LayerNorm shift, plus the head bias
            // which is already counted
            let biases = d + d + d + backbone.blocks * (4 * d + backbone.ffn_mult * d + d);
            let shifts = backbone.blocks * 2 * d + d;
            biases + shifts
        }
        Method::Adapter => 2 * d * r * nb,
        Method::Lora => 4 * d * r * nb,
        Method::Prompt => 2 * m * d * nb,
        Method::Gem => spatial + context,
        Method::GemSaOnly => spatial,
        Method::GemCaOnly => context,
    }
}

/// Unfreezes exactly the entries named `*.bias` or `*.shift`.
pub fn bitfit_select(store: &mut ParamStore) {
    store.freeze_all();
    store.set_frozen_where(false, is_bias_like);
}

pub fn is_bias_like(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".shift")
}

/// Freezes the loaded backbone, keeps the head trainable, and adds the
/// method's `peft.` parameters (initialized from the `init.peft` stream of
/// `seed`).
pub fn attach(cfg: &PeftConfig, backbone: &BackboneConfig, store: &mut ParamStore, seed: u64) -> Result<PeftAttachment> {
    let attachment = PeftAttachment::new(cfg.clone(), backbone)?;
    for spec in backbone.param_specs() {
        let p = store
            .get(&spec.name)
            .ok_or_else(|| Error::contract(format!("backbone parameter `{}` is not loaded", spec.name)))?;
        if p.value.shape() != spec.shape.as_slice() {
            return Err(Error::contract(format!("backbone parameter `{}` has the wrong shape", spec.name)));
        }
    }
    if store.names().any(|n| n.starts_with("peft.")) {
        return Err(Error::contract("a PEFT attachment is already present"));
    }
    if cfg.method == Method::BitFit {
        bitfit_select(store);
    } else {
        store.freeze_all();
    }
    store.set_frozen_where(false, |n| n.starts_with("head."));
    let mut rng = rng::stream(seed, "init.peft");
    init_into(store, &peft_param_specs(cfg, backbone), &mut rng, false)?;
    Ok(attachment)
}
