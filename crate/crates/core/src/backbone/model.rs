use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autograd::{AttnGroup, AttnLayout, Graph, MixRows, ParamStore, Tensor, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::geometry::{partition, serialize, NeighborIndex, PatchPartition, PointCloud};
use crate::peft::{
    adapter_branch, context_adapter_branch, initial_latent_name, spatial_adapter_branch, stencil_mixers, LatentState,
    LatentStep, PeftAttachment,
};

pub const LN_EPS: f64 = 1e-5;

/// A cloud with its patch partition and stencil index, ready for repeated
/// forward passes.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub coords: Tensor,
    pub feats: Tensor,
    pub labels: Option<Rc<Vec<usize>>>,
    pub partition: PatchPartition,
    pub neighbors: NeighborIndex,
    mixers: Vec<Rc<MixRows>>,
}

impl PreparedCloud {
    /// Serializes the cloud on the configured grid and chunks it into
    /// patches of `patch_size`.
    pub fn new(cloud: &PointCloud, cfg: &BackboneConfig) -> Result<Self> {
        let order = serialize(cloud.coords(), cfg.grid_size)?;
        let part = partition(order, cloud.len(), cfg.patch_size)?;
        let nbr = NeighborIndex::build(cloud.coords(), cfg.voxel_size, 3)?;
        Self::from_parts(cloud, part, nbr)
    }

    pub fn from_parts(cloud: &PointCloud, partition: PatchPartition, neighbors: NeighborIndex) -> Result<Self> {
        if partition.len() != cloud.len() || neighbors.len() != cloud.len() {
            return Err(Error::contract(format!(
                "partition over {} and neighbor index over {} points for a cloud of {}",
                partition.len(),
                neighbors.len(),
                cloud.len()
            )));
        }
        Ok(Self {
            coords: cloud.coords_tensor(),
            feats: cloud.feats_tensor(),
            labels: cloud.labels().map(|l| Rc::new(l.to_vec())),
            mixers: stencil_mixers(&neighbors),
            partition,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mixers(&self) -> &[Rc<MixRows>] {
        &self.mixers
    }

    /// One attention group per patch over its real points; padded slots
    /// never appear as keys.
    pub fn patch_groups(&self, extra_keys: std::ops::Range<usize>) -> Vec<AttnGroup> {
        self.partition
            .patches()
            .map(|p| AttnGroup { queries: p.to_vec(), keys: p.iter().copied().chain(extra_keys.clone()).collect() })
            .collect()
    }
}

/// Nodes recorded for one block.
#[derive(Clone, Debug)]
pub struct BlockActivations {
    pub input: Var,
    pub post_attn: Var,
    pub post_ffn: Var,
    /// Local attention node; its probabilities are indexed by patch.
    pub attn: Var,
    /// Latent→point attention node of the context adapter (`L_c`).
    pub ca_gather: Option<Var>,
    /// Point→latent attention node of the context adapter.
    pub ca_scatter: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub blocks: Vec<BlockActivations>,
    pub latent: Option<LatentState>,
}

/// `x·W + b` for the parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let scale = g.param(store, &format!("{prefix}.scale"))?;
    let shift = g.param(store, &format!("{prefix}.shift"))?;
    let y = g.normalize_rows(x, LN_EPS)?;
    let y = g.mul_row(y, scale)?;
    g.add_row(y, shift)
}

pub fn embed(g: &mut Graph, store: &ParamStore, feats: Var) -> Result<Var> {
    g.set_site("embed");
    linear(g, store, feats, "backbone.embed")
}

/// `relu(coords·W1 + b1)·W2 + b2`.
pub fn pos_encode(g: &mut Graph, store: &ParamStore, coords: Var) -> Result<Var> {
    g.set_site("pos");
    let h = linear(g, store, coords, "backbone.pos.fc1")?;
    let h = g.relu(h);
    linear(g, store, h, "backbone.pos.fc2")
}

pub fn ffn(g: &mut Graph, store: &ParamStore, x: Var, block: usize) -> Result<Var> {
    g.set_site(format!("block{block}.ffn"));
    let h = linear(g, store, x, &format!("backbone.block{block}.ffn.fc1"))?;
    let h = g.relu(h);
    linear(g, store, h, &format!("backbone.block{block}.ffn.fc2"))
}

/// Multi-head attention computed independently inside every patch, with
/// LoRA updates of Q/K and prompt key/value tokens when attached. Returns
/// the output projection and the attention node.
pub fn local_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    cloud: &PreparedCloud,
    h: Var,
    block: usize,
    peft: Option<&PeftAttachment>,
) -> Result<(Var, Var)> {
    let n = g.value(h).rows();
    if cloud.partition.len() != n {
        return Err(Error::contract(format!("partition over {} points for {n} rows", cloud.partition.len())));
    }
    let prefix = format!("backbone.block{block}.attn");
    g.set_site(format!("block{block}.attn_proj"));
    let mut q = linear(g, store, h, &format!("{prefix}.q"))?;
    let mut k = linear(g, store, h, &format!("{prefix}.k"))?;
    let mut v = linear(g, store, h, &format!("{prefix}.v"))?;

    let lora = peft.is_some_and(|p| p.hooks.lora[block]);
    if lora {
        g.set_site(format!("block{block}.lora"));
        for (proj, base) in [("q", &mut q), ("k", &mut k)] {
            let down = g.param(store, &format!("peft.block{block}.lora.{proj}_down"))?;
            let up = g.param(store, &format!("peft.block{block}.lora.{proj}_up"))?;
            let delta = g.matmul(h, down)?;
            let delta = g.matmul(delta, up)?;
            *base = g.add(*base, delta)?;
        }
    }

    let mut extra = 0..0;
    let mut key_bias = None;
    if let Some(p) = peft.filter(|p| p.hooks.prompt[block]) {
        let pk = g.param(store, &format!("peft.block{block}.prompt.key"))?;
        let pv = g.param(store, &format!("peft.block{block}.prompt.value"))?;
        let m = g.value(pk).rows();
        k = g.concat_rows(&[k, pk])?;
        v = g.concat_rows(&[v, pv])?;
        extra = n..n + m;
        if p.prompt_logit_offset != 0.0 {
            let mut bias = vec![0.0; n + m];
            bias[n..].fill(p.prompt_logit_offset);
            key_bias = Some(bias);
        }
    }

    g.set_site(format!("block{block}.local_attn"));
    let layout = AttnLayout {
        heads: cfg.heads,
        scale: 1.0 / (cfg.head_dim() as f64).sqrt(),
        groups: cloud.patch_groups(extra),
        key_bias,
    };
    let attn = g.attention(q, k, v, Rc::new(layout))?;
    g.set_site(format!("block{block}.attn_proj"));
    let out = linear(g, store, attn, &format!("{prefix}.out"))?;
    Ok((out, attn))
}

/// Full forward pass. PEFT branches enter at their insertion points:
/// spatial adapter beside the positional encoding, context adapter beside
/// local attention, bottleneck adapter after the FFN residual, LoRA and
/// prompts inside attention.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    cloud: &PreparedCloud,
    peft: Option<&PeftAttachment>,
) -> Result<ForwardOutput> {
    if cloud.feats.cols() != cfg.in_channels {
        return Err(Error::shape(format!(
            "cloud has {} feature channels, backbone expects {}",
            cloud.feats.cols(),
            cfg.in_channels
        )));
    }
    if let Some(p) = peft {
        if p.hooks.context.len() != cfg.blocks {
            return Err(Error::contract("PEFT attachment was built for a different backbone"));
        }
    }
    let feats = g.constant(cloud.feats.clone());
    let coords = g.constant(cloud.coords.clone());
    let x0 = embed(g, store, feats)?;
    let pos = pos_encode(g, store, coords)?;
    let mut x = g.add(x0, pos)?;
    if peft.is_some_and(|p| p.hooks.spatial) {
        g.set_site("sa");
        let branch = spatial_adapter_branch(g, store, x0, cloud.mixers())?;
        x = g.add(x, branch)?;
    }

    let mut latent = peft.filter(|p| p.hooks.any_context()).map(|p| LatentState::new(p.config.sharing));
    let mut chains: BTreeMap<String, Var> = BTreeMap::new();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let input = x;
        let h = layer_norm(g, store, x, &format!("backbone.block{b}.norm1"))?;
        let (attn_out, attn) = local_attention(g, store, cfg, cloud, h, b, peft)?;
        x = g.add(x, attn_out)?;
        let (mut ca_gather, mut ca_scatter) = (None, None);
        if let (Some(p), Some(state)) = (peft, latent.as_mut()) {
            if p.hooks.context[b] {
                let chain = initial_latent_name(&p.config, cfg, b);
                let l = match chains.get(&chain) {
                    Some(&l) => l,
                    None => g.param(store, &chain)?,
                };
                let out = context_adapter_branch(g, store, h, l, b)?;
                x = g.add(x, out.branch)?;
                let next = g.add(l, out.context)?;
                state.steps.push(LatentStep {
                    block: b,
                    chain: chain.clone(),
                    input: g.value(l).clone(),
                    context: g.value(out.context).clone(),
                });
                chains.insert(chain, next);
                ca_gather = Some(out.context);
                ca_scatter = Some(out.scatter);
            }
        }
        let post_attn = x;
        let h2 = layer_norm(g, store, x, &format!("backbone.block{b}.norm2"))?;
        let f = ffn(g, store, h2, b)?;
        x = g.add(x, f)?;
        if peft.is_some_and(|p| p.hooks.adapter[b]) {
            g.set_site(format!("block{b}.adapter"));
            x = adapter_branch(g, store, x, b)?;
        }
        blocks.push(BlockActivations { input, post_attn, post_ffn: x, attn, ca_gather, ca_scatter });
    }
    if let Some(state) = latent.as_mut() {
        state.latents = chains.iter().map(|(k, &v)| (k.clone(), g.value(v).clone())).collect();
    }
    let y = layer_norm(g, store, x, "backbone.norm_out")?;
    g.set_site("head");
    let logits = linear(g, store, y, "head")?;
    Ok(ForwardOutput { logits, blocks, latent })
}

/// A backbone configuration with an optional PEFT attachment.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: BackboneConfig,
    pub peft: Option<PeftAttachment>,
}

impl Model {
    pub fn new(config: BackboneConfig) -> Self {
        Self { config, peft: None }
    }

    pub fn with_peft(config: BackboneConfig, peft: PeftAttachment) -> Self {
        Self { config, peft: Some(peft) }
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud, &self.config)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cloud: &PreparedCloud) -> Result<ForwardOutput> {
        forward(g, store, &self.config, cloud, self.peft.as_ref())
    }

    /// Logits of one cloud as a plain tensor.
    pub fn logits(&self, store: &ParamStore, cloud: &PreparedCloud) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, cloud)?;
        Ok(g.value(out.logits).clone())
    }

    /// Arg-max class of every point; ties resolve to the lower class.
    pub fn predict(&self, store: &ParamStore, cloud: &PreparedCloud) -> Result<Vec<usize>> {
        let logits = self.logits(store, cloud)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}
