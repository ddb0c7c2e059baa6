use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autograd::{AttnGroup, AttnLayout, Graph, MixRows, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::Sharing;

/// `x + relu(x·W_down)·W_up` for the bottleneck adapter of `block`.
pub fn adapter_branch(g: &mut Graph, store: &ParamStore, x: Var, block: usize) -> Result<Var> {
    let down = g.param(store, &format!("peft.block{block}.adapter.down"))?;
    let up = g.param(store, &format!("peft.block{block}.adapter.up"))?;
    let h = g.matmul(x, down)?;
    let h = g.relu(h);
    let h = g.matmul(h, up)?;
    g.add(x, h)
}

/// Per-offset averaging operators over the stencil: entry `o` maps every
/// point to the mean of the points in its neighbor voxel at offset `o`.
pub fn stencil_mixers(nbr: &crate::geometry::NeighborIndex) -> Vec<Rc<MixRows>> {
    (0..nbr.num_offsets())
        .map(|o| {
            let rows = (0..nbr.len())
                .map(|i| {
                    let pts = nbr.neighbors(i, o);
                    let w = 1.0 / pts.len().max(1) as f64;
                    pts.iter().map(|&j| (j, w)).collect()
                })
                .collect();
            Rc::new(rows)
        })
        .collect()
}

/// Spatial adapter branch only, without a residual:
/// `relu(Σ_o avg_o(x·W_down)·W_o)·W_up`.
pub fn spatial_adapter_branch(g: &mut Graph, store: &ParamStore, x: Var, mixers: &[Rc<MixRows>]) -> Result<Var> {
    let n = g.value(x).rows();
    if mixers.iter().any(|m| m.len() != n) {
        return Err(Error::contract(format!("neighbor index does not cover the {n} input points")));
    }
    let down = g.param(store, "peft.sa.down")?;
    let up = g.param(store, "peft.sa.up")?;
    let z = g.matmul(x, down)?;
    let mut acc: Option<Var> = None;
    for (o, mix) in mixers.iter().enumerate() {
        if mix.iter().all(Vec::is_empty) {
            continue;
        }
        let kernel = g.param(store, &format!("peft.sa.kernel.{o:02}"))?;
        let gathered = g.mix_rows(z, Rc::clone(mix))?;
        let term = g.matmul(gathered, kernel)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("spatial adapter over an empty stencil"))?;
    let h = g.relu(acc);
    g.matmul(h, up)
}

/// One context-adapter application: the latent it started from and the
/// context `L_c` it produced.
#[derive(Clone, Debug)]
pub struct LatentStep {
    pub block: usize,
    /// Name of the initial latent parameter whose chain this step extends.
    pub chain: String,
    pub input: Tensor,
    pub context: Tensor,
}

/// Latent tokens threaded through the context adapters of one forward
/// pass. Created fresh from the learned initial latents on every pass.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub sharing: Sharing,
    /// Final latent of every chain.
    pub latents: BTreeMap<String, Tensor>,
    pub steps: Vec<LatentStep>,
}

impl LatentState {
    pub fn new(sharing: Sharing) -> Self {
        Self { sharing, latents: BTreeMap::new(), steps: Vec::new() }
    }
}

/// Graph nodes produced by one context adapter.
#[derive(Clone, Copy, Debug)]
pub struct ContextOutput {
    /// Point branch, n×d; the caller adds the residual.
    pub branch: Var,
    /// `L_c`, m×r; also the node holding the latent→point attention.
    pub context: Var,
    /// Point→latent attention node, n×r.
    pub scatter: Var,
}

/// Context adapter of `block`, without a residual. Latents query every
/// point once (m×n attention), then every point queries the contextualized
/// latents (n×m attention).
pub fn context_adapter_branch(
    g: &mut Graph,
    store: &ParamStore,
    h: Var,
    latent: Var,
    block: usize,
) -> Result<ContextOutput> {
    let p = |name: &str| format!("peft.block{block}.ca.{name}");
    let n = g.value(h).rows();
    let (m, r) = (g.value(latent).rows(), g.value(latent).cols());
    let q_down = g.param(store, &p("q_down"))?;
    if g.value(q_down).cols() != r {
        return Err(Error::contract(format!("latent width {r} differs from adapter rank {}", g.value(q_down).cols())));
    }
    let k_down = g.param(store, &p("k_down"))?;
    let v_down = g.param(store, &p("v_down"))?;
    let lq = g.param(store, &p("latent_q"))?;
    let lk = g.param(store, &p("latent_k"))?;
    let lv = g.param(store, &p("latent_v"))?;
    let up = g.param(store, &p("up"))?;
    let scale = 1.0 / (r as f64).sqrt();

    g.set_site(format!("block{block}.ca.proj"));
    let q = g.matmul(h, q_down)?;
    let k = g.matmul(h, k_down)?;
    let v = g.matmul(h, v_down)?;
    let latent_q = g.matmul(latent, lq)?;

    g.set_site(format!("block{block}.ca.stage1"));
    let gather = AttnLayout {
        heads: 1,
        scale,
        groups: vec![AttnGroup { queries: (0..m).collect(), keys: (0..n).collect() }],
        key_bias: None,
    };
    let context = g.attention(latent_q, k, v, Rc::new(gather))?;

    g.set_site(format!("block{block}.ca.proj"));
    let ck = g.matmul(context, lk)?;
    let cv = g.matmul(context, lv)?;

    g.set_site(format!("block{block}.ca.stage2"));
    let scatter = AttnLayout {
        heads: 1,
        scale,
        groups: vec![AttnGroup { queries: (0..n).collect(), keys: (0..m).collect() }],
        key_bias: None,
    };
    let out = g.attention(q, ck, cv, Rc::new(scatter))?;

    g.set_site(format!("block{block}.ca.proj"));
    let branch = g.matmul(out, up)?;
    Ok(ContextOutput { branch, context, scatter: out })
}
