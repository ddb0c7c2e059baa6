//! Multiply-add counting, attention-weight capture, and the divergence
//! used to compare captured distributions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, ParamStore};
use crate::backbone::{Model, PreparedCloud};
use crate::error::{Error, Result};

/// Multiply-add tallies keyed by call site, e.g. `block2.local_attn`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    sites: BTreeMap<String, u64>,
}

impl OpCounter {
    pub fn add(&mut self, site: &str, macs: u64) {
        if let Some(v) = self.sites.get_mut(site) {
            *v += macs;
        } else {
            self.sites.insert(site.to_string(), macs);
        }
    }

    pub fn get(&self, site: &str) -> u64 {
        self.sites.get(site).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.sites.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.sites.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Sum over the sites whose name satisfies `pred`.
    pub fn total_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.sites.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v).sum()
    }

    pub fn total(&self) -> u64 {
        self.sites.values().sum()
    }

    /// `site,count` rows in site order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,count\n");
        for (k, v) in &self.sites {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

/// Multiply-add counts of one forward pass.
pub fn count_pass(model: &Model, store: &ParamStore, cloud: &PreparedCloud) -> Result<OpCounter> {
    let mut g = Graph::with_counter();
    model.forward(&mut g, store, cloud)?;
    Ok(g.take_counter().unwrap_or_default())
}

/// Which global-token attention to capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpStage {
    /// Latent tokens attending over all points (context adapter stage 1).
    Gather,
    /// Points attending over the latent tokens (context adapter stage 2).
    Scatter,
    /// Points attending over the prompt slots, averaged over heads.
    Prompt,
}

/// Attention weights between global tokens and points for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDump {
    pub block: usize,
    /// `(token_id, point_id, weight)` rows.
    pub rows: Vec<(usize, usize, f64)>,
}

impl BlockDump {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_id,point_id,weight\n");
        for (t, p, w) in &self.rows {
            let _ = writeln!(out, "{t},{p},{w}");
        }
        out
    }

    /// Weights of `token` as a dense vector over `n` points.
    pub fn token_weights(&self, token: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(t, p, w) in &self.rows {
            if t == token {
                out[p] = w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnDump {
    pub stage: DumpStage,
    pub blocks: Vec<BlockDump>,
}

impl AttnDump {
    /// Writes `{prefix}.block{b}.csv` per block into `dir` and returns the
    /// paths.
    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir.as_ref())?;
        let mut paths = Vec::new();
        for b in &self.blocks {
            let path = dir.as_ref().join(format!("{prefix}.block{}.csv", b.block));
            std::fs::write(&path, b.to_csv())?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Captures the global-token attention of one forward pass.
pub fn dump_attention(model: &Model, store: &ParamStore, cloud: &PreparedCloud, stage: DumpStage) -> Result<AttnDump> {
    let hooks = model.peft.as_ref().map(|p| &p.hooks);
    let supported = match stage {
        DumpStage::Gather | DumpStage::Scatter => hooks.is_some_and(|h| h.any_context()),
        DumpStage::Prompt => hooks.is_some_and(|h| h.prompt.iter().any(|&p| p)),
    };
    if !supported {
        let method = model.peft.as_ref().map_or("none".to_string(), |p| p.config.method.to_string());
        return Err(Error::Unsupported(format!("method `{method}` has no global tokens for a {stage:?} dump")));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, cloud)?;
    let n = cloud.len();
    let mut blocks = Vec::new();
    for (b, act) in out.blocks.iter().enumerate() {
        let node = match stage {
            DumpStage::Gather => act.ca_gather,
            DumpStage::Scatter => act.ca_scatter,
            DumpStage::Prompt => hooks.filter(|h| h.prompt[b]).map(|_| act.attn),
        };
        let Some(node) = node else { continue };
        let (layout, probs) = g.attention_probs(node).expect("attention node");
        let mut rows = Vec::new();
        match stage {
            DumpStage::Gather | DumpStage::Scatter => {
                let group = &layout.groups[0];
                let nk = group.keys.len();
                for (a, &qi) in group.queries.iter().enumerate() {
                    for (c, &kj) in group.keys.iter().enumerate() {
                        let w = probs[0][a * nk + c];
                        rows.push(if stage == DumpStage::Gather { (qi, kj, w) } else { (kj, qi, w) });
                    }
                }
            }
            DumpStage::Prompt => {
                let heads = layout.heads;
                for (gi, group) in layout.groups.iter().enumerate() {
                    let nk = group.keys.len();
                    for (a, &qi) in group.queries.iter().enumerate() {
                        for (c, &kj) in group.keys.iter().enumerate().filter(|(_, &k)| k >= n) {
                            let w: f64 = (0..heads).map(|h| probs[gi * heads + h][a * nk + c]).sum::<f64>();
                            rows.push((kj - n, qi, w / heads as f64));
                        }
                    }
                }
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        blocks.push(BlockDump { block: b, rows });
    }
    Ok(AttnDump { stage, blocks })
}

/// Jensen-Shannon divergence (natural log) between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions of different support");
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(&x, _)| x > 0.0).map(|(&x, &y)| x * (x / y).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}
