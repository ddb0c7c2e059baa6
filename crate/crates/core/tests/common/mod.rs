#![allow(dead_code)]

use gemlab::autograd::{ParamStore, Tensor};
use gemlab::backbone::{even_stages, BackboneConfig, Model, PreparedCloud};
use gemlab::geometry::PointCloud;
use gemlab::peft::{attach, PeftConfig};
use gemlab::rng;
use gemlab::training::init_backbone;
use rand::Rng;

/// Uniform points in a 2 x 2 x 1 box with random features and labels.
pub fn random_cloud(n: usize, channels: usize, classes: usize, seed: u64) -> PointCloud {
    let mut r = rng::stream(seed, "test.cloud");
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| [r.random_range(0.0..2.0), r.random_range(0.0..2.0), r.random_range(0.0..1.0)])
        .collect();
    let feats = (0..n * channels).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    PointCloud::new(coords, feats, channels, Some(labels), classes).unwrap()
}

pub fn small_backbone(d: usize, blocks: usize, patch_size: usize) -> BackboneConfig {
    BackboneConfig {
        d,
        blocks,
        patch_size,
        heads: 2,
        ffn_mult: 2,
        stages: even_stages(blocks, 2),
        ..Default::default()
    }
}

/// Backbone with random weights, every parameter frozen.
pub fn frozen_backbone(cfg: &BackboneConfig, seed: u64) -> ParamStore {
    let mut s = init_backbone(cfg, seed).unwrap();
    s.freeze_all();
    s
}

pub fn attached(cfg: &BackboneConfig, peft: &PeftConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = frozen_backbone(cfg, seed);
    let a = attach(peft, cfg, &mut store, seed).unwrap();
    (Model::with_peft(cfg.clone(), a), store)
}

/// Overwrites every `peft.` entry with uniform values in `[-scale, scale]`,
/// so zero-initialized up-projections become active.
pub fn perturb_peft(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng::stream(seed, "test.perturb");
    let names: Vec<String> = store.names().filter(|n| n.starts_with("peft.")).map(String::from).collect();
    for n in names {
        let t = store.value_mut(&n).unwrap();
        for x in t.data_mut() {
            *x = r.random_range(-scale..scale);
        }
    }
}

pub fn logits(model: &Model, store: &ParamStore, cloud: &PreparedCloud) -> Tensor {
    model.logits(store, cloud).unwrap()
}
