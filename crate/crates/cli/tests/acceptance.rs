//! Acceptance suite: one `PASS`/`FAIL` line per criterion, exit status 1
//! if any criterion fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p gemlab-cli --test acceptance -- 1 4 10`.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use gemlab::autograd::{check_gradients, Graph, ParamStore, Tensor};
use gemlab::backbone::{even_stages, forward, local_attention, BackboneConfig, Model, PreparedCloud};
use gemlab::geometry::{generate_scene, PointCloud, SceneSpec};
use gemlab::instrumentation::{count_pass, dump_attention, js_divergence, DumpStage, OpCounter};
use gemlab::params_init::count;
use gemlab::peft::{attach, budget_fit, is_bias_like, peft_param_specs, Budget, Method, PeftConfig};
use gemlab::rng;
use gemlab::training::{evaluate, finetune, init_backbone, pretrain, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_cloud(n: usize, channels: usize, classes: usize, seed: u64) -> PointCloud {
    let mut r = rng::stream(seed, "acceptance.cloud");
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| [r.random_range(0.0..2.0), r.random_range(0.0..2.0), r.random_range(0.0..1.0)])
        .collect();
    let feats = (0..n * channels).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    PointCloud::new(coords, feats, channels, Some(labels), classes).unwrap()
}

fn small(d: usize, blocks: usize, patch_size: usize) -> BackboneConfig {
    BackboneConfig { d, blocks, patch_size, heads: 2, ffn_mult: 2, stages: even_stages(blocks, 2), ..Default::default() }
}

fn attached(cfg: &BackboneConfig, pc: &PeftConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = init_backbone(cfg, seed).unwrap();
    store.freeze_all();
    let a = attach(pc, cfg, &mut store, seed).unwrap();
    (Model::with_peft(cfg.clone(), a), store)
}

/// Uniform values in `[-scale, scale]` for every `peft.` entry, so that
/// zero-initialized up-projections become active.
fn perturb_peft(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng::stream(seed, "acceptance.perturb");
    let names: Vec<String> = store.names().filter(|n| n.starts_with("peft.")).map(String::from).collect();
    for n in names {
        for x in store.value_mut(&n).unwrap().data_mut() {
            *x = r.random_range(-scale..scale);
        }
    }
}

fn peft_count(store: &ParamStore) -> usize {
    store.iter().filter(|(n, _)| n.starts_with("peft.")).map(|(_, p)| p.value.numel()).sum()
}

fn c1_parameter_count() -> Outcome {
    let mut seen = Vec::new();
    for (d, r) in [(64, 8), (32, 4), (64, 16)] {
        let cfg = BackboneConfig { d, ..Default::default() };
        let (_, store) = attached(&cfg, &PeftConfig::new(Method::GemSaOnly).with_rank(r), 0);
        let (got, want) = (peft_count(&store), 2 * r * d + 27 * r * r);
        ensure(got == want, || format!("d={d} r={r}: enumerated {got}, expected {want}"))?;
        seen.push(format!("(d={d},r={r})={got}"));
    }
    ensure(seen[0].ends_with("=2752"), || "d=64 r=8 is not 2752".into())?;
    Ok(seen.join(" "))
}

fn c2_zero_init_identity() -> Outcome {
    let cfg = small(16, 4, 8);
    let mut worst: f64 = 0.0;
    for method in [Method::Adapter, Method::Lora, Method::Gem, Method::GemSaOnly, Method::GemCaOnly] {
        let pc = PeftConfig::new(method).with_rank(4).with_tokens(3);
        for seed in 0..10u64 {
            let (model, store) = attached(&cfg, &pc, seed);
            let frozen = Model::new(cfg.clone());
            let cloud = random_cloud(16 + 24 * seed as usize, 6, 3, seed);
            let prepared = model.prepare(&cloud).map_err(|e| e.to_string())?;
            let a = model.logits(&store, &prepared).map_err(|e| e.to_string())?;
            let b = frozen.logits(&store, &prepared).map_err(|e| e.to_string())?;
            let diff = a.max_abs_diff(&b);
            ensure(diff < 1e-12, || format!("{method} seed {seed}: max |diff| {diff:e}"))?;
            worst = worst.max(diff);
        }
    }
    Ok(format!("max |logit diff| {worst:e} over 5 methods x 10 clouds"))
}

fn c3_gradient_fidelity() -> Outcome {
    let cfg = small(16, 2, 8);
    let pc = PeftConfig::new(Method::Gem).with_rank(4).with_tokens(2);
    let (model, mut store) = attached(&cfg, &pc, 3);
    perturb_peft(&mut store, 0.4, 3);
    let prepared = model.prepare(&random_cloud(32, 6, 3, 3)).map_err(|e| e.to_string())?;
    let labels = prepared.labels.clone().unwrap();
    let peft = model.peft.clone();
    let report = check_gradients(
        |g, s| {
            let out = forward(g, s, &cfg, &prepared, peft.as_ref())?;
            g.cross_entropy(out.logits, labels.clone())
        },
        &store,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let trainable = store.trainable_count();
    ensure(report.checked + report.skipped_kinks == trainable, || format!("{report:?} of {trainable}"))?;
    ensure(report.max_rel_error < 1e-4, || format!("max rel error {:e}", report.max_rel_error))?;
    Ok(format!(
        "{} of {trainable} scalars checked ({} straddle a ReLU kink), max rel error {:e}",
        report.checked, report.skipped_kinks, report.max_rel_error
    ))
}

fn row_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    (0..n).map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.data()[i * n + j]).sum::<f64>()).collect()
}

/// Dense multi-head attention over every point under a block-diagonal mask.
fn masked_dense_attention(h: &Tensor, store: &ParamStore, heads: usize, patch_of: &[usize]) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let proj = |name: &str| -> Vec<Vec<f64>> {
        let w = store.value(&format!("backbone.block0.attn.{name}.weight")).unwrap();
        let b = store.value(&format!("backbone.block0.attn.{name}.bias")).unwrap();
        (0..n).map(|i| row_affine(h.row(i), w, b)).collect()
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if patch_of[i] == patch_of[j] {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                out[i * d + c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn c4_local_attention_oracle() -> Outcome {
    let mut r = rng::stream(4, "acceptance.c4");
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let n = r.random_range(1..=64);
        let p = if case % 2 == 0 { 4 } else { 16 };
        let cfg = small(8, 1, p);
        let store = init_backbone(&cfg, case).unwrap();
        let prepared = PreparedCloud::new(&random_cloud(n, 6, 3, case), &cfg).map_err(|e| e.to_string())?;
        let h = random_cloud(n, 8, 3, case + 1000).feats_tensor();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let (_, attn) = local_attention(&mut g, &store, &cfg, &prepared, hv, 0, None).map_err(|e| e.to_string())?;
        let oracle = masked_dense_attention(&h, &store, cfg.heads, &prepared.partition.patch_of());
        let err = g.value(attn).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err < 1e-10, || format!("case {case} (n={n}, p={p}): max error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 cases, max |patch - dense| {worst:e}"))
}

fn scenes(spec: &SceneSpec, count: usize, base_seed: u64) -> Vec<PointCloud> {
    (0..count as u64).map(|i| generate_scene(base_seed + i, spec).unwrap()).collect()
}

fn c5_freeze_discipline() -> Outcome {
    let cfg = small(16, 2, 8);
    let tc = |epochs, seed| TrainConfig { epochs, learning_rate: 3e-3, batch_size: 2, seed, ..Default::default() };
    let (bb, _) = pretrain(&scenes(&SceneSpec::source([16; 3], 1), 3, 100), &cfg, &tc(2, 0)).map_err(|e| e.to_string())?;
    let target = scenes(&SceneSpec::target([12; 4], 2), 4, 200);
    let bias_names: BTreeSet<String> = bb.params.names().filter(|n| n.starts_with("backbone.") && is_bias_like(n)).map(String::from).collect();
    let mut notes = Vec::new();
    for method in Method::ALL {
        let pc = PeftConfig::new(method).with_rank(2).with_tokens(2);
        let out = finetune(&bb, &pc, &target, &tc(5, 1), None).map_err(|e| e.to_string())?;
        let changed: BTreeSet<String> = bb
            .params
            .changed_names(&out.store.slice_prefix("backbone."))
            .into_iter()
            .filter(|n| n.starts_with("backbone."))
            .collect();
        if method == Method::BitFit {
            ensure(changed == bias_names, || format!("bitfit changed {changed:?}, expected {bias_names:?}"))?;
        } else {
            ensure(changed.is_empty(), || format!("{method} changed {changed:?}"))?;
        }
        notes.push(format!("{method}:{}", changed.len()));
    }
    Ok(format!("changed backbone tensors per method {}", notes.join(" ")))
}

/// The cloud plus a copy translated far away along x, so no stencil or
/// patch neighborhood spans the two copies.
fn doubled(cloud: &PointCloud) -> PointCloud {
    let mut coords = cloud.coords().to_vec();
    coords.extend(cloud.coords().iter().map(|c| [c[0] + 64.0, c[1], c[2]]));
    let mut feats = cloud.feats().to_vec();
    feats.extend_from_slice(cloud.feats());
    PointCloud::new(coords, feats, cloud.channels(), None, cloud.classes()).unwrap()
}

fn c6_complexity() -> Outcome {
    let ca = |c: &OpCounter| c.total_where(|s| s.contains(".ca."));
    let cfg = small(16, 2, 8);
    let (model, store) = attached(&cfg, &PeftConfig::new(Method::Gem).with_rank(4).with_tokens(4), 0);
    let cloud = random_cloud(100, 6, 3, 6);
    let one = count_pass(&model, &store, &model.prepare(&cloud).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let two = count_pass(&model, &store, &model.prepare(&doubled(&cloud)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ca_ratio = ca(&two) as f64 / ca(&one) as f64;
    ensure((1.98..=2.02).contains(&ca_ratio), || format!("CA ratio {ca_ratio}"))?;

    let cloud = random_cloud(128, 6, 3, 7);
    let local = |p: usize| -> Result<u64, String> {
        let cfg = small(16, 2, p);
        let model = Model::new(cfg.clone());
        let store = init_backbone(&cfg, 0).unwrap();
        let prepared = model.prepare(&cloud).map_err(|e| e.to_string())?;
        Ok(count_pass(&model, &store, &prepared).map_err(|e| e.to_string())?.total_where(|s| s.ends_with(".local_attn")))
    };
    let local_ratio = local(16)? as f64 / local(8)? as f64;
    ensure((1.96..=2.04).contains(&local_ratio), || format!("local attention ratio {local_ratio}"))?;
    Ok(format!("CA n->2n ratio {ca_ratio:.4}, local attention p->2p ratio {local_ratio:.4}"))
}

/// `sum |d logits_i / d feats_j|` by central differences.
fn cross_sensitivity(model: &Model, store: &ParamStore, cloud: &PointCloud, i: usize, j: usize) -> f64 {
    let base = model.prepare(cloud).unwrap();
    let c = cloud.channels();
    let mut total = 0.0;
    for ch in 0..c {
        let (mut plus, mut minus) = (base.clone(), base.clone());
        plus.feats.data_mut()[j * c + ch] += 1e-4;
        minus.feats.data_mut()[j * c + ch] -= 1e-4;
        let (lp, lm) = (model.logits(store, &plus).unwrap(), model.logits(store, &minus).unwrap());
        total += lp.row(i).iter().zip(lm.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2e-4;
    }
    total
}

fn c7_globality() -> Outcome {
    let cfg = small(16, 2, 8);
    let cloud = random_cloud(64, 6, 3, 11);
    let prepared = Model::new(cfg.clone()).prepare(&cloud).map_err(|e| e.to_string())?;
    let patch_of = prepared.partition.patch_of();
    let far = |a: usize, b: usize| {
        let (p, q) = (cloud.coords()[a], cloud.coords()[b]);
        (0..3).map(|k| (p[k] - q[k]).abs()).fold(0.0, f64::max) > 3.0 * cfg.voxel_size
    };
    let (i, j) = (0..64)
        .flat_map(|i| (0..64).map(move |j| (i, j)))
        .find(|&(i, j)| patch_of[i] != patch_of[j] && far(i, j))
        .ok_or("no far cross-patch pair")?;

    let (sa, mut sa_store) = attached(&cfg, &PeftConfig::new(Method::GemSaOnly).with_rank(4), 0);
    perturb_peft(&mut sa_store, 0.3, 5);
    let local = cross_sensitivity(&sa, &sa_store, &cloud, i, j);
    ensure(local == 0.0, || format!("gem_sa_only sensitivity {local:e}"))?;

    let (gem, mut gem_store) = attached(&cfg, &PeftConfig::new(Method::Gem).with_rank(4).with_tokens(2), 0);
    perturb_peft(&mut gem_store, 0.3, 5);
    let global = cross_sensitivity(&gem, &gem_store, &cloud, i, j);
    ensure(global > 0.0, || "gem sensitivity is 0".into())?;
    Ok(format!("points {i},{j}: gem_sa_only {local}, gem {global:.3e}"))
}

/// Transfer experiment sizes.
const SOURCE_SCENES: usize = 64;
const TARGET_SCENES: usize = 32;
const TEST_SCENES: usize = 16;
const POINTS_PER_CLASS: usize = 64;
const FINETUNE_LR: f64 = 2e-3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c8_transfer() -> Outcome {
    let cfg = BackboneConfig::default();
    let source = scenes(&SceneSpec::source([POINTS_PER_CLASS; 3], 1), SOURCE_SCENES, 1000);
    let target_spec = SceneSpec::target([POINTS_PER_CLASS * 3 / 4; 4], 2);
    let target = scenes(&target_spec, TARGET_SCENES, 2000);
    let test = scenes(&target_spec, TEST_SCENES, 3000);
    let pre = TrainConfig { epochs: 50, batch_size: 4, seed: 1, ..Default::default() };
    let (bb, _) = pretrain(&source, &cfg, &pre).map_err(|e| e.to_string())?;
    let mut med = Vec::new();
    for method in [Method::Linear, Method::GemSaOnly, Method::GemCaOnly, Method::Gem] {
        let mut scores = Vec::new();
        for seed in 0..3 {
            let tc = TrainConfig { epochs: 40, learning_rate: FINETUNE_LR, batch_size: 4, seed, ..Default::default() };
            let out = finetune(&bb, &PeftConfig::new(method), &target, &tc, None).map_err(|e| e.to_string())?;
            let prepared = test.iter().map(|c| out.model.prepare(c)).collect::<gemlab::Result<Vec<_>>>().map_err(|e| e.to_string())?;
            scores.push(evaluate(&out.model, &out.store, &prepared).map_err(|e| e.to_string())?.metrics().miou);
        }
        med.push((method, median(scores)));
    }
    let [(_, linear), (_, sa), (_, ca), (_, gem)] = med[..] else { unreachable!() };
    let table = med.iter().map(|(m, v)| format!("{m}={v:.4}")).collect::<Vec<_>>().join(" ");
    ensure(gem >= sa && gem >= ca, || format!("gem below an ablation: {table}"))?;
    ensure(sa >= linear && ca >= linear, || format!("an ablation below linear: {table}"))?;
    ensure(gem - linear >= 0.05, || format!("gem - linear = {:.4} < 0.05: {table}", gem - linear))?;
    Ok(format!("median target test mIoU {table}, gem - linear {:.4}", gem - linear))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let code = gemlab_cli::run(std::iter::once("gemlab").chain(args.iter().copied()));
    ensure(code == 0, || format!("`gemlab {}` exited with {code}", args.join(" ")))
}

fn c9_ablation_grid() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let p = |name: &str| root.join(name).display().to_string();
    std::fs::write(root.join("src.toml"), SceneSpec::source([24; 3], 1).to_toml()).map_err(|e| e.to_string())?;
    std::fs::write(root.join("tgt.toml"), SceneSpec::target([18; 4], 2).to_toml()).map_err(|e| e.to_string())?;
    cli(&["gen-data", "--spec", &p("src.toml"), "--out", &p("source"), "--count", "6", "--seed", "1"])?;
    cli(&["gen-data", "--spec", &p("tgt.toml"), "--out", &p("target"), "--count", "4", "--seed", "2"])?;
    cli(&[
        "pretrain", "--data", &p("source"), "--out", &p("pre.ckpt"), "--d", "16", "--blocks", "4", "--stages", "2",
        "--patch-size", "8", "--heads", "2", "--ffn-mult", "2", "--epochs", "3", "--seed", "0",
    ])?;
    let sweep = r#"
backbone = "pre.ckpt"
data = "target"
seeds = [0]

[train]
epochs = 2
learning_rate = 3e-3
batch_size = 2

[[grid]]
methods = ["gem"]
ranks = [4]
tokens = [1, 4, 8]
sharing = ["global"]

[[grid]]
methods = ["gem"]
ranks = [4]
tokens = [4]
sharing = ["per_block", "per_stage", "global"]
"#;
    std::fs::write(root.join("sweep.toml"), sweep).map_err(|e| e.to_string())?;
    cli(&["sweep", "--config", &p("sweep.toml"), "--out", &p("grid.csv"), "--checkpoints", &p("cells")])?;

    let csv = std::fs::read_to_string(root.join("grid.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect();
    ensure(csv.lines().any(|l| l == gemlab_cli::SWEEP_HEADER), || "missing header".into())?;
    let tokens: BTreeSet<&str> = rows.iter().filter(|r| r[3] == "global").map(|r| r[2]).collect();
    let sharing: BTreeSet<&str> = rows.iter().filter(|r| r[2] == "4").map(|r| r[3]).collect();
    ensure(tokens == BTreeSet::from(["1", "4", "8"]), || format!("m axis {tokens:?}"))?;
    ensure(sharing == BTreeSet::from(["global", "per_block", "per_stage"]), || format!("sharing axis {sharing:?}"))?;
    ensure(rows.len() == 5, || format!("{} cells", rows.len()))?;
    for r in &rows {
        ensure(r[6..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), || format!("incomplete cell {r:?}"))?;
    }
    let steps = propagation_steps(root, &p("cells/gem_r4_m4_global_s0.ckpt"))?;
    Ok(format!("{} cells complete; global latent chain L <- L + L_c verified across {steps} blocks", rows.len()))
}

/// Replays a global-sharing checkpoint and checks that each block's latent
/// input is the previous input plus its context.
fn propagation_steps(root: &Path, peft: &str) -> Result<usize, String> {
    let bb = gemlab::autograd::Checkpoint::load(root.join("pre.ckpt")).map_err(|e| e.to_string())?;
    let cfg = BackboneConfig::from_block(&bb.config).map_err(|e| e.to_string())?;
    let mut store = bb.params;
    store.freeze_all();
    let ckpt = gemlab::autograd::Checkpoint::load(peft).map_err(|e| e.to_string())?;
    let attachment = gemlab::peft::load_peft_checkpoint(&ckpt, &cfg, &mut store).map_err(|e| e.to_string())?;
    let model = Model::with_peft(cfg, attachment);
    let cloud = gemlab_cli::load_dir(&root.join("target")).map_err(|e| e.to_string())?.remove(0);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &model.prepare(&cloud).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let steps = out.latent.ok_or("no latent state")?.steps;
    ensure(steps.len() == 4, || format!("{} latent steps", steps.len()))?;
    ensure(steps[0].input.bitwise_eq(store.value("peft.ca.latent").unwrap()), || "first input is not L0".into())?;
    for w in steps.windows(2) {
        let sum: Vec<f64> = w[0].input.data().iter().zip(w[0].context.data()).map(|(a, b)| a + b).collect();
        ensure(w[1].input.data() == &sum[..], || format!("block {} input is not L + L_c", w[1].block))?;
        ensure(w[1].input.max_abs_diff(&w[0].input) > 0.0, || format!("block {} context is zero", w[0].block))?;
    }
    Ok(steps.len())
}

fn c10_metrics() -> Outcome {
    let cfg = small(8, 1, 4);
    let mut store = init_backbone(&cfg, 0).unwrap();
    store.value_mut("head.weight").unwrap().data_mut().fill(0.0);
    store.value_mut("head.bias").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0]);
    let cloud = PointCloud::new(
        vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]],
        vec![0.0; 24],
        6,
        Some(vec![0, 0, 1, 1]),
        3,
    )
    .unwrap();
    let model = Model::new(cfg);
    let cm = evaluate(&model, &store, &[model.prepare(&cloud).map_err(|e| e.to_string())?]).map_err(|e| e.to_string())?;
    ensure((cm.get(0, 0), cm.get(1, 0), cm.total()) == (2, 2, 4), || format!("confusion {cm:?}"))?;
    let m = cm.metrics();
    ensure((m.allacc, m.macc, m.miou) == (0.5, 0.5, 0.25), || format!("{m:?}"))?;
    Ok(format!("all-class-0 fixture: allAcc={} mAcc={} mIoU={}", m.allacc, m.macc, m.miou))
}

fn c11_budget() -> Outcome {
    let cfg = BackboneConfig { d: 512, ..Default::default() };
    let base = count(&cfg.param_specs());
    let head = cfg.d * cfg.classes + cfg.classes;
    let enumerated = |pc: &PeftConfig| {
        let peft = count(&peft_param_specs(pc, &cfg));
        (head + peft) as f64 / (base + peft) as f64
    };
    let mut fits = Vec::new();
    for fraction in [0.001, 0.01] {
        for method in Method::ALL.into_iter().filter(|m| m.uses_rank()) {
            let fit = budget_fit(method, Budget::Fraction(fraction), &cfg).map_err(|e| format!("{method} at {fraction}: {e}"))?;
            let got = enumerated(&fit.config);
            ensure(got <= fraction, || format!("{method} at {fraction}: {got}"))?;
            let next = enumerated(&fit.config.clone().with_rank(fit.config.rank + 1));
            ensure(next > fraction, || format!("{method} at {fraction}: r+1 still fits ({next})"))?;
            fits.push(format!("{method}@{fraction}:r={}", fit.config.rank));
        }
    }
    Ok(fits.join(" "))
}

fn c12_attention_dump() -> Outcome {
    let cfg = BackboneConfig { d: 16, heads: 2, blocks: 2, stages: vec![0, 1], ..Default::default() };
    let (model, mut store) = attached(&cfg, &PeftConfig::new(Method::Gem).with_rank(4).with_tokens(3), 0);
    perturb_peft(&mut store, 0.3, 4);
    let (a, b) = (random_cloud(40, 6, 3, 5), random_cloud(40, 6, 3, 6));
    let dump = |c: &PointCloud| {
        dump_attention(&model, &store, &model.prepare(c).unwrap(), DumpStage::Gather).map_err(|e| e.to_string())
    };
    let (da, db) = (dump(&a)?, dump(&b)?);
    let (mut worst_sum, mut min_js) = (0.0f64, f64::INFINITY);
    for (ba, bb) in da.blocks.iter().zip(&db.blocks) {
        for t in 0..3 {
            let (pa, pb) = (ba.token_weights(t, 40), bb.token_weights(t, 40));
            for p in [&pa, &pb] {
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            }
            min_js = min_js.min(js_divergence(&pa, &pb));
        }
    }
    ensure(worst_sum < 1e-9, || format!("row sum off by {worst_sum:e}"))?;
    ensure(min_js > 0.0, || "identical latent attention on distinct clouds".into())?;

    let (prompt, pstore) = attached(&cfg, &PeftConfig::new(Method::Prompt).with_tokens(3), 0);
    let prompt_values = |c: &PointCloud| -> Vec<Tensor> {
        let mut g = Graph::new();
        prompt.forward(&mut g, &pstore, &prompt.prepare(c).unwrap()).unwrap();
        let mut bound: Vec<(String, Tensor)> = g
            .bound_params()
            .filter(|(n, _)| n.contains(".prompt."))
            .map(|(n, v)| (n.to_string(), g.value(v).clone()))
            .collect();
        bound.sort_by(|x, y| x.0.cmp(&y.0));
        bound.into_iter().map(|(_, t)| t).collect()
    };
    let (pa, pb) = (prompt_values(&a), prompt_values(&b));
    ensure(!pa.is_empty() && pa.len() == pb.len() && pa.iter().zip(&pb).all(|(x, y)| x.bitwise_eq(y)), || {
        "prompt parameters vary with the cloud".into()
    })?;
    Ok(format!("row sums within {worst_sum:e}, min JS {min_js:.3e}, {} prompt tensors cloud-invariant", pa.len()))
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "spatial adapter parameter count", limit: secs(1), run: c1_parameter_count },
        Criterion { id: 2, name: "zero-init identity", limit: secs(10), run: c2_zero_init_identity },
        Criterion { id: 3, name: "gradient fidelity", limit: secs(120), run: c3_gradient_fidelity },
        Criterion { id: 4, name: "local attention oracle", limit: secs(5), run: c4_local_attention_oracle },
        Criterion { id: 5, name: "freeze discipline", limit: secs(120), run: c5_freeze_discipline },
        Criterion { id: 6, name: "complexity instrumentation", limit: secs(30), run: c6_complexity },
        Criterion { id: 7, name: "globality contrast", limit: secs(30), run: c7_globality },
        Criterion { id: 8, name: "desk-scale transfer benefit", limit: secs(20 * 60), run: c8_transfer },
        Criterion { id: 9, name: "ablation grid", limit: secs(30 * 60), run: c9_ablation_grid },
        Criterion { id: 10, name: "metrics correctness", limit: secs(1), run: c10_metrics },
        Criterion { id: 11, name: "budget feasibility", limit: secs(5), run: c11_budget },
        Criterion { id: 12, name: "attention dump contract", limit: secs(10), run: c12_attention_dump },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; exceeded the {:?} limit", c.limit)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("{tag} #{:<2} {} ({:.2}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
