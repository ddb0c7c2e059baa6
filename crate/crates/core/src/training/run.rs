use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autograd::{Checkpoint, Graph, ParamStore};
use crate::backbone::{BackboneConfig, Model, PreparedCloud};
use crate::config_text::ConfigBlock;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::params_init::init_into;
use crate::peft::{attach, is_bias_like, peft_checkpoint, Method, PeftConfig};
use crate::rng;
use crate::training::{ConfusionMatrix, Metrics, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Metrics of the training forward passes of this epoch.
    pub metrics: Metrics,
}

/// Scenes kept in limited-data mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub fraction: f64,
    pub seed: u64,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub phase: &'static str,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Metrics of the final parameters over the whole training split.
    pub eval: Option<Metrics>,
    pub trainable: usize,
    pub total: usize,
    pub wall_secs: f64,
    pub subset: Option<Subset>,
}

impl RunRecord {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    /// `epoch,loss,miou,macc,allacc`, one row per epoch.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,miou,macc,allacc\n");
        for e in &self.epochs {
            let m = e.metrics;
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.loss, m.miou, m.macc, m.allacc);
        }
        out
    }

    /// Line-delimited `key=value` text. Wall time is left out so that
    /// identical runs produce identical records.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "phase={}", self.phase);
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        let _ = writeln!(out, "trainable={}", self.trainable);
        let _ = writeln!(out, "total={}", self.total);
        if let Some(s) = &self.subset {
            let idx: Vec<String> = s.indices.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "subset.fraction={}", s.fraction);
            let _ = writeln!(out, "subset.seed={}", s.seed);
            let _ = writeln!(out, "subset.indices={}", idx.join(","));
        }
        for e in &self.epochs {
            let m = e.metrics;
            let _ = writeln!(
                out,
                "epoch={} loss={} miou={} macc={} allacc={}",
                e.epoch, e.loss, m.miou, m.macc, m.allacc
            );
        }
        if let Some(m) = self.eval {
            let _ = writeln!(out, "eval miou={} macc={} allacc={}", m.miou, m.macc, m.allacc);
        }
        out
    }
}

/// Fresh backbone and head parameters from the `init` stream of `seed`.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_into(&mut store, &cfg.param_specs(), &mut rng::stream(seed, "init"), false)?;
    Ok(store)
}

fn argmax_rows(logits: &crate::autograd::Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

fn labels_of(cloud: &PreparedCloud) -> Result<std::rc::Rc<Vec<usize>>> {
    cloud.labels.clone().ok_or_else(|| Error::Data("training requires annotated clouds".into()))
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch training. Gradients of a
/// batch are accumulated cloud by cloud and averaged before each step.
pub fn train_epochs(
    model: &Model,
    store: &mut ParamStore,
    data: &[PreparedCloud],
    cfg: &TrainConfig,
    strict: bool,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut opt = Optimizer::new(cfg);
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    store.zero_grad();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let lr = cfg.lr_at(epoch);
        let mut cm = ConfusionMatrix::new(model.config.classes);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let cloud = &data[i];
                let labels = labels_of(cloud)?;
                let mut g = Graph::new();
                let out = model.forward(&mut g, store, cloud)?;
                let loss = g.cross_entropy(out.logits, labels.clone())?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
                }
                loss_sum += value;
                cm.add(&labels, &argmax_rows(g.value(out.logits)));
                g.backward_into(loss, store)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, p) in store.iter_mut() {
                if let Some(gr) = p.grad.as_mut() {
                    gr.data_mut().iter_mut().for_each(|x| *x *= inv);
                }
            }
            opt.step(store, lr, strict)?;
        }
        records.push(EpochRecord { epoch, loss: loss_sum / data.len() as f64, metrics: cm.metrics() });
    }
    Ok(records)
}

/// Confusion matrix of `model` over annotated clouds.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[PreparedCloud]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for cloud in data {
        let labels = labels_of(cloud)?;
        cm.add(&labels, &model.predict(store, cloud)?);
    }
    Ok(cm)
}

fn prepare_all(model: &Model, clouds: &[PointCloud]) -> Result<Vec<PreparedCloud>> {
    clouds.iter().map(|c| model.prepare(c)).collect()
}

/// Supervised training of every backbone and head parameter.
pub fn pretrain(clouds: &[PointCloud], backbone: &BackboneConfig, cfg: &TrainConfig) -> Result<(Checkpoint, RunRecord)> {
    let start = Instant::now();
    let model = Model::new(backbone.clone());
    let mut store = init_backbone(backbone, cfg.seed)?;
    let data = prepare_all(&model, clouds)?;
    let epochs = train_epochs(&model, &mut store, &data, cfg, true)?;
    let eval = evaluate(&model, &store, &data)?.metrics();
    let config = merged(&[backbone.to_block(), cfg.to_block()]);
    let record = RunRecord {
        phase: "pretrain",
        config_hash: config.hash(),
        epochs,
        eval: Some(eval),
        trainable: store.trainable_count(),
        total: store.total_count(),
        wall_secs: start.elapsed().as_secs_f64(),
        subset: None,
    };
    Ok((Checkpoint::new(config, store), record))
}

fn merged(blocks: &[ConfigBlock]) -> ConfigBlock {
    let mut out = ConfigBlock::new();
    for b in blocks {
        for (k, v) in b.iter() {
            out.set(k, v);
        }
    }
    out
}

/// Checks that every parameter whose bytes differ between `before` and
/// `after` is declared trainable in `after`, and that no `backbone.`
/// parameter changed unless the method is BitFit (bias/shift only).
pub fn verify_freeze(before: &ParamStore, after: &ParamStore, method: Method) -> Result<()> {
    let declared: BTreeSet<String> = after.trainable_names().into_iter().collect();
    let changed = before.changed_names(after);
    let bad: Vec<&String> = changed
        .iter()
        .filter(|n| {
            !declared.contains(*n)
                || (n.starts_with("backbone.") && !(method == Method::BitFit && is_bias_like(n)))
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Freeze(format!("parameters changed outside the trainable set: {bad:?}")))
    }
}

pub struct FinetuneOutput {
    /// `peft.` and `head.` entries with the PEFT config.
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    /// Backbone plus attachment after training.
    pub store: ParamStore,
    pub model: Model,
}

/// Attaches `peft` to the frozen backbone of `backbone_ckpt` and trains
/// only the attachment. With `subset`, trains on that fraction of the
/// clouds, drawn from the `subset` stream of the training seed.
pub fn finetune(
    backbone_ckpt: &Checkpoint,
    peft: &PeftConfig,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    subset: Option<f64>,
) -> Result<FinetuneOutput> {
    let start = Instant::now();
    let backbone = BackboneConfig::from_block(&backbone_ckpt.config)?;
    backbone_ckpt.validate(&crate::params_init::shapes(&backbone.param_specs()))?;
    let mut store = backbone_ckpt.params.clone();
    let attachment = attach(peft, &backbone, &mut store, cfg.seed)?;
    let model = Model::with_peft(backbone.clone(), attachment);

    let subset = match subset {
        None => None,
        Some(f) if f > 0.0 && f <= 1.0 => {
            let mut idx: Vec<usize> = (0..clouds.len()).collect();
            idx.shuffle(&mut rng::stream(cfg.seed, "subset"));
            idx.truncate(((f * clouds.len() as f64).round() as usize).max(1));
            idx.sort_unstable();
            Some(Subset { fraction: f, seed: cfg.seed, indices: idx })
        }
        Some(f) => return Err(Error::Argument(format!("subset fraction {f} outside (0, 1]"))),
    };
    let selected: Vec<PointCloud> = match &subset {
        Some(s) => s.indices.iter().map(|&i| clouds[i].clone()).collect(),
        None => clouds.to_vec(),
    };
    let data = prepare_all(&model, &selected)?;
    let before = store.clone();
    let epochs = train_epochs(&model, &mut store, &data, cfg, true)?;
    verify_freeze(&before, &store, peft.method)?;
    let eval = evaluate(&model, &store, &data)?.metrics();

    let checkpoint = peft_checkpoint(&store, peft, &backbone)?;
    let mut config = merged(&[checkpoint.config.clone(), cfg.to_block()]);
    if let Some(s) = &subset {
        config.set("subset.fraction", s.fraction);
        config.set("subset.seed", s.seed);
    }
    let record = RunRecord {
        phase: "finetune",
        config_hash: config.hash(),
        epochs,
        eval: Some(eval),
        trainable: store.trainable_count(),
        total: store.total_count(),
        wall_secs: start.elapsed().as_secs_f64(),
        subset,
    };
    let checkpoint = Checkpoint::new(config, checkpoint.params);
    Ok(FinetuneOutput { checkpoint, record, store, model })
}
