//! Grid sweeps over PEFT configurations, driven by a TOML file:
//!
//! ```toml
//! backbone = "pre.ckpt"      # paths relative to the TOML file
//! data = "target_train"
//! eval_data = "target_test"  # optional; training split otherwise
//! seeds = [0, 1, 2]
//!
//! [train]                    # optional overrides of the fine-tune defaults
//! epochs = 40
//! learning_rate = 2e-3
//!
//! [[grid]]
//! methods = ["gem", "lora"]
//! ranks = [4, 8]
//! tokens = [1, 4]
//! sharing = ["global"]
//! # budget = 0.01           # fit rank/tokens to this fraction instead
//! ```
//!
//! Cells run one after another. A failing cell is recorded with `nan`
//! metrics and the sweep moves on.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gemlab::autograd::Checkpoint;
use gemlab::backbone::BackboneConfig;
use gemlab::config_text::digest;
use gemlab::geometry::PointCloud;
use gemlab::peft::{budget_fit, Budget, Method, PeftConfig, Sharing};
use gemlab::training::{evaluate, finetune, Metrics, TrainConfig};
use gemlab::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SWEEP_HEADER: &str = "method,rank,tokens,sharing,seed,params_pct,miou,macc,allacc";

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub schedule: Option<String>,
    pub momentum: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub methods: Vec<String>,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub tokens: Vec<usize>,
    #[serde(default)]
    pub sharing: Vec<String>,
    /// Trainable fraction; rank and tokens are then fitted per method.
    pub budget: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub backbone: PathBuf,
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    /// Limited-data fraction of the training scenes.
    pub subset: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainOverrides,
    pub grid: Vec<GridEntry>,
}

impl SweepConfig {
    /// Parses the TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Config(format!("sweep file: {e}")))?;
        for p in [&mut cfg.backbone, &mut cfg.data].into_iter().chain(cfg.eval_data.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.seeds.is_empty() || cfg.grid.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed and one grid entry".into()));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        digest(&toml::to_string(self).expect("sweep config serializes"))
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = &self.train;
        let c = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seed,
            optimizer: t.optimizer.as_deref().map_or(Ok(d.optimizer), str::parse)?,
            schedule: t.schedule.as_deref().map_or(Ok(d.schedule), str::parse)?,
            momentum: t.momentum.unwrap_or(d.momentum),
        };
        c.validate()?;
        Ok(c)
    }

    /// Distinct PEFT configurations of the grid, in file order. Fields a
    /// method ignores do not multiply its cells.
    pub fn cells(&self, backbone: &BackboneConfig) -> Result<Vec<PeftConfig>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for entry in &self.grid {
            let sharing: Vec<Sharing> = if entry.sharing.is_empty() {
                vec![Sharing::Global]
            } else {
                entry.sharing.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            for name in &entry.methods {
                let method: Method = name.parse()?;
                let mut base = Vec::new();
                if let Some(f) = entry.budget {
                    base.push(budget_fit(method, Budget::Fraction(f), backbone)?.config);
                } else {
                    let ranks = if entry.ranks.is_empty() { vec![PeftConfig::new(method).rank] } else { entry.ranks.clone() };
                    let tokens = if entry.tokens.is_empty() { vec![PeftConfig::new(method).tokens] } else { entry.tokens.clone() };
                    for &r in &ranks {
                        for &m in &tokens {
                            base.push(PeftConfig::new(method).with_rank(r).with_tokens(m));
                        }
                    }
                }
                for cfg in base {
                    for &s in &sharing {
                        let c = cfg.clone().with_sharing(s);
                        if seen.insert(c.to_block().to_text()) {
                            out.push(c);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub config_hash: String,
    /// Header plus one row per (cell, seed).
    pub csv: String,
    /// `(cell label, error)` of every failed cell.
    pub failures: Vec<(String, Error)>,
}

fn cell_label(c: &PeftConfig, seed: u64) -> String {
    format!("{}_r{}_m{}_{}_s{seed}", c.method, c.rank, c.tokens, c.sharing)
}

fn row(c: &PeftConfig, seed: u64, pct: f64, m: Option<Metrics>) -> String {
    let used = |on: bool, v: String| if on { v } else { String::new() };
    let (miou, macc, allacc) = m.map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.miou, m.macc, m.allacc));
    format!(
        "{},{},{},{},{seed},{pct},{miou},{macc},{allacc}",
        c.method,
        used(c.method.uses_rank(), c.rank.to_string()),
        used(c.method.uses_tokens(), c.tokens.to_string()),
        used(c.method.has_context(), c.sharing.to_string()),
    )
}

fn run_cell(
    bb: &Checkpoint,
    pc: &PeftConfig,
    train: &[PointCloud],
    eval: Option<&[PointCloud]>,
    tc: &TrainConfig,
    subset: Option<f64>,
) -> Result<(Checkpoint, f64, Metrics)> {
    let out = finetune(bb, pc, train, tc, subset)?;
    let pct = 100.0 * out.record.trainable_fraction();
    let metrics = match eval {
        Some(clouds) => {
            let prepared = clouds.iter().map(|c| out.model.prepare(c)).collect::<Result<Vec<_>>>()?;
            evaluate(&out.model, &out.store, &prepared)?.metrics()
        }
        None => out.record.eval.expect("finetune evaluates"),
    };
    Ok((out.checkpoint, pct, metrics))
}

/// Runs every (cell, seed) pair. `on_row` sees each CSV row as it lands.
pub fn run_sweep(
    cfg: &SweepConfig,
    checkpoints: Option<&Path>,
    command: &str,
    on_row: &mut dyn FnMut(&str),
) -> Result<SweepOutcome> {
    let bb = Checkpoint::load(&cfg.backbone)?;
    let backbone = BackboneConfig::from_block(&bb.config)?;
    let train = crate::data::load_dir(&cfg.data)?;
    let eval = cfg.eval_data.as_deref().map(crate::data::load_any).transpose()?;
    let cells = cfg.cells(&backbone)?;
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir)?;
    }
    let config_hash = cfg.hash();
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut failures = Vec::new();
    for pc in &cells {
        for &seed in &cfg.seeds {
            let label = cell_label(pc, seed);
            let result = cfg
                .train_config(seed)
                .and_then(|tc| run_cell(&bb, pc, &train, eval.as_deref(), &tc, cfg.subset));
            let line = match result {
                Ok((mut ckpt, pct, m)) => {
                    if let Some(dir) = checkpoints {
                        ckpt.config.set("run.command", command);
                        ckpt.config.set("run.sweep_hash", &config_hash);
                        ckpt.save(dir.join(format!("{label}.ckpt")))?;
                    }
                    row(pc, seed, pct, Some(m))
                }
                Err(e) => {
                    failures.push((label, e));
                    row(pc, seed, f64::NAN, None)
                }
            };
            on_row(&line);
            let _ = writeln!(csv, "{line}");
        }
    }
    Ok(SweepOutcome { config_hash, csv, failures })
}
