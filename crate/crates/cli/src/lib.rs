//! `gemlab` command-line pipelines: data generation, pre-training, PEFT
//! fine-tuning, evaluation, budget fitting, instrumentation and sweeps.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 contract or freeze
//! violation, 3 numeric failure.

mod data;
mod sweep;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gemlab::autograd::Checkpoint;
use gemlab::backbone::{even_stages, BackboneConfig, Model};
use gemlab::config_text::ConfigBlock;
use gemlab::geometry::SceneSpec;
use gemlab::instrumentation::{count_pass, dump_attention, DumpStage};
use gemlab::peft::{budget_fit, load_peft_checkpoint, Budget, Method, PeftConfig, Sharing};
use gemlab::training::{evaluate, finetune, pretrain, OptimizerKind, Schedule, TrainConfig};
use gemlab::{Error, Result};

pub use data::{generate, load_dir, MANIFEST};
pub use sweep::{run_sweep, SweepConfig, SweepOutcome, SWEEP_HEADER};

#[derive(Parser, Debug)]
#[command(name = "gemlab", version, about = "Parameter-efficient fine-tuning laboratory for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    GenData(GenDataArgs),
    /// Train a backbone and head on annotated scenes.
    Pretrain(PretrainArgs),
    /// Train a PEFT attachment on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Segmentation metrics of a backbone or PEFT checkpoints.
    Eval(EvalArgs),
    /// Largest method configuration within a parameter budget.
    Budget(BudgetArgs),
    /// Write global-token attention weights as CSV.
    DumpAttn(DumpAttnArgs),
    /// Multiply-add counts of one forward pass per site.
    CountOps(CountOpsArgs),
    /// Run a grid of fine-tuning cells from a TOML file.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Scene-spec TOML file, or the built-in `source` / `target`.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `adamw` or `sgd_momentum`.
    #[arg(long)]
    optimizer: Option<String>,
    /// `cosine` or `constant`.
    #[arg(long)]
    schedule: Option<String>,
}

impl TrainArgs {
    fn config(&self, default_epochs: usize) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed,
            optimizer: self.optimizer.as_deref().map_or(Ok(OptimizerKind::AdamW), str::parse)?,
            schedule: self.schedule.as_deref().map_or(Ok(Schedule::Cosine), str::parse)?,
            momentum: d.momentum,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 0.25)]
    voxel_size: f64,
    #[arg(long, default_value_t = 0.05)]
    grid_size: f64,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug, Clone)]
struct PeftArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    /// `per_block`, `per_stage` or `global`.
    #[arg(long)]
    sharing: Option<String>,
}

impl PeftArgs {
    fn config(&self) -> Result<PeftConfig> {
        let method: Method = self.method.parse()?;
        let mut c = PeftConfig::new(method);
        if let Some(r) = self.rank {
            c.rank = r;
        }
        if let Some(m) = self.tokens {
            c.tokens = m;
        }
        if let Some(s) = &self.sharing {
            c.sharing = s.parse::<Sharing>()?;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[command(flatten)]
    peft: PeftArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Line-delimited run record.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Train on this fraction of the scenes.
    #[arg(long)]
    subset: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// PEFT checkpoints to evaluate on the backbone; repeatable.
    #[arg(long)]
    peft: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long, conflicts_with = "rank", required_unless_present = "rank")]
    fraction: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args, Debug)]
struct DumpAttnArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    peft: PathBuf,
    /// A cloud file or dataset directory (first cloud used).
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `gather` (latents over points), `scatter` or `prompt`.
    #[arg(long)]
    stage: Option<String>,
}

#[derive(Args, Debug)]
struct CountOpsArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    peft: Option<PathBuf>,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory receiving one PEFT checkpoint per successful cell.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Freeze(_) | Error::Shape(_) | Error::Range(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command_line = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match dispatch(cli.command, &command_line) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gemlab: {e}");
            exit_code(&e)
        }
    }
}

fn print_hash(hash: &str) {
    println!("config_hash={hash}");
}

fn provenance(config: &mut ConfigBlock, command: &str) -> String {
    let hash = config.without_prefix("run.").hash();
    config.set("run.command", command.replace('\n', " "));
    config.set("run.config_hash", &hash);
    hash
}

/// CSV preceded by `#` provenance lines.
fn write_csv(path: &Path, command: &str, hash: &str, body: &str) -> Result<()> {
    std::fs::write(path, format!("# command: {command}\n# config_hash: {hash}\n{body}"))?;
    Ok(())
}

fn load_backbone(path: &Path) -> Result<(Checkpoint, BackboneConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = BackboneConfig::from_block(&ckpt.config)?;
    ckpt.validate(&gemlab::params_init::shapes(&cfg.param_specs()))?;
    Ok((ckpt, cfg))
}

/// Backbone with the PEFT checkpoint at `peft` attached, if any.
fn load_model(backbone: &Path, peft: Option<&Path>) -> Result<(Model, gemlab::autograd::ParamStore, String)> {
    let (ckpt, cfg) = load_backbone(backbone)?;
    let mut store = ckpt.params;
    store.freeze_all();
    let hash = cfg.hash();
    match peft {
        None => Ok((Model::new(cfg), store, hash)),
        Some(p) => {
            let attachment = load_peft_checkpoint(&Checkpoint::load(p)?, &cfg, &mut store)?;
            Ok((Model::with_peft(cfg, attachment), store, hash))
        }
    }
}

fn dispatch(command: Command, line: &str) -> Result<i32> {
    match command {
        Command::GenData(a) => {
            let spec = match a.spec.as_str() {
                "source" => SceneSpec::source([64; 3], a.seed),
                "target" => SceneSpec::target([48; 4], a.seed),
                path => SceneSpec::load(path)?,
            };
            let paths = generate(&spec, &a.out, a.count, a.seed, line)?;
            print_hash(&spec.hash());
            println!("wrote {} clouds to {}", paths.len(), a.out.display());
        }
        Command::Pretrain(a) => {
            let clouds = data::load_dir(&a.data)?;
            let cfg = BackboneConfig {
                in_channels: clouds[0].channels(),
                d: a.d,
                blocks: a.blocks,
                patch_size: a.patch_size,
                heads: a.heads,
                ffn_mult: a.ffn_mult,
                classes: clouds[0].classes(),
                stages: even_stages(a.blocks, a.stages),
                voxel_size: a.voxel_size,
                grid_size: a.grid_size,
            };
            cfg.validate()?;
            let tc = a.train.config(50)?;
            let (mut ckpt, record) = pretrain(&clouds, &cfg, &tc)?;
            let hash = provenance(&mut ckpt.config, line);
            print_hash(&hash);
            ckpt.save(&a.out)?;
            if let Some(m) = &a.metrics {
                write_csv(m, line, &hash, &record.metrics_csv())?;
            }
            let e = record.eval.expect("pretrain evaluates");
            println!("backbone_hash={} miou={:.4} macc={:.4} allacc={:.4}", cfg.hash(), e.miou, e.macc, e.allacc);
        }
        Command::Finetune(a) => {
            let (bb, _) = load_backbone(&a.backbone)?;
            let clouds = data::load_dir(&a.data)?;
            let pc = a.peft.config()?;
            let tc = a.train.config(40)?;
            let mut out = finetune(&bb, &pc, &clouds, &tc, a.subset)?;
            let hash = provenance(&mut out.checkpoint.config, line);
            print_hash(&hash);
            out.checkpoint.save(&a.out)?;
            if let Some(m) = &a.metrics {
                write_csv(m, line, &hash, &out.record.metrics_csv())?;
            }
            if let Some(r) = &a.record {
                std::fs::write(r, format!("command={line}\n{}", out.record.to_text()))?;
            }
            let e = out.record.eval.expect("finetune evaluates");
            println!(
                "trainable={} total={} params_pct={:.4} miou={:.4} macc={:.4} allacc={:.4} wall_secs={:.1}",
                out.record.trainable,
                out.record.total,
                100.0 * out.record.trainable_fraction(),
                e.miou,
                e.macc,
                e.allacc,
                out.record.wall_secs
            );
        }
        Command::Eval(a) => {
            let clouds = data::load_any(&a.data)?;
            let (_, cfg) = load_backbone(&a.backbone)?;
            let expected = cfg.hash();
            print_hash(&expected);
            for p in &a.peft {
                let ckpt = Checkpoint::load(p)?;
                match ckpt.config.get("backbone.hash") {
                    Some(h) if h == expected => {}
                    other => {
                        return Err(Error::Contract(format!(
                            "{} was trained on backbone {:?}, not {expected}; refusing to compare",
                            p.display(),
                            other
                        )))
                    }
                }
            }
            let mut targets: Vec<Option<&PathBuf>> = a.peft.iter().map(Some).collect();
            if targets.is_empty() {
                targets.push(None);
            }
            for t in targets {
                let (model, store, _) = load_model(&a.backbone, t.map(PathBuf::as_path))?;
                let prepared = clouds.iter().map(|c| model.prepare(c)).collect::<Result<Vec<_>>>()?;
                let m = evaluate(&model, &store, &prepared)?.metrics();
                let name = t.map_or("backbone".to_string(), |p| p.display().to_string());
                println!("{name} backbone_hash={expected} miou={:.6} macc={:.6} allacc={:.6}", m.miou, m.macc, m.allacc);
            }
        }
        Command::Budget(a) => {
            let (_, cfg) = load_backbone(&a.backbone)?;
            let method: Method = a.method.parse()?;
            let budget = match (a.fraction, a.rank) {
                (Some(f), _) => Budget::Fraction(f),
                (None, Some(r)) => Budget::Rank(r),
                (None, None) => unreachable!("clap requires one of --fraction/--rank"),
            };
            let fit = budget_fit(method, budget, &cfg)?;
            print_hash(&fit.config.to_block().hash());
            println!(
                "method={} rank={} tokens={} trainable={} total={} fraction={:.8}",
                method,
                fit.config.rank,
                fit.config.tokens,
                fit.trainable,
                fit.total,
                fit.fraction()
            );
        }
        Command::DumpAttn(a) => {
            let (model, store, hash) = load_model(&a.backbone, Some(&a.peft))?;
            let cloud = data::load_any(&a.cloud)?.remove(0);
            let stage = match a.stage.as_deref() {
                Some("gather") => DumpStage::Gather,
                Some("scatter") => DumpStage::Scatter,
                Some("prompt") => DumpStage::Prompt,
                Some(s) => return Err(Error::Argument(format!("unknown dump stage `{s}`"))),
                None if model.peft.as_ref().is_some_and(|p| p.config.method == Method::Prompt) => DumpStage::Prompt,
                None => DumpStage::Gather,
            };
            let dump = dump_attention(&model, &store, &model.prepare(&cloud)?, stage)?;
            std::fs::create_dir_all(&a.out)?;
            print_hash(&hash);
            for b in &dump.blocks {
                let path = a.out.join(format!("attn.block{}.csv", b.block));
                write_csv(&path, line, &hash, &b.to_csv())?;
                println!("{}", path.display());
            }
        }
        Command::CountOps(a) => {
            let (model, store, hash) = load_model(&a.backbone, a.peft.as_deref())?;
            let cloud = data::load_any(&a.cloud)?.remove(0);
            let counter = count_pass(&model, &store, &model.prepare(&cloud)?)?;
            print_hash(&hash);
            match &a.out {
                Some(p) => write_csv(p, line, &hash, &counter.to_csv())?,
                None => {
                    let _ = std::io::stdout().write_all(counter.to_csv().as_bytes());
                }
            }
        }
        Command::Sweep(a) => {
            let text = std::fs::read_to_string(&a.config)?;
            let cfg = SweepConfig::from_toml(&text, a.config.parent().unwrap_or(Path::new(".")))?;
            let outcome = run_sweep(&cfg, a.checkpoints.as_deref(), line, &mut |row| println!("{row}"))?;
            print_hash(&outcome.config_hash);
            write_csv(&a.out, line, &outcome.config_hash, &outcome.csv)?;
            for (cell, e) in &outcome.failures {
                eprintln!("gemlab: cell {cell} failed: {e}");
            }
            return Ok(outcome.failures.iter().map(|(_, e)| exit_code(e)).max().unwrap_or(0));
        }
    }
    Ok(0)
}
