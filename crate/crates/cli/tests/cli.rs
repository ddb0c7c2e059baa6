use std::path::Path;

use gemlab::autograd::Checkpoint;
use gemlab::geometry::SceneSpec;
use gemlab_cli::run;

fn gemlab(args: &[&str]) -> i32 {
    run(std::iter::once("gemlab").chain(args.iter().copied()))
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Tiny source/target datasets and a pretrained backbone in `dir`.
fn workspace(dir: &Path) {
    std::fs::write(dir.join("src.toml"), SceneSpec::source([10; 3], 1).to_toml()).unwrap();
    std::fs::write(dir.join("tgt.toml"), SceneSpec::target([8; 4], 2).to_toml()).unwrap();
    assert_eq!(gemlab(&["gen-data", "--spec", &path(dir, "src.toml"), "--out", &path(dir, "source"), "--count", "3"]), 0);
    assert_eq!(gemlab(&["gen-data", "--spec", &path(dir, "tgt.toml"), "--out", &path(dir, "target"), "--count", "3"]), 0);
    let code = gemlab(&[
        "pretrain", "--data", &path(dir, "source"), "--out", &path(dir, "pre.ckpt"), "--d", "8",
        "--blocks", "2", "--stages", "2", "--patch-size", "8", "--heads", "2", "--ffn-mult", "2", "--epochs", "1",
        "--metrics", &path(dir, "pre.csv"),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn help_and_version_exit_zero_and_usage_errors_exit_one() {
    assert_eq!(gemlab(&["--help"]), 0);
    assert_eq!(gemlab(&["--version"]), 0);
    assert_eq!(gemlab(&["frobnicate"]), 1);
    assert_eq!(gemlab(&["budget", "--backbone", "x.ckpt", "--method", "gem"]), 1);
}

#[test]
fn generated_data_is_reproducible_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = path(dir.path(), "tgt.toml");
    std::fs::write(&spec, SceneSpec::target([8; 4], 2).to_toml()).unwrap();
    for out in ["a", "b"] {
        assert_eq!(gemlab(&["gen-data", "--spec", &spec, "--out", &path(dir.path(), out), "--count", "2", "--seed", "9"]), 0);
    }
    let a = gemlab_cli::load_dir(&dir.path().join("a")).unwrap();
    assert_eq!(a, gemlab_cli::load_dir(&dir.path().join("b")).unwrap());
    let manifest = std::fs::read_to_string(dir.path().join("a").join(gemlab_cli::MANIFEST)).unwrap();
    assert!(manifest.contains("# command: gemlab gen-data"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("file=")).count(), 2);
}

#[test]
fn pipeline_artifacts_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    let metrics = std::fs::read_to_string(d.join("pre.csv")).unwrap();
    assert!(metrics.starts_with("# command: gemlab pretrain"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("# config_hash: "));

    let code = gemlab(&[
        "finetune", "--backbone", &path(d, "pre.ckpt"), "--method", "gem", "--rank", "2", "--tokens", "2",
        "--data", &path(d, "target"), "--out", &path(d, "gem.ckpt"), "--epochs", "1", "--subset", "0.5",
        "--record", &path(d, "gem.run"),
    ]);
    assert_eq!(code, 0);
    let ckpt = Checkpoint::load(d.join("gem.ckpt")).unwrap();
    assert!(ckpt.config.get("run.command").unwrap().contains("finetune"));
    assert!(ckpt.config.get("run.config_hash").is_some());
    assert!(std::fs::read_to_string(d.join("gem.run")).unwrap().contains("subset.fraction=0.5"));

    assert_eq!(gemlab(&["eval", "--backbone", &path(d, "pre.ckpt"), "--peft", &path(d, "gem.ckpt"), "--data", &path(d, "target")]), 0);
    assert_eq!(gemlab(&["count-ops", "--backbone", &path(d, "pre.ckpt"), "--peft", &path(d, "gem.ckpt"), "--cloud", &path(d, "target"), "--out", &path(d, "ops.csv")]), 0);
    assert!(std::fs::read_to_string(d.join("ops.csv")).unwrap().contains("block1.ca.stage1,"));
    assert_eq!(gemlab(&["dump-attn", "--backbone", &path(d, "pre.ckpt"), "--peft", &path(d, "gem.ckpt"), "--cloud", &path(d, "target"), "--out", &path(d, "dump")]), 0);
    let dump = std::fs::read_to_string(d.join("dump").join("attn.block0.csv")).unwrap();
    assert!(dump.contains("token_id,point_id,weight\n"));
}

#[test]
fn eval_refuses_a_peft_checkpoint_from_another_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    let code = gemlab(&[
        "finetune", "--backbone", &path(d, "pre.ckpt"), "--method", "linear", "--data", &path(d, "target"),
        "--out", &path(d, "lin.ckpt"), "--epochs", "1",
    ]);
    assert_eq!(code, 0);
    let mut other = Checkpoint::load(d.join("lin.ckpt")).unwrap();
    other.config.set("backbone.hash", "0000000000000000");
    other.save(d.join("other.ckpt")).unwrap();
    assert_eq!(gemlab(&["eval", "--backbone", &path(d, "pre.ckpt"), "--peft", &path(d, "other.ckpt"), "--data", &path(d, "target")]), 2);
}

#[test]
fn budget_reports_infeasible_and_unsupported_dumps_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    assert_eq!(gemlab(&["budget", "--backbone", &path(d, "pre.ckpt"), "--method", "lora", "--fraction", "0.5"]), 0);
    assert_eq!(gemlab(&["budget", "--backbone", &path(d, "pre.ckpt"), "--method", "lora", "--fraction", "1e-9"]), 1);
    let code = gemlab(&[
        "finetune", "--backbone", &path(d, "pre.ckpt"), "--method", "lora", "--rank", "1", "--data", &path(d, "target"),
        "--out", &path(d, "lora.ckpt"), "--epochs", "1",
    ]);
    assert_eq!(code, 0);
    assert_eq!(gemlab(&["dump-attn", "--backbone", &path(d, "pre.ckpt"), "--peft", &path(d, "lora.ckpt"), "--cloud", &path(d, "target"), "--out", &path(d, "dump")]), 1);
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    // A budget below the head-only floor cannot be fitted, so the whole
    // sweep file is rejected before any cell runs.
    let infeasible = "backbone = \"pre.ckpt\"\ndata = \"target\"\nseeds = [0]\n[[grid]]\nmethods = [\"lora\"]\nbudget = 1e-9\n";
    std::fs::write(d.join("bad.toml"), infeasible).unwrap();
    assert_eq!(gemlab(&["sweep", "--config", &path(d, "bad.toml"), "--out", &path(d, "bad.csv")]), 1);

    // Batch size 0 fails validation inside every cell.
    let failing = "backbone = \"pre.ckpt\"\ndata = \"target\"\nseeds = [0, 1]\n[train]\nbatch_size = 0\n[[grid]]\nmethods = [\"linear\", \"adapter\"]\nranks = [1, 2]\n";
    std::fs::write(d.join("sweep.toml"), failing).unwrap();
    assert_eq!(gemlab(&["sweep", "--config", &path(d, "sweep.toml"), "--out", &path(d, "grid.csv")]), 1);
    let csv = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    // linear ignores the rank axis: 1 + 2 cells, 2 seeds each.
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.ends_with("NaN,NaN,NaN")));
}

#[test]
fn identical_commands_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    for run in ["a", "b"] {
        let code = gemlab(&[
            "finetune", "--backbone", &path(d, "pre.ckpt"), "--method", "gem", "--rank", "2", "--tokens", "2",
            "--data", &path(d, "target"), "--out", &path(d, "gem.ckpt"), "--epochs", "2", "--seed", "3",
            "--metrics", &path(d, "gem.csv"), "--record", &path(d, "gem.run"),
        ]);
        assert_eq!(code, 0);
        for f in ["gem.ckpt", "gem.csv", "gem.run"] {
            std::fs::copy(d.join(f), d.join(format!("{run}.{f}"))).unwrap();
        }
    }
    for f in ["gem.ckpt", "gem.csv", "gem.run"] {
        let a = std::fs::read(d.join(format!("a.{f}"))).unwrap();
        assert_eq!(a, std::fs::read(d.join(format!("b.{f}"))).unwrap(), "{f}");
    }
}
