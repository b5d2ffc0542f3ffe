//! `drcsd`: prepare splits, train, evaluate, sweep and ablate.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use drcsd::data::{inject_noise, load_interactions_with, read_split, split, write_split, LoadOptions, SplitDataset};
use drcsd::decouple::DecoupleCache;
use drcsd::eval::{evaluate, EvalReport, Phase};
use drcsd::model::{Checkpoint, Mode};
use drcsd::rng::derive_seed;
use drcsd::train::{fit_with_stack, prepare_stack, write_log, TrainConfig};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "drcsd", version, about = "Decoupled, denoised graph collaborative filtering")]
struct Cli {
    /// Seed for splitting, initialization, sampling and masks.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory that receives this command's outputs.
    #[arg(long, global = true, default_value = "runs")]
    outdir: PathBuf,
    /// Flat `key = value` file; command-line settings win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split raw interactions into train/validation/test, optionally with noise.
    Prepare(Settings),
    /// Train on a prepared split.
    Train(Settings),
    /// Evaluate a checkpoint against a prepared split.
    Evaluate(Settings),
    /// Run prepare, train and evaluate over one axis (noise, beta or layers).
    Sweep(Settings),
    /// Train and evaluate full, no_denoise and no_decouple on one split.
    Ablate(Settings),
}

#[derive(clap::Args, Debug)]
struct Settings {
    /// Any config key as `--key value`, e.g. `--input data.tsv --layers 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    overrides: Vec<String>,
}

struct Run {
    seed: u64,
    outdir: PathBuf,
    force: bool,
    cfg: RunConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    let settings = match &cli.command {
        Command::Prepare(s) | Command::Train(s) | Command::Evaluate(s) | Command::Sweep(s) | Command::Ablate(s) => s,
    };
    cfg.apply_overrides(&settings.overrides)?;
    let ctx = Run {
        seed: cli.seed,
        outdir: cli.outdir,
        force: cli.force,
        cfg,
    };
    match cli.command {
        Command::Prepare(_) => cmd_prepare(&ctx),
        Command::Train(_) => cmd_train(&ctx),
        Command::Evaluate(_) => cmd_evaluate(&ctx),
        Command::Sweep(_) => cmd_sweep(&ctx),
        Command::Ablate(_) => cmd_ablate(&ctx),
    }
}

fn claim_outdir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn with_resolved(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.set("seeds", &seed.to_string()).expect("known key");
    c
}

fn build_split(cfg: &RunConfig, seed: u64) -> Result<SplitDataset> {
    let input = cfg.path("input")?;
    let opts = LoadOptions {
        format: cfg.parse("format")?,
        skip_header: cfg.parse("skip_header")?,
    };
    let data = load_interactions_with(&input, opts)?;
    let s = split(&data, cfg.ratios()?, seed)?;
    let noise: f64 = cfg.parse("noise_ratio")?;
    Ok(inject_noise(&s, noise, derive_seed(seed, "noise", &[]))?)
}

fn cmd_prepare(ctx: &Run) -> Result<()> {
    let s = build_split(&ctx.cfg, ctx.seed)?;
    claim_outdir(&ctx.outdir, ctx.force)?;
    write_split(&ctx.outdir, &s)?;
    with_resolved(&ctx.cfg, ctx.seed).write(&ctx.outdir)?;
    println!(
        "train {} validation {} test {} (noise pairs {})",
        s.train.len(),
        s.validation.len(),
        s.test.len(),
        s.noise_pairs.len()
    );
    Ok(())
}

fn dataset_name(cfg: &RunConfig) -> String {
    if let Some(name) = cfg.opt("dataset") {
        return name.to_owned();
    }
    cfg.opt("input")
        .or_else(|| cfg.opt("split"))
        .and_then(|p| Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default()
}

/// Trains, writes checkpoint/log/config into `dir` and returns the test report.
fn train_and_evaluate(cfg: &RunConfig, s: &SplitDataset, tc: &TrainConfig, dir: &Path) -> Result<EvalReport> {
    let cache = DecoupleCache::from_env();
    let prepared = prepare_stack(&s.train, tc, cache.as_ref())?;
    let outcome = fit_with_stack(s, &prepared, tc)?;
    let ckpt = outcome.checkpoint(s, tc, &cfg.hash());
    ckpt.save(&dir.join("checkpoint.json"))?;
    write_log(&dir.join("train_log.csv"), &outcome.log)?;
    cfg.write(dir)?;
    let k = cfg.parse("k")?;
    let mut report = evaluate(&ckpt, &prepared, s, k, Phase::Test)?;
    report.dataset = dataset_name(cfg);
    report.seed = tc.seed;
    Ok(report)
}

fn cmd_train(ctx: &Run) -> Result<()> {
    let split_dir = ctx.cfg.path("split")?;
    let s = read_split(&split_dir).with_context(|| format!("loading split {}", split_dir.display()))?;
    let tc = ctx.cfg.train_config(ctx.seed)?;
    claim_outdir(&ctx.outdir, ctx.force)?;
    let cfg = with_resolved(&ctx.cfg, ctx.seed);
    let cache = DecoupleCache::from_env();
    let prepared = prepare_stack(&s.train, &tc, cache.as_ref())?;
    let outcome = fit_with_stack(&s, &prepared, &tc)?;
    outcome
        .checkpoint(&s, &tc, &cfg.hash())
        .save(&ctx.outdir.join("checkpoint.json"))?;
    write_log(&ctx.outdir.join("train_log.csv"), &outcome.log)?;
    cfg.write(&ctx.outdir)?;
    println!(
        "best validation recall@{} {:.6} at epoch {} ({} epochs run)",
        tc.eval_k, outcome.best_recall, outcome.best_epoch, outcome.epochs_run
    );
    Ok(())
}

fn cmd_evaluate(ctx: &Run) -> Result<()> {
    let ckpt_path = ctx.cfg.path("checkpoint")?;
    if !ckpt_path.is_file() {
        bail!("checkpoint {} does not exist", ckpt_path.display());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let split_dir = ctx.cfg.path("split")?;
    let s = read_split(&split_dir).with_context(|| format!("loading split {}", split_dir.display()))?;
    let h = &ckpt.header;
    if (h.n_users, h.n_items) != (s.train.n_users, s.train.n_items) {
        bail!(
            "checkpoint has {} users x {} items but the split has {} users x {} items",
            h.n_users,
            h.n_items,
            s.train.n_users,
            s.train.n_items
        );
    }
    let tc = TrainConfig {
        mode: h.mode,
        layers: h.layers.max(1),
        tau: h.tau,
        hidden: h.hidden,
        cap: h.cap,
        values: h.values,
        ..TrainConfig::default()
    };
    let prepared = prepare_stack(&s.train, &tc, DecoupleCache::from_env().as_ref())?;
    let k = ctx.cfg.parse("k")?;
    let phase: Phase = ctx.cfg.parse("phase")?;
    let mut report = evaluate(&ckpt, &prepared, &s, k, phase)?;
    report.dataset = dataset_name(&ctx.cfg);
    report.seed = ctx.seed;
    claim_outdir(&ctx.outdir, ctx.force)?;
    report.write(&ctx.outdir.join("report.json"), &ctx.outdir.join("report.csv"))?;
    with_resolved(&ctx.cfg, ctx.seed).write(&ctx.outdir)?;
    println!(
        "{phase} recall@{k} {:.6} ndcg@{k} {:.6} precision@{k} {:.6} over {} users",
        report.recall, report.ndcg, report.precision, report.n_users_evaluated
    );
    Ok(())
}

fn seeds(cfg: &RunConfig, fallback: u64) -> Result<Vec<u64>> {
    let s: Vec<u64> = cfg.list("seeds")?;
    Ok(if s.is_empty() { vec![fallback] } else { s })
}

fn default_axis_values(axis: &str) -> Result<&'static str> {
    Ok(match axis {
        "noise" => "0,0.05,0.1,0.15,0.2",
        "beta" => "0.3,0.4,0.5",
        "layers" => "2,3",
        other => bail!("unknown sweep axis {other:?} (expected noise, beta or layers)"),
    })
}

fn status_cell(e: &anyhow::Error) -> String {
    format!("error: {e:#}").replace([',', '\n'], ";")
}

fn cmd_sweep(ctx: &Run) -> Result<()> {
    let axis = ctx.cfg.require("axis")?.to_owned();
    let defaults = default_axis_values(&axis)?;
    let raw = ctx.cfg.opt("values").unwrap_or(defaults);
    let values: Vec<String> = raw.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
    let seeds = seeds(&ctx.cfg, ctx.seed)?;
    claim_outdir(&ctx.outdir, ctx.force)?;
    ctx.cfg.write(&ctx.outdir)?;

    let mut csv = String::from("axis_value,seed,recall,ndcg,precision,status\n");
    let mut failures = 0;
    for value in &values {
        for &seed in &seeds {
            let dir = ctx.outdir.join(format!("{axis}={value}")).join(format!("seed={seed}"));
            let result = (|| -> Result<EvalReport> {
                let mut cfg = with_resolved(&ctx.cfg, seed);
                let key = match axis.as_str() {
                    "noise" => "noise_ratio",
                    other => other,
                };
                cfg.set(key, value)?;
                fs::create_dir_all(&dir)?;
                let s = build_split(&cfg, seed)?;
                write_split(&dir.join("split"), &s)?;
                let tc = cfg.train_config(seed)?;
                let report = train_and_evaluate(&cfg, &s, &tc, &dir)?;
                report.write(&dir.join("report.json"), &dir.join("report.csv"))?;
                Ok(report)
            })();
            match result {
                Ok(r) => {
                    let _ = writeln!(csv, "{value},{seed},{},{},{},ok", r.recall, r.ndcg, r.precision);
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("{axis}={value} seed={seed}: {e:#}");
                    let _ = writeln!(csv, "{value},{seed},,,,{}", status_cell(&e));
                }
            }
        }
    }
    let path = ctx.outdir.join("sweep.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    if failures > 0 {
        return Err(anyhow!("{failures} sweep point(s) failed; see {}", path.display()));
    }
    Ok(())
}

fn cmd_ablate(ctx: &Run) -> Result<()> {
    let modes: Vec<Mode> = ctx.cfg.list("modes")?;
    if modes.is_empty() {
        bail!("no modes to run");
    }
    let seeds = seeds(&ctx.cfg, ctx.seed)?;
    claim_outdir(&ctx.outdir, ctx.force)?;
    ctx.cfg.write(&ctx.outdir)?;

    let mut csv = String::from("mode,seed,recall,ndcg,precision,status\n");
    let mut failures = 0;
    for &seed in &seeds {
        let split = match ctx.cfg.opt("split") {
            Some(dir) => read_split(Path::new(dir)).map_err(anyhow::Error::from),
            None => build_split(&ctx.cfg, seed),
        };
        for &mode in &modes {
            let dir = ctx.outdir.join(mode.to_string()).join(format!("seed={seed}"));
            let result = split.as_ref().map_err(|e| anyhow!("{e:#}")).and_then(|s| {
                let mut cfg = with_resolved(&ctx.cfg, seed);
                cfg.set("mode", &mode.to_string())?;
                fs::create_dir_all(&dir)?;
                let tc = cfg.train_config(seed)?;
                let report = train_and_evaluate(&cfg, s, &tc, &dir)?;
                report.write(&dir.join("report.json"), &dir.join("report.csv"))?;
                Ok(report)
            });
            match result {
                Ok(r) => {
                    let _ = writeln!(csv, "{mode},{seed},{},{},{},ok", r.recall, r.ndcg, r.precision);
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("{mode} seed={seed}: {e:#}");
                    let _ = writeln!(csv, "{mode},{seed},,,,{}", status_cell(&e));
                }
            }
        }
    }
    let path = ctx.outdir.join("ablation.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    if failures > 0 {
        return Err(anyhow!("{failures} ablation run(s) failed; see {}", path.display()));
    }
    Ok(())
}
