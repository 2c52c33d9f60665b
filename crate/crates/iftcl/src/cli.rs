//! Command-line interface: `gen`, `train`, `eval`, `mi` and `sweep` verbs
//! over a shared `--config` file, with deterministic artifacts.
//!
//! Exit codes: 0 on success, 2 for configuration, parse and I/O problems,
//! 3 for a numeric abort during training (the last good checkpoint is
//! written before exiting).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{make_twins, read_paired_corpus, Vocabulary};
use crate::config::{RawConfig, RunConfig};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_sts, mutual_information, read_sts_file, task_relevant_mi, write_predictions,
    StsPair, MAX_GOLD,
};
use crate::objective::TwinsBatch;
use crate::streams::stream_rng;
use crate::synth::{gen_corpus, gen_sts};
use crate::train::{train_epoch, MetricsRecord, StepSettings};

#[derive(Debug, Parser)]
#[command(
    name = "iftcl",
    about = "Desk-scale contrastive sentence-representation training \
             with twin augmentation and a forgetting-weighted negative queue",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus plus dev/test evaluation files
    Gen(CommonArgs),
    /// Train the encoder and write metrics and checkpoints
    Train(CommonArgs),
    /// Evaluate a checkpoint against an evaluation file
    Eval(EvalArgs),
    /// Mutual-information analysis of a checkpoint
    Mi(MiArgs),
    /// Train once per value of one config key and tabulate results
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Path to the key=value configuration file
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of FI,TL,HQ to ablate
    #[arg(long, value_name = "LIST")]
    pub ablate: Option<String>,
    /// Twins-loss pairing: diag or pairwise
    #[arg(long, value_name = "MODE")]
    pub twins_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Evaluation TSV; defaults to the config's test file
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Prediction dump destination; defaults to <out_dir>/predictions.tsv
    #[arg(long, value_name = "PATH")]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to analyze
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// How many corpus sentences to use; defaults to batch_size
    #[arg(long)]
    pub n: Option<usize>,
    /// Evaluation TSV whose maximum-gold pairs define the task MI
    #[arg(long, value_name = "PATH")]
    pub eval_file: Option<PathBuf>,
    /// Dump the three representation channels to this TSV
    #[arg(long, value_name = "PATH")]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Config key to vary
    #[arg(long, value_name = "KEY")]
    pub param: String,
    /// Comma-separated values for that key
    #[arg(long, value_name = "LIST")]
    pub values: String,
}

/// Reads the config file and applies the command-line overrides.
fn load_config(args: &CommonArgs) -> Result<(RawConfig, RunConfig)> {
    let mut raw = RawConfig::read(&args.config)?;
    if let Some(seed) = args.seed {
        raw.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        raw.set("out_dir", &out.display().to_string())?;
    }
    if let Some(ablate) = &args.ablate {
        raw.set("ablate", ablate)?;
    }
    if let Some(mode) = &args.twins_mode {
        raw.set("twins_mode", mode)?;
    }
    let cfg = raw.build()?;
    Ok((raw, cfg))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(&load_config(args)?.1),
        Command::Train(args) => {
            let cfg = load_config(args)?.1;
            let artifacts = PathBuf::from(&cfg.out_dir);
            cmd_train(&cfg, &artifacts)
        }
        Command::Eval(args) => {
            let cfg = load_config(&args.common)?.1;
            cmd_eval(&cfg, args)
        }
        Command::Mi(args) => {
            let cfg = load_config(&args.common)?.1;
            cmd_mi(&cfg, args)
        }
        Command::Sweep(args) => {
            let (raw, cfg) = load_config(&args.common)?;
            cmd_sweep(&raw, &cfg, &args.param, &args.values)
        }
    }
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synth_spec()?;
    let (dev_n, test_n) = cfg.sts_pair_counts()?;
    let outputs = [
        (cfg.corpus_path(), gen_corpus(&spec)?),
        (cfg.dev_path(), gen_sts(&spec, dev_n, cfg.sts_dev_seed())?),
        (cfg.test_path(), gen_sts(&spec, test_n, cfg.sts_test_seed())?),
    ];
    for (path, content) in &outputs {
        ensure_parent(path)?;
        fs::write(path, content).map_err(|e| Error::io(path, e))?;
        println!("wrote {} ({} lines)", path.display(), content.lines().count());
    }
    Ok(())
}

/// What one training run reports back.
pub struct TrainOutcome {
    pub baseline_spearman: f64,
    pub best_spearman: f64,
    pub final_spearman: f64,
    pub steps: usize,
}

/// The shared training core behind `train` and `sweep`: reads data, runs
/// all epochs, streams metrics, and keeps final plus best-dev checkpoints
/// in `artifacts`. On a numeric abort the last good parameters are saved
/// as the final checkpoint before the error is returned.
fn train_run(cfg: &RunConfig, artifacts: &Path, quiet: bool) -> Result<TrainOutcome> {
    fs::create_dir_all(artifacts).map_err(|e| Error::io(artifacts, e))?;
    let (bel_s, bel_f) = cfg.build_tables()?;
    let flags = cfg.loss_flags();
    let need_fraternal = flags.fraternal || flags.twins;
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    let corpus = read_paired_corpus(&cfg.corpus_path(), vocab, cfg.max_len, need_fraternal)?;
    let dev = read_sts_file(&cfg.dev_path())?;

    let mut theta = cfg.build_encoder()?;
    let mut velocity = EncoderParams::zeros(cfg.dim, cfg.enc_hidden, cfg.dim_out)?;
    let mut queue = cfg.build_queue()?;

    let baseline_spearman = evaluate_sts(&theta, &dev, &bel_s)?.spearman;
    let best_path = artifacts.join("checkpoint_best.txt");
    let final_path = artifacts.join("checkpoint_final.txt");
    let metrics_path = artifacts.join("metrics.jsonl");
    save_checkpoint(&theta, &best_path)?;
    let mut best_spearman = baseline_spearman;

    let metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);

    let st = StepSettings {
        tau: cfg.tau,
        rate: cfg.rho,
        eps: cfg.epsilon,
        max_len: cfg.max_len,
        lr: cfg.lr,
        momentum: cfg.momentum,
        flags,
        bel_s: &bel_s,
        bel_f: &bel_f,
    };
    let mut rng = stream_rng(cfg.seed, "train-masks");
    let mut step_base = 0;
    let mut abort: Option<Error> = None;
    for epoch in 0..cfg.epochs {
        let is_last = epoch + 1 == cfg.epochs;
        let outcome = train_epoch(
            &mut theta,
            &mut velocity,
            queue.as_mut(),
            &corpus,
            Some(&dev),
            &st,
            cfg.batch_size,
            cfg.eval_every,
            step_base,
            is_last,
            &mut rng,
            &mut |record: &MetricsRecord, snapshot: &EncoderParams| {
                let line = serde_json::to_string(record)
                    .map_err(|e| Error::Config(format!("metrics serialization failed: {e}")))?;
                writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
                if let Some(s) = record.spearman_dev {
                    if s > best_spearman {
                        best_spearman = s;
                        save_checkpoint(snapshot, &best_path)?;
                    }
                }
                Ok(())
            },
        );
        match outcome {
            Ok(steps) => step_base += steps,
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_checkpoint(&theta, &final_path)?;
    if let Some(e) = abort {
        println!("last_good_checkpoint={}", final_path.display());
        return Err(e);
    }
    let final_spearman = evaluate_sts(&theta, &dev, &bel_s)?.spearman;
    if !quiet {
        println!("baseline_spearman={baseline_spearman}");
        println!("best_spearman={best_spearman}");
        println!("final_spearman={final_spearman}");
        println!("metrics={}", metrics_path.display());
        println!("checkpoint_final={}", final_path.display());
        println!("checkpoint_best={}", best_path.display());
    }
    Ok(TrainOutcome {
        baseline_spearman,
        best_spearman,
        final_spearman,
        steps: step_base,
    })
}

fn cmd_train(cfg: &RunConfig, artifacts: &Path) -> Result<()> {
    train_run(cfg, artifacts, false)?;
    Ok(())
}

fn check_dims(cfg: &RunConfig, theta: &EncoderParams) -> Result<()> {
    if theta.d != cfg.dim || theta.d_out != cfg.dim_out {
        return Err(Error::Config(format!(
            "checkpoint dimensions ({}, {}, {}) disagree with the config \
             (dim={}, enc_hidden={}, dim_out={})",
            theta.d, theta.d_hidden, theta.d_out, cfg.dim, cfg.enc_hidden, cfg.dim_out
        )));
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let theta = load_checkpoint(&args.checkpoint)?;
    check_dims(cfg, &theta)?;
    let (bel_s, _) = cfg.build_tables()?;
    let data_path = args.data.clone().unwrap_or_else(|| cfg.test_path());
    let pairs = read_sts_file(&data_path)?;
    let report = evaluate_sts(&theta, &pairs, &bel_s)?;
    let dump_path = args
        .dump
        .clone()
        .unwrap_or_else(|| cfg.out_path("predictions.tsv"));
    ensure_parent(&dump_path)?;
    write_predictions(&dump_path, &report)?;
    println!("spearman={}", report.spearman);
    println!("predictions={}", dump_path.display());
    Ok(())
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_mi(cfg: &RunConfig, args: &MiArgs) -> Result<()> {
    let theta = load_checkpoint(&args.checkpoint)?;
    check_dims(cfg, &theta)?;
    let (bel_s, bel_f) = cfg.build_tables()?;
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    let corpus = read_paired_corpus(&cfg.corpus_path(), vocab, cfg.max_len, true)?;
    let n = args.n.unwrap_or(cfg.batch_size);
    if n == 0 || n > corpus.len() {
        return Err(Error::Config(format!(
            "n must lie in [1, {}] (the corpus size), got {n}",
            corpus.len()
        )));
    }
    let mut rng = stream_rng(cfg.seed, "mi-masks");
    let mut views = Vec::with_capacity(n);
    for s in &corpus[..n] {
        views.push(make_twins(
            s,
            &bel_s,
            &bel_f,
            cfg.max_len,
            cfg.rho,
            cfg.epsilon,
            &mut rng,
        )?);
    }
    let batch = TwinsBatch::from_views(&theta, views)?;
    let h: Vec<Vec<f64>> = batch.anchors.iter().map(|c| c.h().to_vec()).collect();
    let hp: Vec<Vec<f64>> = batch.identicals.iter().map(|c| c.h().to_vec()).collect();
    let hm: Vec<Vec<f64>> = batch
        .fraternals
        .as_ref()
        .expect("make_twins always fills the fraternal channel")
        .iter()
        .map(|c| c.h().to_vec())
        .collect();
    println!("mi_identical={}", mutual_information(&h, &hp, cfg.tau)?);
    println!("mi_fraternal={}", mutual_information(&h, &hm, cfg.tau)?);

    if let Some(eval_path) = &args.eval_file {
        let pairs = read_sts_file(eval_path)?;
        let top: Vec<StsPair> = pairs.into_iter().filter(|p| p.gold == MAX_GOLD).collect();
        if top.is_empty() {
            return Err(Error::Domain(format!(
                "{} holds no maximum-gold pairs",
                eval_path.display()
            )));
        }
        println!(
            "mi_task={}",
            task_relevant_mi(&theta, &top, cfg.tau, &bel_s)?
        );
    }

    if let Some(dump_path) = &args.dump {
        let mut out = String::new();
        for i in 0..n {
            out.push_str(&format!("{i}\tanchor\t{}\n", join_f64(&h[i])));
            out.push_str(&format!("{i}\tidentical\t{}\n", join_f64(&hp[i])));
            out.push_str(&format!("{i}\tfraternal\t{}\n", join_f64(&hm[i])));
        }
        ensure_parent(dump_path)?;
        fs::write(dump_path, out).map_err(|e| Error::io(dump_path, e))?;
        println!("representations={}", dump_path.display());
    }
    Ok(())
}

fn cmd_sweep(raw: &RawConfig, base: &RunConfig, param: &str, values: &str) -> Result<()> {
    let vals: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if vals.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // validate every configuration before training anything
    let mut runs = Vec::with_capacity(vals.len());
    for v in &vals {
        let mut candidate = raw.clone();
        candidate.set(param, v)?;
        runs.push((v.to_string(), candidate.build()?));
    }
    let mut rows = String::new();
    for (value, cfg) in &runs {
        let safe = value.replace(['/', '\\'], "-");
        let dir = base.out_path(&format!("sweep_{param}_{safe}"));
        let outcome = train_run(cfg, &dir, true)?;
        let row = format!("{value}\t{}", outcome.best_spearman);
        println!("{row}");
        rows.push_str(&row);
        rows.push('\n');
    }
    let summary = base.out_path("sweep.tsv");
    ensure_parent(&summary)?;
    fs::write(&summary, rows).map_err(|e| Error::io(&summary, e))?;
    println!("sweep_summary={}", summary.display());
    Ok(())
}
