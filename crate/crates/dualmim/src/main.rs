//! Command-line front end over the full pipeline: corpus synthesis,
//! standardization statistics, pre-training, frozen-encoder evaluation,
//! the ablation grid, and reconstruction panels. A thin dispatcher; all
//! compute runs on one thread, so equal inputs give byte-equal outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualmim::config::RunConfig;
use dualmim::eval::{linear_probe, run_ablation, segment_eval, Modality};
use dualmim::tileio::{write_corpus, write_stats};
use dualmim::trainer::{
    build_corpus, build_eval_corpus, corpus_stats, load_checkpoint, metrics_log, pretrain,
    Checkpoint,
};
use dualmim::viz::dump_reconstruction_panel;

#[derive(Parser)]
#[command(
    name = "dualmim",
    version,
    about = "Dual-encoder masked image modeling on paired RGB + height tiles"
)]
struct Cli {
    /// Run configuration file; built-in defaults when absent.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed the command consumes: data.seed for `synth`,
    /// train.seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Accepted for interface stability; this build always computes on a
    /// single thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out corpora as tile files.
    Synth,
    /// Compute per-city standardization statistics over the training corpus.
    Stats,
    /// Pre-train the dual encoders; writes checkpoints and a metrics log.
    Pretrain,
    /// Linear-probe a checkpoint's frozen features on held-out tiles.
    Probe(EvalArgs),
    /// Per-patch segmentation over a checkpoint's frozen features.
    Segment(EvalArgs),
    /// Pre-train per initialization and report the full ablation grid.
    Ablate,
    /// Write input | masked | reconstruction panels for a held-out tile.
    Reconstruct(ReconArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    checkpoint: PathBuf,

    /// Feature source: rgb, dsm, or rgb+dsm.
    #[arg(long, default_value = "rgb+dsm")]
    modality: String,
}

#[derive(Args)]
struct ReconArgs {
    /// Checkpoint to reconstruct with.
    checkpoint: PathBuf,

    /// Index into the held-out corpus.
    #[arg(long, default_value_t = 0)]
    tile: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }

    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading configuration {}", p.display()))?;
            RunConfig::parse(&text)
                .with_context(|| format!("parsing configuration {}", p.display()))?
        }
        None => RunConfig::default(),
    };

    // Checkpoint-bearing commands take their configuration from the
    // checkpoint itself; a --config given alongside must match it exactly.
    let loaded = match &cli.command {
        Command::Probe(a) | Command::Segment(a) => Some(load_ckpt(&a.checkpoint)?),
        Command::Reconstruct(a) => Some(load_ckpt(&a.checkpoint)?),
        _ => None,
    };
    if let Some(ckpt) = &loaded {
        if cli.config.is_some() {
            ckpt.config
                .validate()
                .and_then(|_| ckpt.require_config(&cfg))
                .context("--config does not match the checkpoint's configuration")?;
        }
        cfg = ckpt.config.clone();
    } else {
        match (&cli.command, cli.seed) {
            (Command::Synth, Some(s)) => cfg.data.seed = s,
            (_, Some(s)) => cfg.train.seed = s,
            _ => {}
        }
    }
    cfg.validate().context("invalid configuration")?;

    let resolved_seed = match &cli.command {
        Command::Synth => cfg.data.seed,
        _ => cli.seed.unwrap_or(cfg.train.seed),
    };

    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    write_manifest(&cli, resolved_seed)?;

    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Stats => cmd_stats(&cfg, &cli.out),
        Command::Pretrain => cmd_pretrain(&cfg, &cli.out),
        Command::Probe(a) => cmd_eval(&cfg, loaded.as_ref().unwrap(), a, resolved_seed, &cli.out, false),
        Command::Segment(a) => cmd_eval(&cfg, loaded.as_ref().unwrap(), a, resolved_seed, &cli.out, true),
        Command::Ablate => cmd_ablate(&cfg, resolved_seed, &cli.out),
        Command::Reconstruct(a) => {
            cmd_reconstruct(&cfg, loaded.as_ref().unwrap(), a, resolved_seed, &cli.out)
        }
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Stats => "stats",
        Command::Pretrain => "pretrain",
        Command::Probe(_) => "probe",
        Command::Segment(_) => "segment",
        Command::Ablate => "ablate",
        Command::Reconstruct(_) => "reconstruct",
    }
}

/// Records what is about to run, before any long work starts.
fn write_manifest(cli: &Cli, seed: u64) -> Result<()> {
    let config = match &cli.config {
        Some(p) => p.display().to_string(),
        None => "-".into(),
    };
    let text = format!(
        "config\t{config}\nout\t{}\ncommand\t{}\nseed\t{seed}\nversion\t{}\n",
        cli.out.display(),
        command_name(&cli.command),
        env!("CARGO_PKG_VERSION"),
    );
    let path = cli.out.join("manifest.tsv");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    for (name, tiles) in [
        ("train", build_corpus(&cfg.data, cfg.train.image_size)?),
        ("eval", build_eval_corpus(&cfg.data, cfg.train.image_size)?),
    ] {
        let manifest = write_corpus(&tiles, &out.join(name))?;
        println!("wrote {} tiles under {}", tiles.len(), manifest.display());
    }
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tiles = build_corpus(&cfg.data, cfg.train.image_size)?;
    let stats = corpus_stats(&tiles)?;
    let path = out.join("stats.txt");
    write_stats(&stats, &path)?;
    report(&path);
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tiles = build_corpus(&cfg.data, cfg.train.image_size)?;
    let ckpt = pretrain(&tiles, cfg, Some(out))?;
    let metrics = out.join("metrics.tsv");
    fs::write(&metrics, metrics_log(&ckpt.metrics))
        .with_context(|| format!("writing {}", metrics.display()))?;
    report(&out.join("checkpoint_final.fmck"));
    report(&metrics);
    if let Some(m) = ckpt.metrics.last() {
        println!("final epoch {}: total {:.6}", m.epoch, m.total);
    }
    Ok(())
}

/// Three consecutive evaluation seeds from the resolved seed; directional
/// comparisons are means over these.
fn eval_seeds(seed: u64) -> [u64; 3] {
    [seed, seed.wrapping_add(1), seed.wrapping_add(2)]
}

fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    args: &EvalArgs,
    seed: u64,
    out: &Path,
    segmentation: bool,
) -> Result<()> {
    let modality = Modality::parse(&args.modality)?;
    let tiles = build_eval_corpus(&cfg.data, cfg.train.image_size)?;
    let seeds = eval_seeds(seed);
    let (metric, file, values) = if segmentation {
        ("seg_miou", "segment.tsv", segment_eval(ckpt, &tiles, modality, &seeds)?)
    } else {
        ("probe_accuracy", "probe.tsv", linear_probe(ckpt, &tiles, modality, &seeds)?)
    };
    let mut text = String::from("metric\tmodality\tseed\tvalue\n");
    for (s, v) in seeds.iter().zip(&values) {
        text.push_str(&format!("{metric}\t{}\t{s}\t{v}\n", modality.name()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    text.push_str(&format!("{metric}\t{}\tmean\t{mean}\n", modality.name()));
    let path = out.join(file);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    report(&path);
    println!("{metric} ({}) mean over {} seeds: {mean:.4}", modality.name(), seeds.len());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let table = run_ablation(cfg, &eval_seeds(seed))?;
    let records = out.join("ablation.tsv");
    fs::write(&records, table.records())
        .with_context(|| format!("writing {}", records.display()))?;
    let rendered = out.join("ablation.txt");
    fs::write(&rendered, table.render())
        .with_context(|| format!("writing {}", rendered.display()))?;
    report(&records);
    report(&rendered);
    print!("{}", table.render());
    Ok(())
}

fn cmd_reconstruct(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    args: &ReconArgs,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let train_tiles = build_corpus(&cfg.data, cfg.train.image_size)?;
    let stats = corpus_stats(&train_tiles)?;
    let eval_tiles = build_eval_corpus(&cfg.data, cfg.train.image_size)?;
    let tile = eval_tiles.get(args.tile).with_context(|| {
        format!(
            "tile index {} outside the {}-tile held-out corpus",
            args.tile,
            eval_tiles.len()
        )
    })?;
    let city_stats = stats
        .iter()
        .find(|s| s.city == tile.city)
        .with_context(|| format!("no statistics for city {:?}", tile.city))?;
    // Mask seeds: the resolved seed and its successor.
    for p in dump_reconstruction_panel(ckpt, tile, city_stats, seed, seed.wrapping_add(1), out)? {
        report(&p);
    }
    Ok(())
}
