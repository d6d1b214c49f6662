use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kad_core::data::{synth_generate, SynthConfig, DEFAULT_CATEGORIES};
use kad_core::engine::{
    evaluate_ap, evaluate_teacher_ap, infer_image, load_checkpoint, train, LoadedSplit, RunConfig,
};
use kad_core::priors::{
    generate_priors, mock_priors, read_prior_cache, verify_prior_cache, write_prior_cache, GenerateOptions,
    Providers,
};
use kad_core::priors::provider::ProviderConfig;

#[derive(Parser)]
#[command(name = "kad", version, about = "Active-object detection with knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a YAML/JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Student AP on a dataset directory (annotations.json + images).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the teacher branch with the checkpoint's prior settings.
        #[arg(long)]
        teacher: bool,
        /// Include per-image diagnostics in the output.
        #[arg(long)]
        per_image: bool,
    },
    /// Top active-object detection for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write per-layer attention heatmaps of the winning query here.
        #[arg(long)]
        attn_dump: Option<PathBuf>,
    },
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    Priors {
        #[command(subcommand)]
        command: PriorsCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Render a synthetic train/val dataset.
    Synth {
        /// YAML/JSON synth config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PriorsCommand {
    /// Build a prior cache through the configured providers.
    Generate {
        /// One category per line, or a JSON list.
        #[arg(long)]
        categories: PathBuf,
        /// Provider settings (YAML/JSON).
        #[arg(long)]
        providers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long = "images-per-desc", default_value_t = 10)]
        images_per_desc: usize,
    },
    /// Seeded stand-in cache.
    Mock {
        /// Categories file; the synthetic categories when omitted.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `d_t,d_v`.
        #[arg(long, default_value = "510,510")]
        dims: String,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 100)]
        q: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every blob of a cache against its manifest.
    Verify { dir: PathBuf },
}

fn read_categories(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [t, v] => Ok((t.trim().parse()?, v.trim().parse()?)),
        [d] => {
            let d = d.trim().parse()?;
            Ok((d, d))
        }
        _ => bail!("--dims expects d_t,d_v"),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, epochs, out, seed } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train(cfg)?;
            print_json(&serde_json::json!({
                "checkpoint": outcome.checkpoint,
                "log": outcome.log,
                "history": outcome.history,
            }))
        }
        Command::Eval { checkpoint, data, teacher, per_image } => {
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let split = LoadedSplit::load(&data.join("annotations.json"), &data, model.config().image_size, None)?;
            let mut result = if teacher {
                let flags = meta.config.prior_flags();
                if !flags.any() {
                    bail!("checkpoint was trained without priors; it has no teacher");
                }
                let cache = match (&meta.config.prior_cache, flags.needs_cache()) {
                    (Some(p), true) => Some(read_prior_cache(p)?),
                    _ => None,
                };
                evaluate_teacher_ap(&model, &split, cache.as_ref(), flags, 16)?
            } else {
                evaluate_ap(&model, &split, 16)?
            };
            if !per_image {
                result.per_image.clear();
            }
            print_json(&result)
        }
        Command::Infer { checkpoint, image, attn_dump } => {
            let r = infer_image(&checkpoint, &image, attn_dump.as_deref())?;
            print_json(&r)
        }
        Command::Data {
            command: DataCommand::Synth { config, out, seed },
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => serde_yaml::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let splits = synth_generate(&cfg, &out)?;
            for s in &splits {
                println!(
                    "{}: {} scenes, {} skipped -> {}",
                    s.name,
                    s.scenes,
                    s.skipped.len(),
                    s.annotation_path.display()
                );
            }
            Ok(())
        }
        Command::Priors { command } => match command {
            PriorsCommand::Generate {
                categories,
                providers,
                out,
                p,
                images_per_desc,
            } => {
                let cats = read_categories(&categories)?;
                let text = fs::read_to_string(&providers).with_context(|| format!("reading {}", providers.display()))?;
                let pcfg: ProviderConfig = serde_yaml::from_str(&text)?;
                let clients = Providers::from_config(&pcfg)?;
                let opts = GenerateOptions {
                    p,
                    images_per_description: images_per_desc,
                    image_seed: pcfg.image_seed,
                    parallelism: pcfg.parallelism,
                };
                let cache = generate_priors(&cats, &clients, &opts)?;
                let manifest = write_prior_cache(&cache, &out)?;
                for f in &cache.failures {
                    eprintln!("omitted {}: {}", f.category, f.error);
                }
                println!("{} categories -> {}", cache.entries.len(), manifest.display());
                Ok(())
            }
            PriorsCommand::Mock {
                categories,
                seed,
                dims,
                p,
                q,
                out,
            } => {
                let cats = match categories {
                    Some(path) => read_categories(&path)?,
                    None => DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
                };
                let (d_t, d_v) = parse_dims(&dims)?;
                let cache = mock_priors(&cats, seed, p, q, d_t, d_v)?;
                let manifest = write_prior_cache(&cache, &out)?;
                println!("{} categories -> {}", cache.entries.len(), manifest.display());
                Ok(())
            }
            PriorsCommand::Verify { dir } => {
                let report = verify_prior_cache(&dir)?;
                for p in &report.problems {
                    eprintln!("{p}");
                }
                println!(
                    "{} categories, {} blobs, {} problems",
                    report.categories,
                    report.blobs,
                    report.problems.len()
                );
                if report.problems.is_empty() {
                    Ok(())
                } else {
                    bail!("cache verification failed")
                }
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
