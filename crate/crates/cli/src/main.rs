//! Command-line driver for the droplet-size-distribution latent analysis pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dropletscope::config::PipelineConfig;
use dropletscope::pipeline::{self, Layout};
use dropletscope::{Error, Result};

#[derive(Parser)]
#[command(name = "dropletscope", version, about = "Latent-space analysis of cloud droplet size distributions")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Serial execution; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment directory holding one subdirectory per stage.
    #[arg(long, default_value = "experiment")]
    dir: PathBuf,
    /// Configuration file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Generate a single aerosol run.
        #[arg(long)]
        aerosol: Option<f32>,
    },
    /// Train the VAE and write the checkpoint and loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// KL weight (train.beta).
        #[arg(long)]
        beta: Option<f64>,
        /// Adam learning rate (train.learning_rate).
        #[arg(long)]
        lr: Option<f64>,
        /// Training epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size (train.batch_size).
        #[arg(long)]
        batch: Option<usize>,
        /// Seed for initialization, shuffling and latent draws (train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode every snapshot into latent embeddings.
    Embed {
        #[command(flatten)]
        common: Common,
    },
    /// Compute the pooled latent-to-RGB calibration.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Render horizontal and vertical slices colored by latent position.
    Render {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the latent pathway and average spectra along it.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Latent waypoints (`z1 z2 z3` per line) replacing the fitted path.
        #[arg(long)]
        waypoints: Option<PathBuf>,
    },
    /// Render hue-sorted per-altitude composition panels.
    Compose {
        #[command(flatten)]
        common: Common,
    },
    /// Detect precipitation onset per aerosol run.
    Onset {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(PipelineConfig, Layout)> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for s in &common.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok((cfg, Layout::new(&common.dir)))
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { common, aerosol } => {
            let (cfg, layout) = resolve(common, &[("synth.aerosol_factors", some(aerosol))])?;
            let entries = pipeline::cmd_gen(&cfg, &layout)?;
            println!("wrote {} snapshots to {}", entries.len(), layout.dir(pipeline::Stage::Gen).display());
        }
        Command::Train { common, beta, lr, epochs, batch, seed } => {
            let (cfg, layout) = resolve(
                common,
                &[
                    ("train.beta", some(beta)),
                    ("train.learning_rate", some(lr)),
                    ("train.epochs", some(epochs)),
                    ("train.batch_size", some(batch)),
                    ("train.seed", some(seed)),
                ],
            )?;
            let out = pipeline::cmd_train(&cfg, &layout)?;
            for h in &out.history {
                println!(
                    "epoch {:>3}  nelbo {:.6e}  recon {:.6e}  kl {:.6e}",
                    h.epoch, h.mean_nelbo, h.mean_recon, h.mean_kl
                );
            }
            println!("wrote {}", layout.model().display());
        }
        Command::Embed { common } => {
            let (cfg, layout) = resolve(common, &[])?;
            let (o, embeddings) = pipeline::cmd_embed(&cfg, &layout)?;
            println!("embedded {} snapshots; axis orientation {:?} flips {:?}", embeddings.len(), o.perm, o.flip);
        }
        Command::Calibrate { common } => {
            let (cfg, layout) = resolve(common, &[])?;
            let cal = pipeline::cmd_calibrate(&cfg, &layout)?;
            print!("{}", cal.to_text());
        }
        Command::Render { common } => {
            let (cfg, layout) = resolve(common, &[])?;
            let stems = pipeline::cmd_render(&cfg, &layout)?;
            println!("rendered {} slices to {}", stems.len(), layout.dir(pipeline::Stage::Render).display());
        }
        Command::Trace { common, waypoints } => {
            let (cfg, layout) = resolve(common, &[])?;
            let trace = pipeline::cmd_trace(&cfg, &layout, waypoints.as_deref())?;
            println!("path with {} nodes, arc length {:.4}", trace.path.len(), trace.path.arc_length().last().unwrap());
        }
        Command::Compose { common } => {
            let (cfg, layout) = resolve(common, &[])?;
            let img = pipeline::cmd_compose(&cfg, &layout)?;
            println!("composition grid {}x{}", img.width, img.height);
        }
        Command::Onset { common } => {
            let (cfg, layout) = resolve(common, &[])?;
            for (a, t) in pipeline::cmd_onset(&cfg, &layout)? {
                match t {
                    Some(t) => println!("aerosol {a}: onset at {t} s"),
                    None => println!("aerosol {a}: no onset"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
