use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inrmark_cli::pipeline;
use inrmark_cli::{ExperimentConfig, PipelineError};
use inrmark_core::metrics::format_db;
use inrmark_core::DistortionSpec;

#[derive(Parser)]
#[command(name = "inrmark", version, about = "Watermark images through their coordinate-network representation")]
struct Cli {
    /// Root seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a coordinate network to an image.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the encoder/decoder pair and keep the decoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from pretrain_state.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save the training state and stop after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tune a fitted network to carry a fresh random message.
    Embed {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a fit or embed checkpoint to a PNG.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Defaults to `<out>/sample_<H>x<W>.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply an attack such as `jpeg:50` or `crop:0.25` to a PNG.
    Attack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        spec: DistortionSpec,
        /// Defaults to `<out>/attacked.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode the message carried by an image.
    Extract {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Embed checkpoint whose message the result is scored against.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Accuracy and PSNR over the (resolution × attack) grid.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a folder of procedural images.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Fit { config } => {
            let r = pipeline::run_fit(&load_config(&config, cli.seed)?, out)?;
            println!(
                "fit: {} steps, psnr {} dB, {:.1}s -> {}",
                r.report.steps,
                format_db(r.report.final_psnr),
                r.report.wall_time,
                r.checkpoint.display()
            );
        }
        Command::Pretrain {
            config,
            resume,
            stop_after,
        } => {
            let run = pipeline::PretrainRun { resume, stop_after };
            let r = pipeline::run_pretrain(&load_config(&config, cli.seed)?, out, run)?;
            if let Some(epoch) = r.resumed_from_epoch {
                println!("resumed after epoch {epoch}");
            }
            for (i, (loss, acc)) in r.report.loss_curve.iter().zip(&r.report.accuracy_curve).enumerate() {
                println!("epoch {:>4}  loss {loss:.4}  accuracy {acc:.2}%", i + 1);
            }
            for a in &r.report.held_out {
                println!("held-out {:<12} {:.2}%", a.attack.to_string(), a.accuracy);
            }
            match &r.decoder_checkpoint {
                Some(p) => println!("decoder -> {}", p.display()),
                None => println!("stopped early; state -> {}", r.state_checkpoint.display()),
            }
        }
        Command::Embed { config } => {
            let r = pipeline::run_embed(&load_config(&config, cli.seed)?, out)?;
            println!("message {}", r.message);
            println!(
                "best epoch {}: mean accuracy {:.2}%, mean psnr {} dB",
                r.report.best_epoch,
                r.report.best_mean_accuracy,
                format_db(r.report.best_mean_psnr)
            );
            println!("watermarked -> {}", r.checkpoint.display());
        }
        Command::Sample {
            checkpoint,
            height,
            width,
            output,
        } => {
            let output = output.unwrap_or_else(|| out.join(format!("sample_{height}x{width}.png")));
            pipeline::run_sample(&checkpoint, height, width, &output)?;
            println!("{}", output.display());
        }
        Command::Attack { image, spec, output } => {
            let output = output.unwrap_or_else(|| out.join("attacked.png"));
            let seed = inrmark_cli::config::stage_seed(cli.seed.unwrap_or(0), inrmark_cli::config::StageSeed::Attack);
            let img = pipeline::run_attack(&image, &spec, seed, &output)?;
            println!("{} ({}x{})", output.display(), img.height(), img.width());
        }
        Command::Extract { decoder, image, expect } => {
            let r = pipeline::run_extract(&decoder, &image, expect.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Evaluate { config } => {
            let r = pipeline::run_evaluate(&load_config(&config, cli.seed)?, out)?;
            println!("{:>6} {:>6}  {:<12} {:>9} {:>9}", "height", "width", "attack", "accuracy", "psnr");
            for row in &r.rows {
                println!(
                    "{:>6} {:>6}  {:<12} {:>8.2}% {:>9}",
                    row.height,
                    row.width,
                    row.attack.to_string(),
                    row.accuracy,
                    format_db(row.psnr)
                );
            }
            println!("mean accuracy {:.2}%, mean psnr {} dB", r.mean_accuracy, format_db(r.mean_psnr));
        }
        Command::Synth { count, size } => {
            let paths = pipeline::run_synth(count, size, cli.seed.unwrap_or(0), out)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
