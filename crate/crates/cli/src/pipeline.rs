//! One function per subcommand. Each reads its inputs, runs a stage of the
//! core library and writes checkpoints and reports under an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use inrmark_core::checkpoint::{config_hash, Bundle, Stage};
use inrmark_core::codec::{finish_pretraining, harden_message, Codec, DecoderConfig, Pretrainer, TrainReport};
use inrmark_core::distortion::{apply_distortion, resize_bilinear};
use inrmark_core::finetune::{self, evaluate_grid, generate_message, EvalRow, FinetuneReport, Raster};
use inrmark_core::metrics::{self, bit_accuracy};
use inrmark_core::sampler::sample_image;
use inrmark_core::siren::{fit_inr, FitReport, InrConfig};
use inrmark_core::synth::synth_image;
use inrmark_core::{derive_seed, seeded_rng, BitMessage, Decoder, DistortionSpec, Image, InrParams};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{stage_seed, ExperimentConfig, StageSeed};
use crate::error::{PipelineError, Result};

pub const FIT_CHECKPOINT: &str = "fit.ckpt";
pub const DECODER_CHECKPOINT: &str = "decoder.ckpt";
pub const PRETRAIN_STATE: &str = "pretrain_state.ckpt";
pub const EMBED_CHECKPOINT: &str = "watermarked.ckpt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

/// Loads every image in `dir` (sorted by file name) and resizes it to
/// `size × size`.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Vec<Image>> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = Image::load(p)?;
            Ok(if img.size() == (size, size) {
                img
            } else {
                resize_bilinear(&img, size, size)
            })
        })
        .collect()
}

/// Writes `count` procedural `size × size` PNGs named `synth_0000.png`, ...
pub fn run_synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    (0..count)
        .map(|k| {
            let path = out.join(format!("synth_{k:04}.png"));
            synth_image(size, size, derive_seed(seed, k as u64)).save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub checkpoint: PathBuf,
    pub report: FitReport,
}

fn fit_manifest_config(cfg: &ExperimentConfig) -> Result<Value> {
    Ok(json!({
        "inr": cfg.inr_config()?,
        "fit": cfg.fit_options()?,
    }))
}

pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<FitOutput> {
    let section = cfg.fit_section()?;
    let image = Image::load(&section.image)?;
    let inr = cfg.inr_config()?;
    let (params, report) = fit_inr(&image, &inr, &cfg.fit_options()?)?;
    ensure_dir(out)?;
    let mut bundle = Bundle::new(Stage::Fit, &fit_manifest_config(cfg)?)?.with_metrics(&report)?;
    bundle.insert_inr("inr", &params);
    let checkpoint = out.join(FIT_CHECKPOINT);
    bundle.save(&checkpoint)?;
    write_json(&out.join("fit_report.json"), &report)?;
    Ok(FitOutput { checkpoint, report })
}

/// Network stored in a fit or embed checkpoint.
pub fn load_inr(bundle: &Bundle) -> Result<InrParams> {
    if !matches!(bundle.stage(), Stage::Fit | Stage::Embed) {
        return Err(PipelineError::Config(format!(
            "a {:?} checkpoint holds no coordinate network",
            bundle.stage()
        )));
    }
    let inr: InrConfig = serde_json::from_value(bundle.manifest.config["inr"].clone())?;
    Ok(bundle.inr("inr", &inr)?)
}

pub fn load_decoder(bundle: &Bundle) -> Result<Decoder> {
    bundle.expect_stage(Stage::Pretrain)?;
    let cfg: DecoderConfig = serde_json::from_value(bundle.manifest.config["decoder"].clone())?;
    Ok(bundle.decoder("decoder", &cfg)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PretrainRun {
    /// Continue from `pretrain_state.ckpt` if present.
    pub resume: bool,
    /// Save the state and return after this many completed epochs.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOutput {
    /// `None` when the run stopped before the last epoch.
    pub decoder_checkpoint: Option<PathBuf>,
    pub state_checkpoint: PathBuf,
    pub report: TrainReport,
    pub resumed_from_epoch: Option<usize>,
}

fn save_pretrain_state(trainer: &Pretrainer, state_cfg: &Value, path: &Path) -> Result<()> {
    let mut bundle = Bundle::new(Stage::PretrainState, state_cfg)?.with_metrics(&json!({
        "report": trainer.report,
        "optimizer_step": trainer.moments.step,
    }))?;
    bundle.insert_encoder("encoder", &trainer.codec.encoder);
    bundle.insert_decoder("decoder", &trainer.codec.decoder);
    bundle.insert_moments("moments", &trainer.moments);
    bundle.save(path)?;
    Ok(())
}

/// Trains the codec on a folder of images and writes the decoder alone to
/// `decoder.ckpt`. The full training state is kept in `pretrain_state.ckpt`,
/// from which a run under the same configuration can resume.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path, run: PretrainRun) -> Result<PretrainOutput> {
    let section = cfg.pretrain_section()?;
    let pcfg = cfg.pretrain_config()?;
    let images = load_dataset(&section.dataset, pcfg.resolution)?;
    if images.len() < 2 {
        return Err(PipelineError::Config(format!(
            "{} holds {} image(s); at least 2 are required",
            section.dataset.display(),
            images.len()
        )));
    }
    if section.held_out >= images.len() {
        return Err(PipelineError::Config(format!(
            "held_out = {} leaves no training images out of {}",
            section.held_out,
            images.len()
        )));
    }
    let (train, held_out) = images.split_at(images.len() - section.held_out);
    let state_cfg = json!({ "pretrain": pcfg, "train_images": train.len() });
    ensure_dir(out)?;
    let state_path = out.join(PRETRAIN_STATE);

    let started = Instant::now();
    let mut resumed_from_epoch = None;
    let mut trainer = if run.resume && state_path.exists() {
        let state = Bundle::load(&state_path)?;
        state.expect_stage(Stage::PretrainState)?;
        let expected = config_hash(&state_cfg)?;
        if state.config_hash() != expected {
            return Err(PipelineError::HashMismatch {
                what: state_path.display().to_string(),
                expected,
                found: state.config_hash().to_string(),
            });
        }
        let report: TrainReport = serde_json::from_value(state.manifest.metrics["report"].clone())?;
        let step = state.manifest.metrics["optimizer_step"]
            .as_u64()
            .ok_or_else(|| PipelineError::Config("pretrain state lacks optimizer_step".into()))?;
        let codec = Codec {
            encoder: state.encoder("encoder", &pcfg.encoder)?,
            decoder: state.decoder("decoder", &pcfg.decoder)?,
        };
        resumed_from_epoch = Some(report.epochs);
        Pretrainer::resume(pcfg.clone(), train.len(), codec, state.moments("moments", step)?, report)?
    } else {
        Pretrainer::new(pcfg.clone(), train.len())?
    };

    let save_every = section.save_every.max(1);
    let stop = |t: &Pretrainer| t.is_done() || run.stop_after.is_some_and(|n| t.epoch >= n);
    while !stop(&trainer) {
        trainer.run_epoch(train)?;
        if trainer.epoch % save_every == 0 || stop(&trainer) {
            save_pretrain_state(&trainer, &state_cfg, &state_path)?;
        }
    }
    if !state_path.exists() {
        save_pretrain_state(&trainer, &state_cfg, &state_path)?;
    }
    if !trainer.is_done() {
        let mut report = trainer.report.clone();
        report.wall_time += started.elapsed().as_secs_f64();
        return Ok(PretrainOutput {
            decoder_checkpoint: None,
            state_checkpoint: state_path,
            report,
            resumed_from_epoch,
        });
    }
    let (decoder, report) = finish_pretraining(trainer, held_out, started)?;

    let dec_cfg = json!({ "decoder": decoder.config, "pretrain": pcfg });
    let mut bundle = Bundle::new(Stage::Pretrain, &dec_cfg)?.with_metrics(&report)?;
    bundle.insert_decoder("decoder", &decoder);
    let decoder_checkpoint = out.join(DECODER_CHECKPOINT);
    bundle.save(&decoder_checkpoint)?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    Ok(PretrainOutput {
        decoder_checkpoint: Some(decoder_checkpoint),
        state_checkpoint: state_path,
        report,
        resumed_from_epoch,
    })
}

/// Configuration recorded in (and hashed into) an embed checkpoint.
fn embed_manifest_config(cfg: &ExperimentConfig, fit: &Bundle, decoder: &Bundle) -> Result<Value> {
    Ok(json!({
        "inr": fit.manifest.config["inr"],
        "finetune": cfg.finetune_config()?,
        "fit_hash": fit.config_hash(),
        "decoder_hash": decoder.config_hash(),
    }))
}

fn load_stage(path: &Path, stage: Stage, what: &str) -> Result<Bundle> {
    if !path.exists() {
        return Err(PipelineError::Config(format!("{what} checkpoint {} does not exist", path.display())));
    }
    let bundle = Bundle::load(path)?;
    bundle.expect_stage(stage)?;
    Ok(bundle)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedOutput {
    pub checkpoint: PathBuf,
    pub message: BitMessage,
    pub report: FinetuneReport,
}

pub fn run_embed(cfg: &ExperimentConfig, out: &Path) -> Result<EmbedOutput> {
    let section = cfg.embed_section()?;
    let ft = cfg.finetune_config()?;
    let dec_bundle = load_stage(&section.decoder_checkpoint, Stage::Pretrain, "decoder")?;
    let fit_bundle = load_stage(&section.fit_checkpoint, Stage::Fit, "fit")?;
    let decoder = load_decoder(&dec_bundle)?;
    let f_im = load_inr(&fit_bundle)?;

    let mut rng = seeded_rng(derive_seed(ft.seed, 0));
    let message = generate_message(decoder.message_bits(), &mut rng)?;
    let (f_wm, report) = finetune::finetune(&f_im, &decoder, &message, &ft)?;

    ensure_dir(out)?;
    let manifest_cfg = embed_manifest_config(cfg, &fit_bundle, &dec_bundle)?;
    let mut bundle = Bundle::new(Stage::Embed, &manifest_cfg)?
        .with_message(message.clone())
        .with_metrics(&json!({
            "best_epoch": report.best_epoch,
            "best_mean_accuracy": report.best_mean_accuracy,
            "best_mean_psnr": metrics::format_db(report.best_mean_psnr),
            "fit_checkpoint": section.fit_checkpoint,
            "decoder_checkpoint": section.decoder_checkpoint,
        }))?;
    bundle.insert_inr("inr", &f_wm);
    let checkpoint = out.join(EMBED_CHECKPOINT);
    bundle.save(&checkpoint)?;
    write_json(&out.join("embed_report.json"), &report)?;
    Ok(EmbedOutput {
        checkpoint,
        message,
        report,
    })
}

/// Samples the network in a fit or embed checkpoint and writes an 8-bit PNG.
pub fn run_sample(checkpoint: &Path, height: usize, width: usize, output: &Path) -> Result<Image> {
    let params = load_inr(&Bundle::load(checkpoint)?)?;
    let image = sample_image(&params, height, width)?.quantized();
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    image.save_png(output)?;
    Ok(image)
}

/// Applies a test-time attack to an 8-bit image file.
pub fn run_attack(image: &Path, spec: &DistortionSpec, seed: u64, output: &Path) -> Result<Image> {
    let input = Image::load(image)?;
    let mut rng = seeded_rng(seed);
    let attacked = apply_distortion(&input, spec, &mut rng)?.quantized();
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    attacked.save_png(output)?;
    Ok(attacked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub image: PathBuf,
    pub height: usize,
    pub width: usize,
    pub message: BitMessage,
    pub logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<BitMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit_accuracy: Option<f64>,
}

/// Decodes `image`; when `expected_from` names an embed checkpoint, also
/// scores the result against its stored message.
pub fn run_extract(decoder_checkpoint: &Path, image: &Path, expected_from: Option<&Path>) -> Result<ExtractReport> {
    let decoder = load_decoder(&Bundle::load(decoder_checkpoint)?)?;
    let img = Image::load(image)?;
    let logits = decoder.decode(&img)?;
    let message = harden_message(&logits);
    let expected = match expected_from {
        Some(p) => {
            let b = Bundle::load(p)?;
            b.expect_stage(Stage::Embed)?;
            Some(
                b.manifest
                    .message
                    .clone()
                    .ok_or_else(|| PipelineError::Config(format!("{} stores no message", p.display())))?,
            )
        }
        None => None,
    };
    let bit_accuracy = expected.as_ref().map(|m| bit_accuracy(m, &message)).transpose()?;
    Ok(ExtractReport {
        image: image.to_path_buf(),
        height: img.height(),
        width: img.width(),
        message,
        logits: logits.values().to_vec(),
        expected,
        bit_accuracy,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    pub mean_accuracy: f64,
    #[serde(with = "metrics::db_serde")]
    pub mean_psnr: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    height: usize,
    width: usize,
    attack: String,
    bit_accuracy: f64,
    psnr_db: &'a str,
}

/// Scores the embedded network over the (resolution × attack) grid on 8-bit
/// rasters. Refuses to run if the embed section of `cfg` no longer matches
/// the one the checkpoint was produced with.
pub fn run_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<EvaluateReport> {
    let section = cfg.evaluate_section()?;
    let embed = cfg.embed_section()?;
    let bundle = load_stage(&section.checkpoint, Stage::Embed, "watermarked")?;
    let dec_bundle = load_stage(&embed.decoder_checkpoint, Stage::Pretrain, "decoder")?;
    let fit_bundle = load_stage(&embed.fit_checkpoint, Stage::Fit, "fit")?;
    let expected = config_hash(&embed_manifest_config(cfg, &fit_bundle, &dec_bundle)?)?;
    if bundle.config_hash() != expected {
        return Err(PipelineError::HashMismatch {
            what: section.checkpoint.display().to_string(),
            expected,
            found: bundle.config_hash().to_string(),
        });
    }
    let message = bundle
        .manifest
        .message
        .clone()
        .ok_or_else(|| PipelineError::Config("watermarked checkpoint stores no message".into()))?;
    let f_wm = load_inr(&bundle)?;
    let f_im = load_inr(&fit_bundle)?;
    let decoder = load_decoder(&dec_bundle)?;
    let rows = evaluate_grid(
        &f_wm,
        &f_im,
        &decoder,
        &message,
        &section.resolutions,
        &section.attacks,
        section.trials,
        Raster::Eight,
        stage_seed(cfg.seed, StageSeed::Evaluate),
    )?;
    let report = EvaluateReport {
        config_hash: expected,
        mean_accuracy: finetune::mean_accuracy(&rows),
        mean_psnr: finetune::mean_psnr(&rows),
        rows,
    };

    ensure_dir(out)?;
    let csv_path = out.join("evaluate.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &report.rows {
        let psnr = metrics::format_db(r.psnr);
        w.serialize(CsvRow {
            height: r.height,
            width: r.width,
            attack: r.attack.to_string(),
            bit_accuracy: r.accuracy,
            psnr_db: &psnr,
        })?;
    }
    w.flush().map_err(|e| PipelineError::io(&csv_path, e))?;
    write_json(&out.join("evaluate.json"), &report)?;
    Ok(report)
}
