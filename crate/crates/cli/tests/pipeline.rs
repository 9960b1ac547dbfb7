use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use inrmark_cli::pipeline::{self, PretrainRun};
use inrmark_cli::{ExperimentConfig, PipelineError};
use inrmark_core::checkpoint::{Bundle, Stage};
use inrmark_core::metrics::psnr;
use inrmark_core::synth::synth_image;
use inrmark_core::{DistortionSpec, Image};
use serde_json::json;
use tempfile::TempDir;

fn write_config(dir: &Path, value: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn config(dir: &Path, value: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::load(&write_config(dir, value)).unwrap()
}

fn base_config() -> serde_json::Value {
    json!({
        "seed": 3,
        "fit": {"image": "cover.png", "hidden_layers": 2, "hidden_width": 16, "steps": 30, "learning_rate": 1e-3},
        "pretrain": {
            "dataset": "data", "held_out": 1, "resolution": 32, "message_bits": 6,
            "epochs": 2, "batch_size": 2, "pool": ["identity", "gn:0.05"],
            "decoder_widths": [4, 4], "decoder_strides": [1, 2], "encoder_tile": 4, "encoder_tile_channels": 2, "encoder_hidden": 4,
            "save_every": 1
        },
        "embed": {
            "fit_checkpoint": "out/fit.ckpt", "decoder_checkpoint": "out/decoder.ckpt",
            "resolutions": [[32, 32]], "pool": ["identity"], "learning_rate": 1e-4,
            "epochs": 2, "eval_every": 1, "eval_trials": 1
        },
        "evaluate": {
            "checkpoint": "out/watermarked.ckpt",
            "resolutions": [[64, 64], [80, 80], [96, 96]],
            "trials": 1
        }
    })
}

/// Temp dir with a cover image and a small dataset folder.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    synth_image(32, 32, 1).save_png(dir.path().join("cover.png")).unwrap();
    pipeline::run_synth(5, 32, 9, &dir.path().join("data")).unwrap();
    dir
}

/// Runs fit, pretrain and embed in `dir/out`.
fn run_all(dir: &Path, cfg: &ExperimentConfig) -> pipeline::EmbedOutput {
    let out = dir.join("out");
    pipeline::run_fit(cfg, &out).unwrap();
    pipeline::run_pretrain(cfg, &out, PretrainRun::default()).unwrap();
    pipeline::run_embed(cfg, &out).unwrap()
}

fn inrmark() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inrmark"))
}

#[test]
fn fit_writes_checkpoint_with_psnr_and_is_deterministic() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    let a = pipeline::run_fit(&cfg, &dir.path().join("a")).unwrap();
    let b = pipeline::run_fit(&cfg, &dir.path().join("b")).unwrap();
    assert!(a.report.final_psnr.is_finite());
    let bundle = Bundle::load(&a.checkpoint).unwrap();
    assert_eq!(bundle.stage(), Stage::Fit);
    assert_eq!(bundle.manifest.metrics["final_psnr"].as_f64().unwrap(), a.report.final_psnr);
    let wa = Bundle::load(&a.checkpoint).unwrap().arrays;
    let wb = Bundle::load(&b.checkpoint).unwrap().arrays;
    assert_eq!(wa, wb);
    assert!(dir.path().join("a/fit_report.json").exists());
}

#[test]
fn fit_reports_missing_image_path() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), base_config());
    let out = inrmark()
        .args(["fit", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cover.png"), "{stderr}");
}

#[test]
fn pretrain_needs_two_images() {
    let dir = TempDir::new().unwrap();
    pipeline::run_synth(1, 32, 0, &dir.path().join("data")).unwrap();
    let cfg = config(dir.path(), base_config());
    let err = pipeline::run_pretrain(&cfg, &dir.path().join("out"), PretrainRun::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
}

#[test]
fn pretrain_emits_curves_and_decoder_only() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    let r = pipeline::run_pretrain(&cfg, &dir.path().join("out"), PretrainRun::default()).unwrap();
    assert_eq!(r.report.loss_curve.len(), 2);
    assert_eq!(r.report.accuracy_curve.len(), 2);
    assert_eq!(r.report.held_out.len(), 2);
    let dec = Bundle::load(r.decoder_checkpoint.unwrap()).unwrap();
    assert!(dec.has_array_prefix("decoder."));
    assert!(!dec.has_array_prefix("encoder."));
    let state = Bundle::load(&r.state_checkpoint).unwrap();
    assert!(state.has_array_prefix("encoder."));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/pretrain_report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy_curve"].as_array().unwrap().len(), 2);
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    let full = pipeline::run_pretrain(&cfg, &dir.path().join("full"), PretrainRun::default()).unwrap();

    let split = dir.path().join("split");
    let first = pipeline::run_pretrain(&cfg, &split, PretrainRun { resume: false, stop_after: Some(1) }).unwrap();
    assert!(first.decoder_checkpoint.is_none());
    let second = pipeline::run_pretrain(&cfg, &split, PretrainRun { resume: true, stop_after: None }).unwrap();
    assert_eq!(second.resumed_from_epoch, Some(1));
    assert_eq!(second.report.loss_curve, full.report.loss_curve);
    let a = Bundle::load(full.decoder_checkpoint.unwrap()).unwrap();
    let b = Bundle::load(second.decoder_checkpoint.unwrap()).unwrap();
    assert_eq!(a.arrays, b.arrays);

    let mut changed = base_config();
    changed["pretrain"]["strength"] = json!(0.5);
    let cfg2 = config(dir.path(), changed);
    let err = pipeline::run_pretrain(&cfg2, &split, PretrainRun { resume: true, stop_after: None }).unwrap_err();
    assert!(matches!(err, PipelineError::HashMismatch { .. }), "{err}");
}

#[test]
fn embed_refuses_without_decoder() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    pipeline::run_fit(&cfg, &dir.path().join("out")).unwrap();
    let err = pipeline::run_embed(&cfg, &dir.path().join("out")).unwrap_err();
    assert!(err.to_string().contains("decoder.ckpt"), "{err}");
}

#[test]
fn embed_sample_extract_evaluate_round() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    let embed = run_all(dir.path(), &cfg);
    let out = dir.path().join("out");

    let bundle = Bundle::load(&embed.checkpoint).unwrap();
    assert_eq!(bundle.manifest.message.as_ref(), Some(&embed.message));
    assert!(bundle.manifest.metrics["best_mean_accuracy"].is_number());
    assert!(!bundle.has_array_prefix("decoder."));

    // Sampling is deterministic and has the requested size.
    let s1 = out.join("s1.png");
    let s2 = out.join("s2.png");
    pipeline::run_sample(&embed.checkpoint, 70, 50, &s1).unwrap();
    pipeline::run_sample(&embed.checkpoint, 70, 50, &s2).unwrap();
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    assert_eq!(Image::load(&s1).unwrap().size(), (70, 50));

    // Extraction reports one logit per bit and rejects undersized input.
    let s64 = out.join("s64.png");
    pipeline::run_sample(&embed.checkpoint, 64, 64, &s64).unwrap();
    let ex = pipeline::run_extract(&out.join("decoder.ckpt"), &s64, Some(&embed.checkpoint)).unwrap();
    assert_eq!(ex.logits.len(), 6);
    assert_eq!(ex.expected.as_ref(), Some(&embed.message));
    assert!(ex.bit_accuracy.is_some());
    let tiny = out.join("tiny.png");
    pipeline::run_sample(&embed.checkpoint, 16, 16, &tiny).unwrap();
    let err = pipeline::run_extract(&out.join("decoder.ckpt"), &tiny, None).unwrap_err();
    assert!(matches!(err, PipelineError::Core(inrmark_core::Error::Domain(_))), "{err}");

    // 3 resolutions × 7 attacks.
    let report = pipeline::run_evaluate(&cfg, &out).unwrap();
    assert_eq!(report.rows.len(), 21);
    let again = pipeline::run_evaluate(&cfg, &out).unwrap();
    assert_eq!(report.rows, again.rows);
    let csv = fs::read_to_string(out.join("evaluate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(csv.starts_with("height,width,attack,bit_accuracy,psnr_db"));

    // PSNR of the identity row equals PSNR between the sampled PNGs.
    let clean = out.join("clean64.png");
    pipeline::run_sample(&out.join("fit.ckpt"), 64, 64, &clean).unwrap();
    let direct = psnr(&Image::load(&clean).unwrap(), &Image::load(&s64).unwrap()).unwrap();
    let row = report
        .rows
        .iter()
        .find(|r| r.height == 64 && r.attack == DistortionSpec::IDENTITY)
        .unwrap();
    assert!((row.psnr - direct).abs() < 0.01, "{} vs {direct}", row.psnr);
}

#[test]
fn evaluate_rejects_config_drift() {
    let dir = workspace();
    let cfg = config(dir.path(), base_config());
    run_all(dir.path(), &cfg);
    let mut drifted = base_config();
    drifted["embed"]["lambda_img"] = json!(1e5);
    let cfg2 = config(dir.path(), drifted);
    let err = pipeline::run_evaluate(&cfg2, &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::HashMismatch { .. }), "{err}");
    let mut reseeded = base_config();
    reseeded["seed"] = json!(4);
    let err = pipeline::run_evaluate(&config(dir.path(), reseeded), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::HashMismatch { .. }), "{err}");
}

#[test]
fn attack_crop_identity_and_bad_spec() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("in.png");
    synth_image(256, 256, 4).quantized().save_png(&src).unwrap();

    let cropped = pipeline::run_attack(&src, &"crop:0.25".parse().unwrap(), 0, &dir.path().join("c.png")).unwrap();
    assert_eq!(cropped.size(), (128, 128));
    assert_eq!(Image::load(dir.path().join("c.png")).unwrap().size(), (128, 128));

    let id = dir.path().join("id.png");
    pipeline::run_attack(&src, &DistortionSpec::IDENTITY, 0, &id).unwrap();
    let a = Image::load(&src).unwrap().to_rgb8();
    let b = Image::load(&id).unwrap().to_rgb8();
    assert_eq!(a.as_raw(), b.as_raw());

    let out = inrmark()
        .args(["attack", "--spec", "blur:3", "--image"])
        .arg(&src)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_subcommand_writes_images() {
    let dir = TempDir::new().unwrap();
    let out = inrmark()
        .args(["synth", "--count", "3", "--size", "40", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let imgs = pipeline::load_dataset(dir.path(), 40).unwrap();
    assert_eq!(imgs.len(), 3);
}
