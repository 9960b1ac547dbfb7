//! Fine-tuning a fitted network against the frozen decoder so that rasters
//! sampled at every training resolution carry the message.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{bce_with_logits, harden_message, BitMessage, Decoder, MIN_DECODE_SIZE};
use crate::distortion::{apply_distortion, noise_layer, DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{self, bit_accuracy};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{sample_image, sample_image_tape};
use crate::siren::InrParams;
use crate::Rng as StdRng;

pub type Resolution = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub resolutions: Vec<Resolution>,
    pub pool: Vec<DistortionSpec>,
    pub lambda_msg: f64,
    pub lambda_img: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Evaluate (and consider for best-checkpoint selection) every this many epochs.
    pub eval_every: usize,
    /// Random draws averaged per stochastic attack during evaluation.
    pub eval_trials: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            resolutions: vec![(256, 256), (384, 384), (512, 512)],
            pool: DistortionSpec::evaluation_suite(),
            lambda_msg: 3e3,
            lambda_img: 5e5,
            learning_rate: 5e-5,
            epochs: 500,
            eval_every: 10,
            eval_trials: 4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_msg > 0.0 && self.lambda_img > 0.0) || !self.lambda_msg.is_finite() || !self.lambda_img.is_finite() {
            return Err(Error::Config("lambda_msg and lambda_img must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.resolutions.is_empty() || self.pool.is_empty() {
            return Err(Error::Config("resolutions and pool must be non-empty".into()));
        }
        if self.eval_every == 0 || self.eval_trials == 0 {
            return Err(Error::Config("eval_every and eval_trials must be positive".into()));
        }
        for &(h, w) in &self.resolutions {
            for spec in &self.pool {
                check_decodable(spec, (h, w)).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn check_decodable(spec: &DistortionSpec, (h, w): Resolution) -> Result<()> {
    let (oh, ow) = spec.output_size(h, w)?;
    if oh < MIN_DECODE_SIZE || ow < MIN_DECODE_SIZE {
        return Err(Error::Domain(format!(
            "{spec} turns {h}x{w} into {oh}x{ow}, below the decoder minimum"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePair {
    pub resolution: Resolution,
    pub distortion: DistortionSpec,
}

/// `n` i.i.d. fair bits.
pub fn generate_message<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<BitMessage> {
    BitMessage::random(n, rng)
}

/// A uniformly random ordering of `resolutions × pool`.
pub fn epoch_pair_schedule<R: Rng + ?Sized>(
    resolutions: &[Resolution],
    pool: &[DistortionSpec],
    rng: &mut R,
) -> Result<Vec<SchedulePair>> {
    if resolutions.is_empty() || pool.is_empty() {
        return Err(Error::Domain("schedule needs at least one resolution and one distortion".into()));
    }
    let mut pairs: Vec<SchedulePair> = resolutions
        .iter()
        .flat_map(|&resolution| pool.iter().map(move |&distortion| SchedulePair { resolution, distortion }))
        .collect();
    pairs.shuffle(rng);
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub message: f64,
    pub image: f64,
}

/// One optimization step of `f_wm` on `pair`, against the raster `reference`
/// sampled from the frozen clean network at the same resolution.
#[allow(clippy::too_many_arguments)]
fn step_against(
    f_wm: &mut InrParams,
    reference: &Image,
    decoder: &Decoder,
    pair: &SchedulePair,
    message: &BitMessage,
    lambdas: (f64, f64),
    adam: &mut Adam,
    rng: &mut StdRng,
) -> Result<LossBreakdown> {
    let (h, w) = pair.resolution;
    check_decodable(&pair.distortion, pair.resolution)?;
    if message.len() != decoder.message_bits() {
        return Err(Error::Contract(format!(
            "{}-bit message for a {}-bit decoder",
            message.len(),
            decoder.message_bits()
        )));
    }
    let (sampled, tape) = sample_image_tape(f_wm, h, w)?;
    let noised = noise_layer(&sampled, &pair.distortion, rng)?;
    let (logits, dec_tape) = decoder.forward_tape_synced(&noised.image)?;
    let (msg_loss, d_logits) = bce_with_logits(logits.as_slice().expect("contiguous"), message)?;
    let d_noised = decoder.backward(&dec_tape, &d_logits, None);
    let d_msg = noised.backward(&d_noised)?;

    let img_loss = metrics::mse(&sampled, reference)?;
    let (lm, li) = lambdas;
    let total = lm * msg_loss + li * img_loss;
    if !total.is_finite() {
        return Err(Error::Divergence {
            stage: "finetune",
            step: adam.state.step as usize,
            loss: total,
        });
    }
    let n = sampled.data().len() as f32;
    let img_scale = (2.0 * li) as f32 / n;
    let mut grad = d_msg;
    ndarray::Zip::from(grad.data_mut())
        .and(sampled.data())
        .and(reference.data())
        .for_each(|g, &s, &r| *g = lm as f32 * *g + img_scale * (s - r));
    let grads = tape.backward(f_wm, &grad)?;
    adam.step(f_wm, &grads.slices());
    Ok(LossBreakdown {
        total,
        message: msg_loss,
        image: img_loss,
    })
}

/// Single fine-tuning step. Samples `f_im` at the pair's resolution each call;
/// [`Finetuner`] caches those rasters instead.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    f_wm: &mut InrParams,
    f_im: &InrParams,
    decoder: &Decoder,
    pair: &SchedulePair,
    message: &BitMessage,
    config: &FinetuneConfig,
    adam: &mut Adam,
    rng: &mut StdRng,
) -> Result<LossBreakdown> {
    let reference = sample_image(f_im, pair.resolution.0, pair.resolution.1)?;
    step_against(f_wm, &reference, decoder, pair, message, (config.lambda_msg, config.lambda_img), adam, rng)
}

/// Bit accuracy and fidelity of one (resolution, attack) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub height: usize,
    pub width: usize,
    pub attack: DistortionSpec,
    pub accuracy: f64,
    #[serde(with = "metrics::db_serde")]
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Raster {
    /// Clamped floating-point samples.
    Float,
    /// Samples rounded to 8 bits, as written to PNG.
    Eight,
}

impl Raster {
    fn export(self, image: &Image) -> Image {
        match self {
            Raster::Float => image.clamped(),
            Raster::Eight => image.quantized(),
        }
    }
}

/// Samples both networks at every resolution, attacks the watermarked raster
/// with every spec and decodes it. Stochastic attacks are averaged over
/// `trials` draws; PSNR compares the exported clean and watermarked rasters.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_grid(
    f_wm: &InrParams,
    f_im: &InrParams,
    decoder: &Decoder,
    message: &BitMessage,
    resolutions: &[Resolution],
    attacks: &[DistortionSpec],
    trials: usize,
    raster: Raster,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(resolutions.len() * attacks.len());
    for &(h, w) in resolutions {
        let marked = raster.export(&sample_image(f_wm, h, w)?);
        let clean = raster.export(&sample_image(f_im, h, w)?);
        let psnr = metrics::psnr(&clean, &marked)?;
        for attack in attacks {
            check_decodable(attack, (h, w))?;
            let draws = match attack.kind {
                DistortionKind::GaussianNoise | DistortionKind::Crop => trials.max(1),
                _ => 1,
            };
            let mut total = 0.0;
            for _ in 0..draws {
                let mut attacked = apply_distortion(&marked, attack, &mut rng)?;
                if raster == Raster::Eight {
                    attacked = attacked.quantized();
                }
                let decoded = harden_message(&decoder.decode(&attacked)?);
                total += bit_accuracy(message, &decoded)?;
            }
            rows.push(EvalRow {
                height: h,
                width: w,
                attack: *attack,
                accuracy: total / draws as f64,
                psnr,
            });
        }
    }
    Ok(rows)
}

pub fn mean_accuracy(rows: &[EvalRow]) -> f64 {
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len().max(1) as f64
}

/// Mean PSNR over distinct resolutions; infinite if any resolution is identical.
pub fn mean_psnr(rows: &[EvalRow]) -> f64 {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.iter().any(|&(h, w, _)| (h, w) == (r.height, r.width)) {
            seen.push((r.height, r.width, r.psnr));
        }
    }
    seen.iter().map(|s| s.2).sum::<f64>() / seen.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub mean_accuracy: f64,
    #[serde(with = "metrics::db_serde")]
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean losses per epoch.
    pub loss_curve: Vec<LossBreakdown>,
    pub history: Vec<EvalSnapshot>,
    pub best_epoch: usize,
    pub best: Vec<EvalRow>,
    pub best_mean_accuracy: f64,
    #[serde(with = "metrics::db_serde")]
    pub best_mean_psnr: f64,
    pub wall_time: f64,
}

/// Whether `(acc, psnr)` beats the current best: higher mean accuracy wins,
/// ties go to the higher PSNR.
pub fn is_better(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((acc, psnr)) => candidate.0 > acc || (candidate.0 == acc && candidate.1 > psnr),
    }
}

/// Stage-3 optimizer state with cached clean rasters.
pub struct Finetuner<'a> {
    pub f_wm: InrParams,
    f_im: &'a InrParams,
    decoder: &'a Decoder,
    message: BitMessage,
    config: FinetuneConfig,
    adam: Adam,
    references: HashMap<Resolution, Image>,
    pub epoch: usize,
}

impl<'a> Finetuner<'a> {
    pub fn new(f_im: &'a InrParams, decoder: &'a Decoder, message: BitMessage, config: FinetuneConfig) -> Result<Self> {
        config.validate()?;
        if message.len() != decoder.message_bits() {
            return Err(Error::Contract(format!(
                "{}-bit message for a {}-bit decoder",
                message.len(),
                decoder.message_bits()
            )));
        }
        let references = config
            .resolutions
            .iter()
            .map(|&(h, w)| Ok(((h, w), sample_image(f_im, h, w)?)))
            .collect::<Result<_>>()?;
        Ok(Finetuner {
            f_wm: f_im.clone(),
            f_im,
            decoder,
            message,
            adam: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            config,
            references,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.config
    }

    pub fn step(&mut self, pair: &SchedulePair, rng: &mut StdRng) -> Result<LossBreakdown> {
        let reference = match self.references.get(&pair.resolution) {
            Some(r) => r,
            None => {
                let (h, w) = pair.resolution;
                self.references.insert(pair.resolution, sample_image(self.f_im, h, w)?);
                &self.references[&pair.resolution]
            }
        };
        step_against(
            &mut self.f_wm,
            reference,
            self.decoder,
            pair,
            &self.message,
            (self.config.lambda_msg, self.config.lambda_img),
            &mut self.adam,
            rng,
        )
    }

    /// Drains one shuffled schedule; returns the mean losses and the pairs run.
    pub fn run_epoch(&mut self) -> Result<(LossBreakdown, Vec<SchedulePair>)> {
        let mut rng = StdRng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let schedule = epoch_pair_schedule(&self.config.resolutions, &self.config.pool, &mut rng)?;
        let mut sum = LossBreakdown {
            total: 0.0,
            message: 0.0,
            image: 0.0,
        };
        for pair in &schedule {
            let l = self.step(pair, &mut rng)?;
            sum.total += l.total;
            sum.message += l.message;
            sum.image += l.image;
        }
        let n = schedule.len() as f64;
        self.epoch += 1;
        Ok((
            LossBreakdown {
                total: sum.total / n,
                message: sum.message / n,
                image: sum.image / n,
            },
            schedule,
        ))
    }

    pub fn evaluate(&self) -> Result<Vec<EvalRow>> {
        evaluate_grid(
            &self.f_wm,
            self.f_im,
            self.decoder,
            &self.message,
            &self.config.resolutions,
            &self.config.pool,
            self.config.eval_trials,
            Raster::Float,
            self.config.seed ^ 0xE7A1,
        )
    }
}

/// Runs all epochs and returns the best evaluated network.
pub fn finetune(
    f_im: &InrParams,
    decoder: &Decoder,
    message: &BitMessage,
    config: &FinetuneConfig,
) -> Result<(InrParams, FinetuneReport)> {
    let started = Instant::now();
    let mut tuner = Finetuner::new(f_im, decoder, message.clone(), config.clone())?;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut history = Vec::new();
    let mut best: Option<(InrParams, usize, Vec<EvalRow>, (f64, f64))> = None;
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        let (loss, schedule) = tuner.run_epoch()?;
        steps += schedule.len();
        loss_curve.push(loss);
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let rows = tuner.evaluate()?;
            let score = (mean_accuracy(&rows), mean_psnr(&rows));
            history.push(EvalSnapshot {
                epoch,
                mean_accuracy: score.0,
                mean_psnr: score.1,
            });
            if is_better(score, best.as_ref().map(|b| b.3)) {
                best = Some((tuner.f_wm.clone(), epoch, rows, score));
            }
        }
    }
    let (params, best_epoch, rows, score) = match best {
        Some(b) => b,
        None => {
            let rows = tuner.evaluate()?;
            let score = (mean_accuracy(&rows), mean_psnr(&rows));
            (tuner.f_wm.clone(), 0, rows, score)
        }
    };
    let report = FinetuneReport {
        epochs: config.epochs,
        steps,
        loss_curve,
        history,
        best_epoch,
        best: rows,
        best_mean_accuracy: score.0,
        best_mean_psnr: score.1,
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
