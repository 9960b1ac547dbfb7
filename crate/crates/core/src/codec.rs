//! Bit messages, the any-resolution message decoder, and the encoder that is
//! only used to pre-train it.
//!
//! The decoder is a stack of ReLU convolutions (the first at stride 1, the
//! rest at stride 2) followed by global average pooling and a linear head, so
//! it emits `n` logits for any input of at least [`MIN_DECODE_SIZE`] pixels per
//! side. The encoder expands the message through a linear layer into a small
//! learned tile, repeats it over the image, and turns the concatenation of
//! image and tile into a bounded residual.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::distortion::{
    apply_distortion, noise_layer, resize_bilinear, resize_bilinear_backward, sample_distortion, DistortionSpec,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::bit_accuracy;
use crate::nn::{self, Conv2d, Linear};
use crate::optim::{cosine_lr, Adam, AdamConfig, Lamb, LambConfig, MomentState, Parameters};
use crate::Rng as StdRng;

/// Smallest raster side the decoder accepts.
pub const MIN_DECODE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Domain("message must have at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Domain(format!("message bits must be 0 or 1, found {b}")));
        }
        Ok(BitMessage { bits })
    }

    /// `n` independent fair bits.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..n).map(|_| rng.random_range(0..=1u8)).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        BitMessage {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Targets in `{0, 1}` for the cross-entropy loss.
    pub fn targets(&self) -> Array1<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// One-hot pair per bit, `[b_0.., 1 - b_0..]`, fed to the encoder. Each bit
    /// value switches on its own pattern, so a detector that ignores the tile
    /// phase can still tell the two values apart.
    fn one_hot_pairs(&self) -> Array1<f32> {
        let ones = self.bits.iter().map(|&b| b as f32);
        let zeros = self.bits.iter().map(|&b| (1 - b) as f32);
        ones.chain(zeros).collect()
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for BitMessage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(Error::Domain(format!("invalid bit character {c:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        BitMessage::new(bits)
    }
}

impl TryFrom<String> for BitMessage {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitMessage> for String {
    fn from(m: BitMessage) -> String {
        m.to_string()
    }
}

/// Raw decoder outputs, one per message bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageLogits {
    values: Vec<f32>,
}

impl MessageLogits {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("logits must be finite".into()));
        }
        Ok(MessageLogits { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sign thresholding: a bit is 1 iff its logit is strictly positive.
pub fn harden_message(logits: &MessageLogits) -> BitMessage {
    BitMessage {
        bits: logits.values.iter().map(|&v| u8::from(v > 0.0)).collect(),
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and the message bits,
/// evaluated in the overflow-free form `max(z,0) - z·y + ln(1 + e^-|z|)`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &[f32], message: &BitMessage) -> Result<(f64, Array1<f32>)> {
    if logits.len() != message.len() {
        return Err(Error::Contract(format!(
            "{} logits for a {}-bit message",
            logits.len(),
            message.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(message.bits())
        .map(|(&z, &y)| {
            let (z, y) = (z as f64, y as f64);
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            ((1.0 / (1.0 + (-z).exp()) - y) / n) as f32
        })
        .collect();
    Ok((loss / n, grad))
}

/// Negative slope of the decoder activations. With a plain ReLU a decoder
/// trained only on marked images can go fully inactive on unmarked ones,
/// which leaves fine-tuning with no input gradient to follow.
const LEAK: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub message_bits: usize,
    /// Output channels of each convolution.
    pub widths: Vec<usize>,
    /// Stride of each convolution.
    pub strides: Vec<usize>,
    /// Period of the translation search run by [`Decoder::decode`]. Set it to
    /// the encoder tile; 1 disables the search.
    pub sync_period: usize,
    /// Short side the decoder was trained at. When set, [`Decoder::decode`]
    /// also tries the input shrunk to this scale, or to half of it when the
    /// input is smaller (the scale a halving resize leaves behind).
    pub canonical_size: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            message_bits: 30,
            widths: vec![32, 32, 64, 64],
            strides: vec![1, 2, 2, 2],
            sync_period: 8,
            canonical_size: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.message_bits == 0
            || self.widths.is_empty()
            || self.widths.contains(&0)
            || self.strides.len() != self.widths.len()
            || self.strides.contains(&0)
            || self.sync_period == 0
            || self.canonical_size.is_some_and(|c| c < MIN_DECODE_SIZE)
        {
            return Err(Error::Config(format!("invalid decoder configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

pub struct DecoderTape {
    /// Size of the caller's image when it was resampled before decoding.
    resampled_from: Option<(usize, usize)>,
    cols: Vec<ndarray::Array2<f32>>,
    sizes: Vec<(usize, usize)>,
    outputs: Vec<Array3<f32>>,
    pooled: Array1<f32>,
}

impl Decoder {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut in_ch = 3;
        let convs = config
            .widths
            .iter()
            .enumerate()
            .zip(&config.strides)
            .map(|((_, &w), &stride)| {
                let conv = Conv2d::init(in_ch, w, stride, &mut rng);
                in_ch = w;
                conv
            })
            .collect();
        let head = Linear::init(in_ch, config.message_bits, &mut rng);
        Ok(Decoder {
            config: config.clone(),
            convs,
            head,
        })
    }

    pub fn message_bits(&self) -> usize {
        self.config.message_bits
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            config: self.config.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let (h, w) = image.size();
        if h < MIN_DECODE_SIZE || w < MIN_DECODE_SIZE {
            return Err(Error::Domain(format!(
                "decoder needs at least {MIN_DECODE_SIZE}x{MIN_DECODE_SIZE} pixels, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Decodes after synchronizing. Each scale hypothesis (the input as given
    /// and, with [`DecoderConfig::canonical_size`], the input resampled to the
    /// training scale) is cyclically translated by every offset in
    /// `[0, sync_period)^2`, and the logits with the largest total magnitude
    /// are kept. A crop can land anywhere relative to the message tile, and a
    /// raster sampled at another resolution carries the tile at another
    /// scale, while the strided convolutions read one phase at one scale.
    pub fn decode(&self, image: &Image) -> Result<MessageLogits> {
        self.check_input(image)?;
        let mut candidates = vec![image.clone()];
        if let Some(canon) = self.canonicalize(image) {
            candidates.push(canon);
        }
        let p = self.config.sync_period;
        let mut best: Option<(f32, Array1<f32>)> = None;
        for candidate in &candidates {
            for dy in 0..p {
                for dx in 0..p {
                    let (logits, _) = if dy == 0 && dx == 0 {
                        self.forward_tape(candidate)?
                    } else {
                        self.forward_tape(&roll(candidate, dy, dx))?
                    };
                    let confidence = logits.iter().map(|v| v.abs()).sum::<f32>();
                    if best.as_ref().is_none_or(|(c, _)| confidence > *c) {
                        best = Some((confidence, logits));
                    }
                }
            }
        }
        let (_, logits) = best.expect("at least one hypothesis");
        MessageLogits::new(logits.to_vec())
    }

    /// The input shrunk so its short side equals the canonical size, or half
    /// of it for inputs below the canonical size. Never upsamples: a blurred
    /// tile reads worse than a crisp one at the smaller scale. `None` when
    /// nothing needs resampling.
    fn canonicalize(&self, image: &Image) -> Option<Image> {
        let full = self.config.canonical_size?;
        let (h, w) = image.size();
        let short = h.min(w);
        let c = if short >= full {
            full
        } else if full / 2 >= MIN_DECODE_SIZE && short >= full / 2 {
            full / 2
        } else {
            return None;
        };
        if short == c {
            return None;
        }
        let scale = |n: usize| ((n * c) as f64 / short as f64).round().max(1.0) as usize;
        Some(resize_bilinear(image, scale(h), scale(w)))
    }

    /// Logits at the input's own alignment, without the translation search.
    pub fn decode_aligned(&self, image: &Image) -> Result<MessageLogits> {
        let (logits, _) = self.forward_tape(image)?;
        MessageLogits::new(logits.to_vec())
    }

    /// Differentiable decode at zero offset under whichever scale hypothesis
    /// [`Decoder::decode`] would trust more. The gradient from
    /// [`Decoder::backward`] is taken w.r.t. `image` itself.
    pub fn forward_tape_synced(&self, image: &Image) -> Result<(Array1<f32>, DecoderTape)> {
        let native = self.forward_tape(image)?;
        let Some(canon) = self.canonicalize(image) else {
            return Ok(native);
        };
        let (logits, mut tape) = self.forward_tape(&canon)?;
        let mass = |l: &Array1<f32>| l.iter().map(|v| v.abs()).sum::<f32>();
        if mass(&logits) > mass(&native.0) {
            tape.resampled_from = Some(image.size());
            Ok((logits, tape))
        } else {
            Ok(native)
        }
    }

    pub fn forward_tape(&self, image: &Image) -> Result<(Array1<f32>, DecoderTape)> {
        self.check_input(image)?;
        let mut x = image.data().clone();
        let mut tape = DecoderTape {
            resampled_from: None,
            cols: Vec::with_capacity(self.convs.len()),
            sizes: Vec::with_capacity(self.convs.len()),
            outputs: Vec::with_capacity(self.convs.len()),
            pooled: Array1::zeros(0),
        };
        for conv in &self.convs {
            let (_, h, w) = x.dim();
            let (mut y, cols) = conv.forward(&x);
            nn::leaky_relu_inplace(&mut y, LEAK);
            tape.cols.push(cols);
            tape.sizes.push((h, w));
            tape.outputs.push(y.clone());
            x = y;
        }
        tape.pooled = nn::global_avg_pool(&x);
        let logits = self.head.forward(tape.pooled.view());
        Ok((logits, tape))
    }

    /// Returns `dL/dimage`; accumulates parameter gradients when `grads` is given.
    pub fn backward(&self, tape: &DecoderTape, d_logits: &Array1<f32>, mut grads: Option<&mut Decoder>) -> Image {
        let d_pooled = self
            .head
            .backward(tape.pooled.view(), d_logits.view(), grads.as_deref_mut().map(|g| &mut g.head));
        let last = tape.outputs.last().expect("at least one conv");
        let mut d = nn::global_avg_pool_backward(d_pooled.view(), (last.dim().1, last.dim().2));
        for (i, conv) in self.convs.iter().enumerate().rev() {
            nn::leaky_relu_backward(&mut d, &tape.outputs[i], LEAK);
            let g = grads.as_deref_mut().map(|g| &mut g.convs[i]);
            d = conv.backward(&tape.cols[i], tape.sizes[i], &d, g);
        }
        let d = Image::new(d).expect("three input channels");
        match tape.resampled_from {
            Some((h, w)) => resize_bilinear_backward(&d, h, w),
            None => d,
        }
    }
}

/// `out(c, i, j) = in(c, (i + dy) mod h, (j + dx) mod w)`.
fn roll(image: &Image, dy: usize, dx: usize) -> Image {
    let data = image.data();
    let (_, h, w) = data.dim();
    let rolled = Array3::from_shape_fn(data.dim(), |(c, i, j)| data[[c, (i + dy) % h, (j + dx) % w]]);
    Image::new(rolled).expect("same shape and values")
}

pub fn decode_message(decoder: &Decoder, image: &Image) -> Result<MessageLogits> {
    decoder.decode(image)
}

impl Parameters for Decoder {
    fn param_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for c in &self.convs {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub message_bits: usize,
    /// Side of the learned message tile.
    pub tile: usize,
    pub tile_channels: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            message_bits: 30,
            tile: 8,
            tile_channels: 8,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub expand: Linear,
    pub convs: Vec<Conv2d>,
}

pub struct EncoderTape {
    code: Array1<f32>,
    cols: Vec<ndarray::Array2<f32>>,
    hidden: Vec<Array3<f32>>,
    residual: Array3<f32>,
    size: (usize, usize),
}

impl Encoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        if config.message_bits == 0 || config.tile == 0 || config.tile_channels == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("invalid encoder configuration {config:?}")));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let t = config.tile;
        let expand = Linear::init(2 * config.message_bits, config.tile_channels * t * t, &mut rng);
        let convs = vec![
            Conv2d::init(3 + config.tile_channels, config.hidden, 1, &mut rng),
            Conv2d::init(config.hidden, config.hidden, 1, &mut rng),
            Conv2d::init(config.hidden, 3, 1, &mut rng),
        ];
        Ok(Encoder {
            config: config.clone(),
            expand,
            convs,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            config: self.config.clone(),
            expand: self.expand.zeros_like(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn encode_residual(&self, image: &Image, message: &BitMessage) -> Result<Image> {
        let (residual, _) = self.forward_tape(image, message)?;
        Ok(residual)
    }

    pub fn forward_tape(&self, image: &Image, message: &BitMessage) -> Result<(Image, EncoderTape)> {
        if message.len() != self.config.message_bits {
            return Err(Error::Contract(format!(
                "encoder expects {} bits, got {}",
                self.config.message_bits,
                message.len()
            )));
        }
        let (h, w) = image.size();
        if h < MIN_DECODE_SIZE || w < MIN_DECODE_SIZE {
            return Err(Error::Domain(format!(
                "encoder needs at least {MIN_DECODE_SIZE}x{MIN_DECODE_SIZE} pixels, got {h}x{w}"
            )));
        }
        let (t, tc) = (self.config.tile, self.config.tile_channels);
        let code = message.one_hot_pairs();
        let tile = self.expand.forward(code.view());
        let tiled = Array3::from_shape_fn((tc, h, w), |(c, i, j)| tile[c * t * t + (i % t) * t + j % t]);
        let mut x = concatenate(Axis(0), &[image.data().view(), tiled.view()]).expect("matching sizes");
        let mut cols = Vec::with_capacity(3);
        let mut hidden = Vec::with_capacity(2);
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut y, c) = conv.forward(&x);
            cols.push(c);
            if i + 1 < self.convs.len() {
                nn::relu_inplace(&mut y);
                hidden.push(y.clone());
            } else {
                y.mapv_inplace(f32::tanh);
            }
            x = y;
        }
        let residual = Image::new(x.clone())?;
        Ok((
            residual,
            EncoderTape {
                code,
                cols,
                hidden,
                residual: x,
                size: (h, w),
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/dresidual`.
    pub fn backward(&self, tape: &EncoderTape, d_residual: &Image, grads: &mut Encoder) {
        let mut d = d_residual.data().clone();
        ndarray::Zip::from(&mut d)
            .and(&tape.residual)
            .for_each(|g, &r| *g *= 1.0 - r * r);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            if i + 1 < self.convs.len() {
                nn::relu_backward(&mut d, &tape.hidden[i]);
            }
            d = conv.backward(&tape.cols[i], tape.size, &d, Some(&mut grads.convs[i]));
        }
        let (t, tc) = (self.config.tile, self.config.tile_channels);
        let d_tiled = d.slice(s![3.., .., ..]);
        let mut d_tile = Array1::<f32>::zeros(tc * t * t);
        for ((c, i, j), &v) in d_tiled.indexed_iter() {
            d_tile[c * t * t + (i % t) * t + j % t] += v;
        }
        self.expand
            .backward(tape.code.view(), d_tile.view(), Some(&mut grads.expand));
    }
}

impl Parameters for Encoder {
    fn param_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.expand.weight.as_slice().expect("standard layout"),
            self.expand.bias.as_slice().expect("standard layout"),
        ];
        for c in &self.convs {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.expand.weight.as_slice_mut().expect("standard layout"),
            self.expand.bias.as_slice_mut().expect("standard layout"),
        ];
        for c in &mut self.convs {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

pub fn encode_residual(encoder: &Encoder, image: &Image, message: &BitMessage) -> Result<Image> {
    encoder.encode_residual(image, message)
}

/// `I_w = I_o + alpha · I_r`, unclamped.
pub fn make_watermarked(image: &Image, residual: &Image, alpha: f32) -> Result<Image> {
    image.add_scaled(residual, alpha)
}

/// Encoder and decoder trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Parameters for Codec {
    fn param_slices(&self) -> Vec<&[f32]> {
        let mut v = self.encoder.param_slices();
        v.extend(self.decoder.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.decoder.param_slices_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    /// Desk-scale fallback.
    Adam,
}

/// A block of epochs trained at a fixed residual strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthPhase {
    pub strength: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Side length training images are resized to.
    pub resolution: usize,
    pub message_bits: usize,
    /// Residual strength `alpha`.
    pub strength: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Epochs at `strength`, after any warmup.
    pub epochs: usize,
    /// Phases run before the main one, usually at larger strengths. A decoder
    /// trained only on faint residuals from scratch rarely gets going, and one
    /// trained only on strong residuals ignores faint ones. Each phase restarts
    /// the learning-rate cycle and the optimizer moments.
    pub warmup: Vec<StrengthPhase>,
    pub batch_size: usize,
    pub pool: Vec<DistortionSpec>,
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            resolution: 256,
            message_bits: 30,
            strength: 1.0,
            optimizer: OptimizerKind::Lamb,
            learning_rate: 1e-2,
            min_learning_rate: 1e-6,
            epochs: 500,
            warmup: Vec::new(),
            batch_size: 16,
            pool: {
                let mut pool = vec![DistortionSpec::IDENTITY];
                pool.extend(DistortionSpec::training_suite());
                pool
            },
            decoder: DecoderConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0) {
            return Err(Error::Config(format!("strength must be positive, got {}", self.strength)));
        }
        if self.warmup.iter().any(|p| !(p.strength > 0.0) || p.epochs == 0) {
            return Err(Error::Config("warmup phases need a positive strength and epochs".into()));
        }
        if !(self.learning_rate > 0.0) || self.min_learning_rate < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.message_bits == 0 {
            return Err(Error::Config("batch_size and message_bits must be positive".into()));
        }
        if self.resolution < MIN_DECODE_SIZE {
            return Err(Error::Config(format!("resolution must be at least {MIN_DECODE_SIZE}")));
        }
        if self.pool.is_empty() {
            return Err(Error::Config("distortion pool is empty".into()));
        }
        for spec in &self.pool {
            spec.validate()?;
            let (h, w) = spec.output_size(self.resolution, self.resolution)?;
            if h < MIN_DECODE_SIZE || w < MIN_DECODE_SIZE {
                return Err(Error::Config(format!(
                    "{spec} shrinks {0}x{0} training images below the decoder minimum",
                    self.resolution
                )));
            }
        }
        self.decoder.validate()?;
        if self.decoder.message_bits != self.message_bits || self.encoder.message_bits != self.message_bits {
            return Err(Error::Config("encoder/decoder message_bits must equal message_bits".into()));
        }
        Ok(())
    }

    /// Warmup phases followed by the main phase.
    pub fn phases(&self) -> Vec<StrengthPhase> {
        let mut phases = self.warmup.clone();
        phases.push(StrengthPhase {
            strength: self.strength,
            epochs: self.epochs,
        });
        phases
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup.iter().map(|p| p.epochs).sum::<usize>() + self.epochs
    }

    /// The phase containing `epoch` and the epoch at which it starts.
    fn phase_at(&self, epoch: usize) -> (StrengthPhase, usize) {
        let mut start = 0;
        let phases = self.phases();
        for phase in &phases {
            if epoch < start + phase.epochs {
                return (*phase, start);
            }
            start += phase.epochs;
        }
        (*phases.last().expect("main phase"), start)
    }

    /// Copies `message_bits` into the network sub-configurations.
    pub fn with_message_bits(mut self, n: usize) -> Self {
        self.message_bits = n;
        self.decoder.message_bits = n;
        self.encoder.message_bits = n;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean training bit accuracy (%) per epoch.
    pub accuracy_curve: Vec<f64>,
    /// Held-out accuracy (%) per attack, evaluated after the last epoch.
    pub held_out: Vec<AttackAccuracy>,
    pub held_out_mean: f64,
    pub epochs: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: DistortionSpec,
    pub accuracy: f64,
}

/// Resumable state of the joint encoder/decoder optimization.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub codec: Codec,
    pub moments: MomentState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub report: TrainReport,
    steps_per_epoch: usize,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let codec = Codec {
            encoder: Encoder::init(&config.encoder, config.seed ^ 0xE4C0)?,
            decoder: Decoder::init(&config.decoder, config.seed ^ 0xDEC0)?,
        };
        Ok(Pretrainer {
            steps_per_epoch: train_len.div_ceil(config.batch_size),
            config,
            codec,
            moments: MomentState::default(),
            epoch: 0,
            report: TrainReport::default(),
        })
    }

    /// Rebuilds a trainer from saved weights and optimizer moments.
    pub fn resume(config: PretrainConfig, train_len: usize, codec: Codec, moments: MomentState, report: TrainReport) -> Result<Self> {
        let mut t = Pretrainer::new(config, train_len)?;
        t.epoch = report.epochs;
        t.codec = codec;
        t.moments = moments;
        t.report = report;
        Ok(t)
    }

    fn epoch_rng(&self, epoch: usize) -> StdRng {
        let mut rng = StdRng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    /// Runs one pass over `train` and returns `(mean loss, mean accuracy)`.
    pub fn run_epoch(&mut self, train: &[Image]) -> Result<(f64, f64)> {
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (phase, phase_start) = self.config.phase_at(self.epoch);
        if self.epoch == phase_start && phase_start > 0 {
            self.moments = MomentState::default();
        }
        let alpha = phase.strength as f32;
        let phase_steps = phase.epochs * self.steps_per_epoch;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let step = (self.epoch - phase_start) * self.steps_per_epoch + b;
            let mut grads = Codec {
                encoder: self.codec.encoder.zeros_like(),
                decoder: self.codec.decoder.zeros_like(),
            };
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let image = &train[idx];
                let message = BitMessage::random(self.config.message_bits, &mut rng)?;
                let (residual, enc_tape) = self.codec.encoder.forward_tape(image, &message)?;
                let watermarked = make_watermarked(image, &residual, alpha)?;
                let spec = sample_distortion(&self.config.pool, &mut rng)?;
                let noised = noise_layer(&watermarked, &spec, &mut rng)?;
                let (logits, dec_tape) = self.codec.decoder.forward_tape(&noised.image)?;
                let (loss, mut d_logits) = bce_with_logits(logits.as_slice().expect("contiguous"), &message)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        stage: "pretrain",
                        step: self.epoch * self.steps_per_epoch + b,
                        loss,
                    });
                }
                batch_loss += loss;
                let decoded = harden_message(&MessageLogits { values: logits.to_vec() });
                acc_sum += bit_accuracy(&message, &decoded)?;
                d_logits *= scale;
                let d_noised = self
                    .codec
                    .decoder
                    .backward(&dec_tape, &d_logits, Some(&mut grads.decoder));
                let mut d_residual = noised.backward(&d_noised)?;
                d_residual.data_mut().mapv_inplace(|g| g * alpha);
                self.codec
                    .encoder
                    .backward(&enc_tape, &d_residual, &mut grads.encoder);
            }
            loss_sum += batch_loss;
            let lr = cosine_lr(step, phase_steps, self.config.learning_rate, self.config.min_learning_rate);
            let grad_slices = grads.param_slices();
            match self.config.optimizer {
                OptimizerKind::Lamb => {
                    let mut opt = Lamb {
                        config: LambConfig::default(),
                        state: std::mem::take(&mut self.moments),
                    };
                    opt.step_with_lr(&mut self.codec, &grad_slices, lr);
                    self.moments = opt.state;
                }
                OptimizerKind::Adam => {
                    let mut opt = Adam {
                        config: AdamConfig::with_lr(lr),
                        state: std::mem::take(&mut self.moments),
                    };
                    opt.step_with_lr(&mut self.codec, &grad_slices, lr);
                    self.moments = opt.state;
                }
            }
        }
        let n = train.len() as f64;
        let stats = (loss_sum / n, acc_sum / n);
        self.epoch += 1;
        self.report.epochs = self.epoch;
        self.report.loss_curve.push(stats.0);
        self.report.accuracy_curve.push(stats.1);
        Ok(stats)
    }

    /// Bit accuracy of freshly watermarked `images` under each attack in
    /// `attacks`, one random message per image and attack.
    pub fn evaluate(&self, images: &[Image], attacks: &[DistortionSpec], seed: u64) -> Result<Vec<AttackAccuracy>> {
        let mut rng = StdRng::seed_from_u64(seed);
        let alpha = self.config.strength as f32;
        attacks
            .iter()
            .map(|attack| {
                let mut total = 0.0;
                for image in images {
                    let message = BitMessage::random(self.config.message_bits, &mut rng)?;
                    let residual = self.codec.encoder.encode_residual(image, &message)?;
                    let watermarked = make_watermarked(image, &residual, alpha)?;
                    let attacked = apply_distortion(&watermarked, attack, &mut rng)?;
                    let decoded = harden_message(&self.codec.decoder.decode(&attacked)?);
                    total += bit_accuracy(&message, &decoded)?;
                }
                Ok(AttackAccuracy {
                    attack: *attack,
                    accuracy: total / images.len().max(1) as f64,
                })
            })
            .collect()
    }
}

/// Trains encoder and decoder end to end and returns only the decoder.
///
/// `held_out` images (possibly empty) are scored under every attack in the
/// pool after training.
pub fn pretrain_decoder(config: &PretrainConfig, train: &[Image], held_out: &[Image]) -> Result<(Decoder, TrainReport)> {
    let started = Instant::now();
    let mut trainer = Pretrainer::new(config.clone(), train.len())?;
    while !trainer.is_done() {
        trainer.run_epoch(train)?;
    }
    finish_pretraining(trainer, held_out, started)
}

pub fn finish_pretraining(trainer: Pretrainer, held_out: &[Image], started: Instant) -> Result<(Decoder, TrainReport)> {
    let mut report = trainer.report.clone();
    if !held_out.is_empty() {
        report.held_out = trainer.evaluate(held_out, &trainer.config.pool, trainer.config.seed ^ 0x5EED)?;
        report.held_out_mean =
            report.held_out.iter().map(|a| a.accuracy).sum::<f64>() / report.held_out.len() as f64;
    }
    report.wall_time += started.elapsed().as_secs_f64();
    Ok((trainer.codec.decoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::new(Array3::from_shape_simple_fn((3, h, w), || r.random::<f32>())).unwrap()
    }

    #[test]
    fn message_validation_and_text_form() {
        assert!(BitMessage::new(vec![]).is_err());
        assert!(BitMessage::new(vec![0, 2]).is_err());
        let m: BitMessage = "0110".parse().unwrap();
        assert_eq!(m.bits(), &[0, 1, 1, 0]);
        assert_eq!(m.to_string(), "0110");
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"0110\"");
        assert!("01x".parse::<BitMessage>().is_err());
    }

    #[test]
    fn harden_examples() {
        let l = MessageLogits::new(vec![-0.3, 2.1, 0.0]).unwrap();
        assert_eq!(harden_message(&l).bits(), &[0, 1, 0]);
        let pos = MessageLogits::new(vec![0.1; 5]).unwrap();
        assert_eq!(harden_message(&pos).bits(), &[1; 5]);
        let signs = MessageLogits::new(vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let once = harden_message(&signs);
        let relogit = MessageLogits::new(once.bits().iter().map(|&b| b as f32 * 2.0 - 1.0).collect()).unwrap();
        assert_eq!(harden_message(&relogit), once);
        assert!(MessageLogits::new(vec![f32::NAN]).is_err());
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let m: BitMessage = "0101".parse().unwrap();
        let (loss, grad) = bce_with_logits(&[0.0; 4], &m).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
        assert_eq!(grad.to_vec(), vec![0.125, -0.125, 0.125, -0.125]);
        // Large logits do not overflow.
        let (loss, _) = bce_with_logits(&[1e4, -1e4, 1e4, -1e4], &m).unwrap();
        assert!(loss.is_finite() && loss > 1e3);
        assert!(bce_with_logits(&[0.0; 3], &m).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let m: BitMessage = "10110".parse().unwrap();
        let z = [0.3f32, -1.2, 2.0, 0.05, -0.7];
        let (_, grad) = bce_with_logits(&z, &m).unwrap();
        for i in 0..z.len() {
            let h = 1e-3;
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let fd = (bce_with_logits(&zp, &m).unwrap().0 - bce_with_logits(&zm, &m).unwrap().0) / (2.0 * h as f64);
            assert!((fd - grad[i] as f64).abs() < 1e-4, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn decoder_output_length_is_resolution_independent() {
        let dec = Decoder::init(&DecoderConfig { message_bits: 30, ..Default::default() }, 0).unwrap();
        for (h, w) in [(256, 256), (128, 200), (32, 32), (33, 71), (97, 40)] {
            let logits = decode_message(&dec, &noise_image(h, w, 1)).unwrap();
            assert_eq!(logits.len(), 30, "{h}x{w}");
        }
        assert!(matches!(decode_message(&dec, &noise_image(31, 64, 1)), Err(Error::Domain(_))));
    }

    #[test]
    fn decoding_is_deterministic() {
        let dec = Decoder::init(&DecoderConfig::default(), 5).unwrap();
        let img = noise_image(40, 48, 2);
        assert_eq!(dec.decode(&img).unwrap(), dec.decode(&img).unwrap());
    }

    #[test]
    fn decoder_input_gradient_matches_finite_difference() {
        let dec = Decoder::init(&DecoderConfig { message_bits: 4, widths: vec![4, 6], strides: vec![1, 2], sync_period: 1, canonical_size: None }, 3).unwrap();
        let img = noise_image(32, 34, 3);
        let m: BitMessage = "1001".parse().unwrap();
        let loss = |img: &Image| {
            let (l, _) = dec.forward_tape(img).unwrap();
            bce_with_logits(l.as_slice().unwrap(), &m).unwrap().0
        };
        let (logits, tape) = dec.forward_tape(&img).unwrap();
        let (_, d) = bce_with_logits(logits.as_slice().unwrap(), &m).unwrap();
        let mut grads = dec.zeros_like();
        let d_img = dec.backward(&tape, &d, Some(&mut grads));
        for &(c, i, j) in &[(0, 0, 0), (1, 10, 20), (2, 31, 33), (0, 17, 5)] {
            let h = 1e-2;
            let mut p = img.clone();
            p.data_mut()[[c, i, j]] += h;
            let mut q = img.clone();
            q.data_mut()[[c, i, j]] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h as f64);
            let an = d_img.data()[[c, i, j]] as f64;
            assert!((fd - an).abs() < 1e-4 + 1e-2 * an.abs(), "({c},{i},{j}) fd {fd} vs {an}");
        }
        // Head bias gradient equals dL/dlogits.
        assert_eq!(grads.head.bias, d);
    }

    #[test]
    fn encoder_residual_shape_and_determinism() {
        let enc = Encoder::init(&EncoderConfig::default(), 0).unwrap();
        let img = noise_image(64, 48, 9);
        let m = BitMessage::random(30, &mut rng(1)).unwrap();
        let r = encode_residual(&enc, &img, &m).unwrap();
        assert_eq!(r.size(), img.size());
        assert_eq!(r, encode_residual(&enc, &img, &m).unwrap());
        assert!(r.data().iter().all(|v| v.abs() <= 1.0));
        let other = m.complement();
        assert_ne!(r, encode_residual(&enc, &img, &other).unwrap());
        assert!(matches!(enc.encode_residual(&noise_image(16, 64, 0), &m), Err(Error::Domain(_))));
    }

    #[test]
    fn synchronized_decode_is_at_least_as_confident() {
        let cfg = DecoderConfig { message_bits: 6, widths: vec![4, 4], strides: vec![1, 2], sync_period: 3, canonical_size: None };
        let dec = Decoder::init(&cfg, 8).unwrap();
        let img = noise_image(33, 35, 8);
        let mass = |l: &MessageLogits| l.values().iter().map(|v| v.abs()).sum::<f32>();
        assert!(mass(&dec.decode(&img).unwrap()) >= mass(&dec.decode_aligned(&img).unwrap()));
        let plain = Decoder { config: DecoderConfig { sync_period: 1, ..cfg }, ..dec };
        assert_eq!(plain.decode(&img).unwrap(), plain.decode_aligned(&img).unwrap());
    }

    #[test]
    fn encoder_gradient_matches_finite_difference() {
        let cfg = EncoderConfig { message_bits: 3, tile: 4, tile_channels: 2, hidden: 4 };
        let enc = Encoder::init(&cfg, 4).unwrap();
        let img = noise_image(32, 32, 4);
        let m: BitMessage = "101".parse().unwrap();
        let weights = noise_image(32, 32, 5);
        let objective = |e: &Encoder| -> f64 {
            let (r, _) = e.forward_tape(&img, &m).unwrap();
            r.data().iter().zip(weights.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, tape) = enc.forward_tape(&img, &m).unwrap();
        let mut grads = enc.zeros_like();
        enc.backward(&tape, &weights, &mut grads);
        // ReLU kinks make single-coordinate differences noisy in f32, so
        // compare the directional derivative along the gradient itself.
        let g: Vec<Vec<f32>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
        let norm2: f64 = g.iter().flatten().map(|v| (*v as f64).powi(2)).sum();
        let step = 1e-3 / norm2.sqrt() as f32;
        let shifted = |sign: f32| {
            let mut e = enc.clone();
            for (p, d) in e.param_slices_mut().into_iter().zip(&g) {
                for (p, d) in p.iter_mut().zip(d) {
                    *p += sign * step * d;
                }
            }
            objective(&e)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * step as f64);
        assert!((fd - norm2).abs() < 1e-2 * norm2, "directional {fd} vs {norm2}");
    }

    #[test]
    fn watermark_composition() {
        let img = noise_image(8, 8, 1);
        let r = noise_image(8, 8, 2);
        assert_eq!(make_watermarked(&img, &r, 0.0).unwrap(), img);
        assert_eq!(make_watermarked(&img, &Image::zeros(8, 8), 0.7).unwrap(), img);
        let a = make_watermarked(&img, &r, 0.25).unwrap();
        let b = make_watermarked(&img, &r, 0.5).unwrap();
        for ((x, y), o) in a.data().iter().zip(b.data()).zip(img.data()) {
            assert!(((y - o) - 2.0 * (x - o)).abs() < 1e-6);
        }
        assert!(matches!(make_watermarked(&img, &Image::zeros(8, 9), 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn pretrain_config_validation() {
        let mut cfg = PretrainConfig::default();
        cfg.validate().unwrap();
        cfg.strength = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = PretrainConfig::default().with_message_bits(16);
        cfg.resolution = 40;
        // Crop(0.25) of a 40x40 image is 20x20, below the decoder minimum.
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn short_pretraining_is_reproducible() {
        let train: Vec<Image> = (0..4).map(|i| noise_image(32, 32, i)).collect();
        let cfg = PretrainConfig {
            resolution: 32,
            epochs: 2,
            batch_size: 2,
            pool: vec![DistortionSpec::IDENTITY, DistortionSpec::gaussian_noise(0.05), DistortionSpec::jpeg(50)],
            decoder: DecoderConfig { message_bits: 4, widths: vec![4, 4], strides: vec![1, 2], sync_period: 4, canonical_size: None },
            encoder: EncoderConfig { message_bits: 4, tile: 4, tile_channels: 2, hidden: 4 },
            ..PretrainConfig::default().with_message_bits(4)
        };
        let (a, ra) = pretrain_decoder(&cfg, &train, &train[..2]).unwrap();
        let (b, rb) = pretrain_decoder(&cfg, &train, &train[..2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.loss_curve, rb.loss_curve);
        assert_eq!(ra.loss_curve.len(), 2);
        assert_eq!(ra.held_out.len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn hardening_ignores_positive_scaling(values in proptest::collection::vec(-10.0f32..10.0, 1..40), scale in 1e-3f32..1e3) {
            let a = MessageLogits::new(values.clone()).unwrap();
            let b = MessageLogits::new(values.iter().map(|v| v * scale).collect()).unwrap();
            prop_assert_eq!(harden_message(&a), harden_message(&b));
        }
    }
}
