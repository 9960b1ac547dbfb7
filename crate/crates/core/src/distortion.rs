//! The attack suite, usable both as a test-time attack and as a training-time
//! noise layer with a backward pass.
//!
//! Gaussian noise, cropping and bilinear resizing carry their exact gradients.
//! JPEG and the median filter are wrapped in [`forward_asl`]: the output takes
//! the distorted value while the gradient passes straight through as identity.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistortionKind {
    Identity,
    GaussianNoise,
    MedianFilter,
    Jpeg,
    Crop,
    Resize,
}

impl DistortionKind {
    /// Name used in `kind:param` strings.
    pub fn tag(self) -> &'static str {
        match self {
            DistortionKind::Identity => "identity",
            DistortionKind::GaussianNoise => "gn",
            DistortionKind::MedianFilter => "mf",
            DistortionKind::Jpeg => "jpeg",
            DistortionKind::Crop => "crop",
            DistortionKind::Resize => "resize",
        }
    }

    /// Whether the attack changes the raster size.
    pub fn is_geometric(self) -> bool {
        matches!(self, DistortionKind::Crop | DistortionKind::Resize)
    }

    /// Attacks whose gradient is replaced by the straight-through identity.
    pub fn is_straight_through(self) -> bool {
        matches!(self, DistortionKind::Jpeg | DistortionKind::MedianFilter)
    }
}

/// One attack with its parameter: sigma for noise, kernel size for the median
/// filter, quality for JPEG, area ratio for crop, scale for resize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub param: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, param: f64) -> Result<Self> {
        let spec = DistortionSpec { kind, param };
        spec.validate()?;
        Ok(spec)
    }

    pub const IDENTITY: DistortionSpec = DistortionSpec {
        kind: DistortionKind::Identity,
        param: 0.0,
    };

    pub fn gaussian_noise(sigma: f64) -> Self {
        Self::unchecked(DistortionKind::GaussianNoise, sigma)
    }

    pub fn median_filter(kernel: usize) -> Self {
        Self::unchecked(DistortionKind::MedianFilter, kernel as f64)
    }

    pub fn jpeg(quality: u8) -> Self {
        Self::unchecked(DistortionKind::Jpeg, quality as f64)
    }

    pub fn crop(area_ratio: f64) -> Self {
        Self::unchecked(DistortionKind::Crop, area_ratio)
    }

    pub fn resize(scale: f64) -> Self {
        Self::unchecked(DistortionKind::Resize, scale)
    }

    fn unchecked(kind: DistortionKind, param: f64) -> Self {
        let spec = DistortionSpec { kind, param };
        debug_assert!(spec.validate().is_ok(), "invalid {spec}");
        spec
    }

    /// The six training attacks: GN(0.05), MF(7), JPEG(50), Crop(0.25),
    /// Resize(0.5), Resize(2.0).
    pub fn training_suite() -> Vec<DistortionSpec> {
        vec![
            Self::gaussian_noise(0.05),
            Self::median_filter(7),
            Self::jpeg(50),
            Self::crop(0.25),
            Self::resize(0.5),
            Self::resize(2.0),
        ]
    }

    /// The training attacks preceded by `Identity`.
    pub fn evaluation_suite() -> Vec<DistortionSpec> {
        let mut suite = vec![Self::IDENTITY];
        suite.extend(Self::training_suite());
        suite
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let ok = p.is_finite()
            && match self.kind {
                DistortionKind::Identity => true,
                DistortionKind::GaussianNoise => p >= 0.0,
                DistortionKind::MedianFilter => p >= 1.0 && p.fract() == 0.0 && (p as u64) % 2 == 1,
                DistortionKind::Jpeg => (1.0..=100.0).contains(&p) && p.fract() == 0.0,
                DistortionKind::Crop => p > 0.0 && p <= 1.0,
                DistortionKind::Resize => p > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid parameter {p} for {}", self.kind.tag())))
        }
    }

    /// Output raster size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let size = match self.kind {
            DistortionKind::Crop => {
                let side = self.param.sqrt();
                ((side * h as f64).floor() as usize, (side * w as f64).floor() as usize)
            }
            DistortionKind::Resize => (
                (self.param * h as f64).round() as usize,
                (self.param * w as f64).round() as usize,
            ),
            _ => (h, w),
        };
        if size.0 == 0 || size.1 == 0 {
            return Err(Error::Domain(format!("{self} on {h}x{w} leaves an empty raster")));
        }
        Ok(size)
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DistortionKind::Identity => f.write_str("identity"),
            _ => write!(f, "{}:{}", self.kind.tag(), self.param),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "identity" | "none" => DistortionKind::Identity,
            "gn" | "gaussian" | "noise" => DistortionKind::GaussianNoise,
            "mf" | "median" => DistortionKind::MedianFilter,
            "jpeg" | "jpg" => DistortionKind::Jpeg,
            "crop" => DistortionKind::Crop,
            "resize" | "scale" => DistortionKind::Resize,
            _ => return Err(Error::Domain(format!("unknown distortion {name:?} in {s:?}"))),
        };
        let param = match (kind, param) {
            (DistortionKind::Identity, None) => 0.0,
            (DistortionKind::Identity, Some(_)) => {
                return Err(Error::Domain("identity takes no parameter".into()))
            }
            (_, None) => return Err(Error::Domain(format!("{name} needs a parameter, e.g. {name}:1"))),
            (_, Some(p)) => p
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Domain(format!("bad parameter {p:?} in {s:?}")))?,
        };
        DistortionSpec::new(kind, param)
    }
}

impl TryFrom<String> for DistortionSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistortionSpec> for String {
    fn from(spec: DistortionSpec) -> String {
        spec.to_string()
    }
}

/// Applies an attack as a plain (non-differentiable) image operation.
pub fn apply_distortion<R: Rng + ?Sized>(image: &Image, spec: &DistortionSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::Identity => Ok(image.clone()),
        DistortionKind::GaussianNoise => Ok(gaussian_noise(image, spec.param as f32, rng)),
        DistortionKind::MedianFilter => median_filter(image, spec.param as usize),
        DistortionKind::Jpeg => jpeg(image, spec.param as u8),
        DistortionKind::Crop => {
            let (ch, cw) = spec.output_size(image.height(), image.width())?;
            let (top, left) = crop_origin(image.size(), (ch, cw), rng);
            Ok(image.region(top, left, ch, cw))
        }
        DistortionKind::Resize => {
            let (oh, ow) = spec.output_size(image.height(), image.width())?;
            Ok(resize_bilinear(image, oh, ow))
        }
    }
}

/// Uniformly picks one attack from `pool`.
pub fn sample_distortion<R: Rng + ?Sized>(pool: &[DistortionSpec], rng: &mut R) -> Result<DistortionSpec> {
    if pool.is_empty() {
        return Err(Error::Domain("distortion pool is empty".into()));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

fn gaussian_noise<R: Rng + ?Sized>(image: &Image, sigma: f32, rng: &mut R) -> Image {
    let mut out = image.clone();
    for v in out.data_mut().iter_mut() {
        let z: f32 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    out
}

fn crop_origin<R: Rng + ?Sized>(src: (usize, usize), dst: (usize, usize), rng: &mut R) -> (usize, usize) {
    let top = rng.random_range(0..=src.0 - dst.0);
    let left = rng.random_range(0..=src.1 - dst.1);
    (top, left)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Per-channel median over a `k × k` window with reflect padding.
pub fn median_filter(image: &Image, kernel: usize) -> Result<Image> {
    let (h, w) = image.size();
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Domain(format!("median kernel must be odd, got {kernel}")));
    }
    if kernel > h || kernel > w {
        return Err(Error::Domain(format!("median kernel {kernel} larger than {h}x{w} image")));
    }
    let pad = (kernel / 2) as isize;
    let src = image.data();
    let mut out = Array3::zeros((CHANNELS, h, w));
    let mut window = Vec::with_capacity(kernel * kernel);
    let mid = kernel * kernel / 2;
    for c in 0..CHANNELS {
        for i in 0..h {
            for j in 0..w {
                window.clear();
                for di in -pad..=pad {
                    let y = reflect(i as isize + di, h);
                    for dj in -pad..=pad {
                        window.push(src[[c, y, reflect(j as isize + dj, w)]]);
                    }
                }
                let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                out[[c, i, j]] = *m;
            }
        }
    }
    Image::new(out)
}

/// Baseline JPEG round trip of the 8-bit quantized image.
pub fn jpeg(image: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Domain(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    let back = Image::from_rgb8(&decoded.to_rgb8())?;
    if back.size() != image.size() {
        return Err(Error::Contract("JPEG round trip changed the raster size".into()));
    }
    Ok(back)
}

/// Source taps of one output index for half-pixel-centre bilinear resampling.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f32,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(src - 1),
                t: (x - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = image.size();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = image.data();
    let out = Array3::from_shape_fn((CHANNELS, out_h, out_w), |(c, i, j)| {
        let (a, b) = (ty[i], tx[j]);
        let top = src[[c, a.lo, b.lo]] * (1.0 - b.t) + src[[c, a.lo, b.hi]] * b.t;
        let bottom = src[[c, a.hi, b.lo]] * (1.0 - b.t) + src[[c, a.hi, b.hi]] * b.t;
        top * (1.0 - a.t) + bottom * a.t
    });
    Image::new(out).expect("non-empty output")
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back to the input.
pub fn resize_bilinear_backward(upstream: &Image, src_h: usize, src_w: usize) -> Image {
    let (out_h, out_w) = upstream.size();
    if (src_h, src_w) == (out_h, out_w) {
        return upstream.clone();
    }
    let (ty, tx) = (taps(src_h, out_h), taps(src_w, out_w));
    let g = upstream.data();
    let mut d = Array3::<f32>::zeros((CHANNELS, src_h, src_w));
    for c in 0..CHANNELS {
        for (i, a) in ty.iter().enumerate() {
            for (j, b) in tx.iter().enumerate() {
                let v = g[[c, i, j]];
                d[[c, a.lo, b.lo]] += v * (1.0 - a.t) * (1.0 - b.t);
                d[[c, a.lo, b.hi]] += v * (1.0 - a.t) * b.t;
                d[[c, a.hi, b.lo]] += v * a.t * (1.0 - b.t);
                d[[c, a.hi, b.hi]] += v * a.t * b.t;
            }
        }
    }
    Image::new(d).expect("non-empty input")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Backward {
    /// Identity gradient; used natively by noise and by the straight-through wrapper.
    Identity,
    Crop {
        top: usize,
        left: usize,
        src: (usize, usize),
    },
    Resize {
        src: (usize, usize),
    },
}

/// Output of a training-time noise layer: the distorted value plus the rule
/// that maps gradients w.r.t. it back to the undistorted input.
#[derive(Debug, Clone)]
pub struct Noised {
    pub image: Image,
    input_size: (usize, usize),
    backward: Backward,
}

impl Noised {
    /// Gradient w.r.t. the layer input given the gradient w.r.t. [`Noised::image`].
    pub fn backward(&self, upstream: &Image) -> Result<Image> {
        if upstream.size() != self.image.size() {
            return Err(Error::Contract(format!(
                "upstream gradient is {:?}, noised image is {:?}",
                upstream.size(),
                self.image.size()
            )));
        }
        Ok(match self.backward {
            Backward::Identity => upstream.clone(),
            Backward::Crop { top, left, src } => {
                let (h, w) = upstream.size();
                let mut d = Array3::zeros((CHANNELS, src.0, src.1));
                d.slice_mut(s![.., top..top + h, left..left + w])
                    .assign(upstream.data());
                Image::new(d)?
            }
            Backward::Resize { src } => resize_bilinear_backward(upstream, src.0, src.1),
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }
}

/// Straight-through wrapper: the value is `distorted`, the gradient w.r.t.
/// `watermarked` is the identity, as if computing
/// `watermarked + stop_gradient(distorted - watermarked)`.
pub fn forward_asl(watermarked: &Image, distorted: Image) -> Result<Noised> {
    if watermarked.size() != distorted.size() {
        return Err(Error::Contract(format!(
            "straight-through needs equal sizes, got {:?} and {:?}",
            watermarked.size(),
            distorted.size()
        )));
    }
    Ok(Noised {
        image: distorted,
        input_size: watermarked.size(),
        backward: Backward::Identity,
    })
}

/// Training-time noise layer.
pub fn noise_layer<R: Rng + ?Sized>(image: &Image, spec: &DistortionSpec, rng: &mut R) -> Result<Noised> {
    spec.validate()?;
    let input_size = image.size();
    match spec.kind {
        DistortionKind::Identity | DistortionKind::GaussianNoise => Ok(Noised {
            image: apply_distortion(image, spec, rng)?,
            input_size,
            backward: Backward::Identity,
        }),
        DistortionKind::Jpeg | DistortionKind::MedianFilter => {
            let distorted = apply_distortion(image, spec, rng)?;
            forward_asl(image, distorted)
        }
        DistortionKind::Crop => {
            let (ch, cw) = spec.output_size(input_size.0, input_size.1)?;
            let (top, left) = crop_origin(input_size, (ch, cw), rng);
            Ok(Noised {
                image: image.region(top, left, ch, cw),
                input_size,
                backward: Backward::Crop {
                    top,
                    left,
                    src: input_size,
                },
            })
        }
        DistortionKind::Resize => {
            let (oh, ow) = spec.output_size(input_size.0, input_size.1)?;
            Ok(Noised {
                image: resize_bilinear(image, oh, ow),
                input_size,
                backward: Backward::Resize { src: input_size },
            })
        }
    }
}
