//! Bit accuracy, PSNR and residual visualization.

use ndarray::{Array2, Zip};

use crate::codec::BitMessage;
use crate::error::{Error, Result};
use crate::image::Image;

/// Percentage of matching bits.
pub fn bit_accuracy(expected: &BitMessage, decoded: &BitMessage) -> Result<f64> {
    if expected.len() != decoded.len() {
        return Err(Error::Contract(format!(
            "message lengths differ: {} vs {}",
            expected.len(),
            decoded.len()
        )));
    }
    let errors = expected
        .bits()
        .iter()
        .zip(decoded.bits())
        .filter(|(a, b)| (*a ^ *b) == 1)
        .count();
    Ok((1.0 - errors as f64 / expected.len() as f64) * 100.0)
}

/// Mean squared error over all channels and pixels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_size(b)?;
    let mut sum = 0.0f64;
    Zip::from(a.data()).and(b.data()).for_each(|&x, &y| {
        let d = x as f64 - y as f64;
        sum += d * d;
    });
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB for images on the `[0, 1]` scale; `+inf` for identical inputs.
pub fn psnr(original: &Image, watermarked: &Image) -> Result<f64> {
    psnr_with_peak(original, watermarked, 1.0)
}

pub fn psnr_with_peak(original: &Image, watermarked: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(original, watermarked)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Report formatting: `+inf` is written as `"inf"`.
pub fn format_db(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

/// Serde helper writing non-finite PSNR values as strings.
pub mod db_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("nan".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(_) => Ok(f64::NAN),
        }
    }
}

/// Normalized greyscale magnitude of the watermark residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub data: Array2<f32>,
    pub peak: f32,
}

pub fn residual_map(original: &Image, watermarked: &Image, peak: f32) -> Result<ResidualMap> {
    original.ensure_same_size(watermarked)?;
    let (h, w) = original.size();
    let (o, m) = (original.data(), watermarked.data());
    let grey = Array2::from_shape_fn((h, w), |(i, j)| {
        let r = (m[[0, i, j]] - o[[0, i, j]]).abs();
        let g = (m[[1, i, j]] - o[[1, i, j]]).abs();
        let b = (m[[2, i, j]] - o[[2, i, j]]).abs();
        0.299 * r + 0.587 * g + 0.114 * b
    });
    let lo = grey.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = grey.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let data = if hi > lo {
        grey.mapv(|v| (v - lo) / (hi - lo) * peak)
    } else {
        Array2::zeros((h, w))
    };
    Ok(ResidualMap { data, peak })
}

impl ResidualMap {
    pub fn to_luma8(&self) -> image::GrayImage {
        let (h, w) = self.data.dim();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = self.data[[y as usize, x as usize]] / self.peak;
            image::Luma([crate::image::quantize(v)])
        })
    }
}
