//! Dense RGB rasters shared by every stage of the pipeline.
//!
//! An [`Image`] stores channel-major `3 × H × W` reals. Values are nominally in
//! `[0, 1]` but nothing inside the training code clamps them; clamping and 8-bit
//! quantization only happen at export and metric boundaries.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, ArrayView3, Zip};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != CHANNELS {
            return Err(Error::Contract(format!("expected {CHANNELS} channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Domain(format!("empty image {h}x{w}")));
        }
        Ok(Image { data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Image {
            data: Array3::from_elem((CHANNELS, height, width), value),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_size(&self, other: &Image) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::Contract(format!(
                "image sizes differ: {:?} vs {:?}",
                self.size(),
                other.size()
            )));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Copy of the `h × w` block whose top-left pixel is `(top, left)`.
    pub fn region(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        Image {
            data: self
                .data
                .slice(s![.., top..top + h, left..left + w])
                .to_owned(),
        }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Image, scale: f32) -> Result<Image> {
        self.ensure_same_size(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|o, &r| *o += scale * r);
        Ok(Image { data: out })
    }

    /// Quantizes `clamp(v, 0, 1)` to 8 bits, rounding half up.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.size();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| quantize(self.data[[c, y, x]])))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Image> {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((CHANNELS, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Image::new(data)
    }

    /// Round trip through the 8-bit representation.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.mapv(|v| quantize(v) as f32 / 255.0),
        }
    }

    /// Reads any format the `image` crate understands and converts it to RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        Image::from_rgb8(&img.to_rgb8())
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(matches!(
            Image::new(Array3::zeros((4, 2, 2))),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            Image::new(Array3::zeros((3, 0, 2))),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0
        }))
        .unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.size(), (5, 7));
    }
}
