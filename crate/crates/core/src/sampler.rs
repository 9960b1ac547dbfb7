//! Normalized coordinate grids and rasterization of a coordinate network.
//!
//! Pixel `(i, j)` of an `H × W` raster is evaluated at
//! `(2i/H - 1, 2j/W - 1)`: pixel corners, half-open on `[-1, 1)`. The first
//! coordinate follows the row (height) index.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::siren::{InrGrads, InrParams, Scalar, Tape};

/// Row-major `(x, y)` pairs for an `H × W` raster (`i` outer, `j` inner).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid<T = f32> {
    height: usize,
    width: usize,
    coords: Array2<T>,
}

impl<T: Scalar> CoordGrid<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `H·W × 2` array of coordinates.
    pub fn as_array(&self) -> &Array2<T> {
        &self.coords
    }

    pub fn get(&self, i: usize, j: usize) -> (T, T) {
        let row = i * self.width + j;
        (self.coords[[row, 0]], self.coords[[row, 1]])
    }
}

fn axis_value<T: Scalar>(index: usize, len: usize) -> T {
    let two = T::from_usize(2).unwrap();
    two * T::from_usize(index).unwrap() / T::from_usize(len).unwrap() - T::one()
}

pub fn coordinate_grid(height: usize, width: usize) -> Result<CoordGrid<f32>> {
    coordinate_grid_as(height, width)
}

pub fn coordinate_grid_as<T: Scalar>(height: usize, width: usize) -> Result<CoordGrid<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Domain(format!("grid must be non-empty, got {height}x{width}")));
    }
    let xs: Vec<T> = (0..height).map(|i| axis_value(i, height)).collect();
    let ys: Vec<T> = (0..width).map(|j| axis_value(j, width)).collect();
    let coords = Array2::from_shape_fn((height * width, 2), |(row, c)| {
        if c == 0 {
            xs[row / width]
        } else {
            ys[row % width]
        }
    });
    Ok(CoordGrid {
        height,
        width,
        coords,
    })
}

/// Maps the pixel index `(h, w)` of an `H × W` raster into `[-1, 1)²`.
pub fn normalize_index(h: usize, w: usize, height: usize, width: usize) -> Result<(f32, f32)> {
    if h >= height || w >= width {
        return Err(Error::Domain(format!(
            "index ({h}, {w}) outside {height}x{width} raster"
        )));
    }
    Ok((axis_value(h, height), axis_value(w, width)))
}

/// `H·W × 3` rows, in grid order, of a channel-major image.
pub fn image_to_rows(image: &Image) -> Array2<f32> {
    let (h, w) = image.size();
    image
        .data()
        .view()
        .into_shape_with_order((CHANNELS, h * w))
        .expect("contiguous image")
        .t()
        .as_standard_layout()
        .into_owned()
}

pub fn rows_to_image(rows: ArrayView2<f32>, height: usize, width: usize) -> Result<Image> {
    if rows.dim() != (height * width, CHANNELS) {
        return Err(Error::Contract(format!(
            "expected {}x{CHANNELS} rows, got {:?}",
            height * width,
            rows.dim()
        )));
    }
    let data: Array3<f32> = rows
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((CHANNELS, height, width))
        .expect("standard layout");
    Image::new(data)
}

/// Rasterizes the network on the `H × W` grid.
pub fn sample_image(params: &InrParams, height: usize, width: usize) -> Result<Image> {
    let grid = coordinate_grid(height, width)?;
    let rows = params.forward(grid.as_array().view())?;
    rows_to_image(rows.view(), height, width)
}

/// A sampled raster plus what is needed to push image gradients back into the
/// network parameters.
pub struct SampleTape {
    tape: Tape<f32>,
    height: usize,
    width: usize,
}

pub fn sample_image_tape(params: &InrParams, height: usize, width: usize) -> Result<(Image, SampleTape)> {
    let grid = coordinate_grid(height, width)?;
    let (rows, tape) = params.forward_tape(grid.as_array().view())?;
    let image = rows_to_image(rows.view(), height, width)?;
    Ok((
        image,
        SampleTape {
            tape,
            height,
            width,
        },
    ))
}

impl SampleTape {
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Parameter gradients given `dL/dImage`.
    pub fn backward(&self, params: &InrParams, d_image: &Image) -> Result<InrGrads> {
        if d_image.size() != self.size() {
            return Err(Error::Contract(format!(
                "gradient is {:?}, sampled image was {:?}",
                d_image.size(),
                self.size()
            )));
        }
        let d_rows = image_to_rows(d_image);
        let (grads, _) = params.backward(&self.tape, d_rows.view())?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::{init_siren, Dense, InrConfig};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_by_two_grid() {
        let g = coordinate_grid(2, 2).unwrap();
        let pts: Vec<_> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| g.get(i, j)).collect();
        assert_eq!(pts, vec![(-1.0, -1.0), (-1.0, 0.0), (0.0, -1.0), (0.0, 0.0)]);
    }

    #[test]
    fn single_pixel_grid() {
        let g = coordinate_grid(1, 1).unwrap();
        assert_eq!(g.as_array().dim(), (1, 2));
        assert_eq!(g.get(0, 0), (-1.0, -1.0));
    }

    #[test]
    fn tall_grid_x_values() {
        let g = coordinate_grid(4, 2).unwrap();
        let xs: Vec<f32> = (0..4).map(|i| g.get(i, 0).0).collect();
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5]);
        assert_eq!(g.get(3, 1), (0.5, 0.0));
    }

    #[test]
    fn empty_grid_is_a_domain_error() {
        assert!(matches!(coordinate_grid(0, 3), Err(Error::Domain(_))));
        assert!(matches!(coordinate_grid(3, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_index_examples() {
        assert_eq!(normalize_index(0, 0, 256, 256).unwrap(), (-1.0, -1.0));
        assert_eq!(normalize_index(128, 128, 256, 256).unwrap(), (0.0, 0.0));
        assert_eq!(normalize_index(255, 255, 256, 256).unwrap(), (0.9921875, 0.9921875));
        assert!(matches!(normalize_index(256, 0, 256, 256), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_network_samples_constant_image() {
        let cfg = InrConfig {
            hidden_layers: 2,
            hidden_width: 4,
            ..Default::default()
        };
        let mut layers: Vec<Dense<f32>> = cfg
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: ndarray::Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        layers.last_mut().unwrap().bias.fill(0.5);
        let params = InrParams::from_layers(cfg, layers).unwrap();
        for (h, w) in [(1, 1), (7, 3), (32, 48)] {
            let img = sample_image(&params, h, w).unwrap();
            assert_eq!(img.size(), (h, w));
            assert!(img.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn pixels_match_pointwise_evaluation() {
        let params = init_siren(&InrConfig {
            hidden_layers: 2,
            hidden_width: 32,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let (h, w) = (37, 53);
        let img = sample_image(&params, h, w).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (i, j) = (rng.random_range(0..h), rng.random_range(0..w));
            let (x, y) = normalize_index(i, j, h, w).unwrap();
            let out = params
                .forward(ndarray::arr2(&[[x, y]]).view())
                .unwrap();
            for c in 0..3 {
                assert_eq!(img.data()[[c, i, j]], out[[0, c]]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let params = init_siren(&InrConfig {
            hidden_layers: 2,
            hidden_width: 16,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(sample_image(&params, 9, 14).unwrap(), sample_image(&params, 9, 14).unwrap());
    }

    #[test]
    fn rows_round_trip() {
        let img = Image::new(Array3::from_shape_fn((3, 4, 5), |(c, i, j)| (c * 100 + i * 10 + j) as f32)).unwrap();
        let rows = image_to_rows(&img);
        assert_eq!(rows[[2 * 5 + 3, 1]], 123.0);
        assert_eq!(rows_to_image(rows.view(), 4, 5).unwrap(), img);
    }

    #[test]
    fn tape_backward_matches_direct_backward() {
        let params = init_siren(&InrConfig {
            hidden_layers: 2,
            hidden_width: 8,
            ..Default::default()
        })
        .unwrap();
        let (img, tape) = sample_image_tape(&params, 5, 6).unwrap();
        assert_eq!(img, sample_image(&params, 5, 6).unwrap());
        let ones = Image::filled(5, 6, 1.0);
        let g = tape.backward(&params, &ones).unwrap();
        // d(sum of outputs)/d(final bias) is the pixel count per channel.
        assert!(g.layers.last().unwrap().bias.iter().all(|&b| b == 30.0));
        assert!(matches!(tape.backward(&params, &Image::filled(5, 5, 1.0)), Err(Error::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grid_is_half_open(h in 1usize..300, w in 1usize..300) {
            let g = coordinate_grid(h, w).unwrap();
            prop_assert!(g.as_array().iter().all(|&v| (-1.0..1.0).contains(&v)));
        }

        #[test]
        fn doubling_resolution_nests_the_coarse_grid(seed in 0u64..1000, h in 1usize..12, w in 1usize..12) {
            let params = init_siren(&InrConfig { hidden_layers: 2, hidden_width: 16, seed, ..Default::default() }).unwrap();
            let coarse = sample_image(&params, h, w).unwrap();
            let fine = sample_image(&params, 2 * h, 2 * w).unwrap();
            let sub = fine.data().slice(ndarray::s![.., ..;2, ..;2]).to_owned();
            prop_assert_eq!(&sub, coarse.data());
        }
    }
}
