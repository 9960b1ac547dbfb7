use inrmark_core::distortion::{apply_distortion, forward_asl, noise_layer, DistortionSpec};
use inrmark_core::sampler::{coordinate_grid, sample_image, sample_image_tape};
use inrmark_core::{seeded_rng, Image, InrConfig, InrParams};
use proptest::prelude::*;

fn tiny(seed: u64) -> InrParams {
    InrParams::init(&InrConfig {
        hidden_layers: 2,
        hidden_width: 16,
        first_layer_omega: 30.0,
        seed,
    })
    .unwrap()
}

#[test]
fn two_by_two_grid_is_the_lower_left_quadrant_corners() {
    let grid = coordinate_grid(2, 2).unwrap();
    let points: Vec<(f32, f32)> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| grid.get(i, j)).collect();
    assert_eq!(points, vec![(-1.0, -1.0), (-1.0, 0.0), (0.0, -1.0), (0.0, 0.0)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn even_pixels_of_a_doubled_raster_are_the_coarse_raster(seed in 0u64..10_000, h in 1usize..20, w in 1usize..20) {
        let params = tiny(seed);
        let coarse = sample_image(&params, h, w).unwrap();
        let fine = sample_image(&params, 2 * h, 2 * w).unwrap();
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let a = coarse.data()[[c, i, j]];
                    let b = fine.data()[[c, 2 * i, 2 * j]];
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}

#[test]
fn straight_through_jpeg_reaches_every_parameter() {
    let params = tiny(4);
    let (sampled, tape) = sample_image_tape(&params, 48, 40).unwrap();
    let spec = DistortionSpec::jpeg(50);

    let mut rng = seeded_rng(9);
    let expected = apply_distortion(&sampled, &spec, &mut rng).unwrap();
    let mut rng = seeded_rng(9);
    let noised = noise_layer(&sampled, &spec, &mut rng).unwrap();
    assert_eq!(noised.image, expected);

    let upstream = Image::new(ndarray::Array3::from_shape_fn((3, 48, 40), |(c, i, j)| {
        ((c * 7 + i * 3 + j) % 11) as f32 / 11.0 - 0.4
    }))
    .unwrap();
    let d = noised.backward(&upstream).unwrap();
    assert_eq!(d, upstream);

    let grads = tape.backward(&params, &d).unwrap();
    for (k, slice) in grads.slices().iter().enumerate() {
        assert!(slice.iter().all(|v| v.is_finite()), "tensor {k} has a non-finite gradient");
        assert!(slice.iter().all(|&v| v != 0.0), "tensor {k} has a zero gradient entry");
    }

    let direct = forward_asl(&sampled, expected.clone()).unwrap();
    assert_eq!(direct.image, expected);
    assert_eq!(direct.backward(&upstream).unwrap(), upstream);
}
