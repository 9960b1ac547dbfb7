//! Procedural images with smooth gradients, soft-edged shapes and a little
//! periodic texture. Used for desk-scale datasets and tests.

use std::f32::consts::TAU;

use ndarray::Array3;
use rand::{Rng, SeedableRng};

use crate::image::{Image, CHANNELS};
use crate::Rng as StdRng;

struct Blob {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    cos: f32,
    sin: f32,
    softness: f32,
    color: [f32; 3],
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn smoothstep(x: f32) -> f32 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// One `height × width` image determined by `seed`.
pub fn synth_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = StdRng::seed_from_u64(seed);
    let top = random_color(&mut rng);
    let bottom = random_color(&mut rng);
    let angle = rng.random_range(0.0..TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let blobs: Vec<Blob> = (0..rng.random_range(2..=6))
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            Blob {
                cy: rng.random(),
                cx: rng.random(),
                ry: rng.random_range(0.08..0.4),
                rx: rng.random_range(0.08..0.4),
                cos: theta.cos(),
                sin: theta.sin(),
                softness: rng.random_range(0.05..0.4),
                color: random_color(&mut rng),
            }
        })
        .collect();

    let freq = [rng.random_range(2.0..12.0f32), rng.random_range(2.0..12.0f32)];
    let phase = rng.random_range(0.0..TAU);
    let amp = rng.random_range(0.0..0.08f32);

    let mut data = Array3::<f32>::zeros((CHANNELS, height, width));
    for i in 0..height {
        let y = (i as f32 + 0.5) / height as f32;
        for j in 0..width {
            let x = (j as f32 + 0.5) / width as f32;
            let t = (0.5 + 0.5 * ((x - 0.5) * ga + (y - 0.5) * gb) * 2.0).clamp(0.0, 1.0);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
            for b in &blobs {
                let (dy, dx) = (y - b.cy, x - b.cx);
                let u = (dx * b.cos + dy * b.sin) / b.rx;
                let v = (-dx * b.sin + dy * b.cos) / b.ry;
                let r = (u * u + v * v).sqrt();
                let a = 1.0 - smoothstep((r - 1.0) / b.softness + 1.0);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + b.color[c] * a;
                }
            }
            let tex = amp * (TAU * (freq[0] * x + freq[1] * y) + phase).sin();
            for c in 0..3 {
                data[[c, i, j]] = (px[c] + tex).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(data).expect("three channels")
}

/// `count` square images of side `size`; image `k` uses seed `seed + k`.
pub fn synth_dataset(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count as u64)
        .map(|k| synth_image(size, size, seed.wrapping_add(k)))
        .collect()
}
