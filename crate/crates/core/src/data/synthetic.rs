//! Synthetic road scenes with exact ground truth.
//!
//! Scenes are desk-scale stand-ins for real aerial data: straight and
//! L-shaped constant-width dark bands over a smoothly textured background,
//! plus additive Gaussian pixel noise. The mask is the exact band support,
//! so metric and training checks have a noiseless reference. Visual realism
//! is a non-goal.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::LabeledImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub road_count: usize,
    pub road_width_min: usize,
    pub road_width_max: usize,
    /// Standard deviation of the additive Gaussian noise, in [0,1] units.
    pub noise_level: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 448,
            height: 448,
            road_count: 4,
            road_width_min: 6,
            road_width_max: 14,
            noise_level: 0.02,
        }
    }
}

fn paint(
    image: &mut Tensor<f32>,
    mask: &mut Tensor<f32>,
    color: [f32; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
) {
    for y in y0..y1 {
        for x in x0..x1 {
            for (c, &v) in color.iter().enumerate() {
                image.set(0, c, y, x, v);
            }
            mask.set(0, 0, y, x, 1.0);
        }
    }
}

/// Renders one scene. Deterministic for a fixed spec and seed.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    // Background: two earth tones blended by a low-frequency field.
    let c0 = [
        0.30 + rng.gen_range(0.0..0.20),
        0.42 + rng.gen_range(0.0..0.20),
        0.18 + rng.gen_range(0.0..0.15),
    ];
    let c1 = [
        0.45 + rng.gen_range(0.0..0.20),
        0.50 + rng.gen_range(0.0..0.18),
        0.28 + rng.gen_range(0.0..0.15),
    ];
    let (fx, fy) = (
        rng.gen_range(0.5..2.0) * TAU / w as f64,
        rng.gen_range(0.5..2.0) * TAU / h as f64,
    );
    let (gx, gy) = (
        rng.gen_range(2.0..5.0) * TAU / w as f64,
        rng.gen_range(2.0..5.0) * TAU / h as f64,
    );
    let (p0, p1) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));

    let mut image = Tensor::<f32>::zeros([1, 3, h, w]);
    let mut mask = Tensor::<f32>::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let t = 0.5
                + 0.3 * (fx * x as f64 + fy * y as f64 + p0).sin()
                + 0.2 * (gx * x as f64 - gy * y as f64 + p1).sin();
            let t = t.clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                image.set(0, c, y, x, c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }

    // Roads: dark near-gray bands, clearly separated from the background.
    for _ in 0..spec.road_count {
        let band = rng
            .gen_range(spec.road_width_min..=spec.road_width_max)
            .min(w)
            .min(h);
        let g = rng.gen_range(0.08f32..0.22);
        let color = [
            (g + rng.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0),
            (g + rng.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0),
            (g + rng.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0),
        ];
        match rng.gen_range(0..3) {
            0 => {
                // Horizontal full-span band.
                let y0 = rng.gen_range(0..=h - band);
                paint(&mut image, &mut mask, color, 0, w, y0, y0 + band);
            }
            1 => {
                // Vertical full-span band.
                let x0 = rng.gen_range(0..=w - band);
                paint(&mut image, &mut mask, color, x0, x0 + band, 0, h);
            }
            _ => {
                // L shape: one horizontal and one vertical arm meeting at a
                // corner in the central region.
                let cx = rng.gen_range(w / 4..(3 * w / 4).min(w - band));
                let cy = rng.gen_range(h / 4..(3 * h / 4).min(h - band));
                if rng.gen_bool(0.5) {
                    paint(&mut image, &mut mask, color, 0, cx + band, cy, cy + band);
                } else {
                    paint(&mut image, &mut mask, color, cx, w, cy, cy + band);
                }
                if rng.gen_bool(0.5) {
                    paint(&mut image, &mut mask, color, cx, cx + band, 0, cy + band);
                } else {
                    paint(&mut image, &mut mask, color, cx, cx + band, cy, h);
                }
            }
        }
    }

    if spec.noise_level > 0.0 {
        let sigma = spec.noise_level;
        for v in image.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = ((*v as f64) + sigma * z).clamp(0.0, 1.0) as f32;
        }
    }

    LabeledImage {
        image,
        mask,
        source_id: format!("synthetic-{seed}"),
    }
}
