//! Random 224x224 tile sampling for training.
//!
//! Sampling is uniform over source images, then uniform over valid top-left
//! positions within the chosen image. No augmentation of any kind is
//! applied. Streams are deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TILE_SIZE};
use crate::tensor::Tensor;

/// One training tile cut out of a source image.
#[derive(Debug, Clone)]
pub struct TileSample {
    /// Shape `(1, 3, 224, 224)`.
    pub image: Tensor<f32>,
    /// Shape `(1, 1, 224, 224)`.
    pub mask: Tensor<f32>,
    pub source_id: String,
    pub x: usize,
    pub y: usize,
}

/// Iterator producing exactly `count` tiles.
pub struct TileSampler<'a> {
    dataset: &'a Dataset,
    rng: ChaCha8Rng,
    remaining: usize,
}

/// Starts a deterministic sampling stream of `count` tiles. The dataset
/// guarantees every source is at least tile-sized (checked at load).
pub fn sample_tiles(dataset: &Dataset, count: usize, seed: u64) -> TileSampler<'_> {
    TileSampler {
        dataset,
        rng: ChaCha8Rng::seed_from_u64(seed),
        remaining: count,
    }
}

fn crop(src: &Tensor<f32>, x: usize, y: usize, size: usize) -> Tensor<f32> {
    let c = src.channels();
    let mut out = Tensor::zeros([1, c, size, size]);
    for ci in 0..c {
        for row in 0..size {
            let s = src.index_of(0, ci, y + row, x);
            let d = out.index_of(0, ci, row, 0);
            out.as_mut_slice()[d..d + size].copy_from_slice(&src.as_slice()[s..s + size]);
        }
    }
    out
}

impl Iterator for TileSampler<'_> {
    type Item = TileSample;

    fn next(&mut self) -> Option<TileSample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let idx = self.rng.gen_range(0..self.dataset.len());
        let src = self.dataset.get(idx);
        let (h, w) = (src.image.height(), src.image.width());
        let x = self.rng.gen_range(0..=w - TILE_SIZE);
        let y = self.rng.gen_range(0..=h - TILE_SIZE);
        Some(TileSample {
            image: crop(&src.image, x, y, TILE_SIZE),
            mask: crop(&src.mask, x, y, TILE_SIZE),
            source_id: src.source_id.clone(),
            x,
            y,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
