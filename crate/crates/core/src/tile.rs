//! Tiled inference for images larger than the network's 224x224 window.
//!
//! The image is covered by tiles placed at stride `tile_size - overlap`;
//! the last tile per axis is clamped to the image edge. Per-pixel outputs
//! are averaged over every covering tile. Accumulation runs in f64 in a
//! fixed grid order (row-major over tile origins), so stitching is
//! bit-stable no matter how the per-tile forwards were produced.

use std::path::Path;

use crate::data::TILE_SIZE;
use crate::error::{Error, Result};
use crate::model::{forward_infer, ModelGraph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default overlap between adjacent tiles, in pixels.
pub const DEFAULT_OVERLAP: usize = 14;

/// A covering of an `height x width` image by fixed-size square tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub height: usize,
    pub width: usize,
    /// Tile origins along x (columns) and y (rows).
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut pos = 0usize;
    loop {
        origins.push(pos);
        if pos + tile >= dim {
            break;
        }
        pos = (pos + stride).min(dim - tile);
    }
    origins
}

/// Plans the tile covering: origins `0, s, 2s, ...` with
/// `s = tile_size - overlap`, final origin clamped to `dim - tile_size`.
pub fn plan_tiles(
    height: usize,
    width: usize,
    tile_size: usize,
    overlap: usize,
) -> Result<TileGrid> {
    if overlap >= tile_size {
        return Err(Error::InvalidArgument {
            op: "plan_tiles",
            what: format!("overlap {overlap} must be smaller than tile size {tile_size}"),
        });
    }
    if height < tile_size || width < tile_size {
        return Err(Error::ImageSmallerThanTile {
            height,
            width,
            tile: tile_size,
        });
    }
    let stride = tile_size - overlap;
    Ok(TileGrid {
        tile_size,
        overlap,
        height,
        width,
        xs: axis_origins(width, tile_size, stride),
        ys: axis_origins(height, tile_size, stride),
    })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tile origins in row-major order (y outer, x inner) -- the canonical
    /// accumulation order for stitching.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys
            .iter()
            .flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }

    /// Number of tiles covering each pixel.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for (x, y) in self.origins() {
            for row in y..y + self.tile_size {
                for c in &mut counts[row * self.width + x..row * self.width + x + self.tile_size] {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// A stitched probability map, optionally thresholded.
#[derive(Debug, Clone)]
pub struct SegmentationMap {
    /// Shape `(1, 1, H, W)`, values in [0, 1].
    pub probs: Tensor<f32>,
    /// Present when a threshold was applied: 1.0 where `probs >= threshold`.
    pub binary: Option<Tensor<f32>>,
    pub threshold: Option<f32>,
}

impl SegmentationMap {
    /// Applies (or re-applies) a threshold using the `probs >= t` convention.
    pub fn binarize(&mut self, threshold: f32) {
        self.binary = Some(self.probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }));
        self.threshold = Some(threshold);
    }
}

/// Averages per-tile probability maps into a full-image map. `tiles` must
/// hold one `(1, 1, tile, tile)` tensor per grid origin, in grid order.
pub fn stitch(tiles: &[Tensor<f32>], grid: &TileGrid) -> Result<SegmentationMap> {
    if tiles.len() != grid.len() {
        return Err(Error::TileCountMismatch {
            expected: grid.len(),
            got: tiles.len(),
        });
    }
    let t = grid.tile_size;
    for tile in tiles {
        if tile.shape() != [1, 1, t, t] {
            return Err(Error::ShapeMismatch {
                op: "stitch",
                left: format!("(1, 1, {t}, {t})"),
                right: crate::tensor::format_shape(&tile.shape()),
            });
        }
    }
    let (h, w) = (grid.height, grid.width);
    let mut sums = vec![0.0f64; h * w];
    for ((x, y), tile) in grid.origins().zip(tiles) {
        for row in 0..t {
            let src = &tile.as_slice()[row * t..(row + 1) * t];
            let dst = &mut sums[(y + row) * w + x..(y + row) * w + x + t];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += f64::from(*s);
            }
        }
    }
    let counts = grid.coverage_counts();
    let data = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (s / f64::from(c)) as f32)
        .collect();
    Ok(SegmentationMap {
        probs: Tensor::from_vec([1, 1, h, w], data)?,
        binary: None,
        threshold: None,
    })
}

fn crop_tile<S: Scalar>(image: &Tensor<S>, x: usize, y: usize, size: usize) -> Tensor<S> {
    let c = image.channels();
    let mut out = Tensor::zeros([1, c, size, size]);
    for ci in 0..c {
        for row in 0..size {
            let s = image.index_of(0, ci, y + row, x);
            let d = out.index_of(0, ci, row, 0);
            out.as_mut_slice()[d..d + size].copy_from_slice(&image.as_slice()[s..s + size]);
        }
    }
    out
}

/// Segments a whole image: plan tiles, run the network on each tile in
/// inference mode, average overlaps, and optionally binarize.
pub fn predict_image(
    image: &Tensor<f32>,
    graph: &ModelGraph,
    params: &ParamStore<f32>,
    overlap: usize,
    threshold: Option<f32>,
) -> Result<SegmentationMap> {
    predict_image_threaded(image, graph, params, overlap, threshold, 1)
}

/// Like [`predict_image`], with tile forwards spread over up to `threads`
/// worker threads. Accumulation stays in grid order, so the result is
/// bit-identical for every thread count.
pub fn predict_image_threaded(
    image: &Tensor<f32>,
    graph: &ModelGraph,
    params: &ParamStore<f32>,
    overlap: usize,
    threshold: Option<f32>,
    threads: usize,
) -> Result<SegmentationMap> {
    let [n, _, h, w] = image.shape();
    if n != 1 {
        return Err(Error::InvalidArgument {
            op: "predict_image",
            what: format!("expected a single-image batch, got N={n}"),
        });
    }
    let grid = plan_tiles(h, w, TILE_SIZE, overlap)?;
    let origins: Vec<(usize, usize)> = grid.origins().collect();

    let outputs: Vec<Result<Tensor<f32>>> = if threads <= 1 || origins.len() <= 1 {
        origins
            .iter()
            .map(|&(x, y)| forward_infer(graph, &crop_tile(image, x, y, TILE_SIZE), params))
            .collect()
    } else {
        type Slot = Option<Result<Tensor<f32>>>;
        let workers = threads.min(origins.len());
        let mut slots: Vec<Slot> = Vec::new();
        slots.resize_with(origins.len(), || None);
        let slot_refs: Vec<_> = slots.iter_mut().collect();
        std::thread::scope(|scope| {
            // Round-robin tile assignment; each worker owns disjoint slots.
            let mut buckets: Vec<Vec<(usize, &mut Slot)>> =
                (0..workers).map(|_| Vec::new()).collect();
            for (i, slot) in slot_refs.into_iter().enumerate() {
                buckets[i % workers].push((i, slot));
            }
            for bucket in buckets {
                scope.spawn(|| {
                    for (i, slot) in bucket {
                        let (x, y) = origins[i];
                        *slot = Some(forward_infer(
                            graph,
                            &crop_tile(image, x, y, TILE_SIZE),
                            params,
                        ));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every slot filled by its worker"))
            .collect()
    };

    let tiles = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut map = stitch(&tiles, &grid)?;
    if let Some(t) = threshold {
        map.binarize(t);
    }
    Ok(map)
}

/// Writes a probability map as 8-bit grayscale PNG (`round(p * 255)`).
pub fn save_prob_png(probs: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (probs.height(), probs.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (probs.at(0, 0, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path.as_ref()).map_err(|e| Error::ImageDecode {
        path: path.as_ref().to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes a binary map as a 0/255 PNG.
pub fn save_mask_png(binary: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (binary.height(), binary.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if binary.at(0, 0, y, x) >= 0.5 {
                255u8
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path.as_ref()).map_err(|e| Error::ImageDecode {
        path: path.as_ref().to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_grid_for_exact_fit() {
        let grid = plan_tiles(224, 224, 224, 14).unwrap();
        assert_eq!(grid.xs, vec![0]);
        assert_eq!(grid.ys, vec![0]);
        assert_eq!(grid.len(), 1);
    }

    #[test]
    fn stride_arithmetic_for_width_434() {
        let grid = plan_tiles(224, 434, 224, 14).unwrap();
        assert_eq!(grid.xs, vec![0, 210]);
        // Columns 210..=223 are covered twice.
        let counts = grid.coverage_counts();
        assert_eq!(counts[0], 1);
        assert_eq!(counts[215], 2);
        assert_eq!(counts[433], 1);
    }

    #[test]
    fn grid_1500_has_64_tiles_with_clamped_tail() {
        let grid = plan_tiles(1500, 1500, 224, 14).unwrap();
        let expected = vec![0, 210, 420, 630, 840, 1050, 1260, 1276];
        assert_eq!(grid.xs, expected);
        assert_eq!(grid.ys, expected);
        assert_eq!(grid.len(), 64);
    }

    #[test]
    fn full_coverage_and_small_counts() {
        let grid = plan_tiles(500, 700, 224, 14).unwrap();
        let counts = grid.coverage_counts();
        assert!(counts.iter().all(|&c| c >= 1));
        assert!(counts.iter().all(|&c| [1, 2, 4].contains(&c)));
    }

    #[test]
    fn image_smaller_than_tile_rejected() {
        assert!(matches!(
            plan_tiles(200, 300, 224, 14),
            Err(Error::ImageSmallerThanTile { .. })
        ));
    }

    #[test]
    fn single_tile_stitch_is_identity() {
        let grid = plan_tiles(224, 224, 224, 14).unwrap();
        let tile = Tensor::<f32>::from_fn([1, 1, 224, 224], |_, _, h, w| {
            ((h * 31 + w * 7) % 97) as f32 / 97.0
        });
        let map = stitch(std::slice::from_ref(&tile), &grid).unwrap();
        assert!(map.probs.bit_eq(&tile));
    }

    #[test]
    fn two_constant_tiles_average_in_overlap() {
        let grid = plan_tiles(224, 434, 224, 14).unwrap();
        let a = Tensor::<f32>::filled([1, 1, 224, 224], 0.2);
        let b = Tensor::<f32>::filled([1, 1, 224, 224], 0.6);
        let map = stitch(&[a, b], &grid).unwrap();
        assert_eq!(map.probs.at(0, 0, 100, 0), 0.2);
        assert_eq!(map.probs.at(0, 0, 100, 215), 0.4);
        assert_eq!(map.probs.at(0, 0, 100, 430), 0.6);
    }

    #[test]
    fn tile_count_mismatch_rejected() {
        let grid = plan_tiles(224, 434, 224, 14).unwrap();
        let a = Tensor::<f32>::zeros([1, 1, 224, 224]);
        assert!(matches!(
            stitch(&[a], &grid),
            Err(Error::TileCountMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn stitch_matches_independent_accumulator_bit_exactly() {
        // Oracle: accumulate sums and counts per pixel, in the same grid
        // order, through an entirely separate code path.
        let grid = plan_tiles(300, 460, 224, 14).unwrap();
        let tiles: Vec<Tensor<f32>> = (0..grid.len())
            .map(|i| {
                Tensor::from_fn([1, 1, 224, 224], |_, _, h, w| {
                    (((i * 131 + h * 17 + w * 3) % 251) as f32) / 251.0
                })
            })
            .collect();
        let map = stitch(&tiles, &grid).unwrap();

        let (hh, ww) = (grid.height, grid.width);
        let mut sums = vec![0.0f64; hh * ww];
        let mut counts = vec![0u32; hh * ww];
        for ((x, y), tile) in grid.origins().zip(&tiles) {
            for r in 0..224 {
                for c in 0..224 {
                    sums[(y + r) * ww + (x + c)] += tile.at(0, 0, r, c) as f64;
                    counts[(y + r) * ww + (x + c)] += 1;
                }
            }
        }
        for (i, (&s, &c)) in sums.iter().zip(&counts).enumerate() {
            let expected = (s / f64::from(c)) as f32;
            let got = map.probs.as_slice()[i];
            assert_eq!(expected.to_bits(), got.to_bits(), "pixel {i}");
        }
    }

    #[test]
    fn binarize_uses_ge_convention() {
        let mut map = SegmentationMap {
            probs: Tensor::from_vec([1, 1, 1, 3], vec![0.49, 0.5, 0.51]).unwrap(),
            binary: None,
            threshold: None,
        };
        map.binarize(0.5);
        assert_eq!(map.binary.unwrap().as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn zeroed_head_kernel_yields_half_everywhere() {
        // Zero logits squash through the sigmoid to exactly 0.5, and the
        // >= threshold convention then marks every pixel as road.
        let graph = ModelGraph::new(0.03);
        let mut params: ParamStore<f32> = graph.init_params(2);
        let head = graph.head_kernel_name();
        let shape = params.get(head).unwrap().shape();
        params.insert(head, Tensor::zeros(shape));

        let image = Tensor::<f32>::from_fn([1, 3, 224, 224], |_, c, h, w| {
            ((c * 41 + h * 3 + w) % 11) as f32 / 11.0
        });
        let map = predict_image(&image, &graph, &params, 14, Some(0.5)).unwrap();
        assert!(map.probs.as_slice().iter().all(|&p| p == 0.5));
        assert!(map.binary.unwrap().as_slice().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn threaded_prediction_is_bit_identical() {
        let graph = ModelGraph::new(0.03);
        let params: ParamStore<f32> = graph.init_params(4);
        let image = Tensor::<f32>::from_fn([1, 3, 300, 440], |_, c, h, w| {
            ((c * 17 + h * 7 + w * 5) % 251) as f32 / 251.0
        });
        let single = predict_image_threaded(&image, &graph, &params, 14, Some(0.4), 1).unwrap();
        let multi = predict_image_threaded(&image, &graph, &params, 14, Some(0.4), 4).unwrap();
        assert!(single.probs.bit_eq(&multi.probs));
        assert!(single
            .binary
            .unwrap()
            .bit_eq(multi.binary.as_ref().unwrap()));
    }

    #[test]
    fn prediction_translates_with_the_tile_stride() {
        // Two images whose content differs by exactly one tile stride: the
        // corresponding tiles see identical pixels, so singly-covered output
        // regions must match bit for bit under the same shift.
        let graph = ModelGraph::new(0.03);
        let params: ParamStore<f32> = graph.init_params(6);
        let stride = 210; // 224 - 14
        let pattern =
            |h: usize, w: usize, c: usize| (((c * 31 + h * 13 + w * 7) % 97) as f32) / 97.0;

        let a = Tensor::<f32>::from_fn([1, 3, 224, 434], |_, c, h, w| {
            if w < 224 {
                pattern(h, w, c)
            } else {
                0.25
            }
        });
        let b = Tensor::<f32>::from_fn([1, 3, 224, 434], |_, c, h, w| {
            if w >= stride {
                pattern(h, w - stride, c)
            } else {
                0.25
            }
        });
        let map_a = predict_image(&a, &graph, &params, 14, None).unwrap();
        let map_b = predict_image(&b, &graph, &params, 14, None).unwrap();
        // Coverage-1 columns for tile 0 of `a` are [0, 210); shifted into
        // `b`'s tile-1 coverage-1 region that leaves columns [14, 210).
        for h in 0..224 {
            for w in 14..210 {
                let va = map_a.probs.at(0, 0, h, w);
                let vb = map_b.probs.at(0, 0, h, w + stride);
                assert_eq!(va.to_bits(), vb.to_bits(), "({h},{w})");
            }
        }
    }
}
