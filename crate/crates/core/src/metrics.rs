//! Relaxed precision/recall for road masks.
//!
//! A predicted road pixel counts as correct if any true road pixel lies
//! within `rho` pixels of it, and symmetrically for recall. "Within rho
//! pixels" defaults to Chebyshev (square neighborhood) distance, realized
//! as binary dilation by a `(2*rho+1)^2` structuring element; Euclidean
//! (disc) distance is available as an alternative and is reported in all
//! outputs. Curves sweep binarization thresholds with `probs >= t`;
//! multi-image aggregation pools pixel counts before dividing
//! (micro-averaging).

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Thresholds a `(1, 1, H, W)` probability map with `p >= threshold`.
    pub fn from_probs(probs: &Tensor<f32>, threshold: f32) -> Self {
        BinaryMask {
            height: probs.height(),
            width: probs.width(),
            data: probs.as_slice().iter().map(|&p| p >= threshold).collect(),
        }
    }

    /// Interprets a `(1, 1, H, W)` 0/1 mask tensor.
    pub fn from_mask_tensor(mask: &Tensor<f32>) -> Self {
        BinaryMask {
            height: mask.height(),
            width: mask.width(),
            data: mask.as_slice().iter().map(|&v| v >= 0.5).collect(),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Which "within rho pixels" distance the relaxed metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    /// Square neighborhood: max(|dx|, |dy|) <= rho.
    Chebyshev,
    /// Disc neighborhood: dx^2 + dy^2 <= rho^2.
    Euclidean,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Chebyshev => "chebyshev",
            DistanceMetric::Euclidean => "euclidean",
        }
    }
}

/// Sets every pixel within distance `rho` of a set pixel. Borders behave as
/// zero padding. `rho = 0` is the identity.
pub fn dilate(mask: &BinaryMask, rho: usize, metric: DistanceMetric) -> BinaryMask {
    if rho == 0 {
        return mask.clone();
    }
    match metric {
        DistanceMetric::Chebyshev => {
            // Separable: horizontal max-run, then vertical.
            let (h, w) = (mask.height, mask.width);
            let mut horiz = BinaryMask::new(h, w);
            for y in 0..h {
                let row = &mask.data[y * w..(y + 1) * w];
                let out = &mut horiz.data[y * w..(y + 1) * w];
                for (x, o) in out.iter_mut().enumerate() {
                    let lo = x.saturating_sub(rho);
                    let hi = (x + rho).min(w - 1);
                    *o = row[lo..=hi].iter().any(|&v| v);
                }
            }
            let mut full = BinaryMask::new(h, w);
            for y in 0..h {
                let lo = y.saturating_sub(rho);
                let hi = (y + rho).min(h - 1);
                for x in 0..w {
                    full.data[y * w + x] = (lo..=hi).any(|yy| horiz.data[yy * w + x]);
                }
            }
            full
        }
        DistanceMetric::Euclidean => {
            let (h, w) = (mask.height, mask.width);
            let r2 = (rho * rho) as isize;
            let mut offsets = Vec::new();
            let r = rho as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx <= r2 {
                        offsets.push((dy, dx));
                    }
                }
            }
            let mut out = BinaryMask::new(h, w);
            for y in 0..h {
                for x in 0..w {
                    if !mask.at(y, x) {
                        continue;
                    }
                    for &(dy, dx) in &offsets {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            out.data[yy as usize * w + xx as usize] = true;
                        }
                    }
                }
            }
            out
        }
    }
}

fn check_same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "relaxed_pr",
            left: format!("{}x{}", a.height, a.width),
            right: format!("{}x{}", b.height, b.width),
        });
    }
    Ok(())
}

/// Raw pixel counts behind a precision/recall pair, so multi-image scores
/// can be pooled before dividing.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrCounts {
    pub precision_hits: usize,
    pub predicted: usize,
    pub recall_hits: usize,
    pub actual: usize,
}

impl PrCounts {
    pub fn add(&mut self, other: PrCounts) {
        self.precision_hits += other.precision_hits;
        self.predicted += other.predicted;
        self.recall_hits += other.recall_hits;
        self.actual += other.actual;
    }

    /// Ratios with the permissive empty-set conventions: no predictions
    /// means precision 1, no true road means recall 1.
    pub fn ratios(&self) -> (f64, f64) {
        let precision = if self.predicted == 0 {
            1.0
        } else {
            self.precision_hits as f64 / self.predicted as f64
        };
        let recall = if self.actual == 0 {
            1.0
        } else {
            self.recall_hits as f64 / self.actual as f64
        };
        (precision, recall)
    }
}

/// Pixel counts for relaxed precision/recall of one image pair:
/// precision counts predictions within `rho` of ground truth, recall counts
/// ground truth within `rho` of predictions.
pub fn relaxed_pr_counts(
    pred: &BinaryMask,
    gt: &BinaryMask,
    rho: usize,
    metric: DistanceMetric,
) -> Result<PrCounts> {
    check_same_dims(pred, gt)?;
    let gt_dilated = dilate(gt, rho, metric);
    let pred_dilated = dilate(pred, rho, metric);
    let mut counts = PrCounts::default();
    for i in 0..pred.data.len() {
        if pred.data[i] {
            counts.predicted += 1;
            if gt_dilated.data[i] {
                counts.precision_hits += 1;
            }
        }
        if gt.data[i] {
            counts.actual += 1;
            if pred_dilated.data[i] {
                counts.recall_hits += 1;
            }
        }
    }
    Ok(counts)
}

/// Relaxed `(precision, recall)` for one pair of masks.
pub fn relaxed_pr(
    pred: &BinaryMask,
    gt: &BinaryMask,
    rho: usize,
    metric: DistanceMetric,
) -> Result<(f64, f64)> {
    Ok(relaxed_pr_counts(pred, gt, rho, metric)?.ratios())
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy)]
pub struct PRPoint {
    pub threshold: f64,
    pub relaxed_precision: f64,
    pub relaxed_recall: f64,
    pub strict_precision: f64,
    pub strict_recall: f64,
}

/// Threshold sweep with its break-even point.
#[derive(Debug, Clone)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub breakeven: f64,
    pub rho: usize,
    pub metric: DistanceMetric,
}

/// The default sweep: 99 thresholds 0.01, 0.02, ..., 0.99.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Sweeps thresholds over a set of probability maps and their ground-truth
/// masks. Counts are pooled over all images per threshold (micro-average).
pub fn pr_curve(
    probs: &[Tensor<f32>],
    gts: &[BinaryMask],
    rho: usize,
    metric: DistanceMetric,
    thresholds: &[f64],
) -> Result<PRCurve> {
    if probs.len() != gts.len() {
        return Err(Error::InvalidArgument {
            op: "pr_curve",
            what: format!("{} probability maps vs {} masks", probs.len(), gts.len()),
        });
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyCurve);
    }
    if !thresholds.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument {
            op: "pr_curve",
            what: "thresholds must be strictly increasing".to_string(),
        });
    }
    // Ground-truth dilations do not depend on the threshold; precompute by
    // computing per-image counts threshold by threshold.
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut relaxed = PrCounts::default();
        let mut strict = PrCounts::default();
        for (p, gt) in probs.iter().zip(gts) {
            let pred = BinaryMask::from_probs(p, t as f32);
            relaxed.add(relaxed_pr_counts(&pred, gt, rho, metric)?);
            strict.add(relaxed_pr_counts(&pred, gt, 0, metric)?);
        }
        let (rp, rr) = relaxed.ratios();
        let (sp, sr) = strict.ratios();
        points.push(PRPoint {
            threshold: t,
            relaxed_precision: rp,
            relaxed_recall: rr,
            strict_precision: sp,
            strict_recall: sr,
        });
    }
    let breakeven = breakeven(&points)?;
    Ok(PRCurve {
        points,
        breakeven,
        rho,
        metric,
    })
}

/// Break-even point: where the piecewise-linear relaxed curve crosses
/// precision = recall. Walks points in threshold order; at the first
/// adjacent pair where `precision - recall` changes sign, interpolates the
/// crossing in (recall, precision) space. Without a sign change, returns the
/// midpoint value of the point minimizing `|precision - recall|`.
pub fn breakeven(points: &[PRPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let diff = |p: &PRPoint| p.relaxed_precision - p.relaxed_recall;
    if let Some(p) = points.iter().find(|p| diff(p) == 0.0) {
        return Ok(p.relaxed_precision);
    }
    for pair in points.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (da, db) = (diff(a), diff(b));
        if da.signum() != db.signum() {
            // Segment from (r_a, p_a) to (r_b, p_b); solve p(t) = r(t).
            let t = da / (da - db);
            return Ok(a.relaxed_precision + t * (b.relaxed_precision - a.relaxed_precision));
        }
    }
    let closest = points
        .iter()
        .min_by(|a, b| diff(a).abs().total_cmp(&diff(b).abs()))
        .expect("non-empty");
    Ok((closest.relaxed_precision + closest.relaxed_recall) / 2.0)
}

/// CSV export: header plus one `threshold,relaxed_precision,relaxed_recall,
/// strict_precision,strict_recall` row per point.
pub fn write_pr_csv(curve: &PRCurve, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "threshold,relaxed_precision,relaxed_recall,strict_precision,strict_recall"
    )?;
    for p in &curve.points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.threshold, p.relaxed_precision, p.relaxed_recall, p.strict_precision, p.strict_recall
        )?;
    }
    Ok(())
}

/// One-line result summary.
pub fn summary_line(curve: &PRCurve) -> String {
    format!(
        "breakeven={:.6}, rho={}, distance={}",
        curve.breakeven,
        curve.rho,
        curve.metric.as_str()
    )
}
