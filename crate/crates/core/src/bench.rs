//! Boundary and segmentation benchmarks.
//!
//! Soft boundary maps are thinned by non-maximum suppression across the
//! local boundary normal followed by morphological thinning. Thinned maps
//! are binarized at a ladder of thresholds and matched against one or more
//! human boundary maps within a distance tolerance, giving a
//! precision/recall curve and its ODS, OIS and AP summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;

/// Width of the Gaussian used to estimate boundary orientation.
pub const NMS_SIGMA: f64 = 2.0;

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur of a single-channel grid with edge replication.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut tmp = ImageGrid::zeros(img.width(), img.height(), 1);
    for y in 0..h {
        for x in 0..w {
            let v = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * img.get_clamped(x + k as isize - r, y, 0))
                .sum();
            tmp.set(x as usize, y as usize, 0, v);
        }
    }
    let mut out = ImageGrid::zeros(img.width(), img.height(), 1);
    for y in 0..h {
        for x in 0..w {
            let v = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp.get_clamped(x, y + k as isize - r, 0))
                .sum();
            out.set(x as usize, y as usize, 0, v);
        }
    }
    out
}

/// Unit normal to the ridge through `(x, y)`: the eigenvector of the
/// smoothed Hessian with the most negative eigenvalue.
fn ridge_normal(s: &ImageGrid, x: usize, y: usize) -> (f64, f64) {
    let (x, y) = (x as isize, y as isize);
    let at = |dx: isize, dy: isize| s.get_clamped(x + dx, y + dy, 0);
    let c = at(0, 0);
    let hxx = at(1, 0) - 2.0 * c + at(-1, 0);
    let hyy = at(0, 1) - 2.0 * c + at(0, -1);
    let hxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / 4.0;
    // smaller eigenvalue of [[hxx, hxy], [hxy, hyy]]
    let mean = (hxx + hyy) / 2.0;
    let rad = (((hxx - hyy) / 2.0).powi(2) + hxy * hxy).sqrt();
    let lambda = mean - rad;
    let (vx, vy) = if hxy.abs() > 1e-15 {
        (lambda - hyy, hxy)
    } else if hxx <= hyy {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = (vx * vx + vy * vy).sqrt();
    (vx / n, vy / n)
}

fn bilinear(img: &ImageGrid, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let v = |dx: isize, dy: isize| {
        let (px, py) = (x0 + dx, y0 + dy);
        if px < 0 || py < 0 || px >= img.width() as isize || py >= img.height() as isize {
            0.0
        } else {
            img.get(px as usize, py as usize, 0)
        }
    };
    (v(0, 0) * (1.0 - fx) + v(1, 0) * fx) * (1.0 - fy) + (v(0, 1) * (1.0 - fx) + v(1, 1) * fx) * fy
}

/// Non-maximum suppression across the boundary normal followed by
/// Zhang-Suen thinning. Surviving pixels keep their input strength.
pub fn nms_thin(edges: &ImageGrid) -> Result<ImageGrid> {
    if edges.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            got: edges.channels(),
        });
    }
    let (w, h) = (edges.width(), edges.height());
    let smooth = gaussian_blur(edges, NMS_SIGMA);
    let mut out = ImageGrid::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let v = edges.get(x, y, 0);
            if v <= 0.0 {
                continue;
            }
            let (nx, ny) = ridge_normal(&smooth, x, y);
            let a = bilinear(edges, x as f64 + nx, y as f64 + ny);
            let b = bilinear(edges, x as f64 - nx, y as f64 - ny);
            if v >= a && v >= b {
                out.set(x, y, 0, v);
            }
        }
    }
    let mut mask: Vec<bool> = out.data().iter().map(|&v| v > 0.0).collect();
    zhang_suen(&mut mask, w, h);
    for (v, keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Zhang-Suen thinning of a binary mask, in place.
pub fn zhang_suen(mask: &mut [bool], w: usize, h: usize) {
    let at = |m: &[bool], x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && m[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !at(mask, x, y) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(mask, x, y - 1),
                        at(mask, x + 1, y - 1),
                        at(mask, x + 1, y),
                        at(mask, x + 1, y + 1),
                        at(mask, x, y + 1),
                        at(mask, x - 1, y + 1),
                        at(mask, x - 1, y),
                        at(mask, x - 1, y - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    let (c1, c2) = if pass == 0 {
                        (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                    } else {
                        (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && !c1 && !c2 {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                mask[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Matching tolerance and threshold ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Match radius as a fraction of the image diagonal.
    pub max_dist: f64,
    pub threshold_count: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_dist: 0.0075,
            threshold_count: 51,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_dist > 0.0) {
            return Err(invalid("max_dist must be positive"));
        }
        if self.threshold_count < 2 {
            return Err(invalid("threshold_count must be >= 2"));
        }
        Ok(())
    }

    /// Equally spaced thresholds from 0 to 1 inclusive.
    pub fn thresholds(&self) -> Vec<f64> {
        let n = self.threshold_count - 1;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    }

    /// Match radius in pixels for a `w x h` image.
    pub fn radius(&self, w: usize, h: usize) -> f64 {
        self.max_dist * ((w * w + h * h) as f64).sqrt()
    }
}

/// One-to-one greedy matching of detections to truth pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched (detection index, truth index) pairs in matching order.
    pub pairs: Vec<((usize, usize), (usize, usize))>,
}

/// Greedily matches detected to truth pixels by increasing distance within
/// `radius`. Ties are broken by detection then truth raster order.
pub fn match_boundaries(detected: &[bool], truth: &[bool], w: usize, h: usize, radius: f64) -> Matching {
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut cand: Vec<(isize, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !detected[y * w + x] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dx * dx + dy * dy;
                    if d2 as f64 > r2 {
                        continue;
                    }
                    let (tx, ty) = (x as isize + dx, y as isize + dy);
                    if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                        continue;
                    }
                    let t = ty as usize * w + tx as usize;
                    if truth[t] {
                        cand.push((d2, y * w + x, t));
                    }
                }
            }
        }
    }
    cand.sort_unstable();
    let mut det_used = vec![false; w * h];
    let mut truth_used = vec![false; w * h];
    let mut pairs = Vec::new();
    for (_, d, t) in cand {
        if !det_used[d] && !truth_used[t] {
            det_used[d] = true;
            truth_used[t] = true;
            pairs.push(((d % w, d / w), (t % w, t / w)));
        }
    }
    Matching { pairs }
}

/// Raw counts for one image at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub detections: usize,
    pub matched_detections: usize,
    pub truth: usize,
    pub matched_truth: usize,
}

impl MatchCounts {
    fn add(&mut self, o: &MatchCounts) {
        self.detections += o.detections;
        self.matched_detections += o.matched_detections;
        self.truth += o.truth;
        self.matched_truth += o.matched_truth;
    }

    /// Precision, 0 when nothing was detected.
    pub fn precision(&self) -> f64 {
        if self.detections == 0 {
            0.0
        } else {
            self.matched_detections as f64 / self.detections as f64
        }
    }

    /// Recall, 0 when there is no truth.
    pub fn recall(&self) -> f64 {
        if self.truth == 0 {
            0.0
        } else {
            self.matched_truth as f64 / self.truth as f64
        }
    }
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts for detections `> threshold` against every human map. A detection
/// is correct when matched in any map; truth counts sum over maps.
pub fn image_counts(edges: &ImageGrid, truths: &[ImageGrid], threshold: f64, radius: f64) -> MatchCounts {
    let (w, h) = (edges.width(), edges.height());
    let detected: Vec<bool> = edges.data().iter().map(|&v| v > threshold).collect();
    let mut any_match = vec![false; w * h];
    let mut counts = MatchCounts {
        detections: detected.iter().filter(|&&d| d).count(),
        ..Default::default()
    };
    for t in truths {
        let truth: Vec<bool> = t.data().iter().map(|&v| v > 0.5).collect();
        let m = match_boundaries(&detected, &truth, w, h, radius);
        counts.truth += truth.iter().filter(|&&v| v).count();
        counts.matched_truth += m.pairs.len();
        for ((dx, dy), _) in m.pairs {
            any_match[dy * w + dx] = true;
        }
    }
    counts.matched_detections = any_match.iter().filter(|&&v| v).count();
    counts
}

/// Dataset-level precision/recall curve and summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_measure: Vec<f64>,
    /// Best F at one threshold shared by all images.
    pub ods_f: f64,
    pub ods_threshold: f64,
    /// Mean over images of each image's best F.
    pub ois_f: f64,
    /// Area under the interpolated precision/recall curve.
    pub ap: f64,
    /// Per-image best F.
    pub image_f: Vec<f64>,
}

impl PRCurve {
    /// CSV rows `threshold,precision,recall,f`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for i in 0..self.thresholds.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.thresholds[i], self.precision[i], self.recall[i], self.f_measure[i]
            ));
        }
        s
    }
}

/// Area under the interpolated P(R) curve: points are taken by increasing
/// recall and each recall increment is weighted by the best precision at
/// that recall or higher.
pub fn average_precision(precision: &[f64], recall: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = recall.iter().copied().zip(precision.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut interp = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        interp[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        ap += (r - prev_r) * interp[i];
        prev_r = r;
    }
    ap
}

/// Evaluates thinned boundary maps against their human truth maps.
pub fn evaluate_boundaries(items: &[(ImageGrid, Vec<ImageGrid>)], cfg: &MatchConfig) -> Result<PRCurve> {
    cfg.validate()?;
    for (edges, truths) in items {
        if edges.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                got: edges.channels(),
            });
        }
        for t in truths {
            if !edges.same_shape(t) {
                return Err(invalid(format!(
                    "detection {}x{}x{} does not match truth {}x{}x{}",
                    edges.width(),
                    edges.height(),
                    edges.channels(),
                    t.width(),
                    t.height(),
                    t.channels()
                )));
            }
        }
    }
    let thresholds = cfg.thresholds();
    let per_image: Vec<Vec<MatchCounts>> = items
        .par_iter()
        .map(|(edges, truths)| {
            let radius = cfg.radius(edges.width(), edges.height());
            thresholds
                .iter()
                .map(|&t| image_counts(edges, truths, t, radius))
                .collect()
        })
        .collect();

    let mut precision = Vec::with_capacity(thresholds.len());
    let mut recall = Vec::with_capacity(thresholds.len());
    let mut f = Vec::with_capacity(thresholds.len());
    for k in 0..thresholds.len() {
        let mut total = MatchCounts::default();
        for counts in &per_image {
            total.add(&counts[k]);
        }
        let (p, r) = (total.precision(), total.recall());
        precision.push(p);
        recall.push(r);
        f.push(f_measure(p, r));
    }
    let (best_k, ods_f) = f
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    let image_f: Vec<f64> = per_image
        .iter()
        .map(|counts| {
            counts
                .iter()
                .map(|c| f_measure(c.precision(), c.recall()))
                .fold(0.0, f64::max)
        })
        .collect();
    let ois_f = if image_f.is_empty() {
        0.0
    } else {
        image_f.iter().sum::<f64>() / image_f.len() as f64
    };
    let ap = average_precision(&precision, &recall);
    Ok(PRCurve {
        ods_threshold: thresholds[best_k],
        thresholds,
        precision,
        recall,
        f_measure: f,
        ods_f,
        ois_f,
        ap,
        image_f,
    })
}

/// Confusion matrix and accuracies of an argmax labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// `confusion[truth][predicted]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of each true class predicted correctly (`None` when the
    /// class is absent from the truth).
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pixel accuracy of per-pixel argmax classes against one-hot truth.
pub fn evaluate_segmentation(pred: &ImageGrid, truth: &ImageGrid) -> Result<SegmentationReport> {
    if !pred.same_shape(truth) {
        return Err(invalid("prediction and truth grids are misaligned"));
    }
    let c = truth.channels();
    let mut confusion = vec![vec![0u64; c]; c];
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            confusion[argmax(truth.pixel(x, y))][argmax(pred.pixel(x, y))] += 1;
        }
    }
    Ok(SegmentationReport::from_confusion(confusion))
}

impl SegmentationReport {
    /// Accuracies of a `confusion[truth][predicted]` matrix, e.g. one
    /// summed over several images.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let c = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Self {
            confusion,
            per_class_accuracy,
            overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}
