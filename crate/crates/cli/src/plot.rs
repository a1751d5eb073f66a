//! Minimal raster plot of a precision/recall curve.

use sparselabel::bench::PRCurve;
use sparselabel::grid::ImageGrid;

const SIZE: usize = 256;
const MARGIN: usize = 16;

struct Canvas(ImageGrid);

impl Canvas {
    fn put(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        if x < SIZE && y < SIZE {
            for (c, v) in rgb.into_iter().enumerate() {
                self.0.set(x, y, c, v);
            }
        }
    }

    /// Pixel of a point in the unit square (recall right, precision up).
    fn to_px(r: f64, p: f64) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        (MARGIN as f64 + r.clamp(0.0, 1.0) * span, (SIZE - MARGIN) as f64 - p.clamp(0.0, 1.0) * span)
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), rgb: [f64; 3]) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as usize, y.round() as usize, rgb);
        }
    }
}

/// Curve in blue over a 0.1 grid, the ODS operating point in red.
pub fn pr_plot(curve: &PRCurve) -> ImageGrid {
    let mut c = Canvas(ImageGrid::from_fn(SIZE, SIZE, 3, |_, _, _| 1.0));
    let grid = [0.85; 3];
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        let colour = if k == 0 || k == 10 { [0.0; 3] } else { grid };
        c.line(Canvas::to_px(v, 0.0), Canvas::to_px(v, 1.0), colour);
        c.line(Canvas::to_px(0.0, v), Canvas::to_px(1.0, v), colour);
    }
    // points with no detections carry no precision information
    let mut pts: Vec<(f64, f64)> = curve
        .recall
        .iter()
        .zip(&curve.precision)
        .filter(|(r, p)| **r > 0.0 || **p > 0.0)
        .map(|(&r, &p)| (r, p))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        c.line(Canvas::to_px(w[0].0, w[0].1), Canvas::to_px(w[1].0, w[1].1), [0.1, 0.2, 0.9]);
    }
    if let Some(k) = curve.thresholds.iter().position(|&t| t == curve.ods_threshold) {
        let (x, y) = Canvas::to_px(curve.recall[k], curve.precision[k]);
        for dy in -2..=2 {
            for dx in -2..=2 {
                c.put((x + dx as f64).round() as usize, (y + dy as f64).round() as usize, [0.9, 0.1, 0.1]);
            }
        }
    }
    c.0
}
