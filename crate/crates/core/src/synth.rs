//! Synthetic boundary-detection corpus: textured polygons on a textured
//! background, rendered with anti-aliasing, with exact region boundaries.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::grid::ImageGrid;
use crate::seed::{derive_indexed, rng, Rng};

/// Rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_polygons: usize,
    pub max_polygons: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak texture amplitude range.
    pub texture_amplitude: (f64, f64),
    /// Texture period range in pixels.
    pub texture_period: (f64, f64),
    /// Values above 1 square up the sinusoid into sharp stripes.
    pub texture_sharpness: f64,
    /// Minimum mean-intensity gap between a polygon and what it covers.
    pub min_contrast: f64,
    /// Subsamples per pixel side.
    pub supersample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            min_polygons: 2,
            max_polygons: 4,
            min_radius: 12.0,
            max_radius: 32.0,
            texture_amplitude: (0.02, 0.06),
            texture_period: (6.0, 14.0),
            texture_sharpness: 1.0,
            min_contrast: 0.25,
            supersample: 4,
        }
    }
}

impl SynthConfig {
    /// Strong, fine, stripe-like texture whose internal edges are not
    /// region boundaries.
    pub fn texture_heavy() -> Self {
        Self {
            texture_amplitude: (0.10, 0.16),
            texture_period: (3.0, 6.0),
            texture_sharpness: 4.0,
            min_contrast: 0.3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Texture {
    base: f64,
    amplitude: f64,
    freq: f64,
    dir: (f64, f64),
    phase: f64,
    sharpness: f64,
}

impl Texture {
    fn random(r: &mut Rng, base: f64, cfg: &SynthConfig) -> Self {
        let angle: f64 = r.gen_range(0.0..std::f64::consts::PI);
        let period = r.gen_range(cfg.texture_period.0..=cfg.texture_period.1);
        Self {
            base,
            amplitude: r.gen_range(cfg.texture_amplitude.0..=cfg.texture_amplitude.1),
            freq: std::f64::consts::TAU / period,
            dir: (angle.cos(), angle.sin()),
            phase: r.gen_range(0.0..std::f64::consts::TAU),
            sharpness: cfg.texture_sharpness,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s = (self.freq * (x * self.dir.0 + y * self.dir.1) + self.phase).sin();
        let wave = if self.sharpness > 1.0 {
            (self.sharpness * s).tanh() / self.sharpness.tanh()
        } else {
            s
        };
        self.base + self.amplitude * wave
    }
}

#[derive(Debug, Clone)]
struct Polygon {
    vertices: Vec<(f64, f64)>,
    texture: Texture,
}

impl Polygon {
    fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = v[i];
            let (xj, yj) = v[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

/// One rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: ImageGrid,
    /// One-pixel-wide region boundaries, values in {0, 1}.
    pub boundaries: ImageGrid,
    /// Region id at each pixel center (0 is the background).
    pub regions: Vec<usize>,
}

struct Scene {
    background: Texture,
    polygons: Vec<Polygon>,
}

impl Scene {
    /// Index of the topmost region containing the point and its intensity.
    fn sample(&self, x: f64, y: f64) -> (usize, f64) {
        for (i, p) in self.polygons.iter().enumerate().rev() {
            if p.contains(x, y) {
                return (i + 1, p.texture.at(x, y));
            }
        }
        (0, self.background.at(x, y))
    }
}

fn random_scene(r: &mut Rng, cfg: &SynthConfig) -> Scene {
    let bg = r.gen_range(0.15..0.85);
    let background = Texture::random(r, bg, cfg);
    let count = r.gen_range(cfg.min_polygons..=cfg.max_polygons);
    let mut bases = vec![background.base];
    let mut polygons = Vec::with_capacity(count);
    for _ in 0..count {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let cx = r.gen_range(0.15 * w..0.85 * w);
        let cy = r.gen_range(0.15 * h..0.85 * h);
        let radius = r.gen_range(cfg.min_radius..=cfg.max_radius);
        let n = r.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles
            .iter()
            .map(|a| {
                let rr = radius * r.gen_range(0.6..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        // a polygon may overlap anything drawn before it, so keep its
        // intensity away from all earlier ones (best of a bounded search)
        let mut base = 0.5;
        let mut best_gap = f64::NEG_INFINITY;
        for _ in 0..64 {
            let b: f64 = r.gen_range(0.1..0.9);
            let gap = bases.iter().map(|&o| (o - b).abs()).fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                (base, best_gap) = (b, gap);
            }
            if gap >= cfg.min_contrast {
                break;
            }
        }
        bases.push(base);
        polygons.push(Polygon {
            vertices,
            texture: Texture::random(r, base, cfg),
        });
    }
    Scene {
        background,
        polygons,
    }
}

/// Deletes, in raster order, pixels whose only two neighbors are one
/// horizontal and one vertical 4-neighbor: the redundant corners of the
/// staircases a 4-connected curve forms on diagonals. The two neighbors
/// touch diagonally, so 8-connectivity survives.
fn remove_staircase_corners(mask: &mut [bool], w: usize, h: usize) {
    let at = |m: &[bool], x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && m[y as usize * w + x as usize]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !at(mask, x, y) {
                continue;
            }
            let count = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
                .filter(|&(dx, dy)| (dx, dy) != (0, 0) && at(mask, x + dx, y + dy))
                .count();
            let horizontal = at(mask, x - 1, y) as u8 + at(mask, x + 1, y) as u8;
            let vertical = at(mask, x, y - 1) as u8 + at(mask, x, y + 1) as u8;
            if count == 2 && horizontal == 1 && vertical == 1 {
                mask[y as usize * w + x as usize] = false;
            }
        }
    }
}

/// Renders one image from `seed`.
pub fn generate(seed: u64, cfg: &SynthConfig) -> SynthImage {
    let mut r = rng(seed);
    let scene = random_scene(&mut r, cfg);
    let (w, h) = (cfg.width, cfg.height);
    let s = cfg.supersample.max(1);
    let mut regions = vec![0; w * h];
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..s {
                for sx in 0..s {
                    let px = x as f64 + (sx as f64 + 0.5) / s as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / s as f64;
                    acc += scene.sample(px, py).1;
                }
            }
            data[y * w + x] = (acc / (s * s) as f64).clamp(0.0, 1.0);
            regions[y * w + x] = scene.sample(x as f64 + 0.5, y as f64 + 0.5).0;
        }
    }
    // one-sided label changes form 4-connected staircases on diagonals;
    // thinning leaves the 8-connected one-pixel curve a detector can match
    let mut mask: Vec<bool> = (0..w * h)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let id = regions[p];
            (x + 1 < w && regions[p + 1] != id) || (y + 1 < h && regions[p + w] != id)
        })
        .collect();
    remove_staircase_corners(&mut mask, w, h);
    let boundaries = ImageGrid::from_vec(w, h, 1, mask.iter().map(|&m| m as u8 as f64).collect())
        .expect("finite");
    SynthImage {
        image: ImageGrid::from_vec(w, h, 1, data).expect("finite"),
        boundaries,
        regions,
    }
}

/// `count` images, the `i`-th drawn from a seed derived from `(root, i)`.
pub fn corpus(root: u64, count: usize, cfg: &SynthConfig) -> Vec<SynthImage> {
    (0..count)
        .map(|i| generate(derive_indexed(root, "synthetic-image", i as u64), cfg))
        .collect()
}
