//! Dense pixel grids and the patch machinery built on them.
//!
//! Pixel data is stored row-major with interleaved channels: the value of
//! channel `ch` at `(x, y)` lives at `(y * width + x) * channels + ch`.
//! Patch columns follow the same convention inside the `side x side` window,
//! so a patch value for window offset `(px, py)` sits at
//! `(py * side + px) * channels + ch`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A dense multi-channel signal on a pixel grid (image, label map or
/// activation map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: width * height * channels,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite grid value {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    data.push(f(x, y, ch));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, ch: usize) -> usize {
        (y * self.width + x) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[self.index(x, y, ch)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, value: f64) {
        let i = self.index(x, y, ch);
        self.data[i] = value;
    }

    /// Channel values of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.channels]
    }

    /// Sample with clamp-to-border addressing.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, ch: usize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy, ch)
    }

    /// Copies a single channel into a new one-channel grid.
    pub fn channel(&self, ch: usize) -> ImageGrid {
        ImageGrid::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, ch))
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Geometry of a square patch: odd side length and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGeometry {
    side: usize,
    channels: usize,
}

impl PatchGeometry {
    pub fn new(side: usize, channels: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(invalid(format!("patch side must be odd and >= 1, got {side}")));
        }
        if channels == 0 {
            return Err(invalid("patch channel count must be >= 1"));
        }
        Ok(Self { side, channels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    /// Length of a patch column, `side * side * channels`.
    pub fn len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Where a patch column was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// A collection of patch columns stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    geometry: PatchGeometry,
    data: Vec<f64>,
    origins: Option<Vec<PatchOrigin>>,
}

impl PatchMatrix {
    pub fn new(geometry: PatchGeometry) -> Self {
        Self {
            geometry,
            data: Vec::new(),
            origins: None,
        }
    }

    pub fn from_columns(geometry: PatchGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() % geometry.len() != 0 {
            return Err(Error::DimensionMismatch {
                expected: geometry.len(),
                got: data.len() % geometry.len(),
            });
        }
        Ok(Self {
            geometry,
            data,
            origins: None,
        })
    }

    pub fn with_origins(mut self, origins: Vec<PatchOrigin>) -> Result<Self> {
        if origins.len() != self.count() {
            return Err(Error::DimensionMismatch {
                expected: self.count(),
                got: origins.len(),
            });
        }
        self.origins = Some(origins);
        Ok(self)
    }

    pub fn push(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.geometry.len() {
            return Err(Error::DimensionMismatch {
                expected: self.geometry.len(),
                got: column.len(),
            });
        }
        if self.origins.is_some() {
            return Err(invalid("push without origin on a matrix that tracks origins"));
        }
        self.data.extend_from_slice(column);
        Ok(())
    }

    pub fn push_with_origin(&mut self, column: &[f64], origin: PatchOrigin) -> Result<()> {
        if column.len() != self.geometry.len() {
            return Err(Error::DimensionMismatch {
                expected: self.geometry.len(),
                got: column.len(),
            });
        }
        if self.origins.is_none() {
            if self.count() > 0 {
                return Err(invalid("origin given for a matrix without origins"));
            }
            self.origins = Some(Vec::new());
        }
        self.data.extend_from_slice(column);
        self.origins.as_mut().unwrap().push(origin);
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.len()
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.geometry.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.geometry.len())
    }

    pub fn origins(&self) -> Option<&[PatchOrigin]> {
        self.origins.as_deref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Copies the `side x side` window centered at `(x, y)` into a new column.
/// Positions outside the grid replicate the nearest edge pixel.
pub fn extract_patch(img: &ImageGrid, x: usize, y: usize, geom: PatchGeometry) -> Result<Vec<f64>> {
    let mut out = vec![0.0; geom.len()];
    extract_patch_into(img, x, y, geom, &mut out)?;
    Ok(out)
}

pub fn extract_patch_into(
    img: &ImageGrid,
    x: usize,
    y: usize,
    geom: PatchGeometry,
    out: &mut [f64],
) -> Result<()> {
    if geom.channels() != img.channels() {
        return Err(Error::ChannelMismatch {
            expected: img.channels(),
            got: geom.channels(),
        });
    }
    if x >= img.width() || y >= img.height() {
        return Err(Error::CenterOutOfBounds {
            x,
            y,
            width: img.width(),
            height: img.height(),
        });
    }
    if out.len() != geom.len() {
        return Err(Error::DimensionMismatch {
            expected: geom.len(),
            got: out.len(),
        });
    }
    let c = geom.channels();
    let side = geom.side();
    let r = geom.radius() as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    for py in 0..side {
        let sy = (y as isize + py as isize - r).clamp(0, h - 1) as usize;
        for px in 0..side {
            let sx = (x as isize + px as isize - r).clamp(0, w - 1) as usize;
            let src = img.index(sx, sy, 0);
            let dst = (py * side + px) * c;
            out[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    Ok(())
}

/// Adds `weight * patch` onto the window centered at `(x, y)`; window
/// positions outside the grid are dropped. This is the adjoint of
/// extraction restricted to in-bounds samples.
pub fn insert_patch(
    img: &mut ImageGrid,
    x: usize,
    y: usize,
    geom: PatchGeometry,
    patch: &[f64],
    weight: f64,
) -> Result<()> {
    if geom.channels() != img.channels() {
        return Err(Error::ChannelMismatch {
            expected: img.channels(),
            got: geom.channels(),
        });
    }
    if patch.len() != geom.len() {
        return Err(Error::DimensionMismatch {
            expected: geom.len(),
            got: patch.len(),
        });
    }
    if x >= img.width() || y >= img.height() {
        return Err(Error::CenterOutOfBounds {
            x,
            y,
            width: img.width(),
            height: img.height(),
        });
    }
    let c = geom.channels();
    let side = geom.side();
    let r = geom.radius() as isize;
    for py in 0..side {
        let sy = y as isize + py as isize - r;
        if sy < 0 || sy >= img.height() as isize {
            continue;
        }
        for px in 0..side {
            let sx = x as isize + px as isize - r;
            if sx < 0 || sx >= img.width() as isize {
                continue;
            }
            let dst = img.index(sx as usize, sy as usize, 0);
            let src = (py * side + px) * c;
            for ch in 0..c {
                img.data[dst + ch] += weight * patch[src + ch];
            }
        }
    }
    Ok(())
}

/// Adjoint of [`extract_patch`] including edge replication: every patch
/// sample is accumulated onto the (clamped) pixel it was read from.
pub fn insert_patch_adjoint(
    img: &mut ImageGrid,
    x: usize,
    y: usize,
    geom: PatchGeometry,
    patch: &[f64],
) -> Result<()> {
    if geom.channels() != img.channels() || patch.len() != geom.len() {
        return Err(Error::DimensionMismatch {
            expected: geom.len(),
            got: patch.len(),
        });
    }
    if x >= img.width() || y >= img.height() {
        return Err(Error::CenterOutOfBounds {
            x,
            y,
            width: img.width(),
            height: img.height(),
        });
    }
    let c = geom.channels();
    let side = geom.side();
    let r = geom.radius() as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    for py in 0..side {
        let sy = (y as isize + py as isize - r).clamp(0, h - 1) as usize;
        for px in 0..side {
            let sx = (x as isize + px as isize - r).clamp(0, w - 1) as usize;
            let dst = img.index(sx, sy, 0);
            let src = (py * side + px) * c;
            for ch in 0..c {
                img.data[dst + ch] += patch[src + ch];
            }
        }
    }
    Ok(())
}

/// Subtracts the per-channel mean from a patch column. Returns the centered
/// column and the removed means.
pub fn zero_mean_patch(patch: &[f64], geom: PatchGeometry) -> (Vec<f64>, Vec<f64>) {
    let mut out = patch.to_vec();
    let means = zero_mean_in_place(&mut out, geom.channels());
    (out, means)
}

pub(crate) fn zero_mean_in_place(patch: &mut [f64], channels: usize) -> Vec<f64> {
    let n = patch.len() / channels;
    let mut means = vec![0.0; channels];
    for px in patch.chunks_exact(channels) {
        for (m, v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    for px in patch.chunks_exact_mut(channels) {
        for (v, m) in px.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    means
}

/// Inverse of [`zero_mean_patch`].
pub fn add_patch_means(patch: &[f64], means: &[f64]) -> Vec<f64> {
    let c = means.len();
    patch
        .iter()
        .enumerate()
        .map(|(i, v)| v + means[i % c])
        .collect()
}

/// Output size of [`rescale`] along one axis.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    (len as f64 * factor).round() as usize
}

/// Bilinear resampling by `factor`. Output sample centers map back to
/// input coordinates through the exact size ratio, so a factor of 1 is an
/// identity and constants and linear ramps are reproduced exactly.
pub fn rescale(img: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(invalid(format!("rescale factor must be positive, got {factor}")));
    }
    let ow = scaled_len(img.width(), factor);
    let oh = scaled_len(img.height(), factor);
    if ow == 0 || oh == 0 {
        return Err(invalid(format!(
            "rescale of {}x{} by {factor} yields an empty grid",
            img.width(),
            img.height()
        )));
    }
    if ow == img.width() && oh == img.height() {
        return Ok(img.clone());
    }
    let sx = img.width() as f64 / ow as f64;
    let sy = img.height() as f64 / oh as f64;
    let c = img.channels();
    let xs: Vec<(usize, usize, f64)> = (0..ow)
        .map(|x| axis_sample((x as f64 + 0.5) * sx - 0.5, img.width()))
        .collect();
    let ys: Vec<(usize, usize, f64)> = (0..oh)
        .map(|y| axis_sample((y as f64 + 0.5) * sy - 0.5, img.height()))
        .collect();
    let mut out = ImageGrid::zeros(ow, oh, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img.get(x0, y0, ch) * (1.0 - fx) + img.get(x1, y0, ch) * fx;
                let bottom = img.get(x0, y1, ch) * (1.0 - fx) + img.get(x1, y1, ch) * fx;
                out.set(ox, oy, ch, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

fn axis_sample(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, pos - lo as f64)
}

/// Source index of target position `t` for nearest-neighbor upsampling.
#[inline]
pub fn nearest_source(t: usize, src_len: usize, target_len: usize) -> usize {
    t * src_len / target_len
}

/// Nearest-neighbor replication onto a grid at least as large as the input.
pub fn upsample_nearest(grid: &ImageGrid, target_w: usize, target_h: usize) -> Result<ImageGrid> {
    if target_w < grid.width() || target_h < grid.height() {
        return Err(invalid(format!(
            "upsample target {target_w}x{target_h} smaller than source {}x{}",
            grid.width(),
            grid.height()
        )));
    }
    let c = grid.channels();
    let mut out = ImageGrid::zeros(target_w, target_h, c);
    for y in 0..target_h {
        let sy = nearest_source(y, grid.height(), target_h);
        for x in 0..target_w {
            let sx = nearest_source(x, grid.width(), target_w);
            let src = grid.index(sx, sy, 0);
            let dst = out.index(x, y, 0);
            out.data[dst..dst + c].copy_from_slice(&grid.data[src..src + c]);
        }
    }
    Ok(out)
}
