//! Image, label and raw map files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::sparse::read_u32;

/// Loads a PNG, PGM or PPM as values in `[0, 1]`: grayscale files give one
/// channel, everything else three (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    Ok(from_dynamic(&image::open(path)?))
}

pub fn from_dynamic(img: &DynamicImage) -> ImageGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::from_vec(w, h, 1, data).expect("finite")
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            ImageGrid::from_vec(w, h, 1, data).expect("finite")
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let g = img.to_rgb16();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            ImageGrid::from_vec(w, h, 3, data).expect("finite")
        }
        _ => {
            let g = img.to_rgb8();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::from_vec(w, h, 3, data).expect("finite")
        }
    }
}

/// Loads a binary mask: any channel above one half marks a positive pixel.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let g = load_image(path)?;
    Ok(ImageGrid::from_fn(g.width(), g.height(), 1, |x, y, _| {
        if g.pixel(x, y).iter().any(|&v| v > 0.5) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Stacks one mask file per label channel.
pub fn load_channel_masks<P: AsRef<Path>>(paths: &[P]) -> Result<ImageGrid> {
    let masks: Vec<ImageGrid> = paths.iter().map(load_mask).collect::<Result<_>>()?;
    let Some(first) = masks.first() else {
        return Err(invalid("no mask files given"));
    };
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(invalid("channel masks differ in size"));
    }
    let c = masks.len();
    Ok(ImageGrid::from_fn(first.width(), first.height(), c, |x, y, ch| masks[ch].get(x, y, 0)))
}

/// Loads a paletted PNG as one-hot channels, one per palette index below
/// `classes` (defaults to the palette size).
pub fn load_paletted_labels(path: impl AsRef<Path>, classes: Option<usize>) -> Result<ImageGrid> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed {
        return Err(Error::Format("label PNG is not paletted".into()));
    }
    let depth = info.bit_depth as usize;
    let palette = info.palette.as_ref().map_or(0, |p| p.len() / 3);
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let frame = reader.next_frame(&mut buf)?;
    let classes = classes.unwrap_or(palette).max(1);
    let mut out = ImageGrid::zeros(w, h, classes);
    for y in 0..h {
        let line = &buf[y * frame.line_size..(y + 1) * frame.line_size];
        for x in 0..w {
            let bit = x * depth;
            let byte = line[bit / 8];
            let idx = if depth == 8 {
                byte as usize
            } else {
                let shift = 8 - depth - bit % 8;
                ((byte >> shift) as usize) & ((1 << depth) - 1)
            };
            if idx >= classes {
                return Err(Error::Format(format!("label index {idx} exceeds {classes} classes")));
            }
            out.set(x, y, idx, 1.0);
        }
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a one- or three-channel grid as an 8-bit PNG (values clamped to
/// `[0, 1]` and scaled to `[0, 255]`).
pub fn save_png(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let bytes: Vec<u8> = grid.data().iter().map(|&v| to_u8(v)).collect();
    match grid.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)?,
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)?,
        c => return Err(invalid(format!("PNG output needs 1 or 3 channels, got {c}"))),
    }
    Ok(())
}

/// Writes each channel of `grid` to its own grayscale PNG.
pub fn save_channels_png(grid: &ImageGrid, stem: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let stem = stem.as_ref();
    let mut paths = Vec::new();
    for c in 0..grid.channels() {
        let p = if grid.channels() == 1 {
            stem.with_extension("png")
        } else {
            let name = format!("{}_{c}.png", stem.file_name().and_then(|s| s.to_str()).unwrap_or("map"));
            stem.with_file_name(name)
        };
        save_png(&grid.channel(c), &p)?;
        paths.push(p);
    }
    Ok(paths)
}

const RAW_MAGIC: &[u8; 4] = b"SLRM";

/// Raw float map: magic `SLRM`, width, height, channels (u32 LE), then
/// interleaved f32 LE values.
pub fn write_raw(grid: &ImageGrid, mut w: impl Write) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    for v in [grid.width(), grid.height(), grid.channels()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in grid.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(mut r: impl Read) -> Result<ImageGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Format("not a raw map (bad magic)".into()));
    }
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let mut data = Vec::with_capacity(w * h * c);
    for _ in 0..w * h * c {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    ImageGrid::from_vec(w, h, c, data)
}

pub fn save_raw(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_raw(grid, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<ImageGrid> {
    read_raw(BufReader::new(File::open(path)?))
}
