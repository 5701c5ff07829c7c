//! Raster and raw grid I/O.
//!
//! Grayscale PNG and PGM files (8- or 16-bit) load as single-channel grids
//! scaled to `[0, 1]`. The `BIFG` raw format caches arbitrary grids such as
//! feature maps: magic `BIFG`, then little-endian `u32` width, height and
//! channels, then the channel-planar `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, LabelMap};

pub const RAW_MAGIC: &[u8; 4] = b"BIFG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => u8::MAX as f32,
            BitDepth::Sixteen => u16::MAX as f32,
        }
    }
}

fn samples_of(img: DynamicImage, source: &str) -> Result<(usize, usize, Vec<u32>, BitDepth)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok((w, h, buf.into_raw().into_iter().map(u32::from).collect(), BitDepth::Eight)),
        DynamicImage::ImageLuma16(buf) => {
            Ok((w, h, buf.into_raw().into_iter().map(u32::from).collect(), BitDepth::Sixteen))
        }
        other => Err(Error::UnsupportedImage(format!(
            "{source}: expected 8- or 16-bit grayscale, found {:?}",
            other.color()
        ))),
    }
}

/// Raw integer samples of a single-channel raster.
fn load_samples(path: &Path) -> Result<(usize, usize, Vec<u32>, BitDepth)> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    samples_of(img, &path.display().to_string())
}

fn to_unit(w: usize, h: usize, samples: Vec<u32>, depth: BitDepth) -> Result<Grid2D> {
    let max = depth.max_value();
    Grid2D::new(w, h, 1, samples.into_iter().map(|s| s as f32 / max).collect())
}

/// Decodes an in-memory PNG or PGM the same way [`load_image`] reads files.
pub fn decode_image(bytes: &[u8]) -> Result<Grid2D> {
    let img = image::ImageReader::new(std::io::Cursor::new(bytes)).with_guessed_format()?.decode()?;
    let (w, h, samples, depth) = samples_of(img, "upload")?;
    to_unit(w, h, samples, depth)
}

/// Encodes channel 0 of `image` as an 8-bit grayscale PNG.
pub fn encode_png(image: &Grid2D) -> Result<Vec<u8>> {
    let plane: Vec<u8> = image.channel(0).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, plane).expect("buffer sized from grid");
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Loads a grayscale raster with intensities scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Grid2D> {
    let (w, h, samples, depth) = load_samples(path.as_ref())?;
    to_unit(w, h, samples, depth)
}

/// Loads an integer label raster (e.g. instance ids) without scaling.
pub fn load_label_values(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>)> {
    let (w, h, samples, _) = load_samples(path.as_ref())?;
    Ok((w, h, samples))
}

/// Saves channel 0 of `image`, clamped to `[0, 1]` and quantized to `depth`.
/// The format follows the extension (`.png`, `.pgm`).
pub fn save_image(path: impl AsRef<Path>, image: &Grid2D, depth: BitDepth) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let max = depth.max_value();
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * max).round();
    let plane = image.channel(0);
    match depth {
        BitDepth::Eight => {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(w, h, plane.iter().map(|&v| quantize(v) as u8).collect::<Vec<_>>())
                    .expect("buffer sized from grid");
            buf.save(path.as_ref())?;
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Luma<u16>, _> =
                ImageBuffer::from_raw(w, h, plane.iter().map(|&v| quantize(v) as u16).collect::<Vec<_>>())
                    .expect("buffer sized from grid");
            buf.save(path.as_ref())?;
        }
    }
    Ok(())
}

/// Saves integer labels as an 8-bit raster (values must fit in a byte).
pub fn save_label_values(path: impl AsRef<Path>, width: usize, height: usize, values: &[u32]) -> Result<()> {
    let bytes = values
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::UnsupportedImage(format!("label value {v} exceeds 255"))))
        .collect::<Result<Vec<u8>>>()?;
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::DimensionMismatch("label values do not match dimensions".into()))?;
    buf.save(path.as_ref())?;
    Ok(())
}

/// Writes a binary mask as 0/255 8-bit raster.
pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMap) -> Result<()> {
    let values: Vec<u32> = mask.labels().iter().map(|&l| u32::from(l) * 255).collect();
    save_label_values(path, mask.width(), mask.height(), &values)
}

/// Reads a mask written by [`save_mask`] (any nonzero pixel is foreground).
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (w, h, values) = load_label_values(path)?;
    Ok(LabelMap::from_fn(w, h, |x, y| values[y * w + x] != 0))
}

pub fn write_raw(mut out: impl Write, grid: &Grid2D) -> Result<()> {
    out.write_all(RAW_MAGIC)?;
    for dim in [grid.width(), grid.height(), grid.channels()] {
        let dim = u32::try_from(dim).map_err(|_| Error::format("BIFG", "dimension exceeds u32"))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(grid.data().len() * 4);
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(mut input: impl Read) -> Result<Grid2D> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::format("BIFG", format!("truncated header: {e}")))?;
    if &header[..4] != RAW_MAGIC {
        return Err(Error::format("BIFG", "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(c))
        .ok_or_else(|| Error::format("BIFG", "dimensions overflow"))?;
    let mut bytes = vec![0u8; n * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::format("BIFG", format!("truncated data: {e}")))?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Grid2D::new(w, h, c, data)
}

pub fn save_raw(path: impl AsRef<Path>, grid: &Grid2D) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_raw(&mut out, grid)?;
    out.flush()?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Grid2D> {
    read_raw(BufReader::new(File::open(path)?))
}
