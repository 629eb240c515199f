//! Image files: 8/16-bit grayscale PNG and a raw `f32` format.
//!
//! The raw format is a one-line ASCII header `"<width> <height>\n"` followed by
//! `width * height` little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use crate::types::{normalize_image, Image2D, LabelMap};
use crate::{Error, Result};

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

pub fn is_supported(path: &Path) -> bool {
    matches!(extension(path).as_str(), "png" | "raw" | "f32")
}

/// Loads a grayscale PNG (scaled by 1/255 or 1/65535) or a raw `f32` file,
/// min-max normalizing when `normalize` is set.
pub fn load_image(path: &Path, normalize: bool) -> Result<Image2D> {
    let img = match extension(path).as_str() {
        "png" => load_png(path)?,
        "raw" | "f32" => load_raw(path)?,
        other => return Err(Error::file(path, format!("unsupported image extension {other:?}"))),
    };
    Ok(if normalize { normalize_image(&img).image } else { img })
}

fn load_png(path: &Path) -> Result<Image2D> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::file(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::file(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::file(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::file(path, format!("expected grayscale PNG, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => {
            buf[..2 * w * h].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0).collect()
        }
        other => return Err(Error::file(path, format!("unsupported bit depth {other:?}"))),
    };
    Image2D::new(h, w, values).map_err(|e| Error::file(path, e))
}

fn load_raw(path: &Path) -> Result<Image2D> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::file(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::file(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::file(path, format!("bad header {header:?}: {e}")))?;
    let [w, h] = dims[..] else {
        return Err(Error::file(path, format!("header must be \"width height\", got {header:?}")));
    };
    let data = &bytes[nl + 1..];
    if data.len() != 4 * w * h {
        return Err(Error::file(path, format!("expected {} data bytes, found {}", 4 * w * h, data.len())));
    }
    let values = data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Image2D::new(h, w, values).map_err(|e| Error::file(path, e))
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::file(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::file(path, e))?;
    writer.finish().map_err(|e| Error::file(path, e))
}

/// 16-bit grayscale PNG; values are clipped to `[0, 1]`.
pub fn save_image(path: &Path, img: &Image2D) -> Result<()> {
    let data: Vec<u8> = img
        .values()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path, img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn save_raw(path: &Path, img: &Image2D) -> Result<()> {
    let mut out = Cursor::new(Vec::with_capacity(16 + 4 * img.len()));
    writeln!(out, "{} {}", img.width(), img.height())?;
    for v in img.values() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    std::fs::write(path, out.into_inner()).map_err(|e| Error::file(path, e))
}

/// 8-bit PNG with labels spread evenly over 0..=255.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let step = 255 / (labels.num_classes() - 1);
    let data: Vec<u8> = labels.labels().iter().map(|&l| (l * step) as u8).collect();
    write_png(path, labels.width(), labels.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// Inverse of [`save_labels`].
pub fn load_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = load_png(path)?;
    let top = (num_classes - 1) as f64;
    let labels = img.values().iter().map(|v| (v * top).round() as usize).collect();
    LabelMap::new(img.height(), img.width(), num_classes, labels).map_err(|e| Error::file(path, e))
}

pub fn save_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

/// Supported image files of a directory in lexicographic file-name order.
pub fn list_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_slices(dir: &Path, normalize: bool) -> Result<Vec<Image2D>> {
    list_slices(dir)?.iter().map(|p| load_image(p, normalize)).collect()
}
