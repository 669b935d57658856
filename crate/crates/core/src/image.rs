//! Top-down depth images and their physical metadata.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Camera and raster geometry shared by an image and every grasp on it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub height: usize,
    pub width: usize,
    /// Meters per pixel (orthographic).
    pub pixel_scale: f64,
    /// Camera height above the table, meters. Also the table depth.
    pub camera_height: f64,
}

impl ImageMeta {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Invalid(format!(
                "image {}x{} too small",
                self.height, self.width
            )));
        }
        if !(self.pixel_scale > 0.0 && self.camera_height > 0.0) {
            return Err(Error::Invalid(
                "pixel_scale and camera_height must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Grasp geometry needs equal pixel pitch in normalized units on both
    /// axes, hence square rasters.
    pub fn require_square(&self) -> Result<()> {
        self.validate()?;
        if self.height != self.width {
            return Err(Error::Invalid(format!(
                "grasp geometry needs a square image, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Pixels spanned by normalized length 2 (edge pixel center to edge pixel
    /// center).
    pub fn span(&self) -> f64 {
        (self.width - 1) as f64
    }
}

/// Camera-frame depths in meters, row-major. The table sits at
/// `camera_height`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub meta: ImageMeta,
    pub depth: Vec<f32>,
}

impl DepthImage {
    /// An empty table.
    pub fn table(meta: ImageMeta) -> Result<Self> {
        meta.validate()?;
        Ok(Self {
            meta,
            depth: vec![meta.camera_height as f32; meta.height * meta.width],
        })
    }

    pub fn new(meta: ImageMeta, depth: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if depth.len() != meta.height * meta.width {
            return Err(Error::Shape {
                op: "depth image",
                lhs: vec![meta.height, meta.width],
                rhs: vec![depth.len()],
            });
        }
        Ok(Self { meta, depth })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.meta.width + col]
    }

    /// `(depth − table) / camera_height` as an `[H, W]` tensor. The table
    /// maps to 0 and objects are negative.
    pub fn normalized(&self) -> Tensor {
        // The table is stored in f32; compare against the same rounding so
        // that it maps to exactly 0.
        let table = self.meta.camera_height as f32 as f64;
        Tensor::new(
            vec![self.meta.height, self.meta.width],
            self.depth
                .iter()
                .map(|&d| (d as f64 - table) / table)
                .collect(),
        )
        .expect("validated shape")
    }
}

/// Depth units of 16-bit graymaps, meters per level.
pub const PGM_DEPTH_UNIT: f64 = 1e-4;

fn pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let bad = |m: &str| Error::format("PGM", m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary graymaps (P5) are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    // Exactly one whitespace byte separates the header from the raster.
    Ok((num(fields[1])?, num(fields[2])?, num(fields[3])?, i + 1))
}

/// Reads a binary 16-bit graymap whose levels are depths in
/// [`PGM_DEPTH_UNIT`]s.
pub fn read_depth_pgm(
    path: &std::path::Path,
    pixel_scale: f64,
    camera_height: f64,
) -> Result<DepthImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, off) = pgm_header(&bytes)?;
    if maxval < 256 {
        return Err(Error::format("PGM", "depth graymaps must be 16-bit"));
    }
    let raster = bytes.get(off..).unwrap_or_default();
    if raster.len() != 2 * w * h {
        return Err(Error::format(
            "PGM",
            format!(
                "expected {} raster bytes, found {}",
                2 * w * h,
                raster.len()
            ),
        ));
    }
    let depth = raster
        .chunks_exact(2)
        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * PGM_DEPTH_UNIT) as f32)
        .collect();
    DepthImage::new(
        ImageMeta {
            height: h,
            width: w,
            pixel_scale,
            camera_height,
        },
        depth,
    )
}

pub fn write_depth_pgm(path: &std::path::Path, image: &DepthImage) -> Result<()> {
    let m = &image.meta;
    let mut out = format!("P5\n{} {}\n65535\n", m.width, m.height).into_bytes();
    for &d in &image.depth {
        let level = (d as f64 / PGM_DEPTH_UNIT).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm8(
    path: &std::path::Path,
    width: usize,
    height: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Invalid(
            "pixel count does not match the raster size".into(),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
