//! GQSD shard format.
//!
//! ```text
//! "GQSD" | u32 version | u32 records
//! per record:  u16 H | u16 W | f32 pixel_scale | f32 camera_height
//!              f32[H·W] depth (row-major) | u16 annotations
//! per annotation: f32 x, y, z, θ, w | u8 robust | f32 quality
//! ```
//!
//! All values little-endian.

use std::path::Path;

use super::{Annotation, SceneRecord};
use crate::error::{Error, Result};
use crate::graspgeom::GraspConfig;
use crate::image::{DepthImage, ImageMeta};

pub const MAGIC: &[u8; 4] = b"GQSD";
pub const VERSION: u32 = 1;

pub fn encode(records: &[SceneRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(records.len()).map_err(|_| Error::format("GQSD", "too many records"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for r in records {
        let m = &r.depth.meta;
        let (h, w) = (
            u16::try_from(m.height).map_err(|_| Error::format("GQSD", "image too tall"))?,
            u16::try_from(m.width).map_err(|_| Error::format("GQSD", "image too wide"))?,
        );
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&(m.pixel_scale as f32).to_le_bytes());
        out.extend_from_slice(&(m.camera_height as f32).to_le_bytes());
        for d in &r.depth.depth {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let k = u16::try_from(r.annotations.len())
            .map_err(|_| Error::format("GQSD", "too many annotations"))?;
        out.extend_from_slice(&k.to_le_bytes());
        for a in &r.annotations {
            let g = &a.grasp;
            for v in [g.x, g.y, g.z, g.theta, g.w] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.push(a.robust as u8);
            out.extend_from_slice(&(a.quality as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "GQSD",
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<SceneRecord>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("GQSD", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "GQSD",
            format!("unsupported version {version}"),
        ));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let (h, w) = (r.u16()? as usize, r.u16()? as usize);
        let meta = ImageMeta {
            height: h,
            width: w,
            pixel_scale: r.f32()? as f64,
            camera_height: r.f32()? as f64,
        };
        let mut depth = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            depth.push(r.f32()?);
        }
        let depth = DepthImage::new(meta, depth)?;
        let k = r.u16()? as usize;
        let mut annotations = Vec::with_capacity(k);
        for _ in 0..k {
            let mut v = [0.0; 5];
            for x in &mut v {
                *x = r.f32()? as f64;
            }
            let robust = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::format("GQSD", format!("robust flag {b}"))),
            };
            let quality = r.f32()? as f64;
            let grasp = GraspConfig::new(v[0], v[1], v[2], v[3], v[4])
                .map_err(|e| Error::format("GQSD", e.to_string()))?;
            annotations.push(Annotation {
                grasp,
                robust,
                quality,
            });
        }
        out.push(SceneRecord { depth, annotations });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "GQSD",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn write(path: &Path, records: &[SceneRecord]) -> Result<()> {
    std::fs::write(path, encode(records)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<SceneRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
