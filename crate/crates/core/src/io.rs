//! Image loading and the raw map file format.
//!
//! A raw map file is the 8-byte magic `FGMAP01\0`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dimensions, then the values as
//! little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const MAP_MAGIC: &[u8; 8] = b"FGMAP01\0";

/// A decoded image scaled to `[0, 1]`, together with its original size.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    /// `[channels, h, w]` at the requested size.
    pub pixels: Tensor,
    pub original_width: usize,
    pub original_height: usize,
}

/// Decode an image file, convert it to `channels` (1 = luma, 3 = RGB), scale
/// to `[0, 1]` and bilinearly resize to `h x w`.
pub fn load_image(
    path: impl AsRef<Path>,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<LoadedImage> {
    let path = path.as_ref();
    let decoded = image::open(path)?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => decoded.into_luma8().into_raw(),
        3 => decoded.into_rgb8().into_raw(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "cannot load `{}` as a {other}-channel image",
                path.display()
            )))
        }
    };
    let plane = width * height;
    let mut planar = vec![0f32; channels * plane];
    for (i, px) in interleaved.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * plane + i] = f32::from(v) / 255.0;
        }
    }
    let full = Tensor::new(vec![channels, height, width], planar)?;
    let pixels = if (height, width) == (h, w) {
        full
    } else {
        tensor::bilinear_resize(&full, h, w)?
    };
    Ok(LoadedImage {
        pixels,
        original_width: width,
        original_height: height,
    })
}

pub fn encode_raw_map(map: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.rank() + 4 * map.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.rank() as u32).to_le_bytes());
    for &d in map.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: &str| Error::InvalidArgument(format!("raw map: {detail}"));
    let body = bytes
        .strip_prefix(MAP_MAGIC.as_slice())
        .ok_or_else(|| bad("missing FGMAP01 magic"))?;
    let mut words = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    if body.len() % 4 != 0 {
        return Err(bad("length is not a multiple of 4"));
    }
    let rank = u32::from_le_bytes(words.next().ok_or_else(|| bad("missing rank"))?) as usize;
    let shape = (0..rank)
        .map(|_| words.next().map(|w| u32::from_le_bytes(w) as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated shape"))?;
    let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(bad(&format!(
            "shape {shape:?} needs {expected} values, found {}",
            data.len()
        )));
    }
    Tensor::new(shape, data)
}

pub fn write_raw_map(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_raw_map(map))?)
}

pub fn read_raw_map(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raw_map(&fs::read(path)?)
}
