//! IDX image/label files (the MNIST container format).
//!
//! Big-endian magic `0x00000803` for 3-D unsigned-byte image arrays and
//! `0x00000801` for 1-D label arrays, followed by one big-endian u32 per
//! dimension and the raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]`, one row of `height·width` values per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::IdxTruncated)
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::IdxMagic { expected, found });
    }
    Ok(())
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let height = be_u32(bytes, 8)? as usize;
    let width = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = count * height * width;
    if body.len() < need {
        return Err(Error::IdxTruncated);
    }
    Ok(IdxImages {
        count,
        height,
        width,
        pixels: body[..need].iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::IdxTruncated);
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Reads an image file and its label file, checking that the counts agree.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(IdxImages, Vec<usize>)> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let imgs = read_idx_images(&ib)?;
    let labels = read_idx_labels(&lb)?;
    if imgs.count != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: imgs.count,
            labels: labels.len(),
        });
    }
    Ok((imgs, labels))
}

/// Encodes raw pixel bytes as an IDX image file.
pub fn write_idx_images(count: usize, height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * height * width {
        return Err(Error::LengthMismatch {
            expected: count * height * width,
            actual: pixels.len(),
        });
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
