//! Big-endian IDX files as distributed with MNIST.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::IdxTruncated { what, needed: at + 4, available: bytes.len() })
}

/// Parse an IDX3 image file into `[N, 1, H, W]`, pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4, "image header")? as usize;
    let h = read_u32(bytes, 8, "image header")? as usize;
    let w = read_u32(bytes, 12, "image header")? as usize;
    let needed = 16 + n * h * w;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated { what: "image data", needed, available: bytes.len() });
    }
    let data = bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4, "label header")? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated { what: "label data", needed, available: bytes.len() });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Load an image/label file pair. The class count is `max(label) + 1`, at least 2.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.shape()[0] != labs.len() {
        return Err(Error::IdxCountMismatch { images: imgs.shape()[0], labels: labs.len() });
    }
    let n_classes = labs.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(imgs, labs, n_classes, split)
}
