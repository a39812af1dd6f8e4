//! IDX files as distributed with MNIST: big-endian headers followed by raw
//! unsigned bytes.
//!
//! Images: magic `0x00000803`, count, rows, cols (u32 BE), then pixels row-major.
//! Labels: magic `0x00000801`, count (u32 BE), then one byte per label.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// Raw image file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header(bytes: &[u8], words: usize, magic: u32) -> Result<Vec<u32>, IdxError> {
    let truncated = |needed| IdxError::Truncated {
        needed,
        available: bytes.len(),
    };
    let found = u32::from_be_bytes(
        bytes
            .get(..4)
            .ok_or_else(|| truncated(4))?
            .try_into()
            .unwrap(),
    );
    if found != magic {
        return Err(IdxError::BadMagic {
            expected: magic,
            found,
        });
    }
    let needed = 4 * words;
    let fields = bytes
        .get(..needed)
        .ok_or_else(|| truncated(needed))?
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    Ok(fields)
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let h = header(bytes, 4, IMAGE_MAGIC)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let h = header(bytes, 2, LABEL_MAGIC)?;
    let count = h[1] as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IMAGE_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    std::fs::write(path, bytes).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}
