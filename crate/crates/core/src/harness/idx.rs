//! Big-endian IDX files: `0x00000803` unsigned-byte image stacks and `0x00000801` label vectors.

use std::path::Path;

use crate::error::{RclError, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or(RclError::Length { expected: offset + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let got = read_u32(bytes, 0)?;
    if got != want {
        return Err(RclError::Format { offset: 0, detail: format!("magic {got:#010x}, expected {want:#010x}") });
    }
    Ok(())
}

/// Images as an `n × (rows·cols)` tensor with pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let len = rows * cols;
    if n == 0 || len == 0 {
        return Err(RclError::Format { offset: 4, detail: format!("empty image stack {n}×{rows}×{cols}") });
    }
    let expected = 16 + n * len;
    if bytes.len() < expected {
        return Err(RclError::Length { expected, found: bytes.len() });
    }
    let data = bytes[16..expected].iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![n, len], data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(RclError::Length { expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| RclError::io(p, e));
    let images = parse_images(&read(images_path)?)?;
    let labels = parse_labels(&read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(RclError::Length { expected: images.rows(), found: labels.len() });
    }
    Ok((images, labels))
}

/// Encodes images (`n × r × c` bytes) in IDX form.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
