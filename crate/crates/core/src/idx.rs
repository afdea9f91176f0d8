//! IDX (MNIST-style) image and label files.

use std::path::Path;

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn format(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format(offset, "truncated header"))
}

/// Returns the dimensions and the payload following the header.
fn parse(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(format(0, format!("magic {found}, expected {magic}")));
    }
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(format(bytes.len(), format!("truncated: {len} payload bytes expected")));
    }
    if payload.len() > len {
        return Err(format(start + len, "trailing bytes"));
    }
    Ok((dims, payload))
}

pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<LabeledDataset> {
    let (idims, pixels) = parse(images, IMAGE_MAGIC, 3)?;
    let (ldims, raw_labels) = parse(labels, LABEL_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(format(
            4,
            format!("{} images but {} labels", idims[0], ldims[0]),
        ));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    LabeledDataset::new(features, labels, num_classes, split)
}

pub fn ingest_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, split)
}

/// Encodes images `[N, H, W]` of raw bytes and their labels as IDX files.
pub fn encode_idx(images: &[u8], n: usize, h: usize, w: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}
