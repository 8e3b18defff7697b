//! IDX (MNIST-style) container parsing and writing.
//!
//! Images: magic 0x00000803, dims [count, rows, cols], u8 pixels.
//! Labels: magic 0x00000801, dims [count], u8 labels.

use super::{DataError, LabeledImageSet};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32, DataError> {
        if self.pos + 4 > self.bytes.len() {
            return Err(DataError::Parse {
                path: self.path.to_string(),
                offset: self.pos,
                msg: "truncated while reading u32".into(),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Parse {
                path: self.path.to_string(),
                offset: self.pos,
                msg: format!("truncated: wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Load an IDX image/label file pair into a labeled set of 1-channel
/// images on the [0,255] scale.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: &str,
) -> Result<LabeledImageSet, DataError> {
    let img_bytes = fs::read(images_path).map_err(|e| DataError::Io {
        path: images_path.display().to_string(),
        source: e,
    })?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| DataError::Io {
        path: labels_path.display().to_string(),
        source: e,
    })?;
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let mut r = Reader {
        bytes: &img_bytes,
        pos: 0,
        path: &ipath,
    };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Parse {
            path: ipath.clone(),
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.bytes(count * rows * cols)?;

    let mut r = Reader {
        bytes: &lbl_bytes,
        pos: 0,
        path: &lpath,
    };
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Parse {
            path: lpath.clone(),
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let lcount = r.u32_be()? as usize;
    if lcount != count {
        return Err(DataError::Parse {
            path: lpath.clone(),
            offset: 4,
            msg: format!("{lcount} labels for {count} images"),
        });
    }
    let labels_raw = r.bytes(count)?;

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let data: Vec<f64> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| b as f64)
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], data).expect("idx shape"));
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledImageSet::new(images, labels, classes.max(2), split, "idx")
}

/// Write a labeled set of 1-channel images as an IDX image/label file pair.
/// Pixel values are rounded and clamped to u8.
pub fn write_idx(
    set: &LabeledImageSet,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let shape = set.image_shape();
    assert_eq!(shape[0], 1, "idx export is single-channel");
    let (rows, cols) = (shape[1], shape[2]);

    let mut img = Vec::with_capacity(16 + set.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in &set.images {
        img.extend(im.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }

    let mut lbl = Vec::with_capacity(8 + set.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl.extend(set.labels.iter().map(|&y| y as u8));

    let write = |path: &Path, bytes: &[u8]| -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(bytes).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    write(images_path, &img)?;
    write(labels_path, &lbl)
}
