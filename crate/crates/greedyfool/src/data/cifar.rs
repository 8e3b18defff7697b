//! CIFAR-10 binary batch parsing: records of 1 label byte followed by
//! 3072 image bytes (channel-planar 3x32x32).

use super::{DataError, LabeledImageSet};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const RECORD: usize = 1 + 3 * 32 * 32;

pub fn load_cifar_binary(path: &Path, split: &str) -> Result<LabeledImageSet, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            offset: bytes.len(),
            msg: format!("file size {} not a positive multiple of {RECORD}", bytes.len()),
        });
    }
    let count = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &bytes[i * RECORD..(i + 1) * RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                offset: i * RECORD,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64).collect();
        images.push(Tensor::new(vec![3, 32, 32], data).expect("cifar shape"));
    }
    LabeledImageSet::new(images, labels, 10, split, "cifar10-binary")
}
