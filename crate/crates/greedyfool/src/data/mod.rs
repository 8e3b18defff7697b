//! Dataset ingestion, image import/export, and run-artifact persistence.

mod cifar;
mod idx;
mod imageio;
pub mod synth;

pub use cifar::load_cifar_binary;
pub use idx::{load_idx, write_idx};
pub use imageio::{export_image, import_image, ImageFileFormat};

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at offset {offset}: {msg}")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("inconsistent set: {0}")]
    Inconsistent(String),
}

/// A labeled image set. Images are [C,H,W] float tensors on the [0,255]
/// scale; all images share one shape.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub source: String,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
        split: &str,
        source: &str,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(DataError::Inconsistent("mixed image shapes".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Inconsistent(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            classes,
            split: split.to_string(),
            source: source.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// [C,H,W] shape shared by every image.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn take(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        LabeledImageSet {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
            source: self.source.clone(),
        }
    }

    /// Stack images [i0..i1) into one [N,C,H,W] batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let shape = self.image_shape();
        let per = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        let mut s = vec![indices.len()];
        s.extend_from_slice(shape);
        Tensor::new(s, data).expect("batch shape")
    }
}
