//! Model checkpoints: versioned JSON containers holding the architecture
//! description, input spec, parameter tensors, and training metadata.

use super::Model;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const FORMAT: &str = "greedyfool-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: not a {FORMAT} file (format tag {found:?})")]
    WrongFormat { path: String, found: String },
    #[error("{path}: unsupported checkpoint version {found} (supported: {VERSION})")]
    WrongVersion { path: String, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    model: Model,
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let container = Container {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string(&container).map_err(|e| CheckpointError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let container: Container =
        serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    if container.format != FORMAT {
        return Err(CheckpointError::WrongFormat {
            path: path.display().to_string(),
            found: container.format,
        });
    }
    if container.version != VERSION {
        return Err(CheckpointError::WrongVersion {
            path: path.display().to_string(),
            found: container.version,
        });
    }
    Ok(container.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, InputSpec};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt.json");
        let model = Model::new(
            InputSpec {
                channels: 1,
                height: 8,
                width: 8,
                scale: 255.0,
            },
            Arch::ConvNet {
                conv1: 2,
                conv2: 3,
                hidden: 4,
                classes: 2,
            },
            7,
        );
        save_model(&model, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.arch, model.arch);
        assert_eq!(back.params["conv1.w"].data(), model.params["conv1.w"].data());
    }

    #[test]
    fn rejects_foreign_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.json");
        std::fs::write(&p, r#"{"hello": 1}"#).unwrap();
        assert!(load_model(&p).is_err());
    }
}
