//! JSON checkpoint files shared by every model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::nn::{LoadError, TensorData};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    Format { expected: String, found: String },
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("frozen base weights differ from the ones the checkpoint was trained on")]
    BaseMismatch,
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// A model's configuration plus the tensors it cannot regenerate from the
/// configuration's seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format: String,
    pub version: u32,
    pub weights_version: String,
    pub config: C,
    /// Checksum of the frozen base the stored deltas apply to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checksum: Option<String>,
    pub tensors: BTreeMap<String, TensorData>,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8], format: &str) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_slice(bytes)?;
        if ckpt.format != format {
            return Err(CheckpointError::Format { expected: format.to_string(), found: ckpt.format });
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }

    /// Writes next to `path` and renames into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|cause| CheckpointError::Io { path: path.display().to_string(), cause })
    }

    pub fn load(path: &Path, format: &str) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|cause| CheckpointError::Io { path: path.display().to_string(), cause })?;
        Self::from_bytes(&bytes, format)
    }
}

/// Write-temp-then-rename in the target directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let unique = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_file_name(format!(".{file_name}.{}.{unique}.tmp", std::process::id()));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Short content hash of a tensor set, used as a weights version.
pub fn fingerprint(tensors: &BTreeMap<String, TensorData>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())[..12].to_string()
}
