//! Readers and writers for every dataset artifact: Middlebury `.flo` flow,
//! PFM depth, PGM segment masks, detection JSON, match CSV, TUM trajectory
//! text, and the dataset manifest with checksums.

mod detections;
mod flo;
mod manifest;
mod matches;
mod pfm;
mod pgm;
mod trajectory;

pub use detections::{detections_to_bytes, read_detections, write_detections};
pub use flo::{flow_to_bytes, read_flow, write_flow};
pub use manifest::{
    read_manifest, verify_manifest, write_manifest, DatasetManifest, FrameFiles, ManifestReport,
};
pub use matches::{matches_to_bytes, read_matches, write_matches};
pub use pfm::{depth_to_bytes, read_depth, write_depth};
pub use pgm::{gray_to_bytes, mask_to_bytes, read_mask, write_gray, write_mask};
pub use trajectory::{read_trajectory, trajectory_to_bytes, write_trajectory};

use thiserror::Error;

/// Errors for malformed or unreadable dataset files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic at byte {offset}: {detail}")]
    BadMagic { path: String, offset: u64, detail: String },
    #[error("{path}: truncated at byte {offset} (needed {needed} more)")]
    Truncated { path: String, offset: u64, needed: u64 },
    #[error("{path}: {trailing} trailing bytes after byte {offset}")]
    TrailingBytes { path: String, offset: u64, trailing: u64 },
    #[error("{path}: parse error at {location}: {detail}")]
    Parse { path: String, location: String, detail: String },
    #[error("{path}: unsupported: {detail}")]
    Unsupported { path: String, detail: String },
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
    #[error("dimensions mismatch across frame files: {detail}")]
    ShapeMismatch { detail: String },
    #[error("{path}: checksum mismatch: manifest {expected}, file {actual}")]
    ChecksumMismatch { path: String, expected: String, actual: String },
    #[error("{path}: missing file")]
    MissingFile { path: String },
    #[error("{path}: io error: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            FormatError::MissingFile { path: path.display().to_string() }
        } else {
            FormatError::io(path, e)
        }
    })
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

/// Hex SHA-256 of a byte buffer, as stored in manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
