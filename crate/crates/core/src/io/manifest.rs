//! Dataset manifest: per-frame file paths, intrinsics, frame timestamps and
//! SHA-256 checksums of every emitted file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, sha256_hex, write_file, FormatError};
use crate::geometry::CameraIntrinsics;

pub const MANIFEST_VERSION: u32 = 1;

/// Files for one frame. Flow and matches pair frame k with k−1 and are
/// absent for frame 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameFiles {
    pub timestamp: f64,
    pub depth: String,
    pub mask: String,
    pub detections: String,
    #[serde(default)]
    pub flow: Option<String>,
    #[serde(default)]
    pub matches: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameFiles>,
    #[serde(default)]
    pub groundtruth: Option<String>,
    /// Relative path → hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.version != MANIFEST_VERSION {
            return Err(FormatError::Unsupported {
                path: "manifest".into(),
                detail: format!("version {} (supported: {MANIFEST_VERSION})", self.version),
            });
        }
        if !(self.fps > 0.0) {
            return Err(FormatError::Invalid {
                path: "manifest".into(),
                detail: format!("fps {} must be positive", self.fps),
            });
        }
        self.intrinsics.validate().map_err(|e| FormatError::Invalid {
            path: "manifest".into(),
            detail: e.to_string(),
        })?;
        for (k, f) in self.frames.iter().enumerate() {
            if k == 0 && (f.flow.is_some() || f.matches.is_some()) {
                return Err(FormatError::Invalid {
                    path: "manifest".into(),
                    detail: "frame 0 cannot have flow or matches".into(),
                });
            }
            if k > 0 && (f.flow.is_none() || f.matches.is_none()) {
                return Err(FormatError::Invalid {
                    path: "manifest".into(),
                    detail: format!("frame {k} is missing flow or matches"),
                });
            }
        }
        Ok(())
    }

    /// All file paths referenced by the manifest, relative to its directory.
    pub fn referenced_files(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for f in &self.frames {
            out.push(f.depth.as_str());
            out.push(f.mask.as_str());
            out.push(f.detections.as_str());
            if let Some(flow) = &f.flow {
                out.push(flow.as_str());
            }
            if let Some(matches) = &f.matches {
                out.push(matches.as_str());
            }
        }
        if let Some(gt) = &self.groundtruth {
            out.push(gt.as_str());
        }
        out
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), FormatError> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serialize");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Loads and validates a manifest; checks every referenced file exists.
/// Returns the manifest and its base directory.
pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), FormatError> {
    let bytes = read_file(path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| FormatError::Parse {
            path: path.display().to_string(),
            location: format!("line {}", e.line()),
            detail: e.to_string(),
        })?;
    manifest.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    for rel in manifest.referenced_files() {
        let full = base.join(rel);
        if !full.is_file() {
            return Err(FormatError::MissingFile { path: full.display().to_string() });
        }
    }
    Ok((manifest, base))
}

/// Result of a checksum verification pass.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestReport {
    pub files_checked: usize,
    pub mismatches: Vec<String>,
    pub missing: Vec<String>,
}

impl ManifestReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty() && self.missing.is_empty()
    }
}

/// Recomputes every checksum recorded in the manifest.
pub fn verify_manifest(manifest: &DatasetManifest, base: &Path) -> ManifestReport {
    let mut report =
        ManifestReport { files_checked: 0, mismatches: Vec::new(), missing: Vec::new() };
    for (rel, expected) in &manifest.checksums {
        let full = base.join(rel);
        match std::fs::read(&full) {
            Ok(bytes) => {
                report.files_checked += 1;
                if &sha256_hex(&bytes) != expected {
                    report.mismatches.push(rel.clone());
                }
            }
            Err(_) => report.missing.push(rel.clone()),
        }
    }
    report
}
