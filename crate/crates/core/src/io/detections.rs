//! Detection files: a JSON array of {class, bbox, confidence}.

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::segmentation::Detection;

pub fn detections_to_bytes(detections: &[Detection]) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(detections).expect("detections serialize");
    bytes.push(b'\n');
    bytes
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<(), FormatError> {
    write_file(path, &detections_to_bytes(detections))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, FormatError> {
    let bytes = read_file(path)?;
    let name = path.display().to_string();
    let detections: Vec<Detection> =
        serde_json::from_slice(&bytes).map_err(|e| FormatError::Parse {
            path: name.clone(),
            location: format!("line {}", e.line()),
            detail: e.to_string(),
        })?;
    for d in &detections {
        d.validate().map_err(|e| FormatError::Invalid { path: name.clone(), detail: e.to_string() })?;
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(FormatError::Invalid {
                path: name,
                detail: format!("confidence {} outside [0, 1]", d.confidence),
            });
        }
    }
    Ok(detections)
}
