//! Middlebury `.flo` optical-flow files: float magic 202021.25, int32
//! width/height, then row-major interleaved (u, v) float32 pairs, all
//! little-endian.

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::flow::FlowField;

const FLO_MAGIC: f32 = 202021.25;
/// Sanity cap on declared dimensions.
const MAX_DIM: i32 = 100_000;

pub fn flow_to_bytes(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), FormatError> {
    write_file(path, &flow_to_bytes(flow))
}

pub fn read_flow(path: &Path) -> Result<FlowField, FormatError> {
    let bytes = read_file(path)?;
    parse_flow(&bytes, &path.display().to_string())
}

fn parse_flow(bytes: &[u8], path: &str) -> Result<FlowField, FormatError> {
    let take4 = |offset: usize| -> Result<[u8; 4], FormatError> {
        bytes
            .get(offset..offset + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or(FormatError::Truncated {
                path: path.to_string(),
                offset: bytes.len() as u64,
                needed: (offset + 4 - bytes.len()) as u64,
            })
    };

    let magic = f32::from_le_bytes(take4(0)?);
    if magic != FLO_MAGIC {
        return Err(FormatError::BadMagic {
            path: path.to_string(),
            offset: 0,
            detail: format!("expected {FLO_MAGIC}, found {magic}"),
        });
    }
    let width = i32::from_le_bytes(take4(4)?);
    let height = i32::from_le_bytes(take4(8)?);
    if !(1..=MAX_DIM).contains(&width) || !(1..=MAX_DIM).contains(&height) {
        return Err(FormatError::Parse {
            path: path.to_string(),
            location: "bytes 4..12".into(),
            detail: format!("implausible dimensions {width}x{height}"),
        });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            path: path.to_string(),
            offset: bytes.len() as u64,
            needed: (expected - bytes.len()) as u64,
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            path: path.to_string(),
            offset: expected as u64,
            trailing: (bytes.len() - expected) as u64,
        });
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = 12 + i * 8;
        let u = f32::from_le_bytes(take4(off)?);
        let v = f32::from_le_bytes(take4(off + 4)?);
        if !(u.is_finite() && v.is_finite()) {
            return Err(FormatError::Parse {
                path: path.to_string(),
                location: format!("byte {off}"),
                detail: "non-finite flow value".into(),
            });
        }
        data.push([u, v]);
    }
    FlowField::from_data(w, h, data).map_err(|e| FormatError::Invalid {
        path: path.to_string(),
        detail: e.to_string(),
    })
}
