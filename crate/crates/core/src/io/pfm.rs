//! Grayscale PFM depth maps: "Pf" header, width/height line, negative
//! scale marker for little-endian float32, rows stored bottom-to-top.

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::flow::ScalarField;

pub fn depth_to_bytes(depth: &ScalarField) -> Vec<u8> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = Vec::with_capacity(32 + w * h * 4);
    out.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&depth.get(x, y).to_le_bytes());
        }
    }
    out
}

pub fn write_depth(path: &Path, depth: &ScalarField) -> Result<(), FormatError> {
    write_file(path, &depth_to_bytes(depth))
}

pub fn read_depth(path: &Path) -> Result<ScalarField, FormatError> {
    let bytes = read_file(path)?;
    parse_depth(&bytes, &path.display().to_string())
}

fn parse_depth(bytes: &[u8], path: &str) -> Result<ScalarField, FormatError> {
    let parse = |location: &str, detail: String| FormatError::Parse {
        path: path.to_string(),
        location: location.to_string(),
        detail,
    };

    // Three whitespace-terminated header tokens lines: type, dims, scale.
    let mut offset = 0usize;
    let mut next_line = || -> Result<String, FormatError> {
        let start = offset;
        while offset < bytes.len() && bytes[offset] != b'\n' {
            offset += 1;
        }
        if offset >= bytes.len() {
            return Err(FormatError::Truncated {
                path: path.to_string(),
                offset: bytes.len() as u64,
                needed: 1,
            });
        }
        let line = String::from_utf8_lossy(&bytes[start..offset]).trim().to_string();
        offset += 1;
        Ok(line)
    };

    let kind = next_line()?;
    if kind != "Pf" {
        return Err(FormatError::BadMagic {
            path: path.to_string(),
            offset: 0,
            detail: format!("expected grayscale PFM header \"Pf\", found {kind:?}"),
        });
    }
    let dims = next_line()?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse("dimensions line", format!("bad width in {dims:?}")))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse("dimensions line", format!("bad height in {dims:?}")))?;
    if it.next().is_some() || w == 0 || h == 0 || w > 100_000 || h > 100_000 {
        return Err(parse("dimensions line", format!("implausible dimensions {dims:?}")));
    }
    let scale_line = next_line()?;
    let scale: f64 = scale_line
        .parse()
        .map_err(|_| parse("scale line", format!("bad scale {scale_line:?}")))?;
    if scale >= 0.0 {
        return Err(FormatError::Unsupported {
            path: path.to_string(),
            detail: format!("big-endian PFM (positive scale {scale}) is not supported"),
        });
    }

    let expected = offset + w * h * 4;
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

    let mut field = ScalarField::zeros(w, h);
    for (row, y) in (0..h).rev().enumerate() {
        for x in 0..w {
            let off = offset + (row * w + x) * 4;
            let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
            field.set(x, y, v);
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut depth = ScalarField::zeros(4, 3);
        for (i, v) in depth.data_mut().iter_mut().enumerate() {
            *v = 0.5 + i as f32 * 0.125;
        }
        write_depth(&path, &depth).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, depth);
        write_depth(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn positive_scale_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_depth(&path) {
            Err(FormatError::Unsupported { detail, .. }) => {
                assert!(detail.contains("big-endian"), "{detail}");
            }
            other => panic!("expected Unsupported, got {other:?}"),
        }
    }

    #[test]
    fn color_pfm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pfm");
        std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_depth(&path), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn bottom_up_row_order() {
        // First stored row is the image's bottom row.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.pfm");
        let mut depth = ScalarField::zeros(1, 2);
        depth.set(0, 0, 1.0); // top
        depth.set(0, 1, 2.0); // bottom
        write_depth(&path, &depth).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), 1.0);
    }
}
