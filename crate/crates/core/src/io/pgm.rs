//! Binary PGM (P5, maxval 255). Segment masks store the segment id per
//! pixel (0 = unsegmented, ids contiguous from 1); plain grayscale is used
//! for boundary-map exports.

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::segmentation::SegmentationSet;

fn pgm_bytes(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn mask_to_bytes(segments: &SegmentationSet) -> Vec<u8> {
    pgm_bytes(segments.width(), segments.height(), segments.id_map())
}

pub fn write_mask(path: &Path, segments: &SegmentationSet) -> Result<(), FormatError> {
    write_file(path, &mask_to_bytes(segments))
}

pub fn gray_to_bytes(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    pgm_bytes(width, height, data)
}

pub fn write_gray(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), FormatError> {
    write_file(path, &gray_to_bytes(width, height, data))
}

pub fn read_mask(path: &Path) -> Result<SegmentationSet, FormatError> {
    let bytes = read_file(path)?;
    let name = path.display().to_string();
    let (w, h, payload_offset) = parse_header(&bytes, &name)?;
    let expected = payload_offset + w * h;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            path: name,
            offset: bytes.len() as u64,
            needed: (expected - bytes.len()) as u64,
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            path: name,
            offset: expected as u64,
            trailing: (bytes.len() - expected) as u64,
        });
    }
    SegmentationSet::from_id_map(w, h, bytes[payload_offset..].to_vec()).map_err(|e| {
        FormatError::Invalid { path: name, detail: e.to_string() }
    })
}

fn parse_header(bytes: &[u8], path: &str) -> Result<(usize, usize, usize), FormatError> {
    let mut offset = 0usize;
    let mut token = || -> Result<String, FormatError> {
        while offset < bytes.len() && bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let start = offset;
        while offset < bytes.len() && !bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        if start == offset {
            return Err(FormatError::Truncated {
                path: path.to_string(),
                offset: bytes.len() as u64,
                needed: 1,
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..offset]).to_string())
    };

    let magic = token()?;
    if magic != "P5" {
        return Err(FormatError::BadMagic {
            path: path.to_string(),
            offset: 0,
            detail: format!("expected \"P5\", found {magic:?}"),
        });
    }
    let parse_num = |t: String, what: &str| -> Result<usize, FormatError> {
        t.parse().map_err(|_| FormatError::Parse {
            path: path.to_string(),
            location: "header".into(),
            detail: format!("bad {what}: {t:?}"),
        })
    };
    let w = parse_num(token()?, "width")?;
    let h = parse_num(token()?, "height")?;
    let maxval = parse_num(token()?, "maxval")?;
    if maxval != 255 {
        return Err(FormatError::Unsupported {
            path: path.to_string(),
            detail: format!("maxval {maxval}, only 255 supported"),
        });
    }
    if w == 0 || h == 0 || w > 100_000 || h > 100_000 {
        return Err(FormatError::Parse {
            path: path.to_string(),
            location: "header".into(),
            detail: format!("implausible dimensions {w}x{h}"),
        });
    }
    // Single whitespace byte after maxval, then payload.
    Ok((w, h, offset + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut ids = vec![0u8; 12];
        ids[0] = 1;
        ids[1] = 1;
        ids[5] = 2;
        let set = SegmentationSet::from_id_map(4, 3, ids.clone()).unwrap();
        write_mask(&path, &set).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back.id_map(), ids.as_slice());
        assert_eq!(back.n_segments(), 2);
    }

    #[test]
    fn all_zero_mask_has_no_segments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        let set = SegmentationSet::from_id_map(3, 3, vec![0; 9]).unwrap();
        write_mask(&path, &set).unwrap();
        assert_eq!(read_mask(&path).unwrap().n_segments(), 0);
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        let mut data = vec![0u8; 4];
        data[0] = 1;
        data[1] = 2;
        data[2] = 5;
        std::fs::write(&path, pgm_bytes(2, 2, &data)).unwrap();
        match read_mask(&path) {
            Err(FormatError::Invalid { detail, .. }) => assert!(detail.contains("contiguous")),
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut bytes = pgm_bytes(2, 2, &[0, 0, 0, 0]);
        bytes.push(7);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_mask(&path), Err(FormatError::TrailingBytes { .. })));
    }
}
