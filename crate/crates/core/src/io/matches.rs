//! Feature-match CSV: one row per correspondence across a frame pair,
//! header required. Floats are written in shortest round-trip form, so a
//! write→read cycle is value-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, FormatError};
use crate::geometry::PixelPoint;
use crate::tracking::FeatureMatch;

const HEADER: [&str; 8] =
    ["id", "u_prev", "v_prev", "u_cur", "v_cur", "d_prev", "d_cur", "segment_id"];

#[derive(Serialize, Deserialize)]
struct MatchRow {
    id: u64,
    u_prev: f64,
    v_prev: f64,
    u_cur: f64,
    v_cur: f64,
    d_prev: f64,
    d_cur: f64,
    segment_id: u8,
}

pub fn matches_to_bytes(matches: &[FeatureMatch]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for m in matches {
        writer
            .serialize(MatchRow {
                id: m.id,
                u_prev: m.p_prev.u,
                v_prev: m.p_prev.v,
                u_cur: m.p_cur.u,
                v_cur: m.p_cur.v,
                d_prev: m.d_prev,
                d_cur: m.d_cur,
                segment_id: m.segment_id,
            })
            .expect("csv serialize");
    }
    writer.into_inner().expect("csv flush")
}

pub fn write_matches(path: &Path, matches: &[FeatureMatch]) -> Result<(), FormatError> {
    write_file(path, &matches_to_bytes(matches))
}

pub fn read_matches(path: &Path) -> Result<Vec<FeatureMatch>, FormatError> {
    let bytes = read_file(path)?;
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader.headers().map_err(|e| FormatError::Parse {
        path: name.clone(),
        location: "header".into(),
        detail: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(FormatError::Parse {
            path: name,
            location: "header".into(),
            detail: format!("expected columns {HEADER:?}, found {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<MatchRow>().enumerate() {
        let row = row.map_err(|e| FormatError::Parse {
            path: name.clone(),
            location: format!("record {}", i + 1),
            detail: e.to_string(),
        })?;
        if !(row.d_prev > 0.0 && row.d_cur > 0.0) {
            return Err(FormatError::Invalid {
                path: name,
                detail: format!("record {}: non-positive depth", i + 1),
            });
        }
        out.push(FeatureMatch {
            id: row.id,
            p_prev: PixelPoint::new(row.u_prev, row.v_prev),
            p_cur: PixelPoint::new(row.u_cur, row.v_cur),
            d_prev: row.d_prev,
            d_cur: row.d_cur,
            segment_id: row.segment_id,
        });
    }
    Ok(out)
}
