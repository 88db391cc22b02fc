//! TUM-format trajectory text: one `timestamp tx ty tz qx qy qz qw` line
//! per pose, `#` comments allowed.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{read_file, write_file, FormatError};
use crate::eval::{Trajectory, TrajectoryPoint};
use crate::geometry::Pose;

pub fn trajectory_to_bytes(trajectory: &Trajectory) -> Vec<u8> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in trajectory.points() {
        let t = p.pose.translation();
        let q = p.pose.quaternion();
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    out.into_bytes()
}

pub fn write_trajectory(path: &Path, trajectory: &Trajectory) -> Result<(), FormatError> {
    write_file(path, &trajectory_to_bytes(trajectory))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, FormatError> {
    let bytes = read_file(path)?;
    let name = path.display().to_string();
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Parse {
        path: name.clone(),
        location: "file".into(),
        detail: format!("not utf-8: {e}"),
    })?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FormatError::Parse {
                path: name.clone(),
                location: format!("line {}", lineno + 1),
                detail: e.to_string(),
            })?;
        if fields.len() != 8 {
            return Err(FormatError::Parse {
                path: name,
                location: format!("line {}", lineno + 1),
                detail: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let q = Quaternion::new(fields[7], fields[4], fields[5], fields[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(FormatError::Invalid {
                path: name,
                detail: format!("line {}: quaternion norm {}", lineno + 1, q.norm()),
            });
        }
        points.push(TrajectoryPoint {
            timestamp: fields[0],
            pose: Pose::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(fields[1], fields[2], fields[3]),
            ),
        });
    }
    Trajectory::new(points)
        .map_err(|e| FormatError::Invalid { path: path.display().to_string(), detail: e.to_string() })
}
