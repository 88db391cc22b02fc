//! Frame-by-frame driver: flow analysis → segment labeling → quasi
//! classification → rough pose → consistency refinement, over a dataset
//! manifest. Frames are processed sequentially; each frame's refined pose
//! feeds the next.

use serde::Serialize;
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

use crate::config::RunConfig;
use crate::eval::{Trajectory, TrajectoryPoint};
use crate::flow::{boundary_magnitude, boundary_orientation, combine_and_binarize, extract_motion_regions, flow_gradient};
use crate::geometry::Pose;
use crate::io::{self, DatasetManifest, FormatError};
use crate::segmentation::{attach_detections, select_dynamic_segments, SegmentLabel, SegmentStatus};
use crate::tracking::{
    classify_quasi, consistency_refine, estimate_pose, FeatureMatch, FinalLabel, QuasiLabel,
    TrackingError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("frame {frame}: {source}")]
    Tracking {
        frame: usize,
        #[source]
        source: TrackingError,
    },
    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),
}

/// Per-segment diagnostic entry.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentDiagnostic {
    pub id: u8,
    pub status: SegmentStatus,
    pub class: Option<String>,
}

/// Per-frame diagnostics emitted alongside the trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct FrameDiagnostics {
    pub frame_index: usize,
    pub timestamp: f64,
    pub n_matches: usize,
    pub n_segments: usize,
    pub n_motion_regions: usize,
    pub n_quasi_dynamic: usize,
    pub n_final_dynamic: usize,
    pub n_static_used: usize,
    pub refine_iterations: usize,
    pub refine_converged: bool,
    pub tracking_lost: bool,
    pub segments: Vec<SegmentDiagnostic>,
    /// Feature ids with a final dynamic label.
    pub dynamic_feature_ids: Vec<u64>,
}

/// Trajectory plus per-frame diagnostics.
#[derive(Debug)]
pub struct PipelineOutput {
    pub trajectory: Trajectory,
    pub frames: Vec<FrameDiagnostics>,
}

impl PipelineOutput {
    pub fn any_tracking_lost(&self) -> bool {
        self.frames.iter().any(|f| f.tracking_lost)
    }
}

/// Labels one frame's segments from its mask, detections and flow, without
/// any tracking. Used by the pipeline and by the `classify` subcommand.
pub struct FrameClassification {
    pub segment_labels: Vec<SegmentLabel>,
    pub boundary: crate::flow::BoundaryMap,
    pub regions: Vec<crate::flow::MotionRegion>,
    pub segments: crate::segmentation::SegmentationSet,
    pub matches: Vec<FeatureMatch>,
}

pub fn classify_frame(
    manifest: &DatasetManifest,
    base: &Path,
    config: &RunConfig,
    frame: usize,
) -> Result<FrameClassification, PipelineError> {
    let files = &manifest.frames[frame];
    let wrap = |source: FormatError| PipelineError::Frame { frame, source };

    let segments = io::read_mask(&base.join(&files.mask)).map_err(wrap)?;
    let detections = io::read_detections(&base.join(&files.detections)).map_err(wrap)?;
    // Depth is loaded for validation even though labeling doesn't need it.
    let depth = io::read_depth(&base.join(&files.depth)).map_err(wrap)?;
    if depth.width() != segments.width() || depth.height() != segments.height() {
        return Err(FormatError::ShapeMismatch {
            detail: format!(
                "frame {frame}: depth {}x{} vs mask {}x{}",
                depth.width(),
                depth.height(),
                segments.width(),
                segments.height()
            ),
        }
        .into());
    }

    let flow_rel = files.flow.as_ref().ok_or_else(|| {
        PipelineError::Frame {
            frame,
            source: FormatError::Invalid {
                path: "manifest".into(),
                detail: format!("frame {frame} has no flow file"),
            },
        }
    })?;
    let flow = io::read_flow(&base.join(flow_rel)).map_err(wrap)?;
    if flow.width() != segments.width() || flow.height() != segments.height() {
        return Err(FormatError::ShapeMismatch {
            detail: format!(
                "frame {frame}: flow {}x{} vs mask {}x{}",
                flow.width(),
                flow.height(),
                segments.width(),
                segments.height()
            ),
        }
        .into());
    }

    let matches_rel = files.matches.as_ref().ok_or_else(|| {
        PipelineError::Frame {
            frame,
            source: FormatError::Invalid {
                path: "manifest".into(),
                detail: format!("frame {frame} has no matches file"),
            },
        }
    })?;
    let matches = io::read_matches(&base.join(matches_rel)).map_err(wrap)?;
    for m in &matches {
        if m.segment_id as usize > segments.n_segments() {
            return Err(FormatError::ShapeMismatch {
                detail: format!(
                    "frame {frame}: match {} references segment {} but mask has {}",
                    m.id,
                    m.segment_id,
                    segments.n_segments()
                ),
            }
            .into());
        }
    }

    let (grad_mag, orientation) = flow_gradient(&flow);
    let m_i = boundary_magnitude(&grad_mag, config.boundary.k_i);
    let m_o = boundary_orientation(
        &orientation,
        config.boundary.k_o,
        config.boundary.neighborhood_radius,
    );
    let boundary = combine_and_binarize(&m_i, &m_o, &config.boundary)
        .map_err(|e| PipelineError::Frame {
            frame,
            source: FormatError::Invalid { path: flow_rel.clone(), detail: e.to_string() },
        })?;
    let regions = extract_motion_regions(&boundary, config.min_region_area);

    let movable: HashSet<String> = config.movable_classes.iter().cloned().collect();
    let classes = attach_detections(&segments, &detections, config.iou_min);
    let segment_labels =
        select_dynamic_segments(&segments, &classes, &regions, &movable, config.overlap_min);

    Ok(FrameClassification { segment_labels, boundary, regions, segments, matches })
}

/// Runs the full tracking pipeline over a dataset. Frame 0 pins the
/// identity pose; every later frame is tracked against its predecessor.
/// A frame that loses tracking keeps the constant-velocity prediction and
/// is flagged in the diagnostics.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    base: &Path,
    config: &RunConfig,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    manifest.validate()?;
    let robust = config.robust.to_params();

    let mut poses: Vec<Pose> = vec![Pose::identity()];
    let mut frames = Vec::new();

    for k in 1..manifest.frame_count() {
        let classification = classify_frame(manifest, base, config, k)?;
        let matches = classification.matches;

        // Baseline mode ignores the labels entirely.
        let segment_labels = if config.disable_classification {
            classification
                .segment_labels
                .iter()
                .map(|l| SegmentLabel { status: SegmentStatus::Static, class: l.class.clone() })
                .collect()
        } else {
            classification.segment_labels
        };

        let quasi = classify_quasi(&matches, &segment_labels);
        let n_quasi_dynamic =
            quasi.iter().filter(|l| l.quasi == QuasiLabel::QuasiDynamic).count();

        let prev_pose = poses[k - 1];
        let init = if k >= 2 {
            // Constant velocity: previous pose composed with the last step.
            let step = poses[k - 2].inverse().compose(&poses[k - 1]);
            poses[k - 1].compose(&step)
        } else {
            prev_pose
        };

        let quasi_static_matches: Vec<FeatureMatch> = matches
            .iter()
            .zip(&quasi)
            .filter(|(_, l)| l.quasi == QuasiLabel::QuasiStatic)
            .map(|(m, _)| *m)
            .collect();

        let mut tracking_lost = false;
        let mut refine_iterations = 0;
        let mut refine_converged = true;
        let mut final_labels = quasi.clone();
        let mut final_segment_labels = segment_labels.clone();
        let mut pose = init;
        let mut n_static_used = 0;

        let rough = estimate_pose(
            &quasi_static_matches,
            &prev_pose,
            &manifest.intrinsics,
            &robust,
            &init,
            config.consistency.min_static_features,
        );
        match rough {
            Ok(rough) => {
                n_static_used = quasi_static_matches.len();
                pose = rough.pose;
                let run_refine =
                    !config.disable_classification && !config.disable_consistency_check;
                if run_refine {
                    match consistency_refine(
                        &matches,
                        &quasi,
                        &segment_labels,
                        &rough,
                        &prev_pose,
                        &manifest.intrinsics,
                        &robust,
                        &config.consistency,
                    ) {
                        Ok(refined) => {
                            pose = refined.state.refined_pose;
                            n_static_used = refined.state.refined_static.len();
                            refine_iterations = refined.iterations;
                            refine_converged = refined.converged;
                            final_labels = refined.feature_labels;
                            final_segment_labels = refined.segment_labels;
                        }
                        Err(TrackingError::TrackingLost { .. }) => {
                            // Keep the rough pose; flag the frame.
                            tracking_lost = true;
                        }
                        Err(e) => return Err(PipelineError::Tracking { frame: k, source: e }),
                    }
                } else {
                    for l in final_labels.iter_mut() {
                        l.final_status = Some(match l.quasi {
                            QuasiLabel::QuasiStatic => FinalLabel::Static,
                            QuasiLabel::QuasiDynamic => FinalLabel::Dynamic,
                        });
                    }
                }
            }
            Err(TrackingError::TrackingLost { .. }) => {
                // Too few quasi-static features: reuse the prediction.
                tracking_lost = true;
            }
            Err(e) => return Err(PipelineError::Tracking { frame: k, source: e }),
        }

        let dynamic_feature_ids: Vec<u64> = matches
            .iter()
            .zip(&final_labels)
            .filter(|(_, l)| {
                matches!(l.final_status, Some(FinalLabel::Dynamic))
                    || (l.final_status.is_none() && l.quasi == QuasiLabel::QuasiDynamic)
            })
            .map(|(m, _)| m.id)
            .collect();

        frames.push(FrameDiagnostics {
            frame_index: k,
            timestamp: manifest.frames[k].timestamp,
            n_matches: matches.len(),
            n_segments: final_segment_labels.len(),
            n_motion_regions: classification.regions.len(),
            n_quasi_dynamic,
            n_final_dynamic: dynamic_feature_ids.len(),
            n_static_used,
            refine_iterations,
            refine_converged,
            tracking_lost,
            segments: final_segment_labels
                .iter()
                .enumerate()
                .map(|(i, l)| SegmentDiagnostic {
                    id: (i + 1) as u8,
                    status: l.status,
                    class: l.class.clone(),
                })
                .collect(),
            dynamic_feature_ids,
        });
        poses.push(pose);
    }

    let trajectory = Trajectory::new(
        poses
            .into_iter()
            .enumerate()
            .map(|(k, pose)| TrajectoryPoint { timestamp: manifest.frames[k].timestamp, pose })
            .collect(),
    )
    .expect("manifest timestamps increase");

    Ok(PipelineOutput { trajectory, frames })
}
