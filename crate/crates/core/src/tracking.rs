//! Feature classification and camera pose estimation.
//!
//! Per frame: quasi labels come from the segment labels, a rough pose is
//! estimated from the quasi-static features by robust reprojection
//! minimization, and the consistency loop then re-classifies features by
//! scene flow and re-estimates until the static set stops changing.

use nalgebra::{Matrix2, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::geometry::{backproject, project, CameraIntrinsics, GeometryError, Pose};
use crate::par;
use crate::segmentation::{SegmentLabel, SegmentStatus};

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("tracking lost: {found} static features, {needed} required")]
    TrackingLost { found: usize, needed: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid robust parameters: {0}")]
    BadParams(String),
}

/// A pixel correspondence across a frame pair with depths, tagged with the
/// current frame's segment id (0 = background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMatch {
    pub id: u64,
    pub p_prev: crate::geometry::PixelPoint,
    pub p_cur: crate::geometry::PixelPoint,
    pub d_prev: f64,
    pub d_cur: f64,
    pub segment_id: u8,
}

/// Provisional label from the segmentation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuasiLabel {
    QuasiStatic,
    QuasiDynamic,
}

/// Final label from the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalLabel {
    Static,
    Dynamic,
}

/// Per-feature classification state. The final status is only set once the
/// consistency check has run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLabel {
    pub quasi: QuasiLabel,
    pub final_status: Option<FinalLabel>,
}

/// Robust reprojection-cost parameters.
#[derive(Debug, Clone)]
pub struct RobustParams {
    /// Huber threshold in pixels; `f64::INFINITY` gives plain least squares.
    pub huber_delta: f64,
    /// Reprojection covariance (pixels²).
    pub sigma: Matrix2<f64>,
    pub max_gn_iterations: usize,
    pub convergence_epsilon: f64,
}

impl Default for RobustParams {
    fn default() -> Self {
        Self {
            // 95% chi-square quantile with 2 DOF.
            huber_delta: 5.991f64.sqrt(),
            sigma: Matrix2::identity(),
            max_gn_iterations: 30,
            convergence_epsilon: 1e-10,
        }
    }
}

impl RobustParams {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if !(self.huber_delta > 0.0) {
            return Err(TrackingError::BadParams(format!(
                "huber_delta={} must be > 0",
                self.huber_delta
            )));
        }
        if (self.sigma - self.sigma.transpose()).norm() > 1e-12
            || self.sigma.cholesky().is_none()
        {
            return Err(TrackingError::BadParams("sigma must be symmetric positive definite".into()));
        }
        if self.max_gn_iterations == 0 {
            return Err(TrackingError::BadParams("max_gn_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scene-flow consistency-check parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyParams {
    /// Scene-flow magnitude above which a feature is dynamic (meters).
    pub sceneflow_threshold: f64,
    /// A segment turns dynamic when more than this fraction of its features
    /// are dynamic (strict).
    pub dynamic_fraction: f64,
    pub max_refine_iterations: usize,
    /// Below this static-feature count the frame is declared lost.
    pub min_static_features: usize,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            sceneflow_threshold: 0.05,
            dynamic_fraction: 0.3,
            max_refine_iterations: 5,
            min_static_features: 30,
        }
    }
}

impl ConsistencyParams {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if !(self.sceneflow_threshold > 0.0) {
            return Err(TrackingError::BadParams(format!(
                "sceneflow_threshold={} must be > 0",
                self.sceneflow_threshold
            )));
        }
        if !(self.dynamic_fraction > 0.0 && self.dynamic_fraction < 1.0) {
            return Err(TrackingError::BadParams(format!(
                "dynamic_fraction={} outside (0, 1)",
                self.dynamic_fraction
            )));
        }
        if self.max_refine_iterations == 0 {
            return Err(TrackingError::BadParams("max_refine_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pose estimate with solver diagnostics.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    /// Body-to-world camera pose.
    pub pose: Pose,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    /// Robust cost after each accepted step (starts at the initial cost).
    pub cost_history: Vec<f64>,
}

/// Per-frame tracking state: rough and refined poses with their static
/// index sets.
#[derive(Debug, Clone)]
pub struct FrameState {
    pub rough_pose: Pose,
    pub refined_pose: Pose,
    pub rough_static: BTreeSet<u64>,
    pub refined_static: BTreeSet<u64>,
}

/// Output of the consistency loop.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub state: FrameState,
    pub feature_labels: Vec<FeatureLabel>,
    pub segment_labels: Vec<SegmentLabel>,
    pub iterations: usize,
    pub converged: bool,
}

/// Quasi labels from segment labels: a feature is quasi-dynamic iff its
/// segment is dynamic; background features (id 0) are quasi-static.
pub fn classify_quasi(matches: &[FeatureMatch], segment_labels: &[SegmentLabel]) -> Vec<FeatureLabel> {
    matches
        .iter()
        .map(|m| {
            let dynamic = m.segment_id > 0
                && segment_labels
                    .get(m.segment_id as usize - 1)
                    .is_some_and(|l| l.is_dynamic());
            FeatureLabel {
                quasi: if dynamic { QuasiLabel::QuasiDynamic } else { QuasiLabel::QuasiStatic },
                final_status: None,
            }
        })
        .collect()
}

fn huber_weight(squared_mahalanobis: f64, delta: f64) -> f64 {
    if squared_mahalanobis <= delta * delta {
        1.0
    } else {
        delta / squared_mahalanobis.sqrt()
    }
}

fn huber_rho(squared_mahalanobis: f64, delta: f64) -> f64 {
    if squared_mahalanobis <= delta * delta {
        squared_mahalanobis
    } else {
        2.0 * delta * squared_mahalanobis.sqrt() - delta * delta
    }
}

/// Penalty for points that project behind the camera during a trial step.
const BEHIND_CAMERA_COST: f64 = 1e12;

struct Observation {
    world: Vector3<f64>,
    pixel: Vector2<f64>,
}

fn robust_cost(
    observations: &[Observation],
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    sigma_inv: &Matrix2<f64>,
    delta: f64,
    k: &CameraIntrinsics,
) -> f64 {
    let costs = par::map_collect(observations, |obs| {
        let x = rotation * obs.world + translation;
        if x.z <= 1e-12 {
            return BEHIND_CAMERA_COST;
        }
        let predicted = Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy);
        let r = obs.pixel - predicted;
        huber_rho((r.transpose() * sigma_inv * r)[(0, 0)], delta)
    });
    costs.iter().sum()
}

/// Estimates the body-to-world camera pose at the current frame from
/// matches believed static, by minimizing the Huber-robust reprojection
/// error of the previous frame's landmarks against the current pixels.
/// World landmarks come from back-projecting the previous-frame observation
/// through `prev_pose`. Solved as iterated reweighted Gauss–Newton over a
/// 6-parameter local update of the world-to-camera map, with multiplicative
/// step halving when a step would increase the cost.
pub fn estimate_pose(
    matches: &[FeatureMatch],
    prev_pose: &Pose,
    k: &CameraIntrinsics,
    params: &RobustParams,
    init: &Pose,
    min_features: usize,
) -> Result<PoseEstimate, TrackingError> {
    params.validate()?;
    if matches.len() < min_features {
        return Err(TrackingError::TrackingLost { found: matches.len(), needed: min_features });
    }

    let observations: Vec<Observation> = matches
        .iter()
        .map(|m| {
            let cam = backproject(m.p_prev, m.d_prev, k)?;
            Ok(Observation {
                world: prev_pose.apply(&cam.position),
                pixel: Vector2::new(m.p_cur.u, m.p_cur.v),
            })
        })
        .collect::<Result<_, GeometryError>>()?;

    let sigma_inv = params
        .sigma
        .try_inverse()
        .ok_or_else(|| TrackingError::BadParams("sigma is singular".into()))?;
    let delta = params.huber_delta;

    // Optimize the world-to-camera map; invert on return.
    let w2c = init.inverse();
    let mut rotation = *w2c.rotation();
    let mut translation = *w2c.translation();
    let mut cost = robust_cost(&observations, &rotation, &translation, &sigma_inv, delta, k);
    let mut cost_history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_gn_iterations {
        iterations += 1;

        // Weighted normal equations, accumulated in input order so results
        // do not depend on the thread count.
        let contributions = par::map_collect(&observations, |obs| {
            let x = rotation * obs.world + translation;
            if x.z <= 1e-12 {
                return None;
            }
            let predicted = Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy);
            let r = obs.pixel - predicted;
            let s = (r.transpose() * sigma_inv * r)[(0, 0)];
            let weight = huber_weight(s, delta);

            let iz = 1.0 / x.z;
            let proj_jac = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * x.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz * iz,
            );
            // r(δ) with X ← X + ρ + φ×X: ∂r/∂δ = −P·[I | −[X]×].
            let mut point_jac = nalgebra::Matrix3x6::zeros();
            point_jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            point_jac
                .fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-skew(&x)));
            let jac = -proj_jac * point_jac;

            let h = weight * jac.transpose() * sigma_inv * jac;
            let g = weight * jac.transpose() * sigma_inv * r;
            Some((h, g))
        });

        let mut hessian = Matrix6::<f64>::zeros();
        let mut gradient = Vector6::<f64>::zeros();
        for c in contributions.into_iter().flatten() {
            hessian += c.0;
            gradient += c.1;
        }

        let Some(chol) = hessian.cholesky().or_else(|| {
            let damped = hessian + Matrix6::identity() * (1e-9 * hessian.trace().max(1.0));
            damped.cholesky()
        }) else {
            break;
        };
        let mut step: Vector6<f64> = chol.solve(&(-gradient));

        if step.norm() <= params.convergence_epsilon {
            converged = true;
            break;
        }

        // Step halving keeps the robust cost nonincreasing.
        let mut accepted = false;
        for _ in 0..16 {
            let rot_update = Rotation3::from_scaled_axis(step.fixed_rows::<3>(3).into_owned())
                .into_inner();
            let trial_rotation = rot_update * rotation;
            let trial_translation =
                rot_update * translation + step.fixed_rows::<3>(0).into_owned();
            let trial_cost =
                robust_cost(&observations, &trial_rotation, &trial_translation, &sigma_inv, delta, k);
            if trial_cost <= cost {
                rotation = trial_rotation;
                translation = trial_translation;
                let improvement = cost - trial_cost;
                cost = trial_cost;
                cost_history.push(cost);
                accepted = true;
                if improvement <= params.convergence_epsilon * cost.max(1.0) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
            if step.norm() <= params.convergence_epsilon {
                converged = true;
                break;
            }
        }
        if !accepted || converged {
            if !accepted {
                converged = true; // no descent direction left
            }
            break;
        }
    }

    // Re-orthonormalize before building the pose: repeated updates drift.
    let rotation = Rotation3::from_matrix(&rotation).into_inner();
    let w2c = Pose::from_parts_unchecked(rotation, translation);
    Ok(PoseEstimate { pose: w2c.inverse(), converged, iterations, final_cost: cost, cost_history })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Scene flow of a match: the landmark's world displacement between frames,
/// evaluated with the current rough pose and the previous refined pose.
pub fn scene_flow(
    m: &FeatureMatch,
    rough_cur_pose: &Pose,
    refined_prev_pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, TrackingError> {
    let cur = backproject(m.p_cur, m.d_cur, k)?;
    let prev = backproject(m.p_prev, m.d_prev, k)?;
    Ok(rough_cur_pose.apply(&cur.position) - refined_prev_pose.apply(&prev.position))
}

/// Iterative consistency check: classify features by scene flow, re-label
/// segments by their dynamic-feature fraction (movable segments stay
/// dynamic), re-estimate the pose on the surviving static set, and repeat
/// until the set stops changing or the iteration budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn consistency_refine(
    matches: &[FeatureMatch],
    quasi_labels: &[FeatureLabel],
    segment_labels: &[SegmentLabel],
    rough: &PoseEstimate,
    prev_pose: &Pose,
    k: &CameraIntrinsics,
    robust: &RobustParams,
    consistency: &ConsistencyParams,
) -> Result<Refinement, TrackingError> {
    consistency.validate()?;
    debug_assert_eq!(matches.len(), quasi_labels.len());

    let rough_static: BTreeSet<u64> = matches
        .iter()
        .zip(quasi_labels)
        .filter(|(_, l)| l.quasi == QuasiLabel::QuasiStatic)
        .map(|(m, _)| m.id)
        .collect();

    let mut current_pose = rough.pose;
    let mut current_static = rough_static.clone();
    let mut labels = segment_labels.to_vec();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < consistency.max_refine_iterations {
        iterations += 1;

        let flows = par::map_collect(matches, |m| scene_flow(m, &current_pose, prev_pose, k));
        let mut feature_dynamic = Vec::with_capacity(matches.len());
        for f in flows {
            feature_dynamic.push(f?.norm() > consistency.sceneflow_threshold);
        }

        // Re-evaluate segments by their dynamic-feature fraction.
        let n_segments = labels.len();
        let mut totals = vec![0usize; n_segments];
        let mut dynamics = vec![0usize; n_segments];
        for (m, &dyn_flag) in matches.iter().zip(&feature_dynamic) {
            if m.segment_id == 0 {
                continue;
            }
            let s = m.segment_id as usize - 1;
            if s < n_segments {
                totals[s] += 1;
                if dyn_flag {
                    dynamics[s] += 1;
                }
            }
        }
        for (s, label) in labels.iter_mut().enumerate() {
            if label.status == SegmentStatus::DynamicMovable {
                continue; // movable stays dynamic regardless of feature count
            }
            let dynamic = totals[s] > 0
                && dynamics[s] as f64 > consistency.dynamic_fraction * totals[s] as f64;
            label.status = if dynamic { SegmentStatus::DynamicFlow } else { SegmentStatus::Static };
        }

        // Static set: feature outside dynamic segments with small scene flow.
        let new_static: BTreeSet<u64> = matches
            .iter()
            .zip(&feature_dynamic)
            .filter(|(m, &dyn_flag)| {
                let seg_dynamic = m.segment_id > 0
                    && labels
                        .get(m.segment_id as usize - 1)
                        .is_some_and(|l| l.is_dynamic());
                !seg_dynamic && !dyn_flag
            })
            .map(|(m, _)| m.id)
            .collect();

        if new_static.len() < consistency.min_static_features {
            return Err(TrackingError::TrackingLost {
                found: new_static.len(),
                needed: consistency.min_static_features,
            });
        }

        if new_static == current_static {
            converged = true;
            break;
        }

        let subset: Vec<FeatureMatch> = matches
            .iter()
            .filter(|m| new_static.contains(&m.id))
            .copied()
            .collect();
        let estimate = estimate_pose(
            &subset,
            prev_pose,
            k,
            robust,
            &current_pose,
            consistency.min_static_features,
        )?;
        current_pose = estimate.pose;
        current_static = new_static;
    }

    let feature_labels: Vec<FeatureLabel> = matches
        .iter()
        .zip(quasi_labels)
        .map(|(m, l)| FeatureLabel {
            quasi: l.quasi,
            final_status: Some(if current_static.contains(&m.id) {
                FinalLabel::Static
            } else {
                FinalLabel::Dynamic
            }),
        })
        .collect();

    Ok(Refinement {
        state: FrameState {
            rough_pose: rough.pose,
            refined_pose: current_pose,
            rough_static,
            refined_static: current_static,
        },
        feature_labels,
        segment_labels: labels,
        iterations,
        converged,
    })
}
