//! Trajectory alignment and ATE/RTE metrics with RMSE aggregation.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no trajectory pairs within max_dt={0}")]
    AssociationError(f64),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory timestamps not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("trajectory too short: {n} poses for delta {delta}")]
    InsufficientLength { n: usize, delta: usize },
    #[error("cannot align zero pairs")]
    DegenerateAlignment,
}

/// A timestamped body-to-world pose.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Timestamp-ordered pose sequence.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self, EvalError> {
        for (i, pair) in points.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(EvalError::NonMonotonicTimestamps(i + 1));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Median spacing between consecutive timestamps, if any.
    pub fn median_dt(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let mut dts: Vec<f64> =
            self.points.windows(2).map(|p| p[1].timestamp - p[0].timestamp).collect();
        dts.sort_by(f64::total_cmp);
        Some(dts[dts.len() / 2])
    }
}

/// An associated (estimated, ground-truth) pose pair.
#[derive(Debug, Clone, Copy)]
pub struct PosePair {
    pub timestamp: f64,
    pub est: Pose,
    pub gt: Pose,
}

/// Nearest-timestamp monotone association: walks both sequences in order,
/// pairing each estimated pose with the closest unused ground-truth pose
/// within `max_dt`. Unmatched poses are dropped; pairings never cross.
pub fn associate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
) -> Result<Vec<PosePair>, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let gt_points = gt.points();
    let mut pairs = Vec::new();
    let mut next_gt = 0usize;
    for e in est.points() {
        if next_gt >= gt_points.len() {
            break;
        }
        let mut best = next_gt;
        let mut best_dt = (gt_points[best].timestamp - e.timestamp).abs();
        for (j, g) in gt_points.iter().enumerate().skip(next_gt + 1) {
            let dt = (g.timestamp - e.timestamp).abs();
            if dt < best_dt {
                best = j;
                best_dt = dt;
            }
            if g.timestamp > e.timestamp {
                break; // timestamps are sorted; it only gets worse
            }
        }
        if best_dt <= max_dt {
            pairs.push(PosePair { timestamp: e.timestamp, est: e.pose, gt: gt_points[best].pose });
            next_gt = best + 1;
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::AssociationError(max_dt));
    }
    Ok(pairs)
}

/// Rigid alignment of the estimated positions onto the ground truth.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// S: maps estimated positions into the ground-truth frame.
    pub transform: Pose,
    /// True when fewer than 3 points or (near-)collinear geometry forced a
    /// translation-only fallback.
    pub translation_only: bool,
}

/// Least-squares SE(3) alignment over positions (no scale): centroid
/// subtraction, SVD of the cross-covariance with determinant correction.
/// Degenerate geometry falls back to translation-only, flagged.
pub fn align_rigid(pairs: &[PosePair]) -> Result<Alignment, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::DegenerateAlignment);
    }
    let n = pairs.len() as f64;
    let est_centroid: Vector3<f64> =
        pairs.iter().map(|p| p.est.translation()).sum::<Vector3<f64>>() / n;
    let gt_centroid: Vector3<f64> =
        pairs.iter().map(|p| p.gt.translation()).sum::<Vector3<f64>>() / n;

    let translation_fallback = || Alignment {
        transform: Pose::from_parts_unchecked(Matrix3::identity(), gt_centroid - est_centroid),
        translation_only: true,
    };

    if pairs.len() < 3 {
        return Ok(translation_fallback());
    }

    // Cross-covariance H = Σ (est − ē)(gt − ḡ)ᵀ.
    let mut h = Matrix3::<f64>::zeros();
    for p in pairs {
        h += (p.est.translation() - est_centroid) * (p.gt.translation() - gt_centroid).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Ok(translation_fallback());
    };
    // Rank < 2 leaves the rotation underdetermined (collinear positions).
    if svd.singular_values[1] <= 1e-9 * svd.singular_values[0].max(1e-300) {
        return Ok(translation_fallback());
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = v * correction * u.transpose();
    let translation = gt_centroid - rotation * est_centroid;
    Ok(Alignment {
        transform: Pose::from_parts_unchecked(rotation, translation),
        translation_only: false,
    })
}

/// Absolute trajectory error after rigid alignment.
#[derive(Debug, Clone, Serialize)]
pub struct AteResult {
    pub rmse: f64,
    /// ‖trans(T_kᵀ¹ S T̂_k)‖ per pair.
    pub errors: Vec<f64>,
    #[serde(skip)]
    pub alignment: Alignment,
}

/// ATE: aligns the estimate onto the ground truth, then takes the RMSE of
/// the translation magnitudes of the per-step error poses.
pub fn ate_rmse(pairs: &[PosePair]) -> Result<AteResult, EvalError> {
    let alignment = align_rigid(pairs)?;
    let errors: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let error_pose =
                p.gt.inverse().compose(&alignment.transform).compose(&p.est);
            error_pose.translation().norm()
        })
        .collect();
    Ok(AteResult { rmse: rmse(&errors), errors, alignment })
}

/// Relative trajectory error over a fixed step.
#[derive(Debug, Clone, Serialize)]
pub struct RteResult {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
    pub trans_errors: Vec<f64>,
    pub rot_errors_deg: Vec<f64>,
}

/// RTE: compares the relative motion over `delta` steps between estimate
/// and ground truth; reports translation RMSE (meters) and rotation-angle
/// RMSE (degrees). The rotation angle comes from the error pose's trace,
/// clamped into the valid arccos range.
pub fn rte_rmse(pairs: &[PosePair], delta: usize) -> Result<RteResult, EvalError> {
    if delta == 0 || pairs.len() <= delta {
        return Err(EvalError::InsufficientLength { n: pairs.len(), delta });
    }
    let mut trans_errors = Vec::with_capacity(pairs.len() - delta);
    let mut rot_errors_deg = Vec::with_capacity(pairs.len() - delta);
    for k in 0..pairs.len() - delta {
        let est_rel = pairs[k].est.inverse().compose(&pairs[k + delta].est);
        let gt_rel = pairs[k].gt.inverse().compose(&pairs[k + delta].gt);
        let error_pose = est_rel.inverse().compose(&gt_rel);
        trans_errors.push(error_pose.translation().norm());
        rot_errors_deg.push(error_pose.rotation_angle().to_degrees());
    }
    Ok(RteResult {
        trans_rmse: rmse(&trans_errors),
        rot_rmse_deg: rmse(&rot_errors_deg),
        trans_errors,
        rot_errors_deg,
    })
}

fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Full evaluation summary, serialized as the report JSON.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ate_rmse: f64,
    pub rte_trans_rmse: f64,
    pub rte_rot_rmse_deg: f64,
    pub delta: usize,
    pub max_dt: f64,
    pub n_pairs: usize,
    pub alignment_translation_only: bool,
    pub ate_errors: Vec<f64>,
    pub rte_trans_errors: Vec<f64>,
    pub rte_rot_errors_deg: Vec<f64>,
    pub timestamps: Vec<f64>,
}

/// Associates, aligns and computes both metrics. When `delta` is `None` it
/// defaults to one second of steps, from the estimate's median frame rate.
pub fn evaluate(
    est: &Trajectory,
    gt: &Trajectory,
    delta: Option<usize>,
    max_dt: f64,
) -> Result<EvalReport, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let delta = delta.unwrap_or_else(|| {
        est.median_dt().map_or(1, |dt| (1.0 / dt).round().max(1.0) as usize)
    });
    let ate = ate_rmse(&pairs)?;
    let rte = rte_rmse(&pairs, delta)?;
    Ok(EvalReport {
        ate_rmse: ate.rmse,
        rte_trans_rmse: rte.trans_rmse,
        rte_rot_rmse_deg: rte.rot_rmse_deg,
        delta,
        max_dt,
        n_pairs: pairs.len(),
        alignment_translation_only: ate.alignment.translation_only,
        ate_errors: ate.errors,
        rte_trans_errors: rte.trans_errors,
        rte_rot_errors_deg: rte.rot_errors_deg,
        timestamps: pairs.iter().map(|p| p.timestamp).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn traj(points: Vec<(f64, Pose)>) -> Trajectory {
        Trajectory::new(
            points
                .into_iter()
                .map(|(timestamp, pose)| TrajectoryPoint { timestamp, pose })
                .collect(),
        )
        .unwrap()
    }

    fn pose_xyz(x: f64, y: f64, z: f64) -> Pose {
        Pose::from_quaternion(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        Pose::from_quaternion(
            UnitQuaternion::from_euler_angles(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
        )
    }

    fn random_trajectory(n: usize, rng: &mut StdRng) -> Trajectory {
        traj((0..n).map(|k| (k as f64 * 0.1, random_pose(rng))).collect())
    }

    #[test]
    fn associate_identical_timestamps() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = random_trajectory(10, &mut rng);
        let b = random_trajectory(10, &mut rng);
        let pairs = associate(&a, &b, 0.02).unwrap();
        assert_eq!(pairs.len(), 10);
    }

    #[test]
    fn associate_offset_within_and_beyond_tolerance() {
        let mut rng = StdRng::seed_from_u64(2);
        let gt = random_trajectory(10, &mut rng);
        let offset = |dt: f64| {
            traj(
                gt.points()
                    .iter()
                    .map(|p| (p.timestamp + dt, p.pose))
                    .collect::<Vec<_>>(),
            )
        };
        let pairs = associate(&offset(0.01), &gt, 0.02).unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(matches!(
            associate(&offset(0.04), &gt, 0.02),
            Err(EvalError::AssociationError(_))
        ));
    }

    #[test]
    fn associate_is_monotone() {
        let mut rng = StdRng::seed_from_u64(3);
        let est = traj(vec![(0.0, random_pose(&mut rng)), (0.11, random_pose(&mut rng))]);
        let gt = random_trajectory(5, &mut rng);
        let pairs = associate(&est, &gt, 0.06).unwrap();
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn align_identity_when_equal() {
        let mut rng = StdRng::seed_from_u64(4);
        let t = random_trajectory(8, &mut rng);
        let pairs = associate(&t, &t, 0.01).unwrap();
        let a = align_rigid(&pairs).unwrap();
        assert!(!a.translation_only);
        assert!(a.transform.translation().norm() < 1e-9);
        assert!(a.transform.rotation_angle() < 1e-9);
    }

    #[test]
    fn align_recovers_rigid_offset_exactly() {
        let mut rng = StdRng::seed_from_u64(5);
        let gt = random_trajectory(8, &mut rng);
        let g = random_pose(&mut rng);
        // est = g⁻¹ · gt: aligning est onto gt must recover S = g.
        let est = traj(
            gt.points()
                .iter()
                .map(|p| (p.timestamp, g.inverse().compose(&p.pose)))
                .collect::<Vec<_>>(),
        );
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let a = align_rigid(&pairs).unwrap();
        let residual: f64 = pairs
            .iter()
            .map(|p| {
                (p.gt.translation() - a.transform.apply(p.est.translation())).norm_squared()
            })
            .sum();
        assert!(residual < 1e-18, "residual {residual}");
        assert!((a.transform.translation() - g.translation()).norm() < 1e-9);
    }

    #[test]
    fn align_noisy_offset_close_and_beats_sampled_alternatives() {
        let mut rng = StdRng::seed_from_u64(6);
        let gt = random_trajectory(10, &mut rng);
        let g = random_pose(&mut rng);
        let est = traj(
            gt.points()
                .iter()
                .map(|p| {
                    let mut q = g.inverse().compose(&p.pose);
                    let noisy_t = q.translation()
                        + Vector3::new(
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                        );
                    q = Pose::from_quaternion(q.quaternion(), noisy_t);
                    (p.timestamp, q)
                })
                .collect::<Vec<_>>(),
        );
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let a = align_rigid(&pairs).unwrap();
        assert!((a.transform.translation() - g.translation()).norm() < 0.02);
        let angle = a.transform.compose(&g.inverse()).rotation_angle().to_degrees();
        assert!(angle < 0.5, "angle {angle}");

        // Brute-force check: the closed form beats random SE(3) offsets.
        let cost = |s: &Pose| -> f64 {
            pairs
                .iter()
                .map(|p| (p.gt.translation() - s.apply(p.est.translation())).norm_squared())
                .sum()
        };
        let best = cost(&a.transform);
        for _ in 0..200 {
            let jitter = Pose::from_quaternion(
                UnitQuaternion::from_euler_angles(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
                *a.transform.translation()
                    + Vector3::new(
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    ),
            );
            let candidate =
                Pose::from_quaternion(jitter.quaternion() * a.transform.quaternion(), *jitter.translation());
            assert!(cost(&candidate) + 1e-12 >= best);
        }
    }

    #[test]
    fn ate_zero_for_identical_trajectories() {
        let mut rng = StdRng::seed_from_u64(7);
        let t = random_trajectory(10, &mut rng);
        let pairs = associate(&t, &t, 0.01).unwrap();
        let ate = ate_rmse(&pairs).unwrap();
        assert!(ate.rmse < 1e-12);
    }

    #[test]
    fn ate_absorbs_constant_world_shift() {
        let mut rng = StdRng::seed_from_u64(8);
        let gt = random_trajectory(10, &mut rng);
        let est = traj(
            gt.points()
                .iter()
                .map(|p| {
                    (
                        p.timestamp,
                        Pose::from_quaternion(
                            p.pose.quaternion(),
                            p.pose.translation() + Vector3::new(5.0, -3.0, 1.0),
                        ),
                    )
                })
                .collect::<Vec<_>>(),
        );
        let pairs = associate(&est, &gt, 0.01).unwrap();
        assert!(ate_rmse(&pairs).unwrap().rmse < 1e-9);
    }

    #[test]
    fn ate_three_pose_example_matches_frozen_oracle() {
        // Ground truth is collinear, so alignment falls back to
        // translation-only: S shifts by (0, −0.1, 0). Error translations are
        // (0,−0.1,0), (0,−0.1,0), (0,0.2,0) → RMSE = sqrt(0.06/3).
        let gt = traj(vec![
            (0.0, pose_xyz(0.0, 0.0, 0.0)),
            (1.0, pose_xyz(1.0, 0.0, 0.0)),
            (2.0, pose_xyz(2.0, 0.0, 0.0)),
        ]);
        let est = traj(vec![
            (0.0, pose_xyz(0.0, 0.0, 0.0)),
            (1.0, pose_xyz(1.0, 0.0, 0.0)),
            (2.0, pose_xyz(2.0, 0.3, 0.0)),
        ]);
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let ate = ate_rmse(&pairs).unwrap();
        assert!(ate.alignment.translation_only);
        assert_relative_eq!(ate.rmse, 0.02f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rte_zero_for_identical_trajectories() {
        let mut rng = StdRng::seed_from_u64(9);
        let t = random_trajectory(10, &mut rng);
        let pairs = associate(&t, &t, 0.01).unwrap();
        let rte = rte_rmse(&pairs, 3).unwrap();
        assert!(rte.trans_rmse < 1e-12);
        assert!(rte.rot_rmse_deg < 1e-6);
        assert_eq!(rte.trans_errors.len(), 7);
    }

    #[test]
    fn rte_rotated_step_gives_ninety_degrees() {
        let rot = Pose::from_quaternion(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::zeros(),
        );
        let gt = traj(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]);
        let est = traj(vec![(0.0, Pose::identity()), (1.0, rot)]);
        let pairs = associate(&est, &gt, 0.01).unwrap();
        let rte = rte_rmse(&pairs, 1).unwrap();
        assert_relative_eq!(rte.rot_rmse_deg, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn rte_requires_enough_poses() {
        let mut rng = StdRng::seed_from_u64(10);
        let t = random_trajectory(4, &mut rng);
        let pairs = associate(&t, &t, 0.01).unwrap();
        assert!(matches!(
            rte_rmse(&pairs, 4),
            Err(EvalError::InsufficientLength { n: 4, delta: 4 })
        ));
    }

    #[test]
    fn rmse_dominates_mean() {
        let mut rng = StdRng::seed_from_u64(11);
        let errors: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..2.0)).collect();
        let mean = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
        assert!(rmse(&errors) + 1e-15 >= mean);
    }
}
