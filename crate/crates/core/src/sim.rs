//! Synthetic rigid-body scene generator: ground-truth trajectories, depth,
//! dense flow, segment masks, detections and feature matches with seeded
//! noise. Serves as the verification oracle for the whole pipeline.
//!
//! Movers are textureless boxes rendered as face point grids with z-buffer
//! occlusion; everything is geometric, no photometric rendering. A fixed
//! seed reproduces a dataset byte for byte.

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::flow::{FlowField, ScalarField};
use crate::geometry::{CameraIntrinsics, GeometryError, PixelPoint, Pose};
use crate::io::{self, DatasetManifest, FormatError, FrameFiles};
use crate::par;
use crate::segmentation::{Detection, SegmentationSet};
use crate::tracking::FeatureMatch;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    ConfigError(String),
    #[error("frame index {index} out of range 1..{count}")]
    IndexError { index: usize, count: usize },
    #[error("frame {0} has no visible geometry")]
    EmptyFrame(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// TUM-ordered pose: [tx, ty, tz, qx, qy, qz, qw].
pub type PoseSpec = [f64; 7];

pub fn pose_from_spec(spec: &PoseSpec) -> Result<Pose, SimError> {
    let q = nalgebra::Quaternion::new(spec[6], spec[3], spec[4], spec[5]);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(SimError::ConfigError(format!("quaternion norm {} is not 1", q.norm())));
    }
    Ok(Pose::from_quaternion(
        UnitQuaternion::from_quaternion(q),
        Vector3::new(spec[0], spec[1], spec[2]),
    ))
}

pub fn pose_to_spec(pose: &Pose) -> PoseSpec {
    let t = pose.translation();
    let q = pose.quaternion();
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkConfig {
    pub count: usize,
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gaussian sigma on match pixel coordinates (px), truncated at 4σ.
    pub match_px_sigma: f64,
    /// Gaussian sigma on dense flow vectors (px), truncated at 4σ.
    pub flow_px_sigma: f64,
    /// Gaussian sigma on depth values (m), truncated at 4σ.
    pub depth_m_sigma: f64,
}

fn default_surface_grid() -> usize {
    48
}

fn default_feature_count() -> usize {
    120
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverConfig {
    /// Full box edge lengths (m).
    pub dims: [f64; 3],
    /// Detection class; movers without one model unknown objects.
    #[serde(default)]
    pub class: Option<String>,
    /// Samples per box edge for the dense surface grid.
    #[serde(default = "default_surface_grid")]
    pub surface_grid: usize,
    /// Feature points sampled on the surface for matches.
    #[serde(default = "default_feature_count")]
    pub feature_count: usize,
    /// Body-to-world pose per frame.
    pub trajectory: Vec<PoseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    pub frame_count: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub seed: u64,
    pub landmarks: LandmarkConfig,
    #[serde(default)]
    pub movers: Vec<MoverConfig>,
    pub camera_trajectory: Vec<PoseSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_fps() -> f64 {
    25.0
}

#[derive(Debug, Clone)]
pub struct Mover {
    half_extents: Vector3<f64>,
    class: Option<String>,
    poses: Vec<Pose>,
    /// Dense grid on the box faces, in box-local coordinates.
    surface_points: Vec<Vector3<f64>>,
    /// Sparse feature points on the surface, box-local.
    feature_points: Vec<Vector3<f64>>,
}

/// An immutable scene: frames can be rendered independently.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SceneConfig,
    landmarks: Vec<Vector3<f64>>,
    movers: Vec<Mover>,
    camera: Vec<Pose>,
}

/// Everything the pipeline consumes for one frame, plus ground truth.
#[derive(Debug, Clone)]
pub struct FrameTruth {
    pub frame_index: usize,
    pub timestamp: f64,
    pub depth: ScalarField,
    pub flow: FlowField,
    pub segments: SegmentationSet,
    pub detections: Vec<Detection>,
    pub matches: Vec<FeatureMatch>,
    /// World-frame displacement of each match's landmark between the two
    /// frames (zero for static landmarks); parallel to `matches`.
    pub displacements: Vec<Vector3<f64>>,
    /// Ground-truth camera pose at this frame.
    pub pose: Pose,
    /// Segment id assigned to each mover this frame, if visible.
    pub segment_of_mover: Vec<Option<u8>>,
}

/// Depth/mask/detections for frame 0, which has no previous frame.
#[derive(Debug, Clone)]
pub struct InitialFrame {
    pub depth: ScalarField,
    pub segments: SegmentationSet,
    pub detections: Vec<Detection>,
    pub pose: Pose,
}

pub fn build_scene(config: SceneConfig) -> Result<Scene, SimError> {
    config.intrinsics.validate()?;
    if config.frame_count < 1 {
        return Err(SimError::ConfigError("frame_count must be >= 1".into()));
    }
    if !(config.fps > 0.0) {
        return Err(SimError::ConfigError("fps must be positive".into()));
    }
    if config.camera_trajectory.len() != config.frame_count {
        return Err(SimError::ConfigError(format!(
            "camera trajectory has {} poses for {} frames",
            config.camera_trajectory.len(),
            config.frame_count
        )));
    }
    for (min, max) in config.landmarks.extent_min.iter().zip(&config.landmarks.extent_max) {
        if min > max {
            return Err(SimError::ConfigError("landmark extent_min exceeds extent_max".into()));
        }
    }
    if config.movers.len() > 255 {
        return Err(SimError::ConfigError("at most 255 movers supported".into()));
    }
    for (i, m) in config.movers.iter().enumerate() {
        if m.trajectory.len() != config.frame_count {
            return Err(SimError::ConfigError(format!(
                "mover {i} trajectory has {} poses for {} frames",
                m.trajectory.len(),
                config.frame_count
            )));
        }
        if m.dims.iter().any(|d| !(*d > 0.0)) {
            return Err(SimError::ConfigError(format!("mover {i} dims must be positive")));
        }
        if m.surface_grid < 2 {
            return Err(SimError::ConfigError(format!("mover {i} surface_grid must be >= 2")));
        }
    }

    let camera: Vec<Pose> =
        config.camera_trajectory.iter().map(pose_from_spec).collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let landmarks: Vec<Vector3<f64>> = (0..config.landmarks.count)
        .map(|_| {
            Vector3::new(
                rng.gen_range(config.landmarks.extent_min[0]..=config.landmarks.extent_max[0]),
                rng.gen_range(config.landmarks.extent_min[1]..=config.landmarks.extent_max[1]),
                rng.gen_range(config.landmarks.extent_min[2]..=config.landmarks.extent_max[2]),
            )
        })
        .collect();

    let mut movers = Vec::with_capacity(config.movers.len());
    for mc in &config.movers {
        let he = Vector3::new(mc.dims[0] / 2.0, mc.dims[1] / 2.0, mc.dims[2] / 2.0);
        let poses: Vec<Pose> = mc.trajectory.iter().map(pose_from_spec).collect::<Result<_, _>>()?;
        movers.push(Mover {
            half_extents: he,
            class: mc.class.clone(),
            poses,
            surface_points: box_surface_grid(&he, mc.surface_grid),
            feature_points: sample_surface_points(&he, mc.feature_count, &mut rng),
        });
    }

    // Movers must never envelop the camera.
    for k in 0..config.frame_count {
        let cam_pos = camera[k].translation();
        for (i, m) in movers.iter().enumerate() {
            let local = m.poses[k].apply_inverse(cam_pos);
            if local.x.abs() < m.half_extents.x
                && local.y.abs() < m.half_extents.y
                && local.z.abs() < m.half_extents.z
            {
                return Err(SimError::ConfigError(format!(
                    "mover {i} envelops the camera at frame {k}"
                )));
            }
        }
    }

    Ok(Scene { config, landmarks, movers, camera })
}

fn box_surface_grid(he: &Vector3<f64>, n: usize) -> Vec<Vector3<f64>> {
    let mut points = Vec::with_capacity(6 * n * n);
    let lin = |half: f64, i: usize| -> f64 { -half + 2.0 * half * i as f64 / (n - 1) as f64 };
    for i in 0..n {
        for j in 0..n {
            let (y, z) = (lin(he.y, i), lin(he.z, j));
            points.push(Vector3::new(-he.x, y, z));
            points.push(Vector3::new(he.x, y, z));
            let (x, z) = (lin(he.x, i), lin(he.z, j));
            points.push(Vector3::new(x, -he.y, z));
            points.push(Vector3::new(x, he.y, z));
            let (x, y) = (lin(he.x, i), lin(he.y, j));
            points.push(Vector3::new(x, y, -he.z));
            points.push(Vector3::new(x, y, he.z));
        }
    }
    points
}

fn sample_surface_points(he: &Vector3<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let areas = [
        he.y * he.z, // ±x faces
        he.x * he.z, // ±y faces
        he.x * he.y, // ±z faces
    ];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..count)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < 2.0 * a {
                    axis = i;
                    break;
                }
                pick -= 2.0 * a;
            }
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            match axis {
                0 => Vector3::new(side * he.x, u * he.y, v * he.z),
                1 => Vector3::new(u * he.x, side * he.y, v * he.z),
                _ => Vector3::new(u * he.x, v * he.y, side * he.z),
            }
        })
        .collect()
}

impl Scene {
    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn frame_count(&self) -> usize {
        self.config.frame_count
    }

    pub fn camera_pose(&self, k: usize) -> &Pose {
        &self.camera[k]
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        k as f64 / self.config.fps
    }

    /// Ground-truth camera trajectory.
    pub fn groundtruth(&self) -> crate::eval::Trajectory {
        crate::eval::Trajectory::new(
            self.camera
                .iter()
                .enumerate()
                .map(|(k, pose)| crate::eval::TrajectoryPoint {
                    timestamp: self.timestamp(k),
                    pose: *pose,
                })
                .collect(),
        )
        .expect("timestamps increase")
    }

    /// World position of mover `m`'s local point at frame k.
    fn mover_world(&self, m: usize, local: &Vector3<f64>, k: usize) -> Vector3<f64> {
        self.movers[m].poses[k].apply(local)
    }

    /// True when the segment from the camera center at frame `k` to `world`
    /// is blocked by any mover box (front faces of the point's own box
    /// included, so back-face points are occluded).
    fn occluded(&self, world: &Vector3<f64>, k: usize) -> bool {
        let origin = *self.camera[k].translation();
        let dir = world - origin;
        for m in &self.movers {
            let local_origin = m.poses[k].apply_inverse(&origin);
            let local_dir = m.poses[k].rotation().transpose() * dir;
            if ray_hits_box(&local_origin, &local_dir, &m.half_extents) {
                return true;
            }
        }
        false
    }
}

/// Slab test: does the segment origin + t·dir, t ∈ (ε, 1−ε), enter the box?
fn ray_hits_box(origin: &Vector3<f64>, dir: &Vector3<f64>, he: &Vector3<f64>) -> bool {
    let mut t_near = 0.0f64;
    let mut t_far = 1.0 - 1e-9;
    for a in 0..3 {
        let (o, d, h) = (origin[a], dir[a], he[a]);
        if d.abs() < 1e-15 {
            if o.abs() > h {
                return false;
            }
            continue;
        }
        let mut t0 = (-h - o) / d;
        let mut t1 = (h - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return false;
        }
    }
    t_near > 1e-9 && t_near < 1.0 - 1e-9
}

/// One point splatted into the z-buffer.
struct Splat {
    pixel: (usize, usize),
    depth: f64,
    flow: [f64; 2],
    segment: u8,
}

struct Raster {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    flow: Vec<[f64; 2]>,
    segment: Vec<u8>,
    filled: Vec<bool>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            flow: vec![[0.0, 0.0]; width * height],
            segment: vec![0; width * height],
            filled: vec![false; width * height],
        }
    }

    fn splat(&mut self, s: &Splat) {
        let i = s.pixel.1 * self.width + s.pixel.0;
        if s.depth < self.depth[i] {
            self.depth[i] = s.depth;
            self.flow[i] = s.flow;
            self.segment[i] = s.segment;
            self.filled[i] = true;
        }
    }

    /// Fills empty pixels from their nearest filled neighbor (multi-source
    /// BFS, fixed visit order for determinism).
    fn fill_gaps(&mut self) {
        let mut queue: std::collections::VecDeque<usize> =
            (0..self.filled.len()).filter(|&i| self.filled[i]).collect();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % self.width, i / self.width);
            for (dx, dy) in
                [(-1isize, -1isize), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
            {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                    continue;
                }
                let ni = ny as usize * self.width + nx as usize;
                if !self.filled[ni] {
                    self.filled[ni] = true;
                    self.depth[ni] = self.depth[i];
                    self.flow[ni] = self.flow[i];
                    self.segment[ni] = self.segment[i];
                    queue.push_back(ni);
                }
            }
        }
    }
}

/// Per-frame noise stream, independent of rendering order across frames.
fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407),
    )
}

fn truncated_gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    normal.sample(rng).clamp(-4.0 * sigma, 4.0 * sigma)
}

impl Scene {
    /// Rasterizes frame `k`: z-buffered splats of all scene points, then
    /// nearest-neighbor gap fill. `flow_to_prev` adds the exact two-frame
    /// pixel displacement (requires k ≥ 1).
    fn rasterize(&self, k: usize, flow_to_prev: bool) -> Result<Raster, SimError> {
        let kk = &self.config.intrinsics;
        let (w, h) = (kk.width as usize, kk.height as usize);
        let cam = &self.camera[k];
        let cam_prev = &self.camera[k.saturating_sub(1)];

        enum Source {
            Static(usize),
            MoverPoint { mover: usize, point: usize },
        }
        let mut sources: Vec<Source> = Vec::new();
        for i in 0..self.landmarks.len() {
            sources.push(Source::Static(i));
        }
        for (m, mover) in self.movers.iter().enumerate() {
            for p in 0..mover.surface_points.len() {
                sources.push(Source::MoverPoint { mover: m, point: p });
            }
        }

        let splats: Vec<Option<Splat>> = par::map_collect(&sources, |src| {
            let (world_cur, world_prev, segment) = match src {
                Source::Static(i) => {
                    let p = self.landmarks[*i];
                    // Landmarks hidden behind a mover must not puncture its
                    // silhouette through grid gaps.
                    if self.occluded(&p, k) {
                        return None;
                    }
                    (p, p, 0u8)
                }
                Source::MoverPoint { mover, point } => {
                    let local = self.movers[*mover].surface_points[*point];
                    (
                        self.mover_world(*mover, &local, k),
                        self.mover_world(*mover, &local, k.saturating_sub(1)),
                        (*mover + 1) as u8,
                    )
                }
            };
            let cam_cur = cam.apply_inverse(&world_cur);
            if cam_cur.z <= 1e-6 {
                return None;
            }
            let p_cur = PixelPoint::new(
                kk.fx * cam_cur.x / cam_cur.z + kk.cx,
                kk.fy * cam_cur.y / cam_cur.z + kk.cy,
            );
            let px = p_cur.u.round();
            let py = p_cur.v.round();
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                return None;
            }
            let flow = if flow_to_prev {
                let prev_cam = cam_prev.apply_inverse(&world_prev);
                if prev_cam.z <= 1e-6 {
                    [0.0, 0.0]
                } else {
                    let p_prev = PixelPoint::new(
                        kk.fx * prev_cam.x / prev_cam.z + kk.cx,
                        kk.fy * prev_cam.y / prev_cam.z + kk.cy,
                    );
                    [p_cur.u - p_prev.u, p_cur.v - p_prev.v]
                }
            } else {
                [0.0, 0.0]
            };
            Some(Splat {
                pixel: (px as usize, py as usize),
                depth: cam_cur.z,
                flow,
                segment,
            })
        });

        let mut raster = Raster::new(w, h);
        for s in splats.iter().flatten() {
            raster.splat(s);
        }
        if !raster.filled.iter().any(|&f| f) {
            return Err(SimError::EmptyFrame(k));
        }
        raster.fill_gaps();
        Ok(raster)
    }

    /// Remaps raw mover ids (mover index + 1) to contiguous per-frame
    /// segment ids, returning the segmentation and the per-mover mapping.
    fn segments_from_raster(
        &self,
        raster: &mut Raster,
    ) -> Result<(SegmentationSet, Vec<Option<u8>>), SimError> {
        let mut present = vec![false; self.movers.len()];
        for &s in &raster.segment {
            if s > 0 {
                present[s as usize - 1] = true;
            }
        }
        let mut mapping: Vec<Option<u8>> = vec![None; self.movers.len()];
        let mut next = 1u8;
        for (m, p) in present.iter().enumerate() {
            if *p {
                mapping[m] = Some(next);
                next += 1;
            }
        }
        for s in raster.segment.iter_mut() {
            if *s > 0 {
                *s = mapping[*s as usize - 1].expect("present id");
            }
        }
        let set = SegmentationSet::from_id_map(raster.width, raster.height, raster.segment.clone())
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        Ok((set, mapping))
    }

    fn detections_from_segments(
        &self,
        segments: &SegmentationSet,
        mapping: &[Option<u8>],
    ) -> Vec<Detection> {
        let mut out = Vec::new();
        for (m, mover) in self.movers.iter().enumerate() {
            let (Some(class), Some(id)) = (&mover.class, mapping[m]) else { continue };
            let stats = segments.stats(id as usize);
            // Mask bbox dilated by 2 px, clamped to the image.
            let bbox = [
                (stats.bbox.0 as f64 - 2.0).max(0.0),
                (stats.bbox.1 as f64 - 2.0).max(0.0),
                (stats.bbox.2 as f64 + 3.0).min(segments.width() as f64),
                (stats.bbox.3 as f64 + 3.0).min(segments.height() as f64),
            ];
            out.push(Detection { class: class.clone(), bbox, confidence: 1.0 });
        }
        out
    }

    /// Renders the maps-only view of frame 0.
    pub fn render_initial_frame(&self) -> Result<InitialFrame, SimError> {
        let mut raster = self.rasterize(0, false)?;
        let (segments, mapping) = self.segments_from_raster(&mut raster)?;
        let detections = self.detections_from_segments(&segments, &mapping);
        let mut depth = ScalarField::zeros(raster.width, raster.height);
        for (dst, &d) in depth.data_mut().iter_mut().zip(&raster.depth) {
            *dst = d as f32;
        }
        self.apply_depth_noise(&mut depth, 0);
        Ok(InitialFrame { depth, segments, detections, pose: self.camera[0] })
    }

    /// Renders the full truth for frame `k` (k ≥ 1): maps, exact flow to
    /// the previous frame, matches and per-match displacements. Noise is
    /// applied after truth capture.
    pub fn render_frame_truth(&self, k: usize) -> Result<FrameTruth, SimError> {
        if k == 0 || k >= self.config.frame_count {
            return Err(SimError::IndexError { index: k, count: self.config.frame_count });
        }
        let mut raster = self.rasterize(k, true)?;
        let (segments, mapping) = self.segments_from_raster(&mut raster)?;
        let detections = self.detections_from_segments(&segments, &mapping);

        let mut depth = ScalarField::zeros(raster.width, raster.height);
        for (dst, &d) in depth.data_mut().iter_mut().zip(&raster.depth) {
            *dst = d as f32;
        }
        let mut flow = FlowField::zeros(raster.width, raster.height);
        for (dst, f) in flow.data_mut().iter_mut().zip(&raster.flow) {
            *dst = [f[0] as f32, f[1] as f32];
        }

        let (matches, displacements) = self.build_matches(k, &mapping)?;

        let mut truth = FrameTruth {
            frame_index: k,
            timestamp: self.timestamp(k),
            depth,
            flow,
            segments,
            detections,
            matches,
            displacements,
            pose: self.camera[k],
            segment_of_mover: mapping,
        };
        self.apply_noise(&mut truth, k);
        Ok(truth)
    }

    fn build_matches(
        &self,
        k: usize,
        mapping: &[Option<u8>],
    ) -> Result<(Vec<FeatureMatch>, Vec<Vector3<f64>>), SimError> {
        let kk = &self.config.intrinsics;
        let cam = &self.camera[k];
        let cam_prev = &self.camera[k - 1];
        let mut matches = Vec::new();
        let mut displacements = Vec::new();

        let mut consider = |id: u64,
                            world_cur: Vector3<f64>,
                            world_prev: Vector3<f64>,
                            segment: u8,
                            matches: &mut Vec<FeatureMatch>,
                            disp: &mut Vec<Vector3<f64>>| {
            let cur = cam.apply_inverse(&world_cur);
            let prev = cam_prev.apply_inverse(&world_prev);
            if cur.z <= 1e-3 || prev.z <= 1e-3 {
                return;
            }
            let p_cur = PixelPoint::new(kk.fx * cur.x / cur.z + kk.cx, kk.fy * cur.y / cur.z + kk.cy);
            let p_prev =
                PixelPoint::new(kk.fx * prev.x / prev.z + kk.cx, kk.fy * prev.y / prev.z + kk.cy);
            if !kk.contains(p_cur) || !kk.contains(p_prev) {
                return;
            }
            if self.occluded(&world_cur, k) || self.occluded(&world_prev, k - 1) {
                return;
            }
            matches.push(FeatureMatch {
                id,
                p_prev,
                p_cur,
                d_prev: prev.z,
                d_cur: cur.z,
                segment_id: segment,
            });
            disp.push(world_cur - world_prev);
        };

        for (i, p) in self.landmarks.iter().enumerate() {
            consider(i as u64, *p, *p, 0, &mut matches, &mut displacements);
        }
        let mut next_id = self.landmarks.len() as u64;
        for (m, mover) in self.movers.iter().enumerate() {
            let segment = mapping[m].unwrap_or(0);
            for local in &mover.feature_points {
                consider(
                    next_id,
                    self.mover_world(m, local, k),
                    self.mover_world(m, local, k - 1),
                    segment,
                    &mut matches,
                    &mut displacements,
                );
                next_id += 1;
            }
        }
        Ok((matches, displacements))
    }

    fn apply_depth_noise(&self, depth: &mut ScalarField, k: usize) {
        let sigma = self.config.noise.depth_m_sigma;
        if sigma <= 0.0 {
            return;
        }
        let mut rng = frame_rng(self.config.seed, k, 3);
        for v in depth.data_mut() {
            *v = (*v as f64 + truncated_gaussian(&mut rng, sigma)).max(1e-3) as f32;
        }
    }

    fn apply_noise(&self, truth: &mut FrameTruth, k: usize) {
        let noise = &self.config.noise;
        let kk = &self.config.intrinsics;
        if noise.match_px_sigma > 0.0 || noise.depth_m_sigma > 0.0 {
            let mut rng = frame_rng(self.config.seed, k, 1);
            let max_u = kk.width as f64 - 1e-6;
            let max_v = kk.height as f64 - 1e-6;
            for m in truth.matches.iter_mut() {
                m.p_prev.u = (m.p_prev.u + truncated_gaussian(&mut rng, noise.match_px_sigma))
                    .clamp(0.0, max_u);
                m.p_prev.v = (m.p_prev.v + truncated_gaussian(&mut rng, noise.match_px_sigma))
                    .clamp(0.0, max_v);
                m.p_cur.u = (m.p_cur.u + truncated_gaussian(&mut rng, noise.match_px_sigma))
                    .clamp(0.0, max_u);
                m.p_cur.v = (m.p_cur.v + truncated_gaussian(&mut rng, noise.match_px_sigma))
                    .clamp(0.0, max_v);
                m.d_prev = (m.d_prev + truncated_gaussian(&mut rng, noise.depth_m_sigma)).max(1e-3);
                m.d_cur = (m.d_cur + truncated_gaussian(&mut rng, noise.depth_m_sigma)).max(1e-3);
            }
        }
        if noise.flow_px_sigma > 0.0 {
            let mut rng = frame_rng(self.config.seed, k, 2);
            for v in truth.flow.data_mut() {
                v[0] += truncated_gaussian(&mut rng, noise.flow_px_sigma) as f32;
                v[1] += truncated_gaussian(&mut rng, noise.flow_px_sigma) as f32;
            }
        }
        self.apply_depth_noise(&mut truth.depth, k);
    }
}

/// Writes the full dataset layout (frames, ground truth, manifest with
/// checksums) and returns the manifest. Frames render in parallel; each
/// frame owns its files.
pub fn write_dataset(scene: &Scene, outdir: &Path) -> Result<DatasetManifest, SimError> {
    std::fs::create_dir_all(outdir.join("frames"))
        .map_err(|e| SimError::Format(FormatError::io(outdir, e)))?;

    let n = scene.frame_count();
    let results: std::sync::Mutex<BTreeMap<usize, (FrameFiles, Vec<(String, String)>)>> =
        std::sync::Mutex::new(BTreeMap::new());

    par::try_for_each_index(n, |k| -> Result<(), SimError> {
        let mut sums: Vec<(String, String)> = Vec::new();
        let mut emit = |rel: String, bytes: Vec<u8>| -> Result<(), SimError> {
            sums.push((rel.clone(), io::sha256_hex(&bytes)));
            io::write_file(&outdir.join(&rel), &bytes)?;
            Ok(())
        };

        let files = if k == 0 {
            let frame = scene.render_initial_frame()?;
            let depth = format!("frames/depth_{k:06}.pfm");
            let mask = format!("frames/mask_{k:06}.pgm");
            let dets = format!("frames/detections_{k:06}.json");
            emit(depth.clone(), io::depth_to_bytes(&frame.depth))?;
            emit(mask.clone(), io::mask_to_bytes(&frame.segments))?;
            emit(dets.clone(), io::detections_to_bytes(&frame.detections))?;
            FrameFiles {
                timestamp: scene.timestamp(k),
                depth,
                mask,
                detections: dets,
                flow: None,
                matches: None,
            }
        } else {
            let frame = scene.render_frame_truth(k)?;
            let depth = format!("frames/depth_{k:06}.pfm");
            let mask = format!("frames/mask_{k:06}.pgm");
            let dets = format!("frames/detections_{k:06}.json");
            let flow = format!("frames/flow_{k:06}.flo");
            let matches = format!("frames/matches_{k:06}.csv");
            emit(depth.clone(), io::depth_to_bytes(&frame.depth))?;
            emit(mask.clone(), io::mask_to_bytes(&frame.segments))?;
            emit(dets.clone(), io::detections_to_bytes(&frame.detections))?;
            emit(flow.clone(), io::flow_to_bytes(&frame.flow))?;
            emit(matches.clone(), io::matches_to_bytes(&frame.matches))?;
            FrameFiles {
                timestamp: scene.timestamp(k),
                depth,
                mask,
                detections: dets,
                flow: Some(flow),
                matches: Some(matches),
            }
        };
        results.lock().unwrap().insert(k, (files, sums));
        Ok(())
    })?;

    let mut frames = Vec::with_capacity(n);
    let mut checksums = BTreeMap::new();
    for (_, (files, sums)) in results.into_inner().unwrap() {
        frames.push(files);
        for (rel, sum) in sums {
            checksums.insert(rel, sum);
        }
    }

    let gt_rel = "groundtruth.txt".to_string();
    let gt_bytes = io::trajectory_to_bytes(&scene.groundtruth());
    checksums.insert(gt_rel.clone(), io::sha256_hex(&gt_bytes));
    io::write_file(&outdir.join(&gt_rel), &gt_bytes)?;

    let manifest = DatasetManifest {
        version: io::MANIFEST_VERSION,
        fps: scene.config.fps,
        intrinsics: scene.config.intrinsics,
        frames,
        groundtruth: Some(gt_rel),
        checksums,
    };
    io::write_manifest(&outdir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Builds a straight- or arc-path trajectory helper used by configs and
/// tests: per-frame translation plus a constant per-frame axis rotation.
pub fn trajectory_from_velocity(
    start: &Pose,
    translation_per_frame: Vector3<f64>,
    axis_angle_per_frame: Vector3<f64>,
    frames: usize,
) -> Vec<PoseSpec> {
    let step = Pose::from_parts_unchecked(
        Rotation3::from_scaled_axis(axis_angle_per_frame).into_inner(),
        translation_per_frame,
    );
    let mut poses = Vec::with_capacity(frames);
    let mut cur = *start;
    for _ in 0..frames {
        poses.push(pose_to_spec(&cur));
        cur = cur.compose(&step);
    }
    poses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_flow, CameraMotion};

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(160.0, 160.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn static_scene_config(seed: u64, frames: usize) -> SceneConfig {
        SceneConfig {
            intrinsics: small_intrinsics(),
            frame_count: frames,
            fps: 25.0,
            seed,
            landmarks: LandmarkConfig {
                count: 300,
                extent_min: [-2.0, -1.5, 2.5],
                extent_max: [2.0, 1.5, 3.5],
            },
            movers: vec![],
            camera_trajectory: trajectory_from_velocity(
                &Pose::identity(),
                Vector3::new(0.01, 0.002, 0.0),
                Vector3::new(0.0, 0.001, 0.0),
                frames,
            ),
            noise: NoiseConfig::default(),
        }
    }

    fn mover_config(frames: usize, class: Option<String>) -> MoverConfig {
        MoverConfig {
            dims: [0.6, 0.6, 0.4],
            class,
            surface_grid: 24,
            feature_count: 60,
            trajectory: trajectory_from_velocity(
                &Pose::from_quaternion(UnitQuaternion::identity(), Vector3::new(-0.5, 0.0, 2.8)),
                Vector3::new(0.08, 0.0, 0.0),
                Vector3::zeros(),
                frames,
            ),
        }
    }

    #[test]
    fn static_scene_has_only_static_content() {
        let scene = build_scene(static_scene_config(1, 5)).unwrap();
        for k in 1..5 {
            let truth = scene.render_frame_truth(k).unwrap();
            assert_eq!(truth.segments.n_segments(), 0);
            assert!(truth.detections.is_empty());
            assert!(truth.displacements.iter().all(|d| d.norm() == 0.0));
            assert!(!truth.matches.is_empty());
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = build_scene(static_scene_config(42, 3)).unwrap();
        let b = build_scene(static_scene_config(42, 3)).unwrap();
        assert_eq!(a.landmarks, b.landmarks);
        let ta = a.render_frame_truth(1).unwrap();
        let tb = b.render_frame_truth(1).unwrap();
        assert_eq!(ta.flow.data(), tb.flow.data());
        assert_eq!(ta.matches, tb.matches);
    }

    #[test]
    fn static_camera_static_scene_zero_flow() {
        let mut config = static_scene_config(2, 3);
        config.camera_trajectory =
            trajectory_from_velocity(&Pose::identity(), Vector3::zeros(), Vector3::zeros(), 3);
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        assert!(truth.flow.data().iter().all(|v| v == &[0.0, 0.0]));
    }

    #[test]
    fn parallax_flow_ratio_two_to_one() {
        // Two landmarks at depths 1 and 2 under pure lateral translation:
        // flow magnitudes in ratio 2:1.
        let mut config = static_scene_config(3, 2);
        config.landmarks.count = 2;
        config.camera_trajectory = trajectory_from_velocity(
            &Pose::identity(),
            Vector3::new(0.02, 0.0, 0.0),
            Vector3::zeros(),
            2,
        );
        let mut scene = build_scene(config).unwrap();
        scene.landmarks = vec![Vector3::new(0.1, 0.05, 1.0), Vector3::new(-0.2, -0.1, 2.0)];
        let truth = scene.render_frame_truth(1).unwrap();
        let kk = scene.config.intrinsics;
        let cam = scene.camera_pose(1);
        let flow_at = |world: &Vector3<f64>| -> [f32; 2] {
            let c = cam.apply_inverse(world);
            let u = (kk.fx * c.x / c.z + kk.cx).round() as usize;
            let v = (kk.fy * c.y / c.z + kk.cy).round() as usize;
            truth.flow.get(u, v)
        };
        let f_near = flow_at(&scene.landmarks[0]);
        let f_far = flow_at(&scene.landmarks[1]);
        let ratio = f_near[0] as f64 / f_far[0] as f64;
        assert!((ratio - 2.0).abs() < 1e-3, "ratio {ratio}");

        // And they match the closed-form camera flow.
        let motion = CameraMotion::between(scene.camera_pose(1), scene.camera_pose(0));
        for (world, measured) in [(scene.landmarks[0], f_near), (scene.landmarks[1], f_far)] {
            let c = cam.apply_inverse(&world);
            let p = PixelPoint::new(kk.fx * c.x / c.z + kk.cx, kk.fy * c.y / c.z + kk.cy);
            let predicted = camera_flow(p, c.z, &motion, &kk).unwrap();
            assert!((predicted.x - measured[0] as f64).abs() < 1e-6);
            assert!((predicted.y - measured[1] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn rendered_static_flow_matches_camera_flow() {
        // Lateral camera translation keeps depth constant, so the rendered
        // two-frame flow must equal the closed-form camera flow at every
        // splatted static pixel within 1e-6 px.
        let mut config = static_scene_config(4, 2);
        config.camera_trajectory = trajectory_from_velocity(
            &Pose::identity(),
            Vector3::new(0.03, -0.015, 0.0),
            Vector3::zeros(),
            2,
        );
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        let kk = scene.config.intrinsics;
        let motion = CameraMotion::between(scene.camera_pose(1), scene.camera_pose(0));
        let mut checked = 0;
        for m in &truth.matches {
            let measured = truth.flow.get(m.p_cur.u.round() as usize, m.p_cur.v.round() as usize);
            // Only exact splats: the pixel's source must be this landmark.
            let rendered_depth = truth.depth.get(m.p_cur.u.round() as usize, m.p_cur.v.round() as usize);
            if (rendered_depth as f64 - m.d_cur).abs() > 1e-6 {
                continue;
            }
            let predicted = camera_flow(m.p_cur, m.d_prev, &motion, &kk).unwrap();
            assert!(
                (predicted.x - measured[0] as f64).abs() < 1e-6
                    && (predicted.y - measured[1] as f64).abs() < 1e-6,
                "pixel {:?}: predicted {predicted:?}, measured {measured:?}",
                m.p_cur
            );
            checked += 1;
        }
        assert!(checked > 100, "only {checked} pixels checked");
    }

    #[test]
    fn mover_flow_decomposes_into_object_plus_camera_part() {
        // Rendered mover flow minus the exact camera-only flow equals the
        // projected object displacement (both via two-frame projection).
        let frames = 2;
        let mut config = static_scene_config(5, frames);
        config.movers = vec![mover_config(frames, None)];
        config.camera_trajectory = trajectory_from_velocity(
            &Pose::identity(),
            Vector3::new(0.02, 0.01, 0.0),
            Vector3::zeros(),
            frames,
        );
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        let kk = scene.config.intrinsics;
        let mover_seg = truth.segment_of_mover[0].unwrap();
        let cam_cur = scene.camera_pose(1);
        let cam_prev = scene.camera_pose(0);

        let project_local = |pose: &Pose, world: &Vector3<f64>| -> Option<PixelPoint> {
            let c = pose.apply_inverse(world);
            if c.z <= 1e-6 {
                return None;
            }
            Some(PixelPoint::new(kk.fx * c.x / c.z + kk.cx, kk.fy * c.y / c.z + kk.cy))
        };

        let mut checked = 0;
        for (m, d) in truth.matches.iter().zip(&truth.displacements) {
            if m.segment_id != mover_seg {
                continue;
            }
            let w_cur = cam_cur.apply(&backproject_v(m.p_cur, m.d_cur, &kk));
            let w_prev = w_cur - d;
            let p_cur = project_local(cam_cur, &w_cur).unwrap();
            let p_prev = project_local(cam_prev, &w_prev).unwrap();
            let total = [p_cur.u - p_prev.u, p_cur.v - p_prev.v];
            // Camera-only flow: where the *current* world point would have
            // appeared from the previous camera had it not moved.
            let p_static = project_local(cam_prev, &w_cur).unwrap();
            let cam_part = [p_cur.u - p_static.u, p_cur.v - p_static.v];
            let obj_part = [p_static.u - p_prev.u, p_static.v - p_prev.v];
            assert!((total[0] - cam_part[0] - obj_part[0]).abs() < 1e-9);
            assert!((total[1] - cam_part[1] - obj_part[1]).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 20, "only {checked} mover matches");
    }

    fn backproject_v(p: PixelPoint, d: f64, k: &CameraIntrinsics) -> Vector3<f64> {
        Vector3::new(d * (p.u - k.cx) / k.fx, d * (p.v - k.cy) / k.fy, d)
    }

    #[test]
    fn mover_displacement_appears_in_matches() {
        let frames = 3;
        let mut config = static_scene_config(6, frames);
        config.movers = vec![mover_config(frames, Some("person".into()))];
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        let seg = truth.segment_of_mover[0].unwrap();
        let mover_matches: Vec<_> = truth
            .matches
            .iter()
            .zip(&truth.displacements)
            .filter(|(m, _)| m.segment_id == seg)
            .collect();
        assert!(!mover_matches.is_empty());
        for (_, d) in &mover_matches {
            assert!((d.norm() - 0.08).abs() < 1e-12);
        }
        // Detection emitted with the configured class.
        assert_eq!(truth.detections.len(), 1);
        assert_eq!(truth.detections[0].class, "person");
    }

    #[test]
    fn unnamed_mover_has_no_detection() {
        let frames = 2;
        let mut config = static_scene_config(7, frames);
        config.movers = vec![mover_config(frames, None)];
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        assert!(truth.detections.is_empty());
        assert_eq!(truth.segments.n_segments(), 1);
    }

    #[test]
    fn back_face_features_are_occluded() {
        let frames = 2;
        let mut config = static_scene_config(8, frames);
        config.movers = vec![mover_config(frames, None)];
        let scene = build_scene(config).unwrap();
        let truth = scene.render_frame_truth(1).unwrap();
        let seg = truth.segment_of_mover[0].unwrap();
        let mover = &scene.movers[0];
        let n_visible = truth.matches.iter().filter(|m| m.segment_id == seg).count();
        assert!(n_visible > 0);
        assert!(
            n_visible < mover.feature_points.len(),
            "all {n_visible} features visible; back faces should be culled"
        );
        // Every visible mover feature's depth must beat the rendered
        // z-buffer by at most a hair (it *is* the surface).
        for m in truth.matches.iter().filter(|m| m.segment_id == seg) {
            let z = truth.depth.get(m.p_cur.u.round() as usize, m.p_cur.v.round() as usize);
            assert!(m.d_cur <= z as f64 + 0.05, "feature at {} behind z-buffer {z}", m.d_cur);
        }
    }

    #[test]
    fn landmarks_behind_mover_are_dropped_from_matches() {
        let frames = 2;
        let mut config = static_scene_config(9, frames);
        let mover = MoverConfig {
            dims: [1.5, 1.5, 0.4],
            class: None,
            surface_grid: 32,
            feature_count: 10,
            trajectory: trajectory_from_velocity(
                &Pose::from_quaternion(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1.5)),
                Vector3::zeros(),
                Vector3::zeros(),
                frames,
            ),
        };
        config.movers = vec![mover];
        let with_mover = build_scene(config.clone()).unwrap();
        config.movers = vec![];
        let without = build_scene(config).unwrap();
        let n_with = with_mover
            .render_frame_truth(1)
            .unwrap()
            .matches
            .iter()
            .filter(|m| m.segment_id == 0)
            .count();
        let n_without = without.render_frame_truth(1).unwrap().matches.len();
        assert!(
            n_with < n_without,
            "occlusion culled nothing: {n_with} vs {n_without}"
        );
    }

    #[test]
    fn frame_zero_and_out_of_range_rejected() {
        let scene = build_scene(static_scene_config(10, 3)).unwrap();
        assert!(matches!(scene.render_frame_truth(0), Err(SimError::IndexError { .. })));
        assert!(matches!(scene.render_frame_truth(3), Err(SimError::IndexError { .. })));
        assert!(scene.render_initial_frame().is_ok());
    }

    #[test]
    fn mismatched_trajectory_lengths_rejected() {
        let mut config = static_scene_config(11, 4);
        config.camera_trajectory.pop();
        assert!(matches!(build_scene(config), Err(SimError::ConfigError(_))));
        let mut config = static_scene_config(11, 4);
        config.movers = vec![mover_config(3, None)];
        assert!(matches!(build_scene(config), Err(SimError::ConfigError(_))));
    }

    #[test]
    fn camera_inside_mover_rejected() {
        let frames = 2;
        let mut config = static_scene_config(12, frames);
        config.movers = vec![MoverConfig {
            dims: [2.0, 2.0, 2.0],
            class: None,
            surface_grid: 8,
            feature_count: 8,
            trajectory: trajectory_from_velocity(
                &Pose::identity(),
                Vector3::zeros(),
                Vector3::zeros(),
                frames,
            ),
        }];
        assert!(matches!(build_scene(config), Err(SimError::ConfigError(_))));
    }

    #[test]
    fn noise_is_deterministic_and_truncated() {
        let mut config = static_scene_config(13, 3);
        config.noise =
            NoiseConfig { match_px_sigma: 0.5, flow_px_sigma: 0.25, depth_m_sigma: 0.01 };
        let scene_a = build_scene(config.clone()).unwrap();
        let scene_b = build_scene(config.clone()).unwrap();
        let ta = scene_a.render_frame_truth(1).unwrap();
        let tb = scene_b.render_frame_truth(1).unwrap();
        assert_eq!(ta.matches, tb.matches);
        assert_eq!(ta.flow.data(), tb.flow.data());

        // Compare against the noise-free render: displacements bounded by 4σ.
        config.noise = NoiseConfig::default();
        let clean = build_scene(config).unwrap().render_frame_truth(1).unwrap();
        for (n, c) in ta.matches.iter().zip(&clean.matches) {
            assert_eq!(n.id, c.id);
            assert!((n.p_cur.u - c.p_cur.u).abs() <= 2.0 + 1e-9);
            assert!((n.d_cur - c.d_cur).abs() <= 0.04 + 1e-9);
        }
    }

    #[test]
    fn mover_pixel_fraction_in_configured_range() {
        let frames = 4;
        let mut config = static_scene_config(14, frames);
        config.movers = vec![
            mover_config(frames, None),
            MoverConfig {
                trajectory: trajectory_from_velocity(
                    &Pose::from_quaternion(
                        UnitQuaternion::identity(),
                        Vector3::new(0.6, 0.3, 2.6),
                    ),
                    Vector3::new(-0.05, 0.0, 0.0),
                    Vector3::zeros(),
                    frames,
                ),
                ..mover_config(frames, None)
            },
        ];
        let scene = build_scene(config).unwrap();
        for k in 1..frames {
            let truth = scene.render_frame_truth(k).unwrap();
            let mover_px =
                truth.segments.id_map().iter().filter(|&&id| id > 0).count() as f64;
            let fraction = mover_px / (160.0 * 120.0);
            assert!(
                (0.02..0.5).contains(&fraction),
                "frame {k}: mover fraction {fraction}"
            );
        }
    }

    #[test]
    fn write_dataset_roundtrips_and_counts_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = static_scene_config(15, 4);
        config.movers = vec![mover_config(4, Some("person".into()))];
        let scene = build_scene(config).unwrap();
        let manifest = write_dataset(&scene, dir.path()).unwrap();
        assert_eq!(manifest.frame_count(), 4);
        // 4 depth/mask/detections, 3 flow/matches, 1 ground truth.
        assert_eq!(manifest.checksums.len(), 4 * 3 + 3 * 2 + 1);

        let (loaded, base) = io::read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert!(io::verify_manifest(&loaded, &base).is_ok());

        // Value round-trip of one frame.
        let truth = scene.render_frame_truth(2).unwrap();
        let flow = io::read_flow(&base.join(loaded.frames[2].flow.as_ref().unwrap())).unwrap();
        assert_eq!(flow.data(), truth.flow.data());
        let depth = io::read_depth(&base.join(&loaded.frames[2].depth)).unwrap();
        assert_eq!(depth.data(), truth.depth.data());
        let mask = io::read_mask(&base.join(&loaded.frames[2].mask)).unwrap();
        assert_eq!(mask.id_map(), truth.segments.id_map());
        let matches =
            io::read_matches(&base.join(loaded.frames[2].matches.as_ref().unwrap())).unwrap();
        assert_eq!(matches, truth.matches);
    }
}
