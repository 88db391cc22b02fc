//! Optical-flow gradients, motion-boundary maps and candidate dynamic
//! regions.
//!
//! A moving object shifts all of its pixels coherently, so the flow field
//! is smooth inside objects and jumps at their silhouettes. Sobel gradients
//! of the flow pick up those jumps; two soft boundary scores (gradient
//! magnitude and orientation disagreement) are combined, binarized, and the
//! enclosed regions extracted as motion candidates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("field dimensions differ: {0}x{1} vs {2}x{3}")]
    ShapeError(usize, usize, usize, usize),
    #[error("data length {0} does not match {1}x{2}")]
    BadLength(usize, usize, usize),
    #[error("non-finite flow value at pixel ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("invalid boundary parameters: {0}")]
    BadParams(String),
}

/// Dense per-pixel 2-vector flow in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0, 0.0]; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<[f32; 2]>) -> Result<Self, FlowError> {
        if data.len() != width * height {
            return Err(FlowError::BadLength(data.len(), width, height));
        }
        for (i, v) in data.iter().enumerate() {
            if !(v[0].is_finite() && v[1].is_finite()) {
                return Err(FlowError::NonFinite(i % width, i / width));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 2]) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[[f32; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f32; 2]] {
        &mut self.data
    }
}

/// Row-major scalar image used for gradients, orientations and boundary
/// scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScalarField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, FlowError> {
        if data.len() != width * height {
            return Err(FlowError::BadLength(data.len(), width, height));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Free parameters of the boundary-map stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryParams {
    /// Steepness of the gradient-magnitude score.
    pub k_i: f64,
    /// Steepness of the orientation-difference score.
    pub k_o: f64,
    /// Magnitude score above which it is used alone (strict).
    pub gate: f64,
    /// Threshold turning the combined score into the binary map (strict).
    pub binarize_threshold: f64,
    /// Chebyshev radius of the orientation neighborhood.
    pub neighborhood_radius: usize,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            k_i: 0.5,
            k_o: 2.0,
            gate: 0.8,
            binarize_threshold: 0.5,
            neighborhood_radius: 1,
        }
    }
}

impl BoundaryParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.k_i > 0.0 && self.k_o > 0.0) {
            return Err(FlowError::BadParams(format!(
                "steepness must be positive, got k_i={} k_o={}",
                self.k_i, self.k_o
            )));
        }
        if !(self.gate > 0.0 && self.gate < 1.0) {
            return Err(FlowError::BadParams(format!("gate={} outside (0, 1)", self.gate)));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(FlowError::BadParams(format!(
                "binarize_threshold={} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        if self.neighborhood_radius < 1 {
            return Err(FlowError::BadParams("neighborhood_radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Combined motion-boundary score in [0, 1] plus its binarization.
#[derive(Debug, Clone)]
pub struct BoundaryMap {
    pub values: ScalarField,
    pub binary: Vec<bool>,
}

impl BoundaryMap {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.binary[y * self.values.width() + x]
    }
}

/// One 8-connected candidate dynamic region: boundary pixels plus the
/// pixels they enclose.
#[derive(Debug, Clone)]
pub struct MotionRegion {
    /// Row-major sorted (x, y) pixels.
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    /// (x_min, y_min, x_max, y_max), inclusive.
    pub bbox: (u32, u32, u32, u32),
}

/// Flow orientation below this magnitude is undefined and ignored.
const MIN_FLOW_MAGNITUDE: f32 = 1e-6;

#[inline]
fn clamp_coord(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

/// Sobel gradient magnitude of the flow (both channels, Euclidean norm of
/// the four responses, replicate border padding) and per-pixel flow
/// orientation. Orientation is NaN where the flow magnitude is below
/// 1e-6 px.
pub fn flow_gradient(flow: &FlowField) -> (ScalarField, ScalarField) {
    let (w, h) = (flow.width(), flow.height());
    let mut magnitude = ScalarField::zeros(w, h);
    par::for_each_row(magnitude.data_mut(), w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let sample = |dx: isize, dy: isize| -> [f32; 2] {
                flow.get(clamp_coord(x as isize + dx, w), clamp_coord(y as isize + dy, h))
            };
            // 3x3 Sobel, unit normalization disabled.
            let mut gx = [0.0f64; 2];
            let mut gy = [0.0f64; 2];
            for (dy, wy) in [(-1isize, 1.0f64), (0, 2.0), (1, 1.0)] {
                let left = sample(-1, dy);
                let right = sample(1, dy);
                for c in 0..2 {
                    gx[c] += wy * (right[c] as f64 - left[c] as f64);
                }
            }
            for (dx, wx) in [(-1isize, 1.0f64), (0, 2.0), (1, 1.0)] {
                let top = sample(dx, -1);
                let bottom = sample(dx, 1);
                for c in 0..2 {
                    gy[c] += wx * (bottom[c] as f64 - top[c] as f64);
                }
            }
            *out = (gx[0] * gx[0] + gy[0] * gy[0] + gx[1] * gx[1] + gy[1] * gy[1]).sqrt() as f32;
        }
    });

    let mut orientation = ScalarField::zeros(w, h);
    par::for_each_row(orientation.data_mut(), w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let [u, v] = flow.get(x, y);
            *out = if (u * u + v * v).sqrt() < MIN_FLOW_MAGNITUDE {
                f32::NAN
            } else {
                v.atan2(u)
            };
        }
    });

    (magnitude, orientation)
}

/// Gradient-magnitude boundary score 1 − exp(−k_I·g), elementwise.
pub fn boundary_magnitude(gradient_magnitude: &ScalarField, k_i: f64) -> ScalarField {
    let mut out = gradient_magnitude.clone();
    let w = out.width();
    par::for_each_row(out.data_mut(), w, |_, row| {
        for v in row.iter_mut() {
            *v = (1.0 - (-k_i * *v as f64).exp()) as f32;
        }
    });
    out
}

/// Wraps an angle difference into [0, π].
fn wrap_angle_difference(d: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut d = d.abs() % two_pi;
    if d > std::f64::consts::PI {
        d = two_pi - d;
    }
    d
}

/// Orientation-difference boundary score 1 − exp(−k_O·max_{j∈N}|δθ|).
/// Pixels with undefined orientation (NaN) contribute difference 0.
pub fn boundary_orientation(orientation: &ScalarField, k_o: f64, radius: usize) -> ScalarField {
    let (w, h) = (orientation.width(), orientation.height());
    let r = radius as isize;
    let mut out = ScalarField::zeros(w, h);
    par::for_each_row(out.data_mut(), w, |y, row| {
        for (x, dst) in row.iter_mut().enumerate() {
            let theta = orientation.get(x, y) as f64;
            let mut max_delta = 0.0f64;
            if theta.is_finite() {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let other = orientation.get(nx as usize, ny as usize) as f64;
                        if !other.is_finite() {
                            continue;
                        }
                        max_delta = max_delta.max(wrap_angle_difference(theta - other));
                    }
                }
            }
            *dst = (1.0 - (-k_o * max_delta).exp()) as f32;
        }
    });
    out
}

/// Combines the two boundary scores and binarizes: the magnitude score is
/// trusted alone above the gate, otherwise the product of both is used.
pub fn combine_and_binarize(
    m_i: &ScalarField,
    m_o: &ScalarField,
    params: &BoundaryParams,
) -> Result<BoundaryMap, FlowError> {
    if m_i.width() != m_o.width() || m_i.height() != m_o.height() {
        return Err(FlowError::ShapeError(m_i.width(), m_i.height(), m_o.width(), m_o.height()));
    }
    params.validate()?;
    let (w, h) = (m_i.width(), m_i.height());
    let mut values = ScalarField::zeros(w, h);
    par::for_each_row(values.data_mut(), w, |y, row| {
        for (x, dst) in row.iter_mut().enumerate() {
            let mi = m_i.get(x, y);
            *dst = if mi as f64 > params.gate { mi } else { mi * m_o.get(x, y) };
        }
    });
    let binary = values.data().iter().map(|&v| v as f64 > params.binarize_threshold).collect();
    Ok(BoundaryMap { values, binary })
}

/// Extracts candidate dynamic regions: boundary pixels plus everything they
/// enclose. Interiors are found by flood-filling the background from the
/// image border (4-connected); unreached background is enclosed. Foreground
/// components are 8-connected, filtered by area, and sorted by area
/// descending (ties: topmost-leftmost pixel first).
pub fn extract_motion_regions(map: &BoundaryMap, min_region_area: usize) -> Vec<MotionRegion> {
    let (w, h) = (map.width(), map.height());
    if w == 0 || h == 0 {
        return Vec::new();
    }

    // Background reachable from the border through false pixels.
    let mut outside = vec![false; w * h];
    let mut queue = std::collections::VecDeque::new();
    let mut push = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut std::collections::VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !outside[i] && !map.binary[i] {
            outside[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        push(x, 0, &mut outside, &mut queue);
        push(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        push(0, y, &mut outside, &mut queue);
        push(w - 1, y, &mut outside, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            push(nx as usize, ny as usize, &mut outside, &mut queue);
        }
    }

    // Filled foreground = boundary pixels ∪ enclosed background.
    let filled: Vec<bool> = (0..w * h).map(|i| map.binary[i] || !outside[i]).collect();

    // 8-connected components over the filled mask.
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    for start in 0..w * h {
        if !filled[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x as u32, y as u32));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if filled[ni] && !seen[ni] {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
        if pixels.len() < min_region_area {
            continue;
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let bbox = pixels.iter().fold(
            (u32::MAX, u32::MAX, 0u32, 0u32),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        );
        regions.push(MotionRegion { area: pixels.len(), pixels, bbox });
    }
    regions.sort_by(|a, b| b.area.cmp(&a.area).then(a.pixels[0].cmp(&b.pixels[0])));
    regions
}
