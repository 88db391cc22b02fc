//! Class-agnostic segment maps, detection attachment and dynamic-segment
//! selection.
//!
//! Segments arrive without labels. Known-object detections attach a class
//! to the best-overlapping segment; motion regions from the flow stage mark
//! their best-overlapping segment as dynamic. The two sources complement
//! each other: movable classes catch known objects that happen to stand
//! still, flow regions catch unknown movers.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

use crate::flow::MotionRegion;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("segment ids are not contiguous: expected 1..={expected}, id {missing} missing")]
    NonContiguousIds { expected: usize, missing: usize },
    #[error("id map length {0} does not match {1}x{2}")]
    BadLength(usize, usize, usize),
    #[error("segment {0} has no pixels after overlap resolution")]
    EmptySegment(usize),
    #[error("mask dimensions differ: {0} vs {1} pixels")]
    MaskShape(usize, usize),
    #[error("invalid detection box [{0}, {1}, {2}, {3}]")]
    BadBox(f64, f64, f64, f64),
}

/// Per-segment pixel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentStats {
    pub area: usize,
    /// (x_min, y_min, x_max, y_max), inclusive pixel coordinates.
    pub bbox: (u32, u32, u32, u32),
}

/// Disjoint per-pixel segmentation: id 0 means unsegmented, ids 1..=n are
/// contiguous and every id occurs in the map.
#[derive(Debug, Clone)]
pub struct SegmentationSet {
    width: usize,
    height: usize,
    ids: Vec<u8>,
    stats: Vec<SegmentStats>,
}

impl SegmentationSet {
    pub fn from_id_map(width: usize, height: usize, ids: Vec<u8>) -> Result<Self, SegmentationError> {
        if ids.len() != width * height {
            return Err(SegmentationError::BadLength(ids.len(), width, height));
        }
        let n = ids.iter().copied().max().unwrap_or(0) as usize;
        let mut stats = vec![
            SegmentStats { area: 0, bbox: (u32::MAX, u32::MAX, 0, 0) };
            n
        ];
        for (i, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let s = &mut stats[id as usize - 1];
            let (x, y) = ((i % width) as u32, (i / width) as u32);
            s.area += 1;
            s.bbox = (s.bbox.0.min(x), s.bbox.1.min(y), s.bbox.2.max(x), s.bbox.3.max(y));
        }
        if let Some(missing) = stats.iter().position(|s| s.area == 0) {
            return Err(SegmentationError::NonContiguousIds { expected: n, missing: missing + 1 });
        }
        Ok(Self { width, height, ids, stats })
    }

    /// Builds from possibly overlapping binary masks; a contested pixel goes
    /// to the smaller segment (ties to the lower id). Errors if a segment
    /// loses all of its pixels.
    pub fn from_masks(
        width: usize,
        height: usize,
        masks: &[Vec<bool>],
    ) -> Result<Self, SegmentationError> {
        let mut sizes = Vec::with_capacity(masks.len());
        for m in masks {
            if m.len() != width * height {
                return Err(SegmentationError::MaskShape(m.len(), width * height));
            }
            sizes.push(m.iter().filter(|&&b| b).count());
        }
        let mut ids = vec![0u8; width * height];
        for i in 0..width * height {
            let mut best: Option<(usize, usize)> = None; // (size, index)
            for (s, m) in masks.iter().enumerate() {
                if m[i] && best.map_or(true, |(bs, _)| sizes[s] < bs) {
                    best = Some((sizes[s], s));
                }
            }
            if let Some((_, s)) = best {
                ids[i] = (s + 1) as u8;
            }
        }
        let set = Self::from_id_map(width, height, ids);
        if let Err(SegmentationError::NonContiguousIds { missing, .. }) = &set {
            return Err(SegmentationError::EmptySegment(*missing));
        }
        set
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_segments(&self) -> usize {
        self.stats.len()
    }

    /// Segment id at a pixel; 0 = unsegmented.
    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn id_map(&self) -> &[u8] {
        &self.ids
    }

    /// Stats for segment `id` (1-based).
    pub fn stats(&self, id: usize) -> &SegmentStats {
        &self.stats[id - 1]
    }
}

/// A known-object detection: class, box and confidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub class: String,
    /// [x_min, y_min, x_max, y_max] in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(SegmentationError::BadBox(x0, y0, x1, y1));
        }
        Ok(())
    }

    /// Clamps the box to the image rectangle.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        let mut d = self.clone();
        d.bbox[0] = d.bbox[0].clamp(0.0, width as f64);
        d.bbox[1] = d.bbox[1].clamp(0.0, height as f64);
        d.bbox[2] = d.bbox[2].clamp(0.0, width as f64);
        d.bbox[3] = d.bbox[3].clamp(0.0, height as f64);
        d
    }
}

/// Intersection over union of two [x_min, y_min, x_max, y_max] boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// How a segment participates in tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentStatus {
    Static,
    /// Known movable class; dynamic regardless of observed motion.
    DynamicMovable,
    /// Selected by a high-flow-gradient motion region.
    DynamicFlow,
}

/// Final per-segment label with the attached class, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub status: SegmentStatus,
    pub class: Option<String>,
}

impl SegmentLabel {
    pub fn is_dynamic(&self) -> bool {
        self.status != SegmentStatus::Static
    }
}

/// Converts a segment's inclusive pixel bbox into box corners for IoU.
fn stats_box(s: &SegmentStats) -> [f64; 4] {
    [
        s.bbox.0 as f64,
        s.bbox.1 as f64,
        s.bbox.2 as f64 + 1.0,
        s.bbox.3 as f64 + 1.0,
    ]
}

/// Attaches detection classes to segments: each detection goes to the
/// segment whose bounding box has maximal IoU with it (if ≥ `iou_min`);
/// a segment keeps the class of its highest-confidence detection. Ties on
/// IoU go to the lower segment id. Unmatched detections are dropped.
pub fn attach_detections(
    segments: &SegmentationSet,
    detections: &[Detection],
    iou_min: f64,
) -> Vec<Option<String>> {
    let mut ordered: Vec<&Detection> = detections.iter().collect();
    // Stable: equal confidences keep input order.
    ordered.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(std::cmp::Ordering::Equal));

    let mut classes: Vec<Option<String>> = vec![None; segments.n_segments()];
    for det in ordered {
        let det = det.clamped(segments.width(), segments.height());
        if det.validate().is_err() {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for id in 1..=segments.n_segments() {
            let v = iou(stats_box(segments.stats(id)), det.bbox);
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, id));
            }
        }
        if let Some((v, id)) = best {
            if v >= iou_min && classes[id - 1].is_none() {
                classes[id - 1] = Some(det.class.clone());
            }
        }
    }
    classes
}

/// Labels segments for tracking. Movable-class segments are dynamic
/// outright; each motion region marks its maximum-overlap segment dynamic
/// when the overlap covers at least `overlap_min` of the region's area.
/// Ties on overlap go to the lower segment id.
pub fn select_dynamic_segments(
    segments: &SegmentationSet,
    classes: &[Option<String>],
    regions: &[MotionRegion],
    movable_classes: &HashSet<String>,
    overlap_min: f64,
) -> Vec<SegmentLabel> {
    let n = segments.n_segments();
    debug_assert_eq!(classes.len(), n);
    let mut labels: Vec<SegmentLabel> = (0..n)
        .map(|i| {
            let class = classes[i].clone();
            let movable = class.as_deref().is_some_and(|c| movable_classes.contains(c));
            SegmentLabel {
                status: if movable { SegmentStatus::DynamicMovable } else { SegmentStatus::Static },
                class,
            }
        })
        .collect();

    for region in regions {
        let mut overlap = vec![0usize; n];
        for &(x, y) in &region.pixels {
            let id = segments.id_at(x as usize, y as usize);
            if id > 0 {
                overlap[id as usize - 1] += 1;
            }
        }
        let Some((id, &count)) = overlap
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        else {
            continue;
        };
        if count as f64 >= overlap_min * region.area as f64 && count > 0 {
            let label = &mut labels[id];
            if label.status == SegmentStatus::Static {
                label.status = SegmentStatus::DynamicFlow;
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn movable() -> HashSet<String> {
        crate::config::default_movable_classes().into_iter().collect()
    }

    fn two_segment_set() -> SegmentationSet {
        // 10x10: segment 1 occupies x 0..4, y 0..4; segment 2 x 6..9, y 6..9.
        let mut ids = vec![0u8; 100];
        for y in 0..4 {
            for x in 0..4 {
                ids[y * 10 + x] = 1;
            }
        }
        for y in 6..10 {
            for x in 6..10 {
                ids[y * 10 + x] = 2;
            }
        }
        SegmentationSet::from_id_map(10, 10, ids).unwrap()
    }

    #[test]
    fn id_map_stats() {
        let set = two_segment_set();
        assert_eq!(set.n_segments(), 2);
        assert_eq!(set.stats(1).area, 16);
        assert_eq!(set.stats(1).bbox, (0, 0, 3, 3));
        assert_eq!(set.stats(2).bbox, (6, 6, 9, 9));
    }

    #[test]
    fn id_map_rejects_gaps() {
        let mut ids = vec![0u8; 9];
        ids[0] = 1;
        ids[1] = 3;
        assert!(matches!(
            SegmentationSet::from_id_map(3, 3, ids),
            Err(SegmentationError::NonContiguousIds { missing: 2, .. })
        ));
    }

    #[test]
    fn overlapping_masks_resolved_to_smaller_segment() {
        let w = 4;
        let h = 1;
        // Mask 1 covers all four pixels, mask 2 covers the last two.
        let m1 = vec![true, true, true, true];
        let m2 = vec![false, false, true, true];
        let set = SegmentationSet::from_masks(w, h, &[m1, m2]).unwrap();
        assert_eq!(set.id_map(), &[1, 1, 2, 2]);
    }

    #[test]
    fn enveloped_mask_is_an_error() {
        let m1 = vec![true, true];
        let m2 = vec![true, true];
        // Equal sizes: ties go to the lower id, leaving segment 2 empty.
        assert!(matches!(
            SegmentationSet::from_masks(2, 1, &[m1, m2]),
            Err(SegmentationError::EmptySegment(2))
        ));
    }

    #[test]
    fn iou_basics() {
        assert_relative_eq!(iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        // Area arithmetic oracle: intersection 2, union 6.
        assert_relative_eq!(iou([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0);
    }

    #[test]
    fn attach_matches_best_segment() {
        let set = two_segment_set();
        let det = Detection {
            class: "person".into(),
            bbox: [0.0, 0.0, 4.0, 4.0],
            confidence: 0.9,
        };
        let classes = attach_detections(&set, &[det], 0.5);
        assert_eq!(classes[0].as_deref(), Some("person"));
        assert_eq!(classes[1], None);
    }

    #[test]
    fn attach_respects_iou_min() {
        let set = two_segment_set();
        let det = Detection {
            class: "person".into(),
            bbox: [0.0, 0.0, 12.0, 12.0],
            confidence: 0.9,
        };
        // IoU with segment 1 is 16/144 ≈ 0.11 after clamping to 10x10 → 16/100.
        let classes = attach_detections(&set, &[det.clone()], 0.5);
        assert_eq!(classes[0], None);
        let classes = attach_detections(&set, &[det], 0.1);
        assert_eq!(classes[0].as_deref(), Some("person"));
    }

    #[test]
    fn attach_highest_confidence_wins() {
        let set = two_segment_set();
        let dets = vec![
            Detection { class: "cat".into(), bbox: [0.0, 0.0, 4.0, 4.0], confidence: 0.4 },
            Detection { class: "dog".into(), bbox: [0.0, 0.0, 4.0, 4.0], confidence: 0.8 },
        ];
        let classes = attach_detections(&set, &dets, 0.5);
        assert_eq!(classes[0].as_deref(), Some("dog"));
    }

    fn region_over(pixels: Vec<(u32, u32)>) -> MotionRegion {
        let bbox = pixels.iter().fold(
            (u32::MAX, u32::MAX, 0u32, 0u32),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        );
        MotionRegion { area: pixels.len(), pixels, bbox }
    }

    #[test]
    fn movable_class_is_dynamic_without_motion() {
        let set = two_segment_set();
        let classes = vec![Some("person".to_string()), None];
        let labels = select_dynamic_segments(&set, &classes, &[], &movable(), 0.3);
        assert_eq!(labels[0].status, SegmentStatus::DynamicMovable);
        assert_eq!(labels[1].status, SegmentStatus::Static);
    }

    #[test]
    fn region_selects_max_overlap_segment() {
        let set = two_segment_set();
        // Region mostly over segment 2, one stray pixel on segment 1.
        let mut pixels: Vec<(u32, u32)> = (6..10)
            .flat_map(|y| (6..10).map(move |x| (x as u32, y as u32)))
            .collect();
        pixels.push((0, 0));
        let labels = select_dynamic_segments(
            &set,
            &vec![None, None],
            &[region_over(pixels)],
            &movable(),
            0.3,
        );
        assert_eq!(labels[0].status, SegmentStatus::Static);
        assert_eq!(labels[1].status, SegmentStatus::DynamicFlow);
    }

    #[test]
    fn region_overlap_below_min_selects_nothing() {
        let set = two_segment_set();
        // Region of 100 pixels with only 10 on segment 2.
        let mut pixels: Vec<(u32, u32)> = Vec::new();
        for i in 0..90 {
            pixels.push((i % 10, 4 + (i / 10).min(1))); // rows 4-5: unsegmented
        }
        for x in 6..10 {
            pixels.push((x, 6));
        }
        let labels = select_dynamic_segments(
            &set,
            &vec![None, None],
            &[region_over(pixels)],
            &movable(),
            0.3,
        );
        assert!(labels.iter().all(|l| l.status == SegmentStatus::Static));
    }

    #[test]
    fn no_inputs_all_static() {
        let set = two_segment_set();
        let labels =
            select_dynamic_segments(&set, &vec![None, None], &[], &movable(), 0.3);
        assert!(labels.iter().all(|l| l.status == SegmentStatus::Static));
    }

    #[test]
    fn movable_and_flow_sources_are_independent() {
        let set = two_segment_set();
        let classes = vec![Some("person".to_string()), None];
        let pixels: Vec<(u32, u32)> =
            (6..10).flat_map(|y| (6..10).map(move |x| (x as u32, y as u32))).collect();
        let labels = select_dynamic_segments(
            &set,
            &classes,
            &[region_over(pixels)],
            &movable(),
            0.3,
        );
        assert_eq!(labels[0].status, SegmentStatus::DynamicMovable);
        assert_eq!(labels[1].status, SegmentStatus::DynamicFlow);
    }
}
