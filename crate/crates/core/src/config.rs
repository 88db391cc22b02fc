//! Run configuration: every free parameter of the pipeline in one JSON
//! document. Unknown keys are rejected; every field has a default.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::BoundaryParams;
use crate::tracking::ConsistencyParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// COCO person, animal and vehicle categories.
pub fn default_movable_classes() -> Vec<String> {
    [
        "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
        "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// Serializable mirror of [`crate::tracking::RobustParams`] with the 2x2
/// covariance stored as nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustConfig {
    pub huber_delta: f64,
    pub sigma: [[f64; 2]; 2],
    pub max_gn_iterations: usize,
    pub convergence_epsilon: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        let p = crate::tracking::RobustParams::default();
        Self {
            huber_delta: p.huber_delta,
            sigma: [[p.sigma[(0, 0)], p.sigma[(0, 1)]], [p.sigma[(1, 0)], p.sigma[(1, 1)]]],
            max_gn_iterations: p.max_gn_iterations,
            convergence_epsilon: p.convergence_epsilon,
        }
    }
}

impl RobustConfig {
    pub fn to_params(&self) -> crate::tracking::RobustParams {
        crate::tracking::RobustParams {
            huber_delta: self.huber_delta,
            sigma: Matrix2::new(
                self.sigma[0][0],
                self.sigma[0][1],
                self.sigma[1][0],
                self.sigma[1][1],
            ),
            max_gn_iterations: self.max_gn_iterations,
            convergence_epsilon: self.convergence_epsilon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub boundary: BoundaryParams,
    pub robust: RobustConfig,
    pub consistency: ConsistencyParams,
    pub movable_classes: Vec<String>,
    /// Minimum IoU for a detection to attach its class to a segment.
    pub iou_min: f64,
    /// Minimum fraction of a motion region a segment must cover.
    pub overlap_min: f64,
    /// Minimum pixel area of a motion region.
    pub min_region_area: usize,
    /// RTE step; `None` derives one second of frames from the data.
    pub eval_delta: Option<usize>,
    /// Association tolerance in seconds.
    pub eval_max_dt: f64,
    /// Baseline mode: skip classification and the consistency check; every
    /// feature is used for pose estimation.
    pub disable_classification: bool,
    /// Keep the SDO quasi labels but skip the scene-flow refinement.
    pub disable_consistency_check: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            boundary: BoundaryParams::default(),
            robust: RobustConfig::default(),
            consistency: ConsistencyParams::default(),
            movable_classes: default_movable_classes(),
            iou_min: 0.5,
            overlap_min: 0.3,
            min_region_area: 64,
            eval_delta: None,
            eval_max_dt: 0.02,
            disable_classification: false,
            disable_consistency_check: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_slice(bytes)
            .map_err(|e| ConfigError::Parse { line: e.line(), detail: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serialize");
        bytes.push(b'\n');
        bytes
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.boundary.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.robust.to_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.consistency.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.iou_min) {
            return Err(ConfigError::Invalid(format!("iou_min {} outside [0, 1]", self.iou_min)));
        }
        if !(0.0..=1.0).contains(&self.overlap_min) {
            return Err(ConfigError::Invalid(format!(
                "overlap_min {} outside [0, 1]",
                self.overlap_min
            )));
        }
        if self.min_region_area == 0 {
            return Err(ConfigError::Invalid("min_region_area must be >= 1".into()));
        }
        if !(self.eval_max_dt > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "eval_max_dt {} must be positive",
                self.eval_max_dt
            )));
        }
        if self.eval_delta == Some(0) {
            return Err(ConfigError::Invalid("eval_delta must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip() {
        let config = RunConfig::default();
        let json = config.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back.iou_min, config.iou_min);
        assert_eq!(back.movable_classes, config.movable_classes);
        assert_eq!(back.robust.huber_delta, config.robust.huber_delta);
    }

    #[test]
    fn empty_object_gives_defaults() {
        let config = RunConfig::from_json(b"{}").unwrap();
        assert_eq!(config.min_region_area, 64);
        assert_eq!(config.consistency.min_static_features, 30);
        assert!((config.robust.huber_delta - 5.991f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_json(br#"{"typo_key": 1}"#),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            RunConfig::from_json(br#"{"boundary": {"k_i": 0.5, "bogus": 2}}"#),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(RunConfig::from_json(br#"{"iou_min": 1.5}"#).is_err());
        assert!(RunConfig::from_json(br#"{"boundary": {"gate": 0.0}}"#).is_err());
        assert!(RunConfig::from_json(br#"{"consistency": {"dynamic_fraction": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(br#"{"robust": {"huber_delta": -1.0}}"#).is_err());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let config =
            RunConfig::from_json(br#"{"consistency": {"sceneflow_threshold": 0.1}}"#).unwrap();
        assert_eq!(config.consistency.sceneflow_threshold, 0.1);
        assert_eq!(config.consistency.dynamic_fraction, 0.3);
    }
}
