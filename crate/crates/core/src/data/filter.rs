use serde::{Deserialize, Serialize};

use super::FrameSample;
use crate::error::{invalid, Result};

/// Annotation and frame filtering rules. Disabled rules are `false`/`None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub drop_dont_care: bool,
    /// Drops objects with `distance_m <= 0` (behind the camera).
    pub drop_non_positive_distance: bool,
    /// Keeps objects with `distance_m <= max_distance_m`.
    pub max_distance_m: Option<f64>,
    /// Keeps objects with `1 - occlusion >= min_visibility`.
    pub min_visibility: Option<f64>,
    /// Keeps frames whose index is a multiple of the stride.
    pub frame_stride: Option<usize>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            drop_dont_care: true,
            drop_non_positive_distance: true,
            max_distance_m: None,
            min_visibility: None,
            frame_stride: None,
        }
    }
}

impl FilterPolicy {
    pub fn disabled() -> Self {
        Self {
            drop_dont_care: false,
            drop_non_positive_distance: false,
            max_distance_m: None,
            min_visibility: None,
            frame_stride: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_stride == Some(0) {
            return Err(invalid("frame_stride must be >= 1"));
        }
        if self.max_distance_m.is_some_and(|d| d < 0.0) {
            return Err(invalid("max_distance_m must be non-negative"));
        }
        if self.min_visibility.is_some_and(|v| v < 0.0) {
            return Err(invalid("min_visibility must be non-negative"));
        }
        Ok(())
    }
}

/// Applies `policy`: frame subsampling first, then per-object rules; frames
/// left without objects are dropped.
pub fn filter_annotations(frames: &[FrameSample], policy: &FilterPolicy) -> Result<Vec<FrameSample>> {
    policy.validate()?;
    let stride = policy.frame_stride.unwrap_or(1);
    let out = frames
        .iter()
        .step_by(stride)
        .filter_map(|frame| {
            let annotations: Vec<_> = frame
                .annotations
                .iter()
                .filter(|a| !(policy.drop_dont_care && a.dont_care))
                .filter(|a| !(policy.drop_non_positive_distance && a.distance_m <= 0.0))
                .filter(|a| policy.max_distance_m.is_none_or(|m| a.distance_m <= m))
                .filter(|a| policy.min_visibility.is_none_or(|v| 1.0 - a.occlusion >= v))
                .cloned()
                .collect();
            (!annotations.is_empty()).then(|| FrameSample {
                annotations,
                ..frame.clone()
            })
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, CameraMeta, ObjectAnnotation};
    use crate::tensor::Tensor;

    fn frame(id: usize, dists: &[f64]) -> FrameSample {
        FrameSample {
            frame_id: format!("f{id}"),
            image: Tensor::zeros(&[3, 4, 4]),
            annotations: dists
                .iter()
                .map(|&d| ObjectAnnotation {
                    bbox: BoundingBox::new(0.0, 0.0, 2.0, 2.0),
                    class_label: "pedestrian".into(),
                    distance_m: d,
                    occlusion: 0.0,
                    dont_care: false,
                })
                .collect(),
            camera: CameraMeta::default(),
        }
    }

    #[test]
    fn max_distance_removes_far_objects() {
        let frames = vec![frame(0, &[10.0, 80.0])];
        let policy = FilterPolicy {
            max_distance_m: Some(70.0),
            ..FilterPolicy::disabled()
        };
        let out = filter_annotations(&frames, &policy).unwrap();
        assert_eq!(out[0].annotations.len(), 1);
        assert_eq!(out[0].annotations[0].distance_m, 10.0);
    }

    #[test]
    fn disabled_policy_is_identity() {
        let mut frames = vec![frame(0, &[10.0, -3.0]), frame(1, &[100.0])];
        frames[0].annotations[1].dont_care = true;
        frames[0].annotations[1].occlusion = 1.0;
        assert_eq!(filter_annotations(&frames, &FilterPolicy::disabled()).unwrap(), frames);
    }

    #[test]
    fn stride_keeps_multiples() {
        let frames: Vec<_> = (0..800).map(|i| frame(i, &[5.0])).collect();
        let policy = FilterPolicy {
            frame_stride: Some(400),
            ..FilterPolicy::disabled()
        };
        let out = filter_annotations(&frames, &policy).unwrap();
        let ids: Vec<_> = out.iter().map(|f| f.frame_id.as_str()).collect();
        assert_eq!(ids, ["f0", "f400"]);
    }

    #[test]
    fn default_drops_dont_care_and_behind_camera() {
        let mut frames = vec![frame(0, &[10.0, -3.0, 7.0]), frame(1, &[-1.0])];
        frames[0].annotations[2].dont_care = true;
        let out = filter_annotations(&frames, &FilterPolicy::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].annotations.len(), 1);
    }

    #[test]
    fn visibility_rule() {
        let mut frames = vec![frame(0, &[1.0, 2.0])];
        frames[0].annotations[0].occlusion = 0.9;
        let policy = FilterPolicy {
            min_visibility: Some(0.5),
            ..FilterPolicy::disabled()
        };
        let out = filter_annotations(&frames, &policy).unwrap();
        assert_eq!(out[0].annotations.len(), 1);
        assert_eq!(out[0].annotations[0].distance_m, 2.0);
    }

    #[test]
    fn rejects_bad_policy() {
        let frames = vec![frame(0, &[1.0])];
        for p in [
            FilterPolicy { frame_stride: Some(0), ..FilterPolicy::disabled() },
            FilterPolicy { max_distance_m: Some(-1.0), ..FilterPolicy::disabled() },
            FilterPolicy { min_visibility: Some(-0.1), ..FilterPolicy::disabled() },
        ] {
            assert!(filter_annotations(&frames, &p).is_err());
        }
    }
}
