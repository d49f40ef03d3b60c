//! Frames, annotations, and everything that produces or reshapes them.

mod filter;
mod heatmap;
mod io;
mod keypoint;
mod perturb;
mod synth;

pub use filter::{filter_annotations, FilterPolicy};
pub use heatmap::{build_centers_heatmap, HeatmapChannel, DEFAULT_HEATMAP_SIGMA_PX};
pub use io::{
    load_png, read_annotations, read_records, save_png, write_annotations, AnnotationFormat,
    FrameRecord, ObjectRecord,
};
pub use keypoint::kitti_keypoint_distance;
pub use perturb::perturb_box;
pub use synth::{generate_synthetic_dataset, ClassSpec, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersection with the `[0, width] x [0, height]` image rectangle;
    /// `None` when nothing with positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> BoundingBox {
        BoundingBox::new(width - self.x - self.w, self.y, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub bbox: BoundingBox,
    pub class_label: String,
    /// Ground-truth distance in meters.
    pub distance_m: f64,
    /// Occluded fraction, 0 = fully visible.
    pub occlusion: f64,
    pub dont_care: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub focal_px: Option<f64>,
}

/// One RGB image (`[3, H, W]`, values in `[0, 1]`) with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub frame_id: String,
    pub image: Tensor,
    pub annotations: Vec<ObjectAnnotation>,
    pub camera: CameraMeta,
}

impl FrameSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidAnnotation {
            frame_id: self.frame_id.clone(),
            message,
        };
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(bad(format!("image must be [3, H, W], got {s:?}")));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            validate_object(a).map_err(|m| bad(format!("object {i}: {m}")))?;
            if a.bbox.clamp_to(s[2] as f64, s[1] as f64).is_none() {
                return Err(bad(format!("object {i}: box lies outside the image")));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_object(a: &ObjectAnnotation) -> std::result::Result<(), String> {
    let b = &a.bbox;
    if !(b.x.is_finite() && b.y.is_finite()) {
        return Err("non-finite box origin".into());
    }
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(format!("box dimensions must be positive (w = {}, h = {})", b.w, b.h));
    }
    if !(0.0..=1.0).contains(&a.occlusion) {
        return Err(format!("occlusion {} outside [0, 1]", a.occlusion));
    }
    if !a.distance_m.is_finite() {
        return Err("non-finite distance".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        let b = BoundingBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&BoundingBox::new(20.0, 20.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn clamp_and_flip() {
        let b = BoundingBox::new(-5.0, 2.0, 10.0, 10.0);
        assert_eq!(b.clamp_to(100.0, 8.0), Some(BoundingBox::new(0.0, 2.0, 5.0, 6.0)));
        assert_eq!(BoundingBox::new(200.0, 0.0, 5.0, 5.0).clamp_to(100.0, 100.0), None);
        let f = BoundingBox::new(10.0, 3.0, 20.0, 4.0).flip_horizontal(100.0);
        assert_eq!(f.x, 70.0);
    }
}
