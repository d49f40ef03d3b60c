use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BoundingBox;
use crate::error::{invalid, Result};

const MAX_ATTEMPTS: usize = 1000;
const INITIAL_MAGNITUDE: f64 = 0.5;
const SHRINK: f64 = 0.9;

/// Random box with `IoU(result, bbox) >= min_iou`.
///
/// Center offsets and width/height factors are drawn uniformly with a
/// magnitude that shrinks after every rejected draw. After 1000 rejections the
/// input box is returned.
pub fn perturb_box(bbox: &BoundingBox, min_iou: f64, seed: u64) -> Result<BoundingBox> {
    if !(min_iou > 0.0 && min_iou <= 1.0) {
        return Err(invalid(format!("IoU floor must lie in (0, 1], got {min_iou}")));
    }
    if min_iou == 1.0 {
        return Ok(*bbox);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = bbox.center();
    let mut m = INITIAL_MAGNITUDE;
    for _ in 0..MAX_ATTEMPTS {
        let w = bbox.w * (1.0 + rng.gen_range(-m..m));
        let h = bbox.h * (1.0 + rng.gen_range(-m..m));
        let nx = cx + bbox.w * rng.gen_range(-m..m);
        let ny = cy + bbox.h * rng.gen_range(-m..m);
        let cand = BoundingBox::new(nx - w / 2.0, ny - h / 2.0, w, h);
        if cand.iou(bbox) >= min_iou {
            return Ok(cand);
        }
        m *= SHRINK;
    }
    Ok(*bbox)
}
