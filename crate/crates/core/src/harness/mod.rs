//! Training and evaluation orchestration.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod schedule;
pub mod train;

pub use augment::{augment, flip_frame, AugmentConfig};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{apply_override, RunConfig};
pub use evaluate::{
    evaluate, perturbed_evaluate, write_predictions_csv, EvalOutput, EvalReport, ObjectPrediction, Predictor,
    MIN_PREDICTION_M,
};
pub use optim::AdamW;
pub use schedule::{cosine_in_cycle, cosine_wr_lr, loss_weight_schedule};
pub use train::{batch_gradients, train, BatchContext, BatchResult, EpochRecord, StepRecord, TrainOutput};

use crate::data::{FrameSample, ObjectAnnotation};

pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const MASK: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const EVAL_MASK: u64 = 7;
    pub const PERTURB: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `parts` under `root`.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(root), |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Objects that take part in training and evaluation: not ignored, positive
/// distance, and overlapping the image. Returns `(annotation index, object)`.
pub fn usable_objects(frame: &FrameSample) -> Vec<(usize, &ObjectAnnotation)> {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    frame
        .annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            !a.dont_care && a.distance_m > 0.0 && a.bbox.w > 0.0 && a.bbox.h > 0.0 && a.bbox.clamp_to(w, h).is_some()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_part_and_order() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(7, &[1, 0]));
    }
}
