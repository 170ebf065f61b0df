//! Synthetic LiDAR-like sequences, their file format, and training-time
//! augmentation.

mod augment;
mod generate;
mod seqio;

pub use augment::{augment, apply_draw, AugmentConfig, AugmentDraw};
pub use generate::{generate_sequence, Archetype, MotionPattern, SceneParams, SizeRanges};
pub use seqio::{load_manifest, load_sequence, read_sequence, save_manifest, save_sequence, write_sequence, Manifest};

use serde::{Deserialize, Serialize};

use crate::geom::{Box3D, PointCloud};

/// One LiDAR sweep with the ground-truth target box.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub archetype: Archetype,
    pub motion: MotionPattern,
    pub seed: u64,
    /// Target points per frame, as generated.
    #[serde(default)]
    pub target_points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub meta: SequenceMeta,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn gt_boxes(&self) -> Vec<Box3D> {
        self.frames.iter().map(|f| f.gt).collect()
    }
}
