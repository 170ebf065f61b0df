//! One-pass evaluation: Success and Precision as exact AUCs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou3d, Box3D};

/// Precision thresholds run from 0 to this many meters.
pub const PRECISION_MAX_DIST: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Full 3D Euclidean distance between box centers.
    #[default]
    Center3d,
    /// Distance in the ground plane only.
    Bev,
}

/// Area under the fraction-of-frames-with-IoU-at-least-`t` curve over
/// `t` in `[0, 1]`, which is the mean IoU.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Empty("IoU list"));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::param("iou", format!("{v} is outside [0, 1]")));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Area under the fraction-of-frames-within-`t` curve over `t` in `[0, 2]`,
/// normalized to `[0, 1]`.
pub fn precision_auc(dists: &[f64]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Empty("distance list"));
    }
    if let Some(v) = dists.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::param("distance", format!("{v} is not a finite non-negative number")));
    }
    let m = PRECISION_MAX_DIST;
    Ok(dists.iter().map(|d| (m - d.min(m)) / m).sum::<f64>() / dists.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
    pub success: f64,
    pub precision: f64,
}

impl OpeResult {
    fn from_lists(ious: Vec<f64>, distances: Vec<f64>) -> Result<Self> {
        let success = success_auc(&ious)?;
        let precision = precision_auc(&distances)?;
        Ok(Self {
            ious,
            distances,
            success,
            precision,
        })
    }

    pub fn frames(&self) -> usize {
        self.ious.len()
    }

    pub fn mean_center_error(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    pub fn summary(&self) -> OpeSummary {
        OpeSummary {
            frames: self.frames(),
            success: self.success,
            precision: self.precision,
            success_x100: 100.0 * self.success,
            precision_x100: 100.0 * self.precision,
            mean_center_error: self.mean_center_error(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpeSummary {
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
    pub success_x100: f64,
    pub precision_x100: f64,
    pub mean_center_error: f64,
}

/// Scores a tracked sequence. Frame 0 is the given initialization and is
/// skipped.
pub fn evaluate(pred: &[Box3D], gt: &[Box3D], mode: DistanceMode) -> Result<OpeResult> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::Empty("no frames after the initial one"));
    }
    let (mut ious, mut dists) = (Vec::new(), Vec::new());
    for (p, g) in pred.iter().zip(gt).skip(1) {
        ious.push(iou3d(p, g).clamp(0.0, 1.0));
        dists.push(match mode {
            DistanceMode::Center3d => p.center_distance(g),
            DistanceMode::Bev => p.center_distance_bev(g),
        });
    }
    OpeResult::from_lists(ious, dists)
}

/// Frame-weighted aggregate over sequences.
pub fn aggregate(results: &[OpeResult]) -> Result<OpeResult> {
    let ious = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
    let dists = results.iter().flat_map(|r| r.distances.iter().copied()).collect();
    OpeResult::from_lists(ious, dists)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    #[serde(flatten)]
    pub summary: OpeSummary,
}

/// Per-sequence and aggregate scores, written as pretty JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub distance: DistanceMode,
    pub sequences: Vec<SequenceScore>,
    pub aggregate: OpeSummary,
}

impl EvalReport {
    pub fn build(named: &[(String, OpeResult)], distance: DistanceMode) -> Result<Self> {
        let all: Vec<OpeResult> = named.iter().map(|(_, r)| r.clone()).collect();
        Ok(Self {
            distance,
            sequences: named
                .iter()
                .map(|(n, r)| SequenceScore {
                    name: n.clone(),
                    summary: r.summary(),
                })
                .collect(),
            aggregate: aggregate(&all)?.summary(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
