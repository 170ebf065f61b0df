//! Frame-to-frame tracking loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::flow::DIMS;
use crate::geom::{apply_offsets, canonicalize, Box3D, MotionOffsets, PointCloud};
use crate::model::{MotionPrediction, Network};
use crate::tensor::ParamSet;
use crate::voxel::{voxelize, VoxelSpec};

/// Anything that maps two canonical clouds to a motion estimate. `frame` is
/// the index of the current cloud; learned models ignore it.
pub trait MotionModel {
    fn predict(&self, frame: usize, prev: &PointCloud, cur: &PointCloud) -> Result<MotionPrediction>;
}

/// A network together with its parameters.
pub struct Trained<'a> {
    pub net: &'a Network,
    pub params: &'a ParamSet<f32>,
}

impl MotionModel for Trained<'_> {
    fn predict(&self, _frame: usize, prev: &PointCloud, cur: &PointCloud) -> Result<MotionPrediction> {
        self.net.predict(self.params, prev, cur)
    }
}

/// Always predicts zero motion.
pub struct ZeroMotion;

impl MotionModel for ZeroMotion {
    fn predict(&self, _frame: usize, _prev: &PointCloud, _cur: &PointCloud) -> Result<MotionPrediction> {
        Ok(MotionPrediction {
            mean: [0.0; DIMS],
            sigma: [1.0; DIMS],
            diagnostics: Default::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub frame: usize,
    #[serde(rename = "box", with = "box_array")]
    pub bx: Box3D,
    pub sigma: [f64; DIMS],
    /// The current frame had no points in range and the box was held.
    pub coasted: bool,
}

mod box_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geom::Box3D;

    pub fn serialize<S: Serializer>(b: &Box3D, s: S) -> Result<S::Ok, S::Error> {
        [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Box3D, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Box3D::new([a[0], a[1], a[2]], [a[3], a[4], a[5]], a[6]).map_err(serde::de::Error::custom)
    }
}

/// Tracks the target from its frame-0 box. Ground truth after frame 0 is
/// never read.
pub fn track_sequence<M: MotionModel>(seq: &Sequence, model: &M, voxel: &VoxelSpec) -> Result<Vec<TrackState>> {
    if seq.len() < 2 {
        return Err(Error::Empty("tracking needs at least 2 frames"));
    }
    voxel.validate()?;
    let mut states = vec![TrackState {
        frame: 0,
        bx: seq.frames[0].gt,
        sigma: [0.0; DIMS],
        coasted: false,
    }];
    for t in 1..seq.len() {
        let est = states[t - 1].bx;
        let prev = canonicalize(&seq.frames[t - 1].cloud, &est);
        let cur = canonicalize(&seq.frames[t].cloud, &est);
        let state = if voxelize(&cur, voxel)?.is_empty() {
            TrackState {
                frame: t,
                bx: est,
                sigma: [0.0; DIMS],
                coasted: true,
            }
        } else {
            let pred = model.predict(t, &prev, &cur)?;
            let off = MotionOffsets::from_array(pred.mean);
            if !off.is_finite() {
                return Err(Error::NonFinite(format!("motion prediction at frame {t}")));
            }
            TrackState {
                frame: t,
                bx: apply_offsets(&est, &off),
                sigma: pred.sigma,
                coasted: false,
            }
        };
        states.push(state);
    }
    Ok(states)
}

pub fn boxes(states: &[TrackState]) -> Vec<Box3D> {
    states.iter().map(|s| s.bx).collect()
}

pub fn write_predictions<W: Write>(mut w: W, states: &[TrackState]) -> Result<()> {
    for s in states {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(text: &str) -> Result<Vec<TrackState>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, Archetype, MotionPattern, SceneParams};
    use crate::geom::relative_pose;

    struct Oracle(Vec<Box3D>);

    impl MotionModel for Oracle {
        fn predict(&self, t: usize, _: &PointCloud, _: &PointCloud) -> Result<MotionPrediction> {
            Ok(MotionPrediction {
                mean: relative_pose(&self.0[t - 1], &self.0[t]).to_array(),
                sigma: [1.0; DIMS],
                diagnostics: Default::default(),
            })
        }
    }

    fn seq() -> Sequence {
        generate_sequence(&SceneParams::new(Archetype::Car, MotionPattern::Turning, 4)).unwrap()
    }

    #[test]
    fn zero_motion_repeats_first_box() {
        let s = seq();
        let states = track_sequence(&s, &ZeroMotion, &VoxelSpec::default()).unwrap();
        assert!(states.iter().all(|st| st.bx == s.frames[0].gt));
    }

    #[test]
    fn oracle_reproduces_ground_truth() {
        let s = seq();
        let states = track_sequence(&s, &Oracle(s.gt_boxes()), &VoxelSpec::default()).unwrap();
        for (st, gt) in states.iter().zip(s.gt_boxes()) {
            assert!(st.bx.center_distance(&gt) < 1e-9);
            assert!(crate::geom::normalize_angle(st.bx.yaw - gt.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_range_coasts() {
        let mut s = seq();
        s.frames[2].cloud = PointCloud::new(vec![]);
        let states = track_sequence(&s, &Oracle(s.gt_boxes()), &VoxelSpec::default()).unwrap();
        assert!(states[2].coasted);
        assert_eq!(states[2].bx, states[1].bx);
        assert!(!states[3].coasted);
    }

    #[test]
    fn predictions_roundtrip() {
        let s = seq();
        let states = track_sequence(&s, &ZeroMotion, &VoxelSpec::default()).unwrap();
        let mut out = Vec::new();
        write_predictions(&mut out, &states).unwrap();
        let back = read_predictions(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(back, states);
    }
}
