use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{MotionOffsets, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Rotation is uniform in `[-max, max]` degrees.
    pub rotation_max_deg: f64,
    /// Per-axis standard deviation of the current-frame shift, meters.
    pub translation_std: f64,
    /// Per-axis standard deviation of a planar shift applied to both clouds,
    /// meters. Mimics a reference box that has drifted off the target.
    pub shared_translation_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_max_deg: 10.0,
            translation_std: 0.3,
            shared_translation_std: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::param("flip_prob", "must be in [0, 1]"));
        }
        if !(self.rotation_max_deg.is_finite() && self.rotation_max_deg >= 0.0) {
            return Err(Error::param("rotation_max_deg", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("translation_std", self.translation_std),
            ("shared_translation_std", self.shared_translation_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AugmentDraw {
        let flip = rng.random_bool(self.flip_prob);
        let max = self.rotation_max_deg.to_radians();
        let rotation = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let mut translation = [0.0; 3];
        if self.translation_std > 0.0 {
            let n = Normal::new(0.0, self.translation_std).expect("validated std");
            for t in &mut translation {
                *t = n.sample(rng);
            }
        }
        let mut shared = [0.0; 3];
        if self.shared_translation_std > 0.0 {
            let n = Normal::new(0.0, self.shared_translation_std).expect("validated std");
            shared[0] = n.sample(rng);
            shared[1] = n.sample(rng);
        }
        AugmentDraw {
            flip,
            rotation,
            translation,
            shared,
        }
    }
}

/// One concrete augmentation: optional `y -> -y` flip, then a rotation of
/// both clouds about the z-axis, then a shift of the current cloud only, then
/// a shift of both clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation: f64,
    pub translation: Vec3,
    pub shared: Vec3,
}

/// Applies `draw` to a canonical training pair and remaps the labels so they
/// stay the relative pose of the transformed current box with respect to the
/// identity reference box.
pub fn apply_draw(
    prev: &PointCloud,
    cur: &PointCloud,
    offsets: &MotionOffsets,
    draw: &AugmentDraw,
) -> (PointCloud, PointCloud, MotionOffsets) {
    let (mut p, mut c, mut o) = (prev.clone(), cur.clone(), offsets.to_array());
    if draw.flip {
        p = p.flipped_y();
        c = c.flipped_y();
        o[1] = -o[1];
        o[3] = -o[3];
    }
    let t: Vec3 = std::array::from_fn(|i| draw.translation[i] + draw.shared[i]);
    p = p.transformed(draw.rotation, draw.shared);
    c = c.transformed(draw.rotation, t);
    let (s, cs) = draw.rotation.sin_cos();
    let (dx, dy) = (cs * o[0] - s * o[1], s * o[0] + cs * o[1]);
    let out = MotionOffsets::new(dx + t[0], dy + t[1], o[2] + t[2], o[3] + draw.rotation);
    (p, c, out)
}

/// Samples a draw from `seed` and applies it.
pub fn augment(
    prev: &PointCloud,
    cur: &PointCloud,
    offsets: &MotionOffsets,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(PointCloud, PointCloud, MotionOffsets, AugmentDraw)> {
    cfg.validate()?;
    let draw = cfg.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let (p, c, o) = apply_draw(prev, cur, offsets, &draw);
    Ok((p, c, o, draw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_offsets, relative_pose, Box3D};

    #[test]
    fn labels_match_transformed_box() {
        let reference = Box3D::new([0.0; 3], [1.8, 4.2, 1.5], 0.0).unwrap();
        let off = MotionOffsets::new(0.8, -0.3, 0.05, 0.2);
        let cur_gt = apply_offsets(&reference, &off);
        let empty = PointCloud::new(vec![]);
        for seed in 0..50 {
            let (_, _, o, d) = augment(&empty, &empty, &off, &AugmentConfig::default(), seed).unwrap();
            let mut b = cur_gt;
            if d.flip {
                b = b.flipped_y();
            }
            b = b.transformed(d.rotation, [0.0; 3]);
            b = b.transformed(0.0, d.translation);
            b = b.transformed(0.0, d.shared);
            let expect = relative_pose(&reference, &b).to_array();
            for (a, e) in o.to_array().iter().zip(expect) {
                assert!((a - e).abs() < 1e-9, "seed {seed}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let prev = PointCloud::new(vec![[1.0, 2.0, 0.5], [-0.3, 0.1, 0.2]]);
        let cur = PointCloud::new(vec![[-1.0, 0.5, 0.0]]);
        let off = MotionOffsets::new(0.4, 0.1, 0.0, -0.2);
        let draw = AugmentDraw {
            flip: false,
            rotation: 0.0,
            translation: [0.0; 3],
            shared: [0.0; 3],
        };
        assert_eq!(apply_draw(&prev, &cur, &off, &draw), (prev, cur, off));
    }

    #[test]
    fn double_flip_restores_labels() {
        let empty = PointCloud::new(vec![]);
        let off = MotionOffsets::new(0.4, 0.1, 0.05, -0.2);
        let flip = AugmentDraw {
            flip: true,
            rotation: 0.0,
            translation: [0.0; 3],
            shared: [0.0; 3],
        };
        let (_, _, once) = apply_draw(&empty, &empty, &off, &flip);
        assert_ne!(once, off);
        let (_, _, twice) = apply_draw(&empty, &empty, &once, &flip);
        assert_eq!(twice, off);
    }

    #[test]
    fn points_follow_the_draw() {
        let prev = PointCloud::new(vec![[1.0, 2.0, 0.5]]);
        let cur = PointCloud::new(vec![[-1.0, 0.5, 0.0]]);
        let draw = AugmentDraw {
            flip: true,
            rotation: std::f64::consts::FRAC_PI_2,
            translation: [0.1, 0.2, 0.3],
            shared: [0.0; 3],
        };
        let (p, c, _) = apply_draw(&prev, &cur, &MotionOffsets::zero(), &draw);
        // flip: (1,-2) then +90 deg: (2, 1)
        assert!((p.points[0][0] - 2.0).abs() < 1e-12 && (p.points[0][1] - 1.0).abs() < 1e-12);
        // flip: (-1,-0.5) then +90 deg: (0.5, -1), then shift
        assert!((c.points[0][0] - 0.6).abs() < 1e-12);
        assert!((c.points[0][1] + 0.8).abs() < 1e-12);
        assert!((c.points[0][2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn flip_probability_bounds() {
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| !cfg.sample(&mut rng).flip));
        let bad = AugmentConfig {
            flip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
