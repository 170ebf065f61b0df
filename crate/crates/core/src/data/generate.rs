use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box3D, PointCloud, Vec3};

use super::{Frame, Sequence, SequenceMeta};

/// Sensor position; all density decay is measured from here.
const SENSOR: Vec3 = [0.0, 0.0, 1.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Car,
    Pedestrian,
    Van,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPattern {
    ConstantVelocity,
    Turning,
    Abrupt,
}

/// Inclusive `[min, max]` per size component `(width, length, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRanges {
    pub width: [f64; 2],
    pub length: [f64; 2],
    pub height: [f64; 2],
}

impl Archetype {
    pub fn default_sizes(self) -> SizeRanges {
        match self {
            Archetype::Car => SizeRanges {
                width: [1.6, 2.0],
                length: [3.8, 4.6],
                height: [1.4, 1.7],
            },
            Archetype::Pedestrian => SizeRanges {
                width: [0.5, 0.8],
                length: [0.5, 0.9],
                height: [1.6, 1.9],
            },
            Archetype::Van => SizeRanges {
                width: [2.0, 2.3],
                length: [5.0, 6.0],
                height: [2.0, 2.6],
            },
        }
    }

    /// Per-frame speed range in meters.
    pub fn default_speed(self) -> [f64; 2] {
        match self {
            Archetype::Car | Archetype::Van => [0.3, 1.2],
            Archetype::Pedestrian => [0.05, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub archetype: Archetype,
    pub sizes: SizeRanges,
    pub motion: MotionPattern,
    pub frames: usize,
    /// Target speed range, meters per frame.
    pub speed: [f64; 2],
    pub distractors: usize,
    /// Surface points per square meter before distance decay.
    pub surface_density: f64,
    /// Density is divided by `1 + sparsity * range`.
    pub sparsity: f64,
    pub clutter_points: usize,
    /// Half side of the square arena, meters.
    pub arena_half: f64,
    pub seed: u64,
}

impl SceneParams {
    pub fn new(archetype: Archetype, motion: MotionPattern, seed: u64) -> Self {
        Self {
            archetype,
            sizes: archetype.default_sizes(),
            motion,
            frames: 20,
            speed: archetype.default_speed(),
            distractors: 2,
            surface_density: 40.0,
            sparsity: 0.1,
            clutter_points: 400,
            arena_half: 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("sizes.width", self.sizes.width),
            ("sizes.length", self.sizes.length),
            ("sizes.height", self.sizes.height),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::param(name, format!("need 0 < min <= max, got [{lo}, {hi}]")));
            }
        }
        if self.frames < 2 {
            return Err(Error::param("frames", "a sequence needs at least 2 frames"));
        }
        let [s0, s1] = self.speed;
        if !(s0.is_finite() && s1.is_finite() && s0 >= 0.0 && s0 <= s1) {
            return Err(Error::param("speed", format!("need 0 <= min <= max, got [{s0}, {s1}]")));
        }
        if !(self.surface_density.is_finite() && self.surface_density >= 0.0) {
            return Err(Error::param("surface_density", "must be finite and non-negative"));
        }
        if !(self.sparsity.is_finite() && self.sparsity >= 0.0) {
            return Err(Error::param("sparsity", "must be finite and non-negative"));
        }
        if !(self.arena_half.is_finite() && self.arena_half > 2.0) {
            return Err(Error::param("arena_half", "must exceed 2 m"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Kinematics {
    pattern: MotionPattern,
    speed: f64,
    yaw_rate: f64,
    switch_frame: usize,
    switch_yaw: f64,
    switch_speed: f64,
}

impl Kinematics {
    fn sample<R: Rng>(rng: &mut R, pattern: MotionPattern, speed: [f64; 2], frames: usize) -> Self {
        let v = rng.random_range(speed[0]..=speed[1]);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            pattern,
            speed: v,
            yaw_rate: sign * rng.random_range(0.03..=0.12),
            switch_frame: rng.random_range(frames / 4..=(3 * frames / 4).max(frames / 4)),
            switch_yaw: sign * rng.random_range(0.3..=0.8),
            switch_speed: rng.random_range(speed[0]..=speed[1]),
        }
    }

    /// Advances `bx` from frame `t - 1` to frame `t`.
    fn step(&self, bx: &Box3D, t: usize) -> Box3D {
        let (yaw, speed) = match self.pattern {
            MotionPattern::ConstantVelocity => (bx.yaw, self.speed),
            MotionPattern::Turning => (bx.yaw + self.yaw_rate, self.speed),
            MotionPattern::Abrupt => {
                if t == self.switch_frame {
                    (bx.yaw + self.switch_yaw, self.switch_speed)
                } else if t > self.switch_frame {
                    (bx.yaw, self.switch_speed)
                } else {
                    (bx.yaw, self.speed)
                }
            }
        };
        let (s, c) = yaw.sin_cos();
        let center = [bx.center[0] + speed * c, bx.center[1] + speed * s, bx.center[2]];
        Box3D::new(center, bx.size, yaw).expect("valid box")
    }

    fn trajectory(&self, start: Box3D, frames: usize) -> Vec<Box3D> {
        let mut out = vec![start];
        for t in 1..frames {
            let next = self.step(&out[t - 1], t);
            out.push(next);
        }
        out
    }
}

fn sample_size<R: Rng>(rng: &mut R, s: &SizeRanges) -> Vec3 {
    [
        rng.random_range(s.width[0]..=s.width[1]),
        rng.random_range(s.length[0]..=s.length[1]),
        rng.random_range(s.height[0]..=s.height[1]),
    ]
}

fn round32(p: Vec3) -> Vec3 {
    p.map(|v| v as f32 as f64)
}

/// Points on the sensor-facing faces of `bx`. The count on each face is
/// `floor(density * area / (1 + sparsity * range))`, so it never grows with
/// `sparsity`.
fn surface_points<R: Rng>(rng: &mut R, bx: &Box3D, density: f64, sparsity: f64) -> Vec<Vec3> {
    let [hx, hy, hz] = bx.half_extents();
    // (outward normal in local frame, face center, two in-plane half extents and their axes)
    let faces: [(Vec3, Vec3, [f64; 2], [usize; 2]); 5] = [
        ([1.0, 0.0, 0.0], [hx, 0.0, 0.0], [hy, hz], [1, 2]),
        ([-1.0, 0.0, 0.0], [-hx, 0.0, 0.0], [hy, hz], [1, 2]),
        ([0.0, 1.0, 0.0], [0.0, hy, 0.0], [hx, hz], [0, 2]),
        ([0.0, -1.0, 0.0], [0.0, -hy, 0.0], [hx, hz], [0, 2]),
        ([0.0, 0.0, 1.0], [0.0, 0.0, hz], [hx, hy], [0, 1]),
    ];
    let sensor_local = bx.to_local(SENSOR);
    let mut pts = Vec::new();
    for (normal, center, half, axes) in faces {
        let to_sensor: f64 = (0..3).map(|a| normal[a] * (sensor_local[a] - center[a])).sum();
        if to_sensor <= 0.0 {
            continue;
        }
        let world_center = bx.to_world(center);
        let range = crate::geom::dist3(world_center, SENSOR);
        let area = 4.0 * half[0] * half[1];
        let n = (density * area / (1.0 + sparsity * range)).floor() as usize;
        for _ in 0..n {
            let mut local = center;
            local[axes[0]] += rng.random_range(-half[0]..=half[0]);
            local[axes[1]] += rng.random_range(-half[1]..=half[1]);
            pts.push(round32(bx.to_world(local)));
        }
    }
    pts
}

/// Generates one sequence. Deterministic in `p` (including `p.seed`).
pub fn generate_sequence(p: &SceneParams) -> Result<Sequence> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let size = sample_size(&mut rng, &p.sizes);
    let radius = rng.random_range(4.0..=(p.arena_half * 0.8).max(4.0));
    let bearing = rng.random_range(-PI..PI);
    let start = Box3D::new(
        [radius * bearing.cos(), radius * bearing.sin(), size[2] / 2.0],
        size,
        rng.random_range(-PI..PI),
    )?;
    let target = Kinematics::sample(&mut rng, p.motion, p.speed, p.frames).trajectory(start, p.frames);

    let mut distractors = Vec::with_capacity(p.distractors);
    for _ in 0..p.distractors {
        let dsize = sample_size(&mut rng, &p.sizes);
        let clearance = (size[0].max(size[1]) + dsize[0].max(dsize[1])) / 2.0 + 0.5;
        let dist = rng.random_range(clearance..=clearance + 4.0);
        let ang = rng.random_range(-PI..PI);
        let dstart = Box3D::new(
            [
                start.center[0] + dist * ang.cos(),
                start.center[1] + dist * ang.sin(),
                dsize[2] / 2.0,
            ],
            dsize,
            rng.random_range(-PI..PI),
        )?;
        let motion = Kinematics::sample(&mut rng, MotionPattern::ConstantVelocity, p.speed, p.frames);
        distractors.push(motion.trajectory(dstart, p.frames));
    }

    let mut frames = Vec::with_capacity(p.frames);
    let mut target_points = Vec::with_capacity(p.frames);
    for t in 0..p.frames {
        let mut pts = surface_points(&mut rng, &target[t], p.surface_density, p.sparsity);
        if t == 0 && pts.is_empty() {
            return Err(Error::param(
                "surface_density",
                "target has no points in the first frame (raise density or lower sparsity)",
            ));
        }
        target_points.push(pts.len());
        for d in &distractors {
            pts.extend(surface_points(&mut rng, &d[t], p.surface_density, p.sparsity));
        }
        for _ in 0..p.clutter_points {
            pts.push(round32([
                rng.random_range(-p.arena_half..p.arena_half),
                rng.random_range(-p.arena_half..p.arena_half),
                rng.random_range(0.0..2.5),
            ]));
        }
        pts.shuffle(&mut rng);
        frames.push(Frame {
            cloud: PointCloud::new(pts),
            gt: target[t],
        });
    }
    Ok(Sequence {
        frames,
        meta: SequenceMeta {
            archetype: p.archetype,
            motion: p.motion,
            seed: p.seed,
            target_points,
        },
    })
}

/// Target points of a frame, kept separate for tests: regenerates the target
/// trajectory and surface samples exactly as [`generate_sequence`] does.
#[cfg(test)]
pub(crate) fn target_only(p: &SceneParams) -> Vec<(Box3D, Vec<Vec3>)> {
    let mut q = p.clone();
    q.distractors = 0;
    q.clutter_points = 0;
    let seq = generate_sequence(&q).unwrap();
    seq.frames.into_iter().map(|f| (f.gt, f.cloud.points)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{points_in_box_with_margin, relative_pose};

    fn params(motion: MotionPattern, seed: u64) -> SceneParams {
        SceneParams::new(Archetype::Car, motion, seed)
    }

    #[test]
    fn deterministic_under_seed() {
        let p = params(MotionPattern::Turning, 11);
        assert_eq!(generate_sequence(&p).unwrap(), generate_sequence(&p).unwrap());
        let q = params(MotionPattern::Turning, 12);
        assert_ne!(generate_sequence(&p).unwrap(), generate_sequence(&q).unwrap());
    }

    #[test]
    fn constant_velocity_has_constant_relative_pose() {
        let seq = generate_sequence(&params(MotionPattern::ConstantVelocity, 5)).unwrap();
        let gts = seq.gt_boxes();
        let first = relative_pose(&gts[0], &gts[1]);
        for w in gts.windows(2) {
            let r = relative_pose(&w[0], &w[1]);
            for (a, b) in r.to_array().iter().zip(first.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn target_points_lie_on_the_box() {
        for seed in 0..5 {
            for (gt, pts) in target_only(&params(MotionPattern::Abrupt, seed)) {
                let cloud = PointCloud::new(pts);
                assert_eq!(points_in_box_with_margin(&cloud, &gt, 1e-6).len(), cloud.len());
            }
        }
    }

    #[test]
    fn sparsity_never_adds_points() {
        let mut p = params(MotionPattern::ConstantVelocity, 9);
        let mut last: Option<Vec<usize>> = None;
        for s in [0.0, 0.05, 0.1, 0.3, 1.0] {
            p.sparsity = s;
            let counts = generate_sequence(&p).unwrap().meta.target_points;
            if let Some(prev) = &last {
                assert!(counts.iter().zip(prev).all(|(c, p)| c <= p));
            }
            last = Some(counts);
        }
    }

    #[test]
    fn invalid_params_name_the_field() {
        let mut p = params(MotionPattern::Turning, 0);
        p.speed = [1.0, 0.5];
        let err = generate_sequence(&p).unwrap_err();
        assert!(err.to_string().contains("speed"), "{err}");

        let mut p = params(MotionPattern::Turning, 0);
        p.surface_density = 0.0;
        let err = generate_sequence(&p).unwrap_err();
        assert!(err.to_string().contains("surface_density"), "{err}");
    }
}
