//! Oriented-box geometry in the up-axis-yaw convention.
//!
//! A box's local frame has its origin at the box center, `x` along the
//! heading (length), `y` to the left (width) and `z` up (height).

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned as is.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r += TAU;
    }
    r
}

#[inline]
fn rotate_xy(yaw: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Oriented 3D box: center, `(width, length, height)` and yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self> {
        if center.iter().chain(size.iter()).any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite component".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidBox(format!("size must be positive, got {size:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Half extents in the local frame, ordered `(x, y, z)`.
    pub fn half_extents(&self) -> Vec3 {
        [self.length() / 2.0, self.width() / 2.0, self.height() / 2.0]
    }

    /// Maps a world point into this box's local frame.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (x, y) = rotate_xy(-self.yaw, p[0] - self.center[0], p[1] - self.center[1]);
        [x, y, p[2] - self.center[2]]
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        let (x, y) = rotate_xy(self.yaw, p[0], p[1]);
        [x + self.center[0], y + self.center[1], p[2] + self.center[2]]
    }

    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        let h = self.half_extents();
        (0..3).all(|i| l[i].abs() <= h[i] + margin)
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let [hx, hy, _] = self.half_extents();
        [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]].map(|[x, y]| {
            let (wx, wy) = rotate_xy(self.yaw, x, y);
            [wx + self.center[0], wy + self.center[1]]
        })
    }

    /// Applies the rigid motion `p -> R(yaw) p + translation` to the box.
    pub fn transformed(&self, yaw: f64, translation: Vec3) -> Self {
        let (x, y) = rotate_xy(yaw, self.center[0], self.center[1]);
        Self {
            center: [
                x + translation[0],
                y + translation[1],
                self.center[2] + translation[2],
            ],
            size: self.size,
            yaw: normalize_angle(self.yaw + yaw),
        }
    }

    /// Reflects the box across the x-axis (`y -> -y`).
    pub fn flipped_y(&self) -> Self {
        Self {
            center: [self.center[0], -self.center[1], self.center[2]],
            size: self.size,
            yaw: normalize_angle(-self.yaw),
        }
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        dist3(self.center, other.center)
    }

    pub fn center_distance_bev(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    pub fn transformed(&self, yaw: f64, translation: Vec3) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let (x, y) = rotate_xy(yaw, p[0], p[1]);
                [x + translation[0], y + translation[1], p[2] + translation[2]]
            })
            .collect();
        Self { points }
    }

    pub fn flipped_y(&self) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0], -p[1], p[2]]).collect(),
        }
    }
}

/// Motion of a target between two frames, expressed in the frame of the
/// earlier box. `dz` is along the world vertical axis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionOffsets {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtheta: f64,
}

impl MotionOffsets {
    pub fn new(dx: f64, dy: f64, dz: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dy,
            dz,
            dtheta: normalize_angle(dtheta),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.dtheta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Expresses `cloud` in the canonical frame of `reference`.
pub fn canonicalize(cloud: &PointCloud, reference: &Box3D) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| reference.to_local(p)).collect(),
    }
}

pub fn apply_offsets(prev: &Box3D, off: &MotionOffsets) -> Box3D {
    let (dx, dy) = rotate_xy(prev.yaw, off.dx, off.dy);
    Box3D {
        center: [
            prev.center[0] + dx,
            prev.center[1] + dy,
            prev.center[2] + off.dz,
        ],
        size: prev.size,
        yaw: normalize_angle(prev.yaw + off.dtheta),
    }
}

/// Offsets that carry `prev` onto `cur` under [`apply_offsets`].
pub fn relative_pose(prev: &Box3D, cur: &Box3D) -> MotionOffsets {
    let (dx, dy) = rotate_xy(
        -prev.yaw,
        cur.center[0] - prev.center[0],
        cur.center[1] - prev.center[1],
    );
    MotionOffsets::new(dx, dy, cur.center[2] - prev.center[2], cur.yaw - prev.yaw)
}

pub fn points_in_box(cloud: &PointCloud, bx: &Box3D) -> Vec<usize> {
    points_in_box_with_margin(cloud, bx, 0.0)
}

pub fn points_in_box_with_margin(cloud: &PointCloud, bx: &Box3D, margin: f64) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| bx.contains(**p, margin))
        .map(|(i, _)| i)
        .collect()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc.abs() * 0.5
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Volume IoU of two yaw-rotated cuboids.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    // Polygon clipping loses an ulp or two on coincident boxes.
    if a == b {
        return 1.0;
    }
    let za = (a.center[2] - a.height() / 2.0, a.center[2] + a.height() / 2.0);
    let zb = (b.center[2] - b.height() / 2.0, b.center[2] + b.height() / 2.0);
    let dz = za.1.min(zb.1) - za.0.max(zb.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
