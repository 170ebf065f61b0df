//! Fixed-range voxelization with mean-coordinate features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelSpec {
    pub range_min: Vec3,
    pub range_max: Vec3,
    pub voxel_size: Vec3,
}

impl Default for VoxelSpec {
    /// Car-scale range, 64 x 64 x 20 cells.
    fn default() -> Self {
        Self {
            range_min: [-4.8, -4.8, -1.5],
            range_max: [4.8, 4.8, 1.5],
            voxel_size: [0.15, 0.15, 0.15],
        }
    }
}

impl VoxelSpec {
    pub fn validate(&self) -> Result<[usize; 3]> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let (lo, hi, s) = (self.range_min[a], self.range_max[a], self.voxel_size[a]);
            if !(lo.is_finite() && hi.is_finite() && s.is_finite()) {
                return Err(Error::InvalidVoxelSpec(format!("axis {a} is not finite")));
            }
            if hi <= lo {
                return Err(Error::InvalidVoxelSpec(format!(
                    "axis {a}: range_max {hi} must exceed range_min {lo}"
                )));
            }
            if s <= 0.0 {
                return Err(Error::InvalidVoxelSpec(format!("axis {a}: voxel size {s} must be positive")));
            }
            let n = (hi - lo) / s;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
                return Err(Error::InvalidVoxelSpec(format!(
                    "axis {a}: extent {} is not an integer multiple of voxel size {s}",
                    hi - lo
                )));
            }
            dims[a] = r as usize;
        }
        Ok(dims)
    }

    /// Grid dimensions `(nx, ny, nz)`. Panics on an invalid spec.
    pub fn dims(&self) -> [usize; 3] {
        self.validate().expect("invalid voxel spec")
    }

    /// Cell index of `p`, or `None` if it lies outside the half-open range.
    pub fn cell_of(&self, p: Vec3, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let f = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor();
            c[a] = (f.max(0.0) as usize).min(dims[a] - 1);
        }
        Some(c)
    }

    pub fn cell_bounds(&self, c: [usize; 3]) -> (Vec3, Vec3) {
        let lo = std::array::from_fn(|a| self.range_min[a] + c[a] as f64 * self.voxel_size[a]);
        let hi = std::array::from_fn(|a| lo[a] + self.voxel_size[a]);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxels {
    pub coords: Vec<[usize; 3]>,
    pub feats: Vec<Vec3>,
    pub spec: VoxelSpec,
    pub dims: [usize; 3],
}

impl SparseVoxels {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Groups in-range points by cell; each site's feature is the mean of its
/// points. Sites come out sorted by `(ix, iy, iz)` and every per-cell sum runs
/// over points in sorted order, so the result does not depend on input order.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelSpec) -> Result<SparseVoxels> {
    let dims = spec.validate()?;
    let mut keyed: Vec<([usize; 3], Vec3)> = cloud
        .points
        .iter()
        .filter_map(|&p| spec.cell_of(p, dims).map(|c| (c, p)))
        .collect();
    keyed.sort_unstable_by(|(ca, pa), (cb, pb)| {
        ca.cmp(cb)
            .then(pa[0].total_cmp(&pb[0]))
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
    });

    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let cell = keyed[i].0;
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        while i < keyed.len() && keyed[i].0 == cell {
            for a in 0..3 {
                sum[a] += keyed[i].1[a];
            }
            n += 1;
            i += 1;
        }
        coords.push(cell);
        feats.push(sum.map(|s| s / n as f64));
    }
    Ok(SparseVoxels {
        coords,
        feats,
        spec: *spec,
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_dims() {
        assert_eq!(VoxelSpec::default().dims(), [64, 64, 20]);
    }

    #[test]
    fn rejects_non_integer_grid() {
        let spec = VoxelSpec {
            voxel_size: [0.7, 0.15, 0.15],
            ..VoxelSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = VoxelSpec {
            range_max: [-5.0, 4.8, 1.5],
            ..VoxelSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_cell_mean() {
        let spec = VoxelSpec::default();
        let cloud = PointCloud::new(vec![[0.01, 0.02, 0.03], [0.05, 0.06, 0.07], [0.09, 0.1, 0.11]]);
        let v = voxelize(&cloud, &spec).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.coords[0], [32, 32, 10]);
        let f = v.feats[0];
        assert!((f[0] - 0.05).abs() < 1e-12 && (f[1] - 0.06).abs() < 1e-12 && (f[2] - 0.07).abs() < 1e-12);
    }

    #[test]
    fn max_face_is_excluded() {
        let spec = VoxelSpec::default();
        let cloud = PointCloud::new(vec![[4.8, 0.0, 0.0], [0.0, 0.0, 1.5], [-4.8, -4.8, -1.5]]);
        let v = voxelize(&cloud, &spec).unwrap();
        assert_eq!(v.coords, vec![[0, 0, 0]]);
    }

    #[test]
    fn empty_cloud() {
        let v = voxelize(&PointCloud::default(), &VoxelSpec::default()).unwrap();
        assert!(v.is_empty());
    }
}
