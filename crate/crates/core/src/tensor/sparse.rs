use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::Var;

const EMPTY: u32 = u32::MAX;

/// Active-site structure of a sparse 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayout {
    dims: [usize; 3],
    coords: Vec<[usize; 3]>,
}

impl SparseLayout {
    /// `coords` must be unique and in bounds; they are kept in the given order.
    pub fn new(dims: [usize; 3], coords: Vec<[usize; 3]>) -> Result<Self> {
        let layout = Self { dims, coords };
        let mut seen = vec![false; layout.volume()];
        for c in &layout.coords {
            if (0..3).any(|a| c[a] >= dims[a]) {
                return Err(Error::shape("sparse layout", format!("site {c:?} outside grid {dims:?}")));
            }
            let f = layout.flat(*c);
            if seen[f] {
                return Err(Error::shape("sparse layout", format!("duplicate site {c:?}")));
            }
            seen[f] = true;
        }
        Ok(layout)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn index_grid(&self) -> Vec<u32> {
        let mut grid = vec![EMPTY; self.volume()];
        for (i, c) in self.coords.iter().enumerate() {
            grid[self.flat(*c)] = i as u32;
        }
        grid
    }
}

/// Input/output site pairs per kernel offset. Output site `o` reads input
/// site `o * stride - pad + d` through kernel offset `d` (flattened as
/// `(dx * k + dy) * k + dz`).
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub kernel: usize,
    pub stride: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    fn check_kernel(layout: &SparseLayout, kernel: usize) -> Result<()> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::shape("sparse conv", format!("kernel size {kernel} must be odd")));
        }
        if layout.dims.iter().any(|&d| kernel > d) {
            return Err(Error::KernelTooLarge {
                kernel,
                grid: layout.dims,
            });
        }
        Ok(())
    }

    /// Rules for a submanifold convolution: outputs are exactly the inputs.
    pub fn submanifold(layout: &SparseLayout, kernel: usize) -> Result<Self> {
        Self::check_kernel(layout, kernel)?;
        let grid = layout.index_grid();
        let pad = (kernel / 2) as isize;
        let dims = layout.dims.map(|d| d as isize);
        let mut pairs = vec![Vec::new(); kernel * kernel * kernel];
        for (o, c) in layout.coords.iter().enumerate() {
            let c = c.map(|v| v as isize);
            let mut off = 0;
            for dx in 0..kernel as isize {
                for dy in 0..kernel as isize {
                    for dz in 0..kernel as isize {
                        let n = [c[0] - pad + dx, c[1] - pad + dy, c[2] - pad + dz];
                        if (0..3).all(|a| n[a] >= 0 && n[a] < dims[a]) {
                            let i = grid[layout.flat(n.map(|v| v as usize))];
                            if i != EMPTY {
                                pairs[off].push((i, o as u32));
                            }
                        }
                        off += 1;
                    }
                }
            }
        }
        Ok(Self {
            kernel,
            stride: 1,
            n_in: layout.len(),
            n_out: layout.len(),
            pairs,
        })
    }

    /// Rules for a strided convolution with padding `kernel / 2`. An output
    /// site is active iff an active input lies in its receptive field. Output
    /// sites are ordered lexicographically.
    pub fn strided(layout: &SparseLayout, kernel: usize, stride: usize) -> Result<(Self, SparseLayout)> {
        Self::check_kernel(layout, kernel)?;
        if stride == 0 {
            return Err(Error::shape("sparse conv", "stride must be at least 1"));
        }
        let pad = kernel / 2;
        let out_dims = layout.dims.map(|d| (d + 2 * pad - kernel) / stride + 1);
        let out_volume: usize = out_dims.iter().product();
        let flat_out = |c: [usize; 3]| (c[0] * out_dims[1] + c[1]) * out_dims[2] + c[2];

        // (output flat index, offset, input index)
        let mut hits: Vec<(usize, usize, u32)> = Vec::new();
        for (i, c) in layout.coords.iter().enumerate() {
            let mut axis_hits: [Vec<(usize, usize)>; 3] = Default::default();
            for a in 0..3 {
                for d in 0..kernel {
                    let num = c[a] + pad;
                    if num < d || (num - d) % stride != 0 {
                        continue;
                    }
                    let o = (num - d) / stride;
                    if o < out_dims[a] {
                        axis_hits[a].push((o, d));
                    }
                }
            }
            for &(ox, dx) in &axis_hits[0] {
                for &(oy, dy) in &axis_hits[1] {
                    for &(oz, dz) in &axis_hits[2] {
                        let off = (dx * kernel + dy) * kernel + dz;
                        hits.push((flat_out([ox, oy, oz]), off, i as u32));
                    }
                }
            }
        }

        let mut out_index = vec![EMPTY; out_volume];
        for &(f, _, _) in &hits {
            out_index[f] = 0;
        }
        let mut out_coords = Vec::new();
        for (f, slot) in out_index.iter_mut().enumerate() {
            if *slot != EMPTY {
                *slot = out_coords.len() as u32;
                let z = f % out_dims[2];
                let y = (f / out_dims[2]) % out_dims[1];
                let x = f / (out_dims[2] * out_dims[1]);
                out_coords.push([x, y, z]);
            }
        }
        let mut pairs = vec![Vec::new(); kernel * kernel * kernel];
        for (f, off, i) in hits {
            pairs[off].push((i, out_index[f]));
        }
        let out_layout = SparseLayout {
            dims: out_dims,
            coords: out_coords,
        };
        Ok((
            Self {
                kernel,
                stride,
                n_in: layout.len(),
                n_out: out_layout.len(),
                pairs,
            },
            out_layout,
        ))
    }
}

/// Features on the active sites of a sparse grid; `feats` is an
/// `[n_sites, channels]` tape variable.
#[derive(Debug, Clone)]
pub struct SparseTensor3D {
    pub layout: Arc<SparseLayout>,
    pub feats: Var,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_rejects_duplicates_and_out_of_bounds() {
        assert!(SparseLayout::new([2, 2, 2], vec![[0, 0, 0], [0, 0, 0]]).is_err());
        assert!(SparseLayout::new([2, 2, 2], vec![[2, 0, 0]]).is_err());
    }

    #[test]
    fn strided_origin_maps_to_origin() {
        let l = SparseLayout::new([4, 4, 4], vec![[0, 0, 0]]).unwrap();
        let (rb, out) = Rulebook::strided(&l, 3, 2).unwrap();
        assert_eq!(out.dims(), [2, 2, 2]);
        assert_eq!(out.coords(), &[[0, 0, 0]]);
        assert_eq!(rb.n_out, 1);
    }

    #[test]
    fn strided_dims_round_up() {
        let l = SparseLayout::new([5, 20, 7], vec![]).unwrap();
        let (_, out) = Rulebook::strided(&l, 3, 2).unwrap();
        assert_eq!(out.dims(), [3, 10, 4]);
    }

    #[test]
    fn kernel_larger_than_grid_rejected() {
        let l = SparseLayout::new([8, 8, 2], vec![]).unwrap();
        assert!(matches!(Rulebook::submanifold(&l, 3), Err(Error::KernelTooLarge { .. })));
    }

    #[test]
    fn submanifold_pairs_only_touch_active_sites() {
        let l = SparseLayout::new([4, 4, 4], vec![[1, 1, 1], [1, 1, 2], [3, 3, 3]]).unwrap();
        let rb = Rulebook::submanifold(&l, 3).unwrap();
        let total: usize = rb.pairs.iter().map(Vec::len).sum();
        // three self pairs plus the two neighbours seeing each other
        assert_eq!(total, 5);
        assert_eq!(rb.pairs[13].len(), 3);
    }
}
