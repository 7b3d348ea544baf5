//! Add and Subtract suggestions on a uniform occupancy grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Cuboid, PolyCube, PolycubeError};
use crate::geom::TetIndex;
use crate::mesh::bounding_box;
use crate::Vec3;

pub const DEFAULT_GRID: usize = 32;

/// Inclusive range of grid cells `lo..=hi` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CellBox {
    pub fn cells(&self) -> usize {
        (0..3).map(|k| self.hi[k] - self.lo[k] + 1).product()
    }
}

/// Largest axis-aligned box of `true` cells in a `dims[0] × dims[1] ×
/// dims[2]` mask indexed `x + nx (y + ny z)`. For each z range the columns
/// are AND-ed and the best rectangle of the resulting 2D mask is found with
/// the histogram method, so the search is `O(n⁴)`. Ties keep the first box
/// found.
pub fn largest_box(mask: &[bool], dims: [usize; 3]) -> Option<CellBox> {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz);
    let mut best: Option<(usize, CellBox)> = None;
    let mut column = vec![false; nx * ny];
    for z0 in 0..nz {
        column.iter_mut().enumerate().for_each(|(i, c)| *c = mask[i + nx * ny * z0]);
        for z1 in z0..nz {
            if z1 > z0 {
                column.iter_mut().enumerate().for_each(|(i, c)| *c &= mask[i + nx * ny * z1]);
            }
            let depth = z1 - z0 + 1;
            if best.is_some_and(|b| b.0 >= nx * ny * depth) {
                continue;
            }
            if let Some((area, (x0, x1), (y0, y1))) = largest_rectangle(&column, nx, ny) {
                let v = area * depth;
                if best.is_none_or(|b| v > b.0) {
                    best = Some((v, CellBox { lo: [x0, y0, z0], hi: [x1, y1, z1] }));
                }
            }
        }
    }
    best.map(|b| b.1)
}

/// Largest rectangle of `true` in an `nx × ny` mask: `(area, x range, y
/// range)`, inclusive.
fn largest_rectangle(mask: &[bool], nx: usize, ny: usize) -> Option<(usize, (usize, usize), (usize, usize))> {
    let mut heights = vec![0usize; nx];
    let mut best: Option<(usize, (usize, usize), (usize, usize))> = None;
    let mut stack: Vec<usize> = Vec::with_capacity(nx + 1);
    for y in 0..ny {
        for x in 0..nx {
            heights[x] = if mask[x + nx * y] { heights[x] + 1 } else { 0 };
        }
        stack.clear();
        for x in 0..=nx {
            let h = if x < nx { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] <= h {
                    break;
                }
                stack.pop();
                let height = heights[top];
                let left = stack.last().map_or(0, |&s| s + 1);
                let area = height * (x - left);
                if best.is_none_or(|b| area > b.0) {
                    best = Some((area, (left, x - 1), (y + 1 - height, y)));
                }
            }
            stack.push(x);
        }
    }
    best
}

/// Cell-center classification against the mesh and the PolyCube on a
/// uniform grid spanning both bounding boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vec3,
    pub cell: Vec3,
    pub dims: [usize; 3],
    pub in_mesh: Vec<bool>,
    pub covered: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(pc: &PolyCube, mesh: &TetIndex, res: usize) -> Self {
        let res = res.max(1);
        let (mut lo, mut hi) = bounding_box(&mesh.boundary().vertices);
        for c in &pc.cuboids {
            lo = lo.inf(&c.min());
            hi = hi.sup(&c.max());
        }
        let cell = (hi - lo) / res as f64;
        let dims = [res; 3];
        let centers: Vec<Vec3> = (0..res.pow(3))
            .map(|i| {
                let (x, y, z) = (i % res, (i / res) % res, i / (res * res));
                lo + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5).component_mul(&cell)
            })
            .collect();
        let in_mesh = centers.par_iter().map(|p| mesh.contains(p)).collect();
        let covered = centers.iter().map(|p| pc.contains(p)).collect();
        Self { origin: lo, cell, dims, in_mesh, covered }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn center(&self, i: usize) -> Vec3 {
        let [nx, ny, _] = self.dims;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        self.origin + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5).component_mul(&self.cell)
    }

    pub fn to_cuboid(&self, b: &CellBox) -> Cuboid {
        let corner = |c: [usize; 3]| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        Cuboid::from_bounds(
            self.origin + corner(b.lo).component_mul(&self.cell),
            self.origin + (corner(b.hi) + Vec3::repeat(1.0)).component_mul(&self.cell),
        )
    }

    /// Cells inside the mesh and outside every cuboid.
    pub fn uncovered(&self) -> Vec<bool> {
        self.in_mesh.iter().zip(&self.covered).map(|(&m, &c)| m && !c).collect()
    }

    /// Cells outside the mesh but inside some cuboid.
    pub fn over_covered(&self) -> Vec<bool> {
        self.in_mesh.iter().zip(&self.covered).map(|(&m, &c)| !m && c).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddMode {
    /// Small cuboid at the uncovered point farthest from the PolyCube.
    Distance,
    /// Largest box of uncovered cells.
    Volume,
}

/// Suggest a cuboid covering part of the mesh not yet covered by `pc`.
pub fn suggest_add(pc: &PolyCube, mesh: &TetIndex, mode: AddMode, res: usize) -> Result<Cuboid, PolycubeError> {
    let grid = OccupancyGrid::new(pc, mesh, res);
    let free = grid.uncovered();
    match mode {
        AddMode::Volume => largest_box(&free, grid.dims).map(|b| grid.to_cuboid(&b)).ok_or(PolycubeError::FullyCovered),
        AddMode::Distance => {
            let candidates: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
            // distance to the PolyCube, or depth inside the mesh when empty
            let score = |i: usize| {
                let p = grid.center(i);
                match pc.min_sdf(&p) {
                    Some((d, _)) => d,
                    None => -mesh.signed_distance(&p).value,
                }
            };
            let scores: Vec<f64> = candidates.par_iter().map(|&i| score(i)).collect();
            let mut best: Option<(f64, usize)> = None;
            for (&i, &s) in candidates.iter().zip(&scores) {
                if best.is_none_or(|b| s > b.0) {
                    best = Some((s, i));
                }
            }
            let (_, i) = best.ok_or(PolycubeError::FullyCovered)?;
            Ok(Cuboid::new(grid.center(i), grid.cell * 1.5))
        }
    }
}

/// Suggest the largest box region covered by `pc` but outside the mesh.
pub fn suggest_subtract(pc: &PolyCube, mesh: &TetIndex, res: usize) -> Result<Cuboid, PolycubeError> {
    if pc.is_empty() {
        return Err(PolycubeError::NothingToSubtract);
    }
    let grid = OccupancyGrid::new(pc, mesh, res);
    largest_box(&grid.over_covered(), grid.dims).map(|b| grid.to_cuboid(&b)).ok_or(PolycubeError::NothingToSubtract)
}
