//! Stage 2: PolyCubes as unions of axis-aligned cuboids.

mod anchors;
mod fit;
mod heuristics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

pub use anchors::{make_anchors, AnchorSet};
pub use fit::{energy_polycube, fit_polycube, FitOptions, PolycubeEnergy, PolycubeWeights};
pub use heuristics::{largest_box, suggest_add, suggest_subtract, AddMode, CellBox, OccupancyGrid, DEFAULT_GRID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolycubeError {
    #[error("no cuboid with id {0}")]
    InvalidId(usize),
    #[error("the mesh is fully covered by the PolyCube")]
    FullyCovered,
    #[error("nothing to subtract: no over-covered cell")]
    NothingToSubtract,
    #[error("the PolyCube has no cuboids")]
    Empty,
    #[error("half extents must be positive, got {0:?}")]
    NonPositiveExtent([f64; 3]),
}

/// Axis-aligned box with center `c` and half extents `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vec3,
    pub half: Vec3,
    #[serde(default)]
    pub locked: bool,
}

/// Value and gradients of a cuboid SDF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfGradient {
    pub value: f64,
    pub dp: Vec3,
    pub dc: Vec3,
    pub dh: Vec3,
}

impl Cuboid {
    pub fn new(center: Vec3, half: Vec3) -> Self {
        Self { center, half, locked: false }
    }

    pub fn from_bounds(lo: Vec3, hi: Vec3) -> Self {
        Self::new((lo + hi) / 2.0, (hi - lo) / 2.0)
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.half
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.half
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half.x * self.half.y * self.half.z
    }

    /// Closed-box membership.
    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.center).abs().iter().zip(self.half.iter()).all(|(d, h)| d <= h)
    }

    /// `‖max(d, 0)‖ + min(max_k d_k, 0)` with `d = |p − c| − h`.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let d = (p - self.center).abs() - self.half;
        d.sup(&Vec3::zeros()).norm() + d.max().min(0.0)
    }

    pub fn sdf_gradient(&self, p: &Vec3) -> SdfGradient {
        let r = p - self.center;
        let s = r.map(|x| if x < 0.0 { -1.0 } else { 1.0 });
        let d = r.abs() - self.half;
        let outside = d.sup(&Vec3::zeros());
        let norm = outside.norm();
        // gradient with respect to d
        let mut gd = Vec3::zeros();
        if norm > 0.0 {
            gd = outside / norm;
        }
        let dmax = d.max();
        if dmax < 0.0 {
            gd[d.imax()] += 1.0;
        }
        let dp = gd.component_mul(&s);
        SdfGradient { value: norm + dmax.min(0.0), dp, dc: -dp, dh: -gd }
    }

    /// Overlap box with `other`, if it has positive volume.
    pub fn intersection(&self, other: &Cuboid) -> Option<(Vec3, Vec3)> {
        let lo = self.min().sup(&other.min());
        let hi = self.max().inf(&other.max());
        (0..3).all(|k| hi[k] > lo[k]).then_some((lo, hi))
    }
}

/// Ordered union of cuboids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolyCube {
    pub cuboids: Vec<Cuboid>,
}

impl PolyCube {
    pub fn new(cuboids: Vec<Cuboid>) -> Self {
        Self { cuboids }
    }

    pub fn len(&self) -> usize {
        self.cuboids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuboids.is_empty()
    }

    /// `min_i d_{C_i}(p)` and the lowest-index argmin.
    pub fn min_sdf(&self, p: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in self.cuboids.iter().enumerate() {
            let d = c.sdf(p);
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, i));
            }
        }
        best
    }

    /// Min-SDF value with its gradient routed to the argmin cuboid.
    pub fn min_sdf_gradient(&self, p: &Vec3) -> Option<(usize, SdfGradient)> {
        let (_, i) = self.min_sdf(p)?;
        Some((i, self.cuboids[i].sdf_gradient(p)))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.cuboids.iter().any(|c| c.contains(p))
    }

    fn get_mut(&mut self, id: usize) -> Result<&mut Cuboid, PolycubeError> {
        self.cuboids.get_mut(id).ok_or(PolycubeError::InvalidId(id))
    }

    pub fn add(&mut self, cuboid: Cuboid) -> Result<usize, PolycubeError> {
        check_half(&cuboid.half)?;
        self.cuboids.push(cuboid);
        Ok(self.cuboids.len() - 1)
    }

    pub fn remove(&mut self, id: usize) -> Result<Cuboid, PolycubeError> {
        if id >= self.cuboids.len() {
            return Err(PolycubeError::InvalidId(id));
        }
        Ok(self.cuboids.remove(id))
    }

    /// Append an unlocked copy of cuboid `id`.
    pub fn duplicate(&mut self, id: usize) -> Result<usize, PolycubeError> {
        let mut c = *self.cuboids.get(id).ok_or(PolycubeError::InvalidId(id))?;
        c.locked = false;
        self.cuboids.push(c);
        Ok(self.cuboids.len() - 1)
    }

    pub fn translate(&mut self, id: usize, delta: Vec3) -> Result<(), PolycubeError> {
        self.get_mut(id)?.center += delta;
        Ok(())
    }

    pub fn set_center(&mut self, id: usize, center: Vec3) -> Result<(), PolycubeError> {
        self.get_mut(id)?.center = center;
        Ok(())
    }

    pub fn resize(&mut self, id: usize, half: Vec3) -> Result<(), PolycubeError> {
        check_half(&half)?;
        self.get_mut(id)?.half = half;
        Ok(())
    }

    pub fn set_locked(&mut self, id: usize, locked: bool) -> Result<(), PolycubeError> {
        self.get_mut(id)?.locked = locked;
        Ok(())
    }

    /// Translate cuboid `id` along each axis by the smallest offset within
    /// `tolerance` that makes one of its faces coplanar with a parallel face
    /// of another cuboid. Returns the applied translation.
    pub fn sticky_snap(&mut self, id: usize, tolerance: f64) -> Result<Vec3, PolycubeError> {
        let c = *self.cuboids.get(id).ok_or(PolycubeError::InvalidId(id))?;
        let mut center = c.center;
        for k in 0..3 {
            // (offset, new center coordinate)
            let mut best: Option<(f64, f64)> = None;
            for (j, other) in self.cuboids.iter().enumerate() {
                if j == id {
                    continue;
                }
                for (own, sign) in [(c.min()[k], -1.0), (c.max()[k], 1.0)] {
                    for target in [other.min()[k], other.max()[k]] {
                        let d = target - own;
                        if d.abs() <= tolerance && best.is_none_or(|b| d.abs() < b.0.abs()) {
                            best = Some((d, target - sign * c.half[k]));
                        }
                    }
                }
            }
            if let Some((_, x)) = best {
                center[k] = x;
            }
        }
        self.cuboids[id].center = center;
        Ok(center - c.center)
    }

    /// Remove `region` from every cuboid it overlaps.
    pub fn apply_subtract(&self, region: &Cuboid) -> PolyCube {
        let mut out = Vec::new();
        for c in &self.cuboids {
            match c.intersection(region) {
                None => out.push(*c),
                Some((ilo, ihi)) => out.extend(subtract_box(c, ilo, ihi)),
            }
        }
        PolyCube { cuboids: out }
    }
}

fn check_half(h: &Vec3) -> Result<(), PolycubeError> {
    if h.iter().all(|&x| x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(PolycubeError::NonPositiveExtent([h.x, h.y, h.z]))
    }
}

/// `c \ [ilo, ihi]` as up to six boxes: two full slabs along x, two along y
/// restricted to the hole's x range, and two along z restricted to its x and
/// y ranges.
fn subtract_box(c: &Cuboid, ilo: Vec3, ihi: Vec3) -> Vec<Cuboid> {
    let (lo, hi) = (c.min(), c.max());
    let mut pieces = Vec::new();
    let mut push = |a: Vec3, b: Vec3| {
        if (0..3).all(|k| b[k] > a[k]) {
            pieces.push(Cuboid { locked: c.locked, ..Cuboid::from_bounds(a, b) });
        }
    };
    push(lo, Vec3::new(ilo.x, hi.y, hi.z));
    push(Vec3::new(ihi.x, lo.y, lo.z), hi);
    push(Vec3::new(ilo.x, lo.y, lo.z), Vec3::new(ihi.x, ilo.y, hi.z));
    push(Vec3::new(ilo.x, ihi.y, lo.z), Vec3::new(ihi.x, hi.y, hi.z));
    push(Vec3::new(ilo.x, ilo.y, lo.z), Vec3::new(ihi.x, ihi.y, ilo.z));
    push(Vec3::new(ilo.x, ilo.y, ihi.z), Vec3::new(ihi.x, ihi.y, hi.z));
    pieces
}
