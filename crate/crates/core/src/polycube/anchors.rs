use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{SurfaceSampler, TetIndex};
use crate::mesh::bounding_box;
use crate::Vec3;

/// Points at which the mesh SDF and the PolyCube SDF are compared, with the
/// mesh side cached.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub points: Vec<Vec3>,
    /// Signed distance to the deformed mesh.
    pub distances: Vec<f64>,
    pub inside: Vec<bool>,
}

impl AnchorSet {
    /// Evaluate the mesh SDF at arbitrary points.
    pub fn from_points(points: Vec<Vec3>, mesh: &TetIndex) -> Self {
        let samples: Vec<(f64, bool)> = points
            .par_iter()
            .map(|p| {
                let inside = mesh.contains(p);
                let d = mesh.surface_index().project(p).sq_distance.sqrt();
                (if inside { -d } else { d }, inside)
            })
            .collect();
        Self { points, distances: samples.iter().map(|s| s.0).collect(), inside: samples.iter().map(|s| s.1).collect() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `grid_res³` grid points spanning the mesh bounding box enlarged 1.1× about
/// its center, plus `n_surface` area-uniform boundary samples displaced by
/// isotropic Gaussian noise of standard deviation `sigma`.
pub fn make_anchors(mesh: &TetIndex, grid_res: usize, n_surface: usize, sigma: f64, seed: u64) -> crate::Result<AnchorSet> {
    if grid_res < 2 {
        return Err(crate::Error::InvalidArgument(format!("anchor grid resolution must be ≥ 2, got {grid_res}")));
    }
    let boundary = mesh.boundary();
    let (lo, hi) = bounding_box(&boundary.vertices);
    let (c, half) = ((lo + hi) / 2.0, (hi - lo) * 0.55);
    let (lo, hi) = (c - half, c + half);
    let mut points = Vec::with_capacity(grid_res.pow(3) + n_surface);
    let t = |i: usize| i as f64 / (grid_res - 1) as f64;
    for k in 0..grid_res {
        for j in 0..grid_res {
            for i in 0..grid_res {
                points.push(Vec3::new(
                    lo.x + (hi.x - lo.x) * t(i),
                    lo.y + (hi.y - lo.y) * t(j),
                    lo.z + (hi.z - lo.z) * t(k),
                ));
            }
        }
    }
    if n_surface > 0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sampler = SurfaceSampler::new(&boundary.vertices, &boundary.faces)?;
        let samples = sampler.sample(&boundary.vertices, n_surface, &mut rng)?;
        let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        for s in samples {
            let offset = if sigma > 0.0 { Vec3::from_fn(|_, _| noise.sample(&mut rng)) } else { Vec3::zeros() };
            points.push(s.point + offset);
        }
    }
    Ok(AnchorSet::from_points(points, mesh))
}
