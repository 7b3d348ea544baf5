//! Element quality measures, worst-element energies and sampled surface
//! distance.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::QualityError;
use crate::distortion::{log_sum_exp, tet_energy_grad, BarrierWeights};
use crate::geom::{GeomError, SurfaceSampler, TriangleIndex};
use crate::mesh::{bbox_diagonal, edge_matrix, HexMesh, TetFrames, TriSurface, HEX_CORNER_NEIGHBORS};
use crate::{Mat3, Vec3};

/// Columns shorter than this are not normalized further and get no gradient.
pub const COLUMN_GUARD: f64 = 1e-12;

/// Determinant of the column-normalized matrix `d` and its gradient with
/// respect to `d`.
pub fn scaled_jacobian_grad(d: &Mat3) -> (f64, Mat3) {
    let cols = [d.column(0).into_owned(), d.column(1).into_owned(), d.column(2).into_owned()];
    let norms = cols.map(|c| c.norm());
    let hat: [Vec3; 3] = std::array::from_fn(|k| cols[k] / norms[k].max(COLUMN_GUARD));
    let value = hat[0].dot(&hat[1].cross(&hat[2]));
    let dhat = [hat[1].cross(&hat[2]), hat[2].cross(&hat[0]), hat[0].cross(&hat[1])];
    let grad: [Vec3; 3] = std::array::from_fn(|k| {
        if norms[k] < COLUMN_GUARD {
            Vec3::zeros()
        } else {
            (dhat[k] - hat[k] * hat[k].dot(&dhat[k])) / norms[k]
        }
    });
    (value, Mat3::from_columns(&grad))
}

pub fn scaled_jacobian(d: &Mat3) -> f64 {
    scaled_jacobian_grad(d).0
}

fn scatter_edges(g: &Mat3) -> [Vec3; 4] {
    let (g1, g2, g3) = (g.column(0).into_owned(), g.column(1).into_owned(), g.column(2).into_owned());
    [-(g1 + g2 + g3), g1, g2, g3]
}

/// `−λ Σ_t det Ĵ_t` over corner tets `(corner, n0, n1, n2)`, or with
/// `worst` the smooth maximum `log Σ_t exp(−λ det Ĵ_t)`.
pub fn energy_custom_scaled_jacobian(positions: &[Vec3], tets: &[[usize; 4]], lambda: f64, worst: bool) -> (f64, Vec<Vec3>) {
    let per: Vec<(f64, [Vec3; 4])> = tets
        .par_iter()
        .map(|t| {
            let (s, g) = scaled_jacobian_grad(&edge_matrix(positions, t));
            (s, scatter_edges(&g))
        })
        .collect();
    let mut grad = vec![Vec3::zeros(); positions.len()];
    if tets.is_empty() {
        return (0.0, grad);
    }
    let (value, coeff): (f64, Vec<f64>) = if worst {
        let max = per.iter().map(|p| -lambda * p.0).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = per.iter().map(|p| (-lambda * p.0 - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        (max + sum.ln(), w.iter().map(|x| -lambda * x / sum).collect())
    } else {
        (-lambda * per.iter().map(|p| p.0).sum::<f64>(), vec![-lambda; tets.len()])
    };
    for ((t, (_, g)), c) in tets.iter().zip(&per).zip(&coeff) {
        for k in 0..4 {
            grad[t[k]] += g[k] * *c;
        }
    }
    (value, grad)
}

/// `log Σ_t exp(e_t)` of the per-tet distortion summands. Only defined on
/// inversion-free meshes; run the average form first to untangle.
pub fn energy_hex_lse(frames: &TetFrames, positions: &[Vec3], w: &BarrierWeights) -> Result<(f64, Vec<Vec3>), QualityError> {
    let inverted = frames.inverted(positions).len();
    if inverted > 0 {
        return Err(QualityError::InvertedElements(inverted));
    }
    Ok(log_sum_exp(frames, positions, |j| tet_energy_grad(j, w)))
}

/// Corner tets of every hex as `(corner, n0, n1, n2)` vertex ids.
pub fn corner_tets(hexes: &[[usize; 8]]) -> Vec<[usize; 4]> {
    hexes
        .iter()
        .flat_map(|h| {
            (0..8).map(move |c| {
                let [a, b, d] = HEX_CORNER_NEIGHBORS[c];
                [h[c], h[a], h[b], h[d]]
            })
        })
        .collect()
}

/// Scaled Jacobian of every corner tet, 8 per hex in hex order.
pub fn corner_scaled_jacobians(mesh: &HexMesh) -> Vec<f64> {
    let tets = corner_tets(mesh.hexes());
    tets.par_iter().map(|t| scaled_jacobian(&edge_matrix(mesh.vertices(), t))).collect()
}

/// Minimum corner scaled Jacobian per hex.
pub fn hex_scaled_jacobians(mesh: &HexMesh) -> Vec<f64> {
    corner_scaled_jacobians(mesh).chunks_exact(8).map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)).collect()
}

/// Sampled two-sided distance between two triangle surfaces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hausdorff {
    pub max: f64,
    pub avg: f64,
}

/// `n` area-uniform samples on each surface, projected onto the other.
/// `max` is the largest distance in either direction; `avg` is the mean over
/// all `2n` samples.
pub fn hausdorff(a: &TriSurface, b: &TriSurface, n: usize, seed: u64) -> Result<Hausdorff, GeomError> {
    let one_way = |from: &TriSurface, to: &TriSurface, stream: u64| -> Result<Vec<f64>, GeomError> {
        let sampler = SurfaceSampler::new(&from.vertices, &from.faces)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let samples = sampler.sample(&from.vertices, n, &mut rng)?;
        let index = TriangleIndex::new(to)?;
        Ok(samples.par_iter().map(|s| index.project(&s.point).sq_distance.sqrt()).collect())
    };
    let mut d = one_way(a, b, 0)?;
    d.extend(one_way(b, a, 1)?);
    let max = d.iter().copied().fold(0.0, f64::max);
    let avg = d.iter().sum::<f64>() / d.len() as f64;
    Ok(Hausdorff { max, avg })
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n;
    (min, avg, var.sqrt())
}

/// Element and surface quality of a hex mesh against the input surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub hexes: usize,
    /// Scaled Jacobian over corner tets.
    pub j_min: f64,
    pub j_avg: f64,
    pub j_std: f64,
    /// Corner-tet Jacobian determinant divided by its mean.
    pub v_min: f64,
    pub v_avg: f64,
    pub v_std: f64,
    /// Sampled Hausdorff distance over the input bounding-box diagonal.
    pub d_max: f64,
    pub d_avg: f64,
    /// Hexes with a corner scaled Jacobian `≤ 0`.
    pub inverted: usize,
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "hexes     {}", self.hexes)?;
        writeln!(f, "J min/avg {:.4} / {:.4} ± {:.4}", self.j_min, self.j_avg, self.j_std)?;
        writeln!(f, "V min/avg {:.4} / {:.4} ± {:.4}", self.v_min, self.v_avg, self.v_std)?;
        writeln!(f, "d max/avg {:.3e} / {:.3e}", self.d_max, self.d_avg)?;
        write!(f, "inverted  {}", self.inverted)
    }
}

pub const DEFAULT_REPORT_SAMPLES: usize = 50_000;

/// Quality of `mesh` with `n_samples` Hausdorff samples per direction.
pub fn report_quality(mesh: &HexMesh, input: &TriSurface, n_samples: usize, seed: u64) -> crate::Result<QualityReport> {
    let tets = corner_tets(mesh.hexes());
    let per: Vec<(f64, f64)> = tets
        .par_iter()
        .map(|t| {
            let d = edge_matrix(mesh.vertices(), t);
            (scaled_jacobian(&d), d.determinant())
        })
        .collect();
    let sj: Vec<f64> = per.iter().map(|p| p.0).collect();
    let dets: Vec<f64> = per.iter().map(|p| p.1).collect();
    let mean_det = dets.iter().sum::<f64>() / dets.len().max(1) as f64;
    let v: Vec<f64> = dets.iter().map(|d| d / mean_det).collect();
    let (j_min, j_avg, j_std) = stats(&sj);
    let (v_min, v_avg, v_std) = stats(&v);
    let inverted = sj.chunks_exact(8).filter(|c| c.iter().any(|&s| s <= 0.0)).count();
    let boundary = mesh.boundary()?.triangulate();
    let h = hausdorff(&boundary, input, n_samples.max(1), seed)?;
    let diag = bbox_diagonal(&input.vertices);
    Ok(QualityReport {
        hexes: mesh.hexes().len(),
        j_min,
        j_avg,
        j_std,
        v_min,
        v_avg,
        v_std,
        d_max: h.max / diag,
        d_avg: h.avg / diag,
        inverted,
    })
}

/// Selection predicates for inspecting elements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementFilter {
    /// Hexes whose centroid lies on the back side `n · (c − p) ≤ 0`.
    Plane { point: Vec3, normal: Vec3 },
    /// Hexes whose minimum corner scaled Jacobian is below `threshold`.
    Quality { threshold: f64 },
}

/// Ids of the hexes selected by `filter`, ascending.
pub fn filter_elements(mesh: &HexMesh, filter: &ElementFilter) -> Vec<usize> {
    match *filter {
        ElementFilter::Plane { point, normal } => {
            (0..mesh.hexes().len()).filter(|&h| normal.dot(&(mesh.centroid(h) - point)) <= 0.0).collect()
        }
        ElementFilter::Quality { threshold } => hex_scaled_jacobians(mesh)
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s < threshold)
            .map(|(h, _)| h)
            .collect(),
    }
}
