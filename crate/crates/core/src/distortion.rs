//! Barrier distortion energy on per-tet Jacobians.
//!
//! Each tet contributes
//! `λ_angle · tr(JᵀJ) / R_ε(det J)^{2/3} + λ_vol · (det² J + 1) / R_ε(det J)`,
//! which blows up as `det J → 0` from above and keeps growing for inverted
//! tets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::TetFrames;
use crate::{Mat3, Vec3};

/// `R_ε(x) = (x + √(x² + ε²)) / 2`, evaluated without cancellation for
/// negative `x`.
#[inline]
pub fn regularizer(x: f64, eps: f64) -> f64 {
    let s = x.hypot(eps);
    if x >= 0.0 {
        0.5 * (x + s)
    } else {
        0.5 * eps * eps / (s - x)
    }
}

/// `R_ε'(x) = R_ε(x) / √(x² + ε²)`.
#[inline]
pub fn regularizer_derivative(x: f64, eps: f64) -> f64 {
    regularizer(x, eps) / x.hypot(eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierWeights {
    pub angle: f64,
    pub vol: f64,
    pub eps: f64,
}

impl Default for BarrierWeights {
    fn default() -> Self {
        Self { angle: 1.0, vol: 1.0, eps: 1e-3 }
    }
}

/// `∂ det J / ∂J`.
#[inline]
pub fn cofactor(j: &Mat3) -> Mat3 {
    let (a, b, c) = (j.column(0), j.column(1), j.column(2));
    Mat3::from_columns(&[b.cross(&c), c.cross(&a), a.cross(&b)])
}

/// Per-tet summand.
#[inline]
pub fn tet_energy(j: &Mat3, w: &BarrierWeights) -> f64 {
    let det = j.determinant();
    let r = regularizer(det, w.eps);
    w.angle * j.norm_squared() / r.powf(2.0 / 3.0) + w.vol * (det * det + 1.0) / r
}

/// Per-tet summand and its gradient with respect to `J`.
#[inline]
pub fn tet_energy_grad(j: &Mat3, w: &BarrierWeights) -> (f64, Mat3) {
    let det = j.determinant();
    let r = regularizer(det, w.eps);
    let dr = regularizer_derivative(det, w.eps);
    let tr = j.norm_squared();
    let r23 = r.powf(2.0 / 3.0);
    let angle = tr / r23;
    let vol = (det * det + 1.0) / r;
    let value = w.angle * angle + w.vol * vol;
    let d_det = w.angle * (-2.0 / 3.0) * angle / r * dr + w.vol * (2.0 * det / r - vol / r * dr);
    let grad = j * (2.0 * w.angle / r23) + cofactor(j) * d_det;
    (value, grad)
}

/// Weighted barrier energy `Σ_t c_t · e_t` over `frames`, with `c_t = 1`
/// when `coeffs` is `None`. Returns the value and a gradient per vertex of
/// `positions`.
pub fn barrier_energy(
    frames: &TetFrames,
    positions: &[Vec3],
    coeffs: Option<&[f64]>,
    w: &BarrierWeights,
) -> (f64, Vec<Vec3>) {
    let per_tet: Vec<(f64, [Vec3; 4])> = (0..frames.len())
        .into_par_iter()
        .map(|t| {
            let c = coeffs.map_or(1.0, |c| c[t]);
            let (e, dj) = tet_energy_grad(&frames.jacobian(t, positions), w);
            (c * e, frames.scatter(t, &(dj * c)))
        })
        .collect();
    accumulate(frames, positions.len(), &per_tet)
}

/// Smooth maximum `log Σ_t exp(s_t)` of per-tet values `s_t` with gradients
/// `∂s_t/∂J_t` supplied by `term`. Evaluated with a max shift.
pub fn log_sum_exp<F>(frames: &TetFrames, positions: &[Vec3], term: F) -> (f64, Vec<Vec3>)
where
    F: Fn(&Mat3) -> (f64, Mat3) + Sync,
{
    let terms: Vec<(f64, Mat3)> = (0..frames.len()).into_par_iter().map(|t| term(&frames.jacobian(t, positions))).collect();
    let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = terms.iter().map(|t| (t.0 - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let value = max + sum.ln();
    let per_tet: Vec<(f64, [Vec3; 4])> = (0..frames.len())
        .into_par_iter()
        .map(|t| (0.0, frames.scatter(t, &(terms[t].1 * (weights[t] / sum)))))
        .collect();
    let (_, grad) = accumulate(frames, positions.len(), &per_tet);
    (value, grad)
}

/// Fixed-order sum and scatter of per-tet contributions, so results do not
/// depend on the thread count.
pub(crate) fn accumulate(frames: &TetFrames, n: usize, per_tet: &[(f64, [Vec3; 4])]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); n];
    let mut value = 0.0;
    for (t, (e, g)) in per_tet.iter().enumerate() {
        value += e;
        for (k, &v) in frames.tets[t].iter().enumerate() {
            grad[v] += g[k];
        }
    }
    (value, grad)
}
