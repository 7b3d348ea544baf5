use std::sync::atomic::AtomicBool;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnchorSet, PolyCube, PolycubeError};
use crate::optim::{self, AdamConfig, AdamState, Control, EnergyReport, LoopOutcome, StepInfo};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolycubeWeights {
    /// Discrepancy term on anchors outside the mesh.
    pub plus: f64,
    /// Gap-closing term on anchors inside the mesh.
    pub minus: f64,
}

impl Default for PolycubeWeights {
    fn default() -> Self {
        Self { plus: 1.0, minus: 1.0 }
    }
}

/// Energy terms and per-cuboid gradients `(∂/∂c, ∂/∂h)`. Locked cuboids get
/// zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct PolycubeEnergy {
    pub plus: f64,
    pub minus: f64,
    pub total: f64,
    pub grad: Vec<(Vec3, Vec3)>,
}

/// `λ₊ Σ_{p outside} (d_M(p) − d̃(p))² + λ₋ Σ_{p inside, d̃(p) ≥ 0} d̃(p)²`
/// where `d̃` is the min-SDF of the cuboids.
pub fn energy_polycube(pc: &PolyCube, anchors: &AnchorSet, w: &PolycubeWeights) -> Result<PolycubeEnergy, PolycubeError> {
    if pc.is_empty() {
        return Err(PolycubeError::Empty);
    }
    // (E₊ term, E₋ term, argmin cuboid, dE/dd̃ · ∂d̃/∂c, ... ∂d̃/∂h)
    let per_anchor: Vec<(f64, f64, usize, Vec3, Vec3)> = (0..anchors.len())
        .into_par_iter()
        .map(|a| {
            let (i, g) = pc.min_sdf_gradient(&anchors.points[a]).expect("non-empty");
            let (ep, em, de) = if anchors.inside[a] {
                if g.value >= 0.0 {
                    (0.0, g.value * g.value, 2.0 * w.minus * g.value)
                } else {
                    (0.0, 0.0, 0.0)
                }
            } else {
                let r = anchors.distances[a] - g.value;
                (r * r, 0.0, -2.0 * w.plus * r)
            };
            (ep, em, i, g.dc * de, g.dh * de)
        })
        .collect();
    let mut grad = vec![(Vec3::zeros(), Vec3::zeros()); pc.len()];
    let (mut plus, mut minus) = (0.0, 0.0);
    for (ep, em, i, dc, dh) in per_anchor {
        plus += ep;
        minus += em;
        if !pc.cuboids[i].locked {
            grad[i].0 += dc;
            grad[i].1 += dh;
        }
    }
    Ok(PolycubeEnergy { plus, minus, total: w.plus * plus + w.minus * minus, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub weights: PolycubeWeights,
    /// Half extents are kept at or above this fraction of the mesh bounding
    /// box diagonal.
    pub min_half_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-3, weights: PolycubeWeights::default(), min_half_fraction: 1e-3 }
    }
}

/// Parameter vector `[c, h]` of every unlocked cuboid, in order.
fn pack(pc: &PolyCube) -> Vec<f64> {
    pc.cuboids.iter().filter(|c| !c.locked).flat_map(|c| c.center.iter().chain(c.half.iter()).copied().collect::<Vec<_>>()).collect()
}

fn unpack(pc: &mut PolyCube, x: &[f64]) {
    for (c, p) in pc.cuboids.iter_mut().filter(|c| !c.locked).zip(x.chunks_exact(6)) {
        c.center = Vec3::new(p[0], p[1], p[2]);
        c.half = Vec3::new(p[3], p[4], p[5]);
    }
}

/// Optimize the unlocked cuboids against cached `anchors` with a fresh Adam
/// state. `scale` is the bounding box diagonal of the deformed mesh.
pub fn fit_polycube<C>(
    pc: &mut PolyCube,
    anchors: &AnchorSet,
    scale: f64,
    opts: &FitOptions,
    cancel: Option<&AtomicBool>,
    callback: C,
) -> crate::Result<LoopOutcome>
where
    C: FnMut(&StepInfo) -> Control,
{
    if pc.is_empty() {
        return Err(PolycubeError::Empty.into());
    }
    let floor = opts.min_half_fraction * scale;
    let mut x = pack(pc);
    let mut adam = AdamState::new(x.len(), AdamConfig::with_lr(opts.lr));
    let mut work = pc.clone();
    let out = optim::run_loop(
        &mut adam,
        &mut x,
        opts.steps,
        |x| {
            unpack(&mut work, x);
            let e = energy_polycube(&work, anchors, &opts.weights)?;
            let g = work
                .cuboids
                .iter()
                .zip(&e.grad)
                .filter(|(c, _)| !c.locked)
                .flat_map(|(_, (dc, dh))| [dc.x, dc.y, dc.z, dh.x, dh.y, dh.z])
                .collect();
            Ok((EnergyReport::from_terms(0, [("plus", opts.weights.plus * e.plus), ("minus", opts.weights.minus * e.minus)]), g))
        },
        |x: &mut [f64]| {
            for p in x.chunks_exact_mut(6) {
                for h in &mut p[3..] {
                    *h = h.max(floor);
                }
            }
            true
        },
        cancel,
        callback,
    )?;
    unpack(pc, &x);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::geom::TetIndex;
    use crate::polycube::{make_anchors, Cuboid};
    use rand::{Rng, SeedableRng};

    fn unit_box() -> PolyCube {
        PolyCube::new(vec![Cuboid::new(Vec3::zeros(), Vec3::repeat(0.5))])
    }

    #[test]
    fn exact_fit_has_zero_energy() {
        let index = TetIndex::new(&fixtures::cube_tet_mesh(2, 1.0)).unwrap();
        let outside = make_anchors(&index, 5, 0, 0.0, 0).unwrap();
        let outside = AnchorSet::from_points(outside.points.into_iter().filter(|p| p.amax() > 0.5 + 1e-9).collect(), &index);
        let e = energy_polycube(&unit_box(), &outside, &PolycubeWeights::default()).unwrap();
        assert!(e.plus.abs() < 1e-24, "{}", e.plus);
        let inside = AnchorSet::from_points(vec![Vec3::zeros(), Vec3::new(0.2, -0.3, 0.1)], &index);
        let e = energy_polycube(&unit_box(), &inside, &PolycubeWeights::default()).unwrap();
        assert_eq!(e.minus, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let index = TetIndex::new(&fixtures::l_shape_tet_mesh(2, 1.0)).unwrap();
        let anchors = make_anchors(&index, 6, 100, 0.05, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = PolycubeWeights { plus: 0.7, minus: 1.3 };
        for _ in 0..10 {
            let pc = PolyCube::new(
                (0..3)
                    .map(|_| {
                        Cuboid::new(
                            Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                            Vec3::from_fn(|_, _| rng.random_range(0.1..0.5)),
                        )
                    })
                    .collect(),
            );
            let x0 = pack(&pc);
            let check = optim::check_gradient(
                |x| {
                    let mut p = pc.clone();
                    unpack(&mut p, x);
                    let e = energy_polycube(&p, &anchors, &w).unwrap();
                    (e.total, e.grad.iter().flat_map(|(c, h)| [c.x, c.y, c.z, h.x, h.y, h.z]).collect())
                },
                &x0,
                x0.len(),
                1e-7,
                0,
            );
            assert!(check.max_rel_error <= 1e-4, "{check:?}");
        }
    }

    #[test]
    fn locked_cuboids_get_no_gradient_and_do_not_move() {
        let index = TetIndex::new(&fixtures::cube_tet_mesh(2, 1.0)).unwrap();
        let anchors = make_anchors(&index, 6, 0, 0.0, 0).unwrap();
        let mut pc = PolyCube::new(vec![
            Cuboid { locked: true, ..Cuboid::new(Vec3::new(0.1, 0.0, 0.0), Vec3::repeat(0.3)) },
            Cuboid::new(Vec3::new(-0.1, 0.0, 0.0), Vec3::repeat(0.3)),
        ]);
        let e = energy_polycube(&pc, &anchors, &PolycubeWeights::default()).unwrap();
        assert_eq!(e.grad[0], (Vec3::zeros(), Vec3::zeros()));
        assert!(e.grad[1].1.norm() > 0.0);
        let before = pc.cuboids[0];
        let out = fit_polycube(&mut pc, &anchors, 3f64.sqrt(), &FitOptions { steps: 50, ..Default::default() }, None, |_| Control::Continue)
            .unwrap();
        assert_eq!(pc.cuboids[0], before);
        assert!(out.history.last().unwrap().total < out.history[0].total);
    }

    #[test]
    fn fit_grows_small_box_toward_mesh() {
        let index = TetIndex::new(&fixtures::cube_tet_mesh(2, 1.0)).unwrap();
        let anchors = make_anchors(&index, 8, 200, 0.02, 1).unwrap();
        let mut pc = PolyCube::new(vec![Cuboid::new(Vec3::new(0.05, 0.0, 0.0), Vec3::repeat(0.3))]);
        let opts = FitOptions { steps: 400, lr: 1e-2, ..Default::default() };
        fit_polycube(&mut pc, &anchors, 3f64.sqrt(), &opts, None, |_| Control::Continue).unwrap();
        let c = pc.cuboids[0];
        assert!((c.half - Vec3::repeat(0.5)).amax() < 0.03, "{c:?}");
        assert!(c.center.amax() < 0.03);
    }

    #[test]
    fn half_extent_floor_holds() {
        let index = TetIndex::new(&fixtures::cube_tet_mesh(2, 1.0)).unwrap();
        // anchors all outside: the energy pushes the box to shrink
        let anchors = AnchorSet::from_points(vec![Vec3::new(0.9, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)], &index);
        let mut pc = PolyCube::new(vec![Cuboid::new(Vec3::new(0.9, 0.0, 0.0), Vec3::repeat(0.01))]);
        let opts = FitOptions { steps: 200, lr: 1e-2, min_half_fraction: 1e-2, ..Default::default() };
        fit_polycube(&mut pc, &anchors, 1.0, &opts, None, |_| Control::Continue).unwrap();
        assert!(pc.cuboids[0].half.iter().all(|&h| h >= 1e-2));
    }
}
