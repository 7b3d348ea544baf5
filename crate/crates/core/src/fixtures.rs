//! Procedural meshes used by tests, benchmarks and the CLI demo inputs.

use std::collections::{BTreeMap, BTreeSet};

use crate::mesh::{HexMesh, TetMesh};
use crate::Vec3;

/// Kuhn subdivision of the unit cube into 6 tets sharing the `0–7` diagonal,
/// written with cube corners indexed by bits `x | y << 1 | z << 2`.
const KUHN_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Tet mesh of a set of unit lattice cells scaled by `size`. Conforming
/// because every cell uses the same Kuhn split.
pub fn tet_mesh_from_cells(cells: &BTreeSet<[i64; 3]>, size: f64) -> TetMesh {
    let mut index: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    let mut vertices = Vec::new();
    let mut tets = Vec::new();
    for c in cells {
        let corner = |bits: usize| [c[0] + (bits & 1) as i64, c[1] + ((bits >> 1) & 1) as i64, c[2] + ((bits >> 2) & 1) as i64];
        let mut ids = [0usize; 8];
        for (bits, id) in ids.iter_mut().enumerate() {
            let key = corner(bits);
            *id = *index.entry(key).or_insert_with(|| {
                vertices.push(Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) * size);
                vertices.len() - 1
            });
        }
        for t in KUHN_TETS {
            tets.push([ids[t[0]], ids[t[1]], ids[t[2]], ids[t[3]]]);
        }
    }
    TetMesh::new_reoriented(vertices, tets).expect("lattice tets are non-degenerate").0
}

/// `n³` cube of side `side`, centered at the origin.
pub fn cube_tet_mesh(n: usize, side: f64) -> TetMesh {
    let cells = (0..n as i64)
        .flat_map(|i| (0..n as i64).flat_map(move |j| (0..n as i64).map(move |k| [i, j, k])))
        .collect();
    let m = tet_mesh_from_cells(&cells, side / n as f64);
    let shift = Vec3::repeat(side / 2.0);
    let v = m.vertices().iter().map(|p| p - shift).collect();
    m.with_positions(v)
}

/// L-shaped prism: a `2n × 2n × n` block with the `n × n` quadrant at
/// `x, y ≥ n` removed, scaled to fit `side` and centered.
pub fn l_shape_tet_mesh(n: usize, side: f64) -> TetMesh {
    let n = n as i64;
    let mut cells = BTreeSet::new();
    for i in 0..2 * n {
        for j in 0..2 * n {
            if i >= n && j >= n {
                continue;
            }
            for k in 0..n {
                cells.insert([i, j, k]);
            }
        }
    }
    let h = side / (2 * n) as f64;
    let m = tet_mesh_from_cells(&cells, h);
    let shift = Vec3::new(side / 2.0, side / 2.0, side / 4.0);
    let v = m.vertices().iter().map(|p| p - shift).collect();
    m.with_positions(v)
}

/// Rotate every vertex about the z axis through the origin.
pub fn rotate_z(mesh: &TetMesh, angle: f64) -> TetMesh {
    let r = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), angle);
    mesh.with_positions(mesh.vertices().iter().map(|p| r * p).collect())
}

/// `nx × ny × nz` block of hexes with edge `size`, min corner at the origin.
pub fn hex_block(nx: usize, ny: usize, nz: usize, size: f64) -> HexMesh {
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Vec3::new(i as f64, j as f64, k as f64) * size);
            }
        }
    }
    let mut hexes = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                hexes.push([
                    id(i, j, k),
                    id(i + 1, j, k),
                    id(i + 1, j + 1, k),
                    id(i, j + 1, k),
                    id(i, j, k + 1),
                    id(i + 1, j, k + 1),
                    id(i + 1, j + 1, k + 1),
                    id(i, j + 1, k + 1),
                ]);
            }
        }
    }
    HexMesh::new(vertices, hexes).expect("block connectivity is valid")
}

/// Icosphere triangle soup: `subdivisions` rounds of 4-way splits projected
/// onto the sphere of radius `radius`. Returns `(vertices, faces)`, outward.
pub fn icosphere(subdivisions: usize, radius: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(f.len() * 4);
        for tri in &f {
            let mut m = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                m[k] = *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a] + v[b]) / 2.0).normalize());
                    v.len() - 1
                });
            }
            next.push([tri[0], m[0], m[2]]);
            next.push([tri[1], m[1], m[0]]);
            next.push([tri[2], m[2], m[1]]);
            next.push([m[0], m[1], m[2]]);
        }
        f = next;
    }
    (v.into_iter().map(|p| p * radius).collect(), f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_mesh_is_valid_and_centered() {
        let m = cube_tet_mesh(3, 1.0);
        assert_eq!(m.tets().len(), 27 * 6);
        assert_eq!(m.vertices().len(), 64);
        let (lo, hi) = m.bounding_box();
        assert!((lo + Vec3::repeat(0.5)).norm() < 1e-15 && (hi - Vec3::repeat(0.5)).norm() < 1e-15);
        assert!((m.measures().unwrap().total_volume - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l_shape_volume() {
        let m = l_shape_tet_mesh(2, 1.0);
        // 3/4 of a 1 × 1 × 0.5 slab
        assert!((m.measures().unwrap().total_volume - 0.375).abs() < 1e-12);
    }

    #[test]
    fn icosphere_is_outward() {
        let (v, f) = icosphere(2, 1.0);
        for t in &f {
            let n = (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]]));
            assert!(n.dot(&v[t[0]]) > 0.0);
        }
    }
}
