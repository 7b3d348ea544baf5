use std::collections::{BTreeMap, HashMap};

use super::{triangle_area, MeshError};
use crate::Vec3;

/// Outward faces of a positively oriented tet, by local vertex index.
pub const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

/// Outward faces of a VTK-ordered hex.
pub const HEX_FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
];

/// Boundary surface of a volume mesh. Faces index the surface-local vertex
/// list; `volume_index[i]` is the volume vertex behind surface vertex `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh<const N: usize> {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; N]>,
    pub volume_index: Vec<usize>,
}

pub type TriSurface = SurfaceMesh<3>;
pub type QuadSurface = SurfaceMesh<4>;

pub(super) fn extract<const C: usize, const N: usize>(
    vertices: &[Vec3],
    cells: &[[usize; C]],
    face_table: &[[usize; N]],
) -> Result<SurfaceMesh<N>, MeshError> {
    // sorted vertex key -> (count, first oriented face)
    let mut seen: HashMap<[usize; N], (usize, [usize; N])> = HashMap::new();
    let mut order: Vec<[usize; N]> = Vec::new();
    for cell in cells {
        for local in face_table {
            let face: [usize; N] = std::array::from_fn(|k| cell[local[k]]);
            let mut key = face;
            key.sort_unstable();
            let entry = seen.entry(key).or_insert_with(|| {
                order.push(key);
                (0, face)
            });
            entry.0 += 1;
        }
    }

    let mut faces = Vec::new();
    for key in &order {
        let (count, face) = seen[key];
        match count {
            1 => faces.push(face),
            2 => {}
            _ => return Err(MeshError::NonManifoldFace { face: key.to_vec(), count }),
        }
    }

    let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for f in &faces {
        for k in 0..N {
            let (a, b) = (f[k], f[(k + 1) % N]);
            *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    if let Some((&(a, b), &count)) = edge_count.iter().find(|(_, &c)| c != 2) {
        return Err(MeshError::NonManifoldEdge { a, b, count });
    }

    let mut volume_index: Vec<usize> = faces.iter().flatten().copied().collect();
    volume_index.sort_unstable();
    volume_index.dedup();
    let local: HashMap<usize, usize> =
        volume_index.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let faces = faces
        .into_iter()
        .map(|f| std::array::from_fn(|k| local[&f[k]]))
        .collect();
    Ok(SurfaceMesh {
        vertices: volume_index.iter().map(|&v| vertices[v]).collect(),
        faces,
        volume_index,
    })
}

impl<const N: usize> SurfaceMesh<N> {
    /// Refresh surface vertex positions from volume vertex positions.
    pub fn update_from_volume(&mut self, volume_positions: &[Vec3]) {
        for (p, &v) in self.vertices.iter_mut().zip(&self.volume_index) {
            *p = volume_positions[v];
        }
    }

    /// Copy with surface positions taken from `volume_positions`.
    pub fn with_volume_positions(&self, volume_positions: &[Vec3]) -> Self {
        let mut s = self.clone();
        s.update_from_volume(volume_positions);
        s
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| (0..N).map(move |k| (f[k].min(f[(k + 1) % N]), f[k].max(f[(k + 1) % N]))))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Sorted 1-ring neighbors of every surface vertex along face edges.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut rings = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            rings[a].push(b);
            rings[b].push(a);
        }
        for r in &mut rings {
            r.sort_unstable();
        }
        rings
    }

    /// Sum of fan-triangulated face areas.
    pub fn total_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| (1..N - 1).map(|k| triangle_area(&self.vertices[f[0]], &self.vertices[f[k]], &self.vertices[f[k + 1]])).sum::<f64>())
            .sum()
    }
}

impl SurfaceMesh<3> {
    pub fn face_areas(&self) -> Vec<f64> {
        self.faces
            .iter()
            .map(|f| triangle_area(&self.vertices[f[0]], &self.vertices[f[1]], &self.vertices[f[2]]))
            .collect()
    }

    /// Pairs of face ids sharing an edge, one pair per interior surface edge.
    pub fn adjacent_face_pairs(&self) -> Vec<(usize, usize)> {
        let mut by_edge: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                by_edge.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        by_edge
            .values()
            .filter(|fs| fs.len() == 2)
            .map(|fs| (fs[0].min(fs[1]), fs[0].max(fs[1])))
            .collect()
    }
}

impl SurfaceMesh<4> {
    /// Areas of the two triangles `(0 1 2)` and `(0 2 3)` of each quad.
    pub fn face_areas(&self) -> Vec<f64> {
        self.faces
            .iter()
            .map(|f| {
                let p = |k: usize| &self.vertices[f[k]];
                triangle_area(p(0), p(1), p(2)) + triangle_area(p(0), p(2), p(3))
            })
            .collect()
    }

    /// Split each quad along its `0–2` diagonal. Vertex list is shared.
    pub fn triangulate(&self) -> TriSurface {
        let faces = self
            .faces
            .iter()
            .flat_map(|f| [[f[0], f[1], f[2]], [f[0], f[2], f[3]]])
            .collect();
        SurfaceMesh { vertices: self.vertices.clone(), faces, volume_index: self.volume_index.clone() }
    }

    /// Outward (non-normalized) normal of quad `q`: the sum of its two
    /// triangle normals.
    pub fn quad_normal(&self, q: usize) -> Vec3 {
        let f = self.faces[q];
        let p = |k: usize| self.vertices[f[k]];
        (p(2) - p(0)).cross(&(p(3) - p(1)))
    }
}
