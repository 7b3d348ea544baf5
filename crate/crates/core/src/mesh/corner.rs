use super::{HexMesh, MeshError, TetFrames};

/// Local `(x, y, z)` lattice coordinates of the 8 VTK hex corners.
pub(crate) const CORNER_LOCAL: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// For each corner, its three edge-adjacent corners ordered so that the
/// frame `(n0 - c, n1 - c, n2 - c)` is right-handed on an axis-aligned cube.
pub const HEX_CORNER_NEIGHBORS: [[usize; 3]; 8] = [
    [1, 3, 4],
    [2, 0, 5],
    [3, 1, 6],
    [0, 2, 7],
    [7, 5, 0],
    [4, 6, 1],
    [5, 7, 2],
    [6, 4, 3],
];

pub const HEX_EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CornerTet {
    pub hex: usize,
    pub corner: u8,
    /// Corner vertex first, then its three neighbors.
    pub vertices: [usize; 4],
}

/// The 8 corner tetrahedra of every hex, plus their rest frames taken from
/// the mesh they were built from.
#[derive(Clone, Debug)]
pub struct CornerTetSet {
    pub tets: Vec<CornerTet>,
    pub frames: TetFrames,
}

impl CornerTetSet {
    /// Corner tets of `mesh`, using its current positions as the rest shape.
    pub fn new(mesh: &HexMesh) -> Result<Self, MeshError> {
        let tets: Vec<CornerTet> = mesh
            .hexes()
            .iter()
            .enumerate()
            .flat_map(|(h, hex)| {
                (0..8).map(move |c| {
                    let [n0, n1, n2] = HEX_CORNER_NEIGHBORS[c];
                    CornerTet { hex: h, corner: c as u8, vertices: [hex[c], hex[n0], hex[n1], hex[n2]] }
                })
            })
            .collect();
        let frames = TetFrames::new(mesh.vertices(), tets.iter().map(|t| t.vertices).collect())?;
        Ok(Self { tets, frames })
    }

    pub fn len(&self) -> usize {
        self.tets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }
}
