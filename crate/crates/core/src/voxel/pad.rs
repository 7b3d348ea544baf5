use nalgebra::{DMatrix, DVector};

use super::VoxelError;
use crate::mesh::{tet_signed_volume, HexMesh, HEX_CORNER_NEIGHBORS};
use crate::Vec3;

pub const MAX_PAD_HALVINGS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Padding {
    pub mesh: HexMesh,
    /// Offset actually used, in model units.
    pub offset: f64,
    /// Number of original vertices; vertices from here on are the new
    /// boundary.
    pub original_vertices: usize,
}

/// Unit offset direction `d` of a boundary vertex with `n_i · d = 1` for each
/// distinct outward face normal `n_i` (least squares when overdetermined), so
/// every incident face plane moves by the same distance.
fn miter(normals: &[Vec3]) -> Vec3 {
    let mut distinct: Vec<Vec3> = Vec::new();
    for n in normals {
        if !distinct.iter().any(|d| d.dot(n) > 1.0 - 1e-9) {
            distinct.push(*n);
        }
    }
    let a = DMatrix::from_fn(distinct.len(), 3, |r, c| distinct[r][c]);
    let b = DVector::from_element(distinct.len(), 1.0);
    let solved = a.svd(true, true).solve(&b, 1e-9).ok().map(|x| Vec3::new(x[0], x[1], x[2]));
    match solved {
        Some(d) if d.iter().all(|x| x.is_finite()) && d.norm() > 1e-9 => d,
        _ => normals.iter().sum::<Vec3>().try_normalize(1e-12).unwrap_or_else(Vec3::zeros),
    }
}

fn corner_tets_positive(vertices: &[Vec3], hexes: &[[usize; 8]]) -> bool {
    hexes.iter().all(|h| {
        (0..8).all(|c| {
            let [a, b, d] = HEX_CORNER_NEIGHBORS[c];
            tet_signed_volume(&vertices[h[c]], &vertices[h[a]], &vertices[h[b]], &vertices[h[d]]) > 0.0
        })
    })
}

/// One layer of padding: every boundary vertex is pulled inward by
/// `0.5 · cell_size` along its mitered inward direction, a copy stays at the
/// original position, and every boundary quad becomes the bottom of a new
/// hex whose top is the copied quad. The offset is halved, up to
/// [`MAX_PAD_HALVINGS`] times, until all corner tets are positive.
pub fn global_pad(mesh: &HexMesh, cell_size: f64) -> Result<Padding, VoxelError> {
    let surface = mesh.boundary()?;
    let mut incident: Vec<Vec<Vec3>> = vec![Vec::new(); surface.vertices.len()];
    for (q, f) in surface.faces.iter().enumerate() {
        let n = surface.quad_normal(q).normalize();
        for &v in f {
            incident[v].push(n);
        }
    }
    let directions: Vec<Vec3> = incident.iter().map(|n| miter(n)).collect();

    let n_orig = mesh.vertices().len();
    let mut hexes = mesh.hexes().to_vec();
    for f in &surface.faces {
        let bottom = f.map(|s| surface.volume_index[s]);
        let top = f.map(|s| n_orig + s);
        hexes.push([bottom[0], bottom[1], bottom[2], bottom[3], top[0], top[1], top[2], top[3]]);
    }

    let mut offset = 0.5 * cell_size;
    for _ in 0..=MAX_PAD_HALVINGS {
        let mut vertices = mesh.vertices().to_vec();
        vertices.extend_from_slice(&surface.vertices);
        for (s, &v) in surface.volume_index.iter().enumerate() {
            vertices[v] -= directions[s] * offset;
        }
        if corner_tets_positive(&vertices, &hexes) {
            return Ok(Padding { mesh: HexMesh::new(vertices, hexes)?, offset, original_vertices: n_orig });
        }
        log::info!("padding offset {offset} inverts elements; halving");
        offset *= 0.5;
    }
    Err(VoxelError::PaddingInverted(MAX_PAD_HALVINGS))
}
