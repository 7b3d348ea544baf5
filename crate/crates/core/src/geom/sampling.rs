use rand::Rng;

use super::GeomError;
use crate::mesh::triangle_area;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub face: usize,
    pub weights: [f64; 3],
}

/// Area-uniform sampler over a triangle set.
#[derive(Clone, Debug)]
pub struct SurfaceSampler {
    faces: Vec<[usize; 3]>,
    cdf: Vec<f64>,
}

impl SurfaceSampler {
    pub fn new(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Self, GeomError> {
        if faces.is_empty() {
            return Err(GeomError::EmptySurface);
        }
        let mut acc = 0.0;
        let cdf: Vec<f64> = faces
            .iter()
            .map(|f| {
                acc += triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(GeomError::AllDegenerate);
        }
        Ok(Self { faces: faces.to_vec(), cdf })
    }

    pub fn sample<R: Rng>(&self, vertices: &[Vec3], n: usize, rng: &mut R) -> Result<Vec<SurfaceSample>, GeomError> {
        if n == 0 {
            return Err(GeomError::NoSamples);
        }
        let total = *self.cdf.last().expect("non-empty");
        Ok((0..n)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let face = self.cdf.partition_point(|&c| c <= u).min(self.faces.len() - 1);
                let s = rng.random::<f64>().sqrt();
                let r = rng.random::<f64>();
                let weights = [1.0 - s, s * (1.0 - r), s * r];
                let f = self.faces[face];
                let point = vertices[f[0]] * weights[0] + vertices[f[1]] * weights[1] + vertices[f[2]] * weights[2];
                SurfaceSample { point, face, weights }
            })
            .collect())
    }
}

/// `n` area-uniform samples, deterministic in `seed`.
pub fn sample_surface(vertices: &[Vec3], faces: &[[usize; 3]], n: usize, seed: u64) -> Result<Vec<SurfaceSample>, GeomError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    SurfaceSampler::new(vertices, faces)?.sample(vertices, n, &mut rng)
}
