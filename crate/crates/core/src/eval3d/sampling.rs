use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation(
                "mesh has non-finite vertex coordinates".into(),
            ));
        }
        if let Some((t, tri)) = triangles
            .iter()
            .enumerate()
            .find(|(_, t)| t.iter().any(|&i| i >= vertices.len()))
        {
            return Err(Error::Validation(format!(
                "triangle {t} references vertex {} but the mesh has {}",
                tri.iter().max().unwrap(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        self.triangles[t].map(|i| Vector3::from(self.vertices[i]))
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshSample {
    pub point: [f64; 3],
    pub triangle: usize,
    pub barycentric: [f64; 3],
}

/// Area-weighted uniform samples with their triangle and barycentric
/// coordinates.
pub fn sample_mesh_detailed(
    mesh: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MeshSample>> {
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.area(t);
        cumulative.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Contract("mesh has zero total area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            // First triangle whose cumulative area exceeds x; zero-area
            // triangles can never be picked.
            let t = cumulative
                .partition_point(|&c| c <= x)
                .min(cumulative.len() - 1);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let w = [1.0 - s, s * (1.0 - r2), s * r2];
            let [a, b, c] = mesh.corners(t);
            let p = a * w[0] + b * w[1] + c * w[2];
            MeshSample {
                point: [p.x, p.y, p.z],
                triangle: t,
                barycentric: w,
            }
        })
        .collect();
    Ok(samples)
}

/// `n_samples` points drawn uniformly over the mesh surface.
pub fn sample_mesh(mesh: &TriangleMesh, n_samples: usize, seed: u64) -> Result<PointCloud> {
    let samples = sample_mesh_detailed(mesh, n_samples, seed)?;
    PointCloud::new(samples.into_iter().map(|s| s.point).collect())
}
