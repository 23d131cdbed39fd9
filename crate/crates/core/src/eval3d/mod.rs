//! Point-cloud reconstruction scoring and the tools that prepare its inputs.

mod fusion;
mod kdtree;
mod metrics;
mod mmd;
mod sampling;

pub use fusion::{fuse_depthmaps, FusionParams};
pub use kdtree::KdTree;
pub use metrics::{
    chamfer_components, dtu_scores, fscore, nearest_distances, precision_recall_fscore, Chamfer,
    DtuScores, Metric, ScoreReport, DEFAULT_DTU_MAX_DIST,
};
pub use mmd::{median_pairwise_distance, mmd_rbf, Bandwidth};
pub use sampling::{sample_mesh, sample_mesh_detailed, MeshSample, TriangleMesh};

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    /// Rejects non-finite coordinates. An empty cloud is allowed here;
    /// scoring operations reject it.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Validation(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract(format!("{what} point cloud is empty")));
        }
        Ok(())
    }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
