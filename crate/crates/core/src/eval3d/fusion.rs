use nalgebra::Point3;
use rayon::prelude::*;

use super::PointCloud;
use crate::clustering::ViewRef;
use crate::geometry::{project, unproject};
use crate::{Error, Result};

/// Geometric-consistency thresholds for depth-map fusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionParams {
    /// Maximum forward-backward reprojection error in pixels (strict).
    pub px_thresh: f64,
    /// Maximum relative depth disagreement (strict).
    pub depth_thresh: f64,
    /// Views that must see a point, counting the view it comes from.
    pub min_views: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            px_thresh: 1.0,
            depth_thresh: 0.01,
            min_views: 3,
        }
    }
}

/// Back-projection of `p` (seen in view `i` at `pixel` with depth `d`)
/// through view `j`'s depth, if the forward-backward check passes.
fn consistent_point(
    p: &Point3<f64>,
    pixel: (f64, f64),
    d: f64,
    own: &ViewRef<'_>,
    other: &ViewRef<'_>,
    params: &FusionParams,
) -> Option<Point3<f64>> {
    let proj = project(p, other.camera)?;
    let (u, v) = (proj.u.round(), proj.v.round());
    let (w, h) = other.depth.dims();
    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
        return None;
    }
    let dj = other.depth.get(u as usize, v as usize)?;
    let q = other.camera.lift(u, v, dj);
    let back = project(&q, own.camera)?;
    let err = ((back.u - pixel.0).powi(2) + (back.v - pixel.1).powi(2)).sqrt();
    let rel = (back.depth - d).abs() / d;
    (err < params.px_thresh && rel < params.depth_thresh).then_some(q)
}

/// Fuses depth maps into one cloud, keeping a pixel's point when at least
/// `min_views - 1` other views agree with it. Kept points are averaged with
/// the agreeing back-projections. `min_views = 1` returns the plain union of
/// all unprojections.
///
/// Output order: by view, then row-major pixel order.
pub fn fuse_depthmaps(views: &[ViewRef<'_>], params: &FusionParams) -> Result<PointCloud> {
    if params.min_views == 0 {
        return Err(Error::Contract("min_views must be at least 1".into()));
    }
    if views.len() < params.min_views {
        return Err(Error::Contract(format!(
            "fusion with min_views = {} needs at least that many views, got {}",
            params.min_views,
            views.len()
        )));
    }
    if !(params.px_thresh > 0.0 && params.depth_thresh > 0.0) {
        return Err(Error::Contract("fusion thresholds must be positive".into()));
    }
    let per_view: Vec<Vec<[f64; 3]>> = views
        .par_iter()
        .enumerate()
        .map(|(i, view)| {
            unproject(view.depth, view.camera)
                .into_iter()
                .filter_map(|sp| {
                    let p = sp.position;
                    if params.min_views == 1 {
                        return Some([p.x, p.y, p.z]);
                    }
                    let pixel = (sp.pixel.u as f64, sp.pixel.v as f64);
                    let d = view
                        .depth
                        .get(sp.pixel.u, sp.pixel.v)
                        .expect("unprojected pixels are valid");
                    let agreeing: Vec<Point3<f64>> = views
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .filter_map(|(_, other)| {
                            consistent_point(&p, pixel, d, view, other, params)
                        })
                        .collect();
                    if agreeing.len() + 1 < params.min_views {
                        return None;
                    }
                    let sum = agreeing.iter().fold(p.coords, |acc, q| acc + q.coords);
                    let mean = sum / (agreeing.len() + 1) as f64;
                    Some([mean.x, mean.y, mean.z])
                })
                .collect()
        })
        .collect();
    PointCloud::new(per_view.into_iter().flatten().collect())
}
