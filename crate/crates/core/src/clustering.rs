//! Multi-view point fusion, seeded K-Means and per-view cluster maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{subsampled_dims, unproject, Camera, DepthMap, Pixel};
use crate::{Error, Result};

/// Cluster count used when none is configured.
pub const DEFAULT_K: usize = 8;
pub const MAX_ITERATIONS: usize = 100;
/// Convergence when the largest centroid move drops below this fraction of
/// the bounding-box diagonal.
pub const CONVERGENCE_FRACTION: f64 = 1e-6;

/// Borrowed depth and camera of one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewRef<'a> {
    pub depth: &'a DepthMap,
    pub camera: &'a Camera,
}

/// Points from every view, tagged with their origin.
///
/// `view_tag` is 0 for the reference view and `v >= 1` for source views;
/// `label` is -1 until the cloud is clustered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<[f64; 3]>,
    pub view_tag: Vec<usize>,
    pub pixel: Vec<Pixel>,
    pub label: Vec<i32>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Unprojects the reference and every source view and concatenates them.
pub fn fuse_views(reference: ViewRef<'_>, sources: &[ViewRef<'_>]) -> Result<LabeledCloud> {
    if sources.is_empty() {
        return Err(Error::Contract(
            "fusion needs at least one source view".into(),
        ));
    }
    let mut cloud = LabeledCloud::default();
    for (tag, view) in std::iter::once(&reference).chain(sources).enumerate() {
        for sp in unproject(view.depth, view.camera) {
            cloud
                .points
                .push([sp.position.x, sp.position.y, sp.position.z]);
            cloud.view_tag.push(tag);
            cloud.pixel.push(sp.pixel);
            cloud.label.push(-1);
        }
    }
    Ok(cloud)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    pub iterations: usize,
    /// Within-cluster sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn nearest_centroid(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn bounding_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    dist2(&lo, &hi).sqrt()
}

fn assign(points: &[[f64; 3]], centroids: &[[f64; 3]]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| nearest_centroid(p, centroids))
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic for a given `(points, k, seed)` regardless of thread count:
/// only the assignment step runs in parallel, and centroid sums accumulate in
/// point order. An empty cluster is reseeded at the point farthest from its
/// current centroid. Every returned cluster has at least one member.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Contract(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "k-means input has non-finite coordinates".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let tol = CONVERGENCE_FRACTION * bounding_diagonal(points);
    let mut inertia = Vec::new();
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let assignment = assign(points, &centroids);
        inertia.push(assignment.iter().map(|a| a.1).sum());

        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            for a in 0..3 {
                sums[c][a] += p[a];
            }
            counts[c] += 1;
        }
        let mut taken = vec![false; points.len()];
        let mut moved = 0.0f64;
        for c in 0..k {
            let next = if counts[c] > 0 {
                let n = counts[c] as f64;
                [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n]
            } else {
                // Farthest point from its own centroid, not already used.
                let far = assignment
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold(
                        None,
                        |best: Option<(usize, f64)>, (i, &(_, d))| match best {
                            Some((_, bd)) if bd >= d => best,
                            _ => Some((i, d)),
                        },
                    )
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                points[far]
            };
            moved = moved.max(dist2(&centroids[c], &next).sqrt());
            centroids[c] = next;
        }
        if moved < tol || moved == 0.0 {
            break;
        }
    }

    let assignment = assign(points, &centroids);
    let mut labels: Vec<usize> = assignment.iter().map(|a| a.0).collect();
    repair_empty(&mut labels, &assignment, k);
    Ok(KMeans {
        labels,
        centroids,
        iterations,
        inertia,
    })
}

/// Moves the worst-fitting member of a multi-member cluster into each empty
/// one. Only reachable with duplicate points.
fn repair_empty(labels: &mut [usize], assignment: &[(usize, f64)], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(b.cmp(&a)));
        if let Some(i) = donor {
            counts[labels[i]] -= 1;
            labels[i] = c;
            counts[c] += 1;
        }
    }
}

/// 2D segmentation map; -1 marks pixels without a cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    width: usize,
    height: usize,
    labels: Vec<i32>,
}

impl ClusterMap {
    pub fn new(width: usize, height: usize, labels: Vec<i32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Dimension(format!(
                "cluster map {width}x{height} with {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l < -1) {
            return Err(Error::Contract("cluster labels must be >= -1".into()));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![-1; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn get(&self, u: usize, v: usize) -> i32 {
        self.labels[v * self.width + u]
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label as i32).count()
    }

    pub fn subsample(&self, stride: usize) -> Result<ClusterMap> {
        let (w, h) = subsampled_dims(self.width, self.height, stride)?;
        let labels = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .map(|(u, v)| self.labels[v * stride * self.width + u * stride])
            .collect();
        ClusterMap::new(w, h, labels)
    }
}

/// Writes every point's label at its origin pixel in its own view.
///
/// `dims[v]` is `(width, height)` of view `v`. Labels come from the stored
/// origin pixels, so no reprojection rounding is involved.
pub fn split_and_project(cloud: &LabeledCloud, dims: &[(usize, usize)]) -> Result<Vec<ClusterMap>> {
    let mut maps = dims
        .iter()
        .map(|&(w, h)| ClusterMap::empty(w, h))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..cloud.len() {
        let label = cloud.label[i];
        if label < 0 {
            return Err(Error::Contract(format!("point {i} is not labelled")));
        }
        let view = cloud.view_tag[i];
        let map = maps.get_mut(view).ok_or_else(|| {
            Error::Contract(format!(
                "point {i} belongs to view {view}, only {} given",
                dims.len()
            ))
        })?;
        let Pixel { u, v } = cloud.pixel[i];
        if u >= map.width || v >= map.height {
            return Err(Error::Contract(format!(
                "pixel ({u}, {v}) outside {}x{} view {view}",
                map.width, map.height
            )));
        }
        map.labels[v * map.width + u] = label;
    }
    Ok(maps)
}

/// Fuses, clusters and splits in one go; the result is the per-view cluster
/// maps plus the centroids.
pub fn cluster_views(
    views: &[ViewRef<'_>],
    k: usize,
    seed: u64,
) -> Result<(Vec<ClusterMap>, Vec<[f64; 3]>)> {
    let (reference, sources) = views
        .split_first()
        .ok_or_else(|| Error::Contract("no views given".into()))?;
    let mut cloud = fuse_views(*reference, sources)?;
    let km = kmeans(&cloud.points, k, seed)?;
    cloud.label = km.labels.iter().map(|&l| l as i32).collect();
    let dims: Vec<_> = views.iter().map(|v| v.depth.dims()).collect();
    Ok((split_and_project(&cloud, &dims)?, km.centroids))
}
