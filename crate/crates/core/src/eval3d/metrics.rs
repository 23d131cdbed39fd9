use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::{KdTree, PointCloud};
use crate::{Error, Result};

/// Outlier cap for DTU accuracy and completeness, in dataset units.
pub const DEFAULT_DTU_MAX_DIST: f64 = 20.0;

/// How nearest-neighbour distances are measured before averaging and
/// thresholding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Plain distance, the usual benchmark convention.
    #[default]
    Euclidean,
    /// Squared distance.
    Squared,
}

impl Metric {
    fn apply(self, d2: f64) -> f64 {
        match self {
            Metric::Euclidean => d2.sqrt(),
            Metric::Squared => d2,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "squared" => Ok(Metric::Squared),
            _ => Err(Error::Validation(format!(
                "unknown metric {s:?} (expected euclidean or squared)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Squared => "squared",
        })
    }
}

fn nearest_sq(from: &PointCloud, to: &KdTree) -> Vec<f64> {
    from.points()
        .par_iter()
        .map(|p| to.nearest(p).expect("index is non-empty").1)
        .collect()
}

/// Euclidean distance from every point of `from` to its nearest neighbour
/// in `to`.
pub fn nearest_distances(from: &PointCloud, to: &KdTree) -> Result<Vec<f64>> {
    from.require_non_empty("query")?;
    if to.is_empty() {
        return Err(Error::Contract("target point cloud is empty".into()));
    }
    Ok(nearest_sq(from, to).into_iter().map(f64::sqrt).collect())
}

/// Squared NN distances in both directions: `(G → R, R → G)`.
fn both_directions(g: &PointCloud, r: &PointCloud) -> Result<(Vec<f64>, Vec<f64>)> {
    g.require_non_empty("ground-truth")?;
    r.require_non_empty("reconstructed")?;
    let (tg, tr) = rayon::join(|| KdTree::new(g.points()), || KdTree::new(r.points()));
    Ok((nearest_sq(g, &tr), nearest_sq(r, &tg)))
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chamfer {
    pub d_g2r: f64,
    pub d_r2g: f64,
    pub d_cd: f64,
}

pub fn chamfer_components(g: &PointCloud, r: &PointCloud, metric: Metric) -> Result<Chamfer> {
    let (g2r, r2g) = both_directions(g, r)?;
    let d_g2r = mean(g2r.iter().map(|&d| metric.apply(d)), g2r.len());
    let d_r2g = mean(r2g.iter().map(|&d| metric.apply(d)), r2g.len());
    Ok(Chamfer {
        d_g2r,
        d_r2g,
        d_cd: d_g2r + d_r2g,
    })
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DtuScores {
    pub acc: f64,
    pub comp: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub threshold: f64,
    pub metric: Metric,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub d_g2r: f64,
    pub d_r2g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtu: Option<DtuScores>,
}

fn percent_below(d2: &[f64], metric: Metric, threshold: f64) -> f64 {
    let hits = d2.iter().filter(|&&d| metric.apply(d) < threshold).count();
    100.0 * hits as f64 / d2.len() as f64
}

/// Precision (reconstruction near ground truth), recall (ground truth near
/// reconstruction) and F-score at `threshold`, all in `[0, 100]`. The test
/// is strict: a point counts when its distance under `metric` is `< d`.
pub fn precision_recall_fscore(
    g: &PointCloud,
    r: &PointCloud,
    threshold: f64,
    metric: Metric,
) -> Result<ScoreReport> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Contract(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (g2r, r2g) = both_directions(g, r)?;
    let recall = percent_below(&g2r, metric, threshold);
    let precision = percent_below(&r2g, metric, threshold);
    Ok(ScoreReport {
        threshold,
        metric,
        precision,
        recall,
        fscore: fscore(precision, recall),
        d_g2r: mean(g2r.iter().map(|&d| metric.apply(d)), g2r.len()),
        d_r2g: mean(r2g.iter().map(|&d| metric.apply(d)), r2g.len()),
        dtu: None,
    })
}

/// Accuracy (mean distance R → G), completeness (G → R) and their average,
/// with every distance capped at `max_dist`.
pub fn dtu_scores(g: &PointCloud, r: &PointCloud, max_dist: f64) -> Result<DtuScores> {
    if !(max_dist > 0.0) {
        return Err(Error::Contract(format!(
            "max_dist must be positive, got {max_dist}"
        )));
    }
    let (g2r, r2g) = both_directions(g, r)?;
    let capped = |d: &f64| d.sqrt().min(max_dist);
    let acc = mean(r2g.iter().map(capped), r2g.len());
    let comp = mean(g2r.iter().map(capped), g2r.len());
    Ok(DtuScores {
        acc,
        comp,
        overall: (acc + comp) / 2.0,
    })
}
