//! kd-tree and score functions against O(N·M) reference implementations.

use mvs_dcw::eval3d::{
    chamfer_components, dtu_scores, precision_recall_fscore, KdTree, Metric, PointCloud,
    DEFAULT_DTU_MAX_DIST,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_sq(q: &[f64; 3], pts: &[[f64; 3]]) -> f64 {
    pts.iter()
        .map(|p| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Mixed instances: uniform boxes, tight clusters, duplicated points and
/// points on integer lattices (many equidistant ties).
fn instance(seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=1000);
        let kind = rng.random_range(0..3);
        let mut pts: Vec<[f64; 3]> = (0..n)
            .map(|_| match kind {
                0 => [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ],
                1 => {
                    let c = rng.random_range(0..4) as f64 * 3.0;
                    [
                        c + rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        c,
                    ]
                }
                _ => [
                    rng.random_range(-3..3) as f64,
                    rng.random_range(-3..3) as f64,
                    rng.random_range(-3..3) as f64,
                ],
            })
            .collect();
        for _ in 0..n / 10 {
            let i = rng.random_range(0..pts.len());
            pts.push(pts[i]);
        }
        pts
    };
    (cloud(&mut rng), cloud(&mut rng))
}

#[test]
fn kd_tree_matches_brute_force_exactly() {
    for seed in 0..50 {
        let (g, r) = instance(seed);
        let tree = KdTree::new(&r);
        for q in &g {
            let (i, d2) = tree.nearest(q).unwrap();
            let want = brute_sq(q, &r);
            assert_eq!(d2, want, "seed {seed}");
            let p = r[i];
            assert_eq!(
                (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2),
                want
            );
        }
    }
}

#[test]
fn scores_match_reference_implementations() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    for seed in 0..50 {
        let (g, r) = instance(seed);
        let g2r: Vec<f64> = g.iter().map(|q| brute_sq(q, &r)).collect();
        let r2g: Vec<f64> = r.iter().map(|q| brute_sq(q, &g)).collect();
        let (gc, rc) = (
            PointCloud::new(g.clone()).unwrap(),
            PointCloud::new(r.clone()).unwrap(),
        );
        for metric in [Metric::Euclidean, Metric::Squared] {
            let f = |d2: f64| {
                if metric == Metric::Euclidean {
                    d2.sqrt()
                } else {
                    d2
                }
            };
            let mean = |v: &[f64]| v.iter().map(|&d| f(d)).sum::<f64>() / v.len() as f64;
            let ch = chamfer_components(&gc, &rc, metric).unwrap();
            assert!(
                close(ch.d_g2r, mean(&g2r)) && close(ch.d_r2g, mean(&r2g)),
                "seed {seed}"
            );
            assert!(close(ch.d_cd, mean(&g2r) + mean(&r2g)));
            for d in [0.05, 0.3, 1.0, 2.5] {
                let pct = |v: &[f64]| {
                    100.0 * v.iter().filter(|&&x| f(x) < d).count() as f64 / v.len() as f64
                };
                let (p, rec) = (pct(&r2g), pct(&g2r));
                let fs = if p + rec == 0.0 {
                    0.0
                } else {
                    2.0 * p * rec / (p + rec)
                };
                let rep = precision_recall_fscore(&gc, &rc, d, metric).unwrap();
                assert!(
                    close(rep.precision, p) && close(rep.recall, rec) && close(rep.fscore, fs),
                    "seed {seed} d {d}"
                );
            }
        }
        for cap in [0.5, DEFAULT_DTU_MAX_DIST] {
            let capped =
                |v: &[f64]| v.iter().map(|&d| d.sqrt().min(cap)).sum::<f64>() / v.len() as f64;
            let dtu = dtu_scores(&gc, &rc, cap).unwrap();
            assert!(
                close(dtu.acc, capped(&r2g)) && close(dtu.comp, capped(&g2r)),
                "seed {seed}"
            );
            assert!(close(dtu.overall, (capped(&r2g) + capped(&g2r)) / 2.0));
        }
    }
}

#[test]
fn worked_examples() {
    let origin = PointCloud::new(vec![[0.0; 3]]).unwrap();
    let one = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
    let two = PointCloud::new(vec![[2.0, 0.0, 0.0]]).unwrap();
    let c = |g, r, m| {
        let x = chamfer_components(g, r, m).unwrap();
        (x.d_g2r, x.d_r2g, x.d_cd)
    };
    assert_eq!(c(&origin, &one, Metric::Squared), (1.0, 1.0, 2.0));
    assert_eq!(c(&origin, &one, Metric::Euclidean), (1.0, 1.0, 2.0));
    assert_eq!(c(&origin, &two, Metric::Squared), (4.0, 4.0, 8.0));
    assert_eq!(c(&origin, &two, Metric::Euclidean), (2.0, 2.0, 4.0));
    let rep = precision_recall_fscore(&origin, &one, 0.5, Metric::Euclidean).unwrap();
    assert_eq!((rep.precision, rep.recall, rep.fscore), (0.0, 0.0, 0.0));
    // Strict threshold: a distance equal to d does not count.
    let rep = precision_recall_fscore(&origin, &one, 1.0, Metric::Euclidean).unwrap();
    assert_eq!(rep.fscore, 0.0);
    let empty = PointCloud::new(vec![]).unwrap();
    assert!(precision_recall_fscore(&empty, &one, 1.0, Metric::Euclidean).is_err());
    assert!(dtu_scores(&one, &empty, 20.0).is_err());
}
