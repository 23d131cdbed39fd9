use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::{Error, Result};

/// Gaussian-kernel bandwidth for [`mmd_rbf`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over both samples.
    #[default]
    MedianHeuristic,
}

impl FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Bandwidth::MedianHeuristic);
        }
        match s.parse::<f64>() {
            Ok(b) if b > 0.0 && b.is_finite() => Ok(Bandwidth::Fixed(b)),
            _ => Err(Error::Validation(format!(
                "bandwidth must be \"auto\" or a positive number, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Fixed(b) => write!(f, "{b}"),
            Bandwidth::MedianHeuristic => f.write_str("auto"),
        }
    }
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|k| (a[(i, k)] - b[(j, k)]).powi(2))
        .sum()
}

/// Median distance over all unordered pairs of rows of `X ∪ Y`.
pub fn median_pairwise_distance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let all = DMatrix::from_fn(x.nrows() + y.nrows(), x.ncols(), |i, k| {
        if i < x.nrows() {
            x[(i, k)]
        } else {
            y[(i - x.nrows(), k)]
        }
    });
    let n = all.nrows();
    if n < 2 {
        return Err(Error::Contract(
            "median distance needs at least two samples".into(),
        ));
    }
    let mut d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let all = &all;
            (i + 1..n).map(move |j| sq_dist(all, i, all, j).sqrt())
        })
        .collect();
    let m = d.len();
    let (_, &mut hi, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    if m % 2 == 1 {
        return Ok(hi);
    }
    let lo = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo + hi) / 2.0)
}

fn kernel_sum(a: &DMatrix<f64>, b: &DMatrix<f64>, same: bool, gamma: f64) -> f64 {
    // Rows are reduced in order so the result is bit-stable.
    let rows: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            (0..b.nrows())
                .filter(|&j| !(same && i == j))
                .map(|j| (-sq_dist(a, i, b, j) * gamma).exp())
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased squared maximum mean discrepancy between the rows of `x` and
/// `y` with the kernel `exp(-|a - b|² / (2 bw²))`, clamped at zero.
pub fn mmd_rbf(x: &DMatrix<f64>, y: &DMatrix<f64>, bandwidth: Bandwidth) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::Contract(format!(
            "unbiased MMD needs at least two samples per set, got {n} and {m}"
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "embeddings contain non-finite values".into(),
        ));
    }
    let bw = match bandwidth {
        Bandwidth::Fixed(b) => b,
        Bandwidth::MedianHeuristic => median_pairwise_distance(x, y)?,
    };
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::Numerical(format!(
            "kernel bandwidth must be positive, got {bw}"
        )));
    }
    let gamma = 1.0 / (2.0 * bw * bw);
    let (n, m) = (n as f64, m as f64);
    let kxx = kernel_sum(x, x, true, gamma) / (n * (n - 1.0));
    let kyy = kernel_sum(y, y, true, gamma) / (m * (m - 1.0));
    let kxy = kernel_sum(x, y, false, gamma) / (n * m);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, d: usize, mean: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = Normal::new(mean, 1.0).unwrap();
        DMatrix::from_fn(n, d, |_, _| g.sample(rng))
    }

    #[test]
    fn median_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DMatrix::from_row_slice(1, 1, &[3.0]);
        // Distances 1, 3, 2.
        assert_eq!(median_pairwise_distance(&x, &y).unwrap(), 2.0);
        let y = DMatrix::from_row_slice(2, 1, &[3.0, 10.0]);
        // 1, 3, 10, 2, 9, 7 → (3 + 7) / 2.
        assert_eq!(median_pairwise_distance(&x, &y).unwrap(), 5.0);
    }

    #[test]
    fn contract_and_dimension_errors() {
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(
            mmd_rbf(&x, &DMatrix::zeros(3, 3), Bandwidth::Fixed(1.0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            mmd_rbf(&DMatrix::zeros(1, 2), &x, Bandwidth::Fixed(1.0)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            mmd_rbf(&x, &x, Bandwidth::MedianHeuristic),
            Err(Error::Numerical(_))
        ));
        assert_eq!(
            "auto".parse::<Bandwidth>().unwrap(),
            Bandwidth::MedianHeuristic
        );
        assert_eq!("0.5".parse::<Bandwidth>().unwrap(), Bandwidth::Fixed(0.5));
        assert!("-1".parse::<Bandwidth>().is_err());
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(7, 3, 0.0, &mut rng);
        let y = gaussian(5, 3, 0.5, &mut rng);
        let k = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| {
            (-(a.row(i) - b.row(j)).norm_squared() / 2.0).exp()
        };
        let mut xx = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    xx += k(&x, i, &x, j);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    yy += k(&y, i, &y, j);
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                xy += k(&x, i, &y, j);
            }
        }
        let naive = (xx / 42.0 + yy / 20.0 - 2.0 * xy / 35.0).max(0.0);
        assert!((mmd_rbf(&x, &y, Bandwidth::Fixed(1.0)).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn separates_shifted_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = gaussian(200, 4, 0.0, &mut rng);
        let (a, b) = (
            all.rows(0, 100).into_owned(),
            all.rows(100, 100).into_owned(),
        );
        let same = mmd_rbf(&a, &b, Bandwidth::MedianHeuristic).unwrap();
        assert!(same <= 4.0 / 100f64.sqrt());
        let far = gaussian(100, 4, 5.0, &mut rng);
        assert!(mmd_rbf(&a, &far, Bandwidth::MedianHeuristic).unwrap() > same);
    }
}
