//! Feature statistics: mean, covariance, ZCA whitening, instance
//! standardization and the whitening loss.
//!
//! Feature maps are flattened channel-major to `C x N` with `N = H * W`, and
//! every statistic divides by `N`.

use nalgebra::{DMatrix, DVector};

use crate::geometry::FeatureMap;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Eigenvalue floor added before the inverse square root.
pub const DEFAULT_EPS_EIG: f64 = 1e-5;
/// Channels whose variance is below this are zeroed by standardization.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 64;

/// Symmetric positive semi-definite `C x C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    matrix: DMatrix<f64>,
}

impl Covariance {
    /// Checks squareness and symmetry within `1e-9` (relative to the
    /// Frobenius norm when that exceeds 1).
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&matrix)?;
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Contract(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let tol = 1e-9 * m.norm().max(1.0);
    let asym = (m - m.transpose()).amax();
    if !(asym <= tol) {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

pub fn feature_mean(f: &FeatureMap) -> Vec<f64> {
    let n = f.pixels() as f64;
    (0..f.channels())
        .map(|c| f.channel(c).iter().sum::<f64>() / n)
        .collect()
}

fn centered(f: &FeatureMap) -> DMatrix<f64> {
    let mu = feature_mean(f);
    let n = f.pixels();
    DMatrix::from_fn(f.channels(), n, |c, i| f.channel(c)[i] - mu[c])
}

/// `(1/N) (F - mu 1ᵀ)(F - mu 1ᵀ)ᵀ`.
pub fn covariance(f: &FeatureMap) -> Result<Covariance> {
    if f.pixels() < 2 {
        return Err(Error::Contract(
            "covariance needs at least two pixels".into(),
        ));
    }
    let x = centered(f);
    let mut s = &x * x.transpose() / f.pixels() as f64;
    // Exact symmetry; the product is symmetric up to summation order.
    s = (&s + s.transpose()) * 0.5;
    Ok(Covariance { matrix: s })
}

#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * l * self.vectors.transpose()
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps until the largest off-diagonal magnitude is below
/// `1e-12 * ||S||_F` or 64 sweeps have run.
pub fn symmetric_eig(s: &DMatrix<f64>) -> Result<SymmetricEigen> {
    check_symmetric(s)?;
    let n = s.nrows();
    let mut a = (s + s.transpose()) * 0.5;
    let mut q = DMatrix::<f64>::identity(n, n);
    let tol = 1e-12 * s.norm();
    let mut sweeps = 0;

    let off_max = |a: &DMatrix<f64>| {
        let mut m = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                m = m.max(a[(i, j)].abs());
            }
        }
        m
    };

    while sweeps < MAX_SWEEPS && off_max(&a) > tol {
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A <- Jᵀ A J with J the rotation in the (p, r) plane.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - sn * akr;
                    a[(k, r)] = sn * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - sn * ark;
                    a[(r, k)] = sn * apk + c * ark;
                }
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - sn * qkr;
                    q[(k, r)] = sn * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |row, col| q[(row, order[col])]);
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("eigendecomposition diverged".into()));
    }
    Ok(SymmetricEigen {
        vectors,
        values,
        sweeps,
    })
}

/// ZCA whitening `Q (Λ + eps I)^{-1/2} Qᵀ (F - mu 1ᵀ)`.
///
/// Eigenvalues within the `-1e-8 ||Σ||` slack are clamped to zero before the
/// `eps_eig` floor is added; anything more negative is a numerical error, as
/// is a zero eigenvalue with `eps_eig = 0`.
pub fn zca_whiten(f: &FeatureMap, eps_eig: f64) -> Result<FeatureMap> {
    if !(eps_eig >= 0.0) {
        return Err(Error::Contract(format!(
            "eps_eig must be >= 0, got {eps_eig}"
        )));
    }
    let cov = covariance(f)?;
    let eig = symmetric_eig(cov.matrix())?;
    let slack = 1e-8 * cov.matrix().norm();
    let mut inv_sqrt = Vec::with_capacity(eig.values.len());
    for &l in &eig.values {
        if l < -slack {
            return Err(Error::Numerical(format!(
                "covariance has negative eigenvalue {l:e}"
            )));
        }
        let l = l.max(0.0) + eps_eig;
        if l <= 0.0 {
            return Err(Error::Numerical(
                "covariance is singular; whitening needs eps_eig > 0".into(),
            ));
        }
        inv_sqrt.push(1.0 / l.sqrt());
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_sqrt));
    let w = &eig.vectors * d * eig.vectors.transpose();
    let out = w * centered(f);
    // nalgebra is column-major; transpose to get channel-major rows.
    let values = out.transpose().as_slice().to_vec();
    FeatureMap::new(f.channels(), f.height(), f.width(), values)
}

#[derive(Clone, Debug)]
pub struct Standardized {
    pub features: FeatureMap,
    /// Channels with variance below [`DEGENERATE_VARIANCE`], output as zeros.
    pub degenerate: Vec<usize>,
}

/// Per-channel zero mean and unit variance (`diag(Σ)^{-1/2} ⊙ (F - mu 1ᵀ)`).
pub fn instance_standardize(f: &FeatureMap) -> Standardized {
    let n = f.pixels();
    let mu = feature_mean(f);
    let mut values = Vec::with_capacity(f.values().len());
    let mut degenerate = Vec::new();
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let var = ch.iter().map(|x| (x - mu[c]).powi(2)).sum::<f64>() / n as f64;
        if var < DEGENERATE_VARIANCE {
            degenerate.push(c);
            values.extend(std::iter::repeat_n(0.0, n));
        } else {
            let inv = 1.0 / var.sqrt();
            values.extend(ch.iter().map(|x| (x - mu[c]) * inv));
        }
    }
    Standardized {
        features: FeatureMap::new(f.channels(), f.height(), f.width(), values)
            .expect("standardization preserves shape"),
        degenerate,
    }
}

/// Mean absolute deviation of the covariance from the identity, averaged
/// over all `C²` entries.
pub fn whitening_loss(f_s: &FeatureMap) -> Result<f64> {
    let cov = covariance(f_s)?;
    let c = cov.dim();
    let m = cov.matrix();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            let target = if i == j { 1.0 } else { 0.0 };
            total += (m[(i, j)] - target).abs();
        }
    }
    Ok(total / (c * c) as f64)
}

/// Tape version of the centred covariance for a `[C, N]` variable.
pub fn covariance_on_tape<'t>(tape: &'t Tape, f: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    let [c, n] = shape[..] else {
        return Err(Error::Dimension(format!(
            "expected a [C, N] feature matrix, got {shape:?}"
        )));
    };
    let mu = f.mean(&[1])?.reshape(&[c, 1])?;
    let ones = tape.constant(Tensor::ones(&[1, n]));
    let x = f.sub(mu.matmul(ones)?)?;
    Ok(x.matmul(x.transpose()?)?.scale(1.0 / n as f64))
}

/// Tape version of [`whitening_loss`] for a `[C, N]` variable.
pub fn whitening_loss_on_tape<'t>(tape: &'t Tape, f_s: Var<'t>) -> Result<Var<'t>> {
    let cov = covariance_on_tape(tape, f_s)?;
    let c = cov.shape()[0];
    let eye = tape.constant(Tensor::eye(c));
    Ok(cov.sub(eye)?.abs().mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            c,
            h,
            w,
            (0..c * h * w)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mean_examples() {
        let f = FeatureMap::new(2, 1, 4, vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(feature_mean(&f), vec![2.5, 7.0]);

        let f = random_map(3, 5, 7, 1);
        let mu = feature_mean(&f);
        for c in 0..3 {
            let mut s = 0.0;
            for v in 0..5 {
                for u in 0..7 {
                    s += f.get(c, v, u);
                }
            }
            assert!((mu[c] - s / 35.0).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_examples() {
        let f = FeatureMap::new(2, 2, 2, vec![3.0; 8]).unwrap();
        assert!(covariance(&f).unwrap().matrix().iter().all(|&x| x == 0.0));

        // Channel 1 = 3 * channel 0: variances 1.25 and 11.25, covariance 3.75.
        let f = FeatureMap::new(2, 1, 4, vec![1.0, 2.0, 3.0, 4.0, 3.0, 6.0, 9.0, 12.0]).unwrap();
        let s = covariance(&f).unwrap();
        let m = s.matrix();
        assert!((m[(0, 1)] - (m[(0, 0)] * m[(1, 1)]).sqrt()).abs() < 1e-12);
        assert!((m[(0, 1)] - 3.75).abs() < 1e-12);

        let f = random_map(8, 10, 10, 2);
        let s = covariance(&f).unwrap();
        let mu = feature_mean(&f);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for p in 0..100 {
                    acc += (f.channel(i)[p] - mu[i]) * (f.channel(j)[p] - mu[j]);
                }
                assert!((s.matrix()[(i, j)] - acc / 100.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn covariance_shift_invariant() {
        let f = random_map(4, 6, 6, 3);
        let shifted = FeatureMap::new(
            4,
            6,
            6,
            f.values()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + (i / 36) as f64 * 10.0)
                .collect(),
        )
        .unwrap();
        let a = covariance(&f).unwrap();
        let b = covariance(&shifted).unwrap();
        assert!((a.matrix() - b.matrix()).amax() < 1e-10);
    }

    #[test]
    fn eig_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let e = symmetric_eig(&d).unwrap();
        assert_eq!(e.values, vec![5.0, 3.0, 1.0]);
        for col in 0..3 {
            let nz: Vec<_> = e
                .vectors
                .column(col)
                .iter()
                .filter(|x| x.abs() > 0.0)
                .copied()
                .collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(nz[0].abs(), 1.0);
        }

        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_eig(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(symmetric_eig(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn eig_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = DMatrix::from_fn(16, 16, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(16, 16) * 0.1;
            let e = symmetric_eig(&s).unwrap();
            let qtq = e.vectors.transpose() * &e.vectors;
            assert!((qtq - DMatrix::identity(16, 16)).amax() < 1e-10);
            assert!((e.reconstruct() - &s).norm() / s.norm() < 1e-9);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            assert!(e.values.iter().all(|&l| l >= -1e-8 * s.norm()));
        }
    }

    fn gram_over_n(f: &FeatureMap) -> DMatrix<f64> {
        let m = DMatrix::from_fn(f.channels(), f.pixels(), |c, i| f.channel(c)[i]);
        &m * m.transpose() / f.pixels() as f64
    }

    #[test]
    fn zca_random_full_rank() {
        let f = random_map(8, 10, 20, 5);
        let w = zca_whiten(&f, 0.0).unwrap();
        let g = gram_over_n(&w);
        let eye = DMatrix::identity(8, 8);
        assert!((g - &eye).norm() / eye.norm() < 1e-6);
    }

    #[test]
    fn zca_on_white_input_only_centres() {
        // Orthogonal +-1 patterns: covariance exactly I after centring.
        let n = 8;
        let c = 3;
        let vals: Vec<f64> = (0..c)
            .flat_map(|ch| (0..n).map(move |i| if (i >> ch) & 1 == 1 { 1.0 } else { -1.0 }))
            .map(|x| x + 0.5)
            .collect();
        let f = FeatureMap::new(c, 1, n, vals).unwrap();
        assert!((covariance(&f).unwrap().matrix() - DMatrix::<f64>::identity(c, c)).amax() < 1e-15);
        let w = zca_whiten(&f, 0.0).unwrap();
        for (a, b) in w.values().iter().zip(f.values()) {
            assert!((a - (b - 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn zca_rank_deficient() {
        let base = random_map(1, 4, 5, 6);
        let mut vals = base.values().to_vec();
        vals.extend(base.values().iter().map(|x| 2.0 * x));
        let f = FeatureMap::new(2, 4, 5, vals).unwrap();
        let w = zca_whiten(&f, 1e-5).unwrap();
        assert!(w.values().iter().all(|x| x.is_finite()));
        assert!(matches!(zca_whiten(&f, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn zca_idempotent_up_to_centering() {
        let f = random_map(5, 8, 8, 7);
        let once = zca_whiten(&f, 0.0).unwrap();
        let twice = zca_whiten(&once, 0.0).unwrap();
        let diff: f64 = once
            .values()
            .iter()
            .zip(twice.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let norm: f64 = once.values().iter().map(|a| a * a).sum();
        assert!((diff / norm).sqrt() < 1e-6);
    }

    #[test]
    fn standardize_examples() {
        let f = FeatureMap::new(2, 1, 2, vec![0.0, 2.0, 5.0, 5.0]).unwrap();
        let s = instance_standardize(&f);
        assert_eq!(s.features.channel(0), &[-1.0, 1.0]);
        assert_eq!(s.features.channel(1), &[0.0, 0.0]);
        assert_eq!(s.degenerate, vec![1]);

        let f = random_map(6, 9, 9, 8);
        let s = instance_standardize(&f);
        let cov = covariance(&s.features).unwrap();
        for c in 0..6 {
            assert!((cov.matrix()[(c, c)] - 1.0).abs() < 1e-6);
            assert!(feature_mean(&s.features)[c].abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn standardize_is_affine_invariant(
            seed in any::<u64>(),
            scale in prop::collection::vec(0.01f64..100.0, 3),
            shift in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let f = random_map(3, 4, 5, seed);
            let g = FeatureMap::new(3, 4, 5, f.values().iter().enumerate()
                .map(|(i, &x)| x * scale[i / 20] + shift[i / 20]).collect()).unwrap();
            let a = instance_standardize(&f).features;
            let b = instance_standardize(&g).features;
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whitening_loss_closed_forms() {
        let n = 8;
        let white: Vec<f64> = (0..2)
            .flat_map(|ch| (0..n).map(move |i| if (i >> ch) & 1 == 1 { 1.0 } else { -1.0 }))
            .collect();
        let f = FeatureMap::new(2, 1, n, white.clone()).unwrap();
        assert!(whitening_loss(&f).unwrap().abs() < 1e-9);

        // y = rho x + sqrt(1 - rho²) z with x, z orthogonal unit patterns.
        let rho: f64 = 0.5;
        let (x, z) = white.split_at(n);
        let y: Vec<f64> = x
            .iter()
            .zip(z)
            .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
            .collect();
        let f = FeatureMap::new(2, 1, n, [x.to_vec(), y].concat()).unwrap();
        assert!((whitening_loss(&f).unwrap() - rho / 2.0).abs() < 1e-9);

        let tape = Tape::new();
        let v = tape.leaf(f.to_matrix_tensor());
        let l = whitening_loss_on_tape(&tape, v).unwrap();
        assert!((l.item() - rho / 2.0).abs() < 1e-9);
    }

    #[test]
    fn whitening_loss_gradient() {
        // Standardized features sit exactly on the |Σ_ii - 1| kink, so scale
        // each channel away from unit variance before checking.
        let f = instance_standardize(&random_map(8, 8, 8, 9)).features;
        let x = Tensor::from_fn(&[8, 64], |i| f.values()[i] * (0.7 + 0.07 * (i / 64) as f64));
        let r = finite_diff_check(whitening_loss_on_tape, &x, 1e-5, 1e-4);
        assert!(r.pass, "{} at {}", r.max_rel_err, r.worst_index);
    }
}
