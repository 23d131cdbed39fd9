//! Depth-clustering-guided whitening (DCW).
//!
//! For every reference/source pair, feature layer and depth cluster `k`:
//!
//! 1. features of each view are masked to cluster `k`;
//! 2. each masked map is warped into the other view through that view's
//!    depth, and the cross-Gram of destination features against warped
//!    features gives two `C x C` matrices (ref→src and src→ref);
//! 3. the element-wise variance of the two matrices picks out entries that
//!    react to photometric augmentation: `V > tau` on the strict upper
//!    triangle, with `tau` from a 1-D two-means split of `V`;
//! 4. the selected entries of both matrices are pulled towards `epsilon`
//!    with an L1 penalty.
//!
//! [`compute_dcw_pipeline`] runs the whole procedure and differentiates the
//! weighted sum with respect to every encoded feature map.

use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{cluster_views, ClusterMap, ViewRef};
use crate::geometry::{Camera, DepthMap, FeatureMap, Pixel, WarpField};
use crate::tensor::{ColumnMix, Tape, Tensor, Var};
use crate::{Error, Result};

/// Colour-jitter strengths: factors are drawn from `[1 - s, 1 + s]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcwConfig {
    /// Any value >= 1 is accepted. Training is reported to become unstable
    /// above 8, and even values split more evenly across parallel workers.
    pub k_clusters: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub num_layers: usize,
    pub jitter: ColorJitter,
    pub gamma_range: (f64, f64),
    /// Divide each cross-Gram by its pixel count.
    pub normalize_by_count: bool,
    /// Estimate the variance from two independent augmentation draws of the
    /// ref→src matrix instead of from the ref→src / src→ref pair.
    pub independent_draws: bool,
    pub seed: u64,
}

impl Default for DcwConfig {
    fn default() -> Self {
        Self {
            k_clusters: 8,
            epsilon: 0.02,
            lambda: 1.0,
            num_layers: 3,
            jitter: ColorJitter {
                brightness: 0.7,
                contrast: 0.7,
                saturation: 0.2,
            },
            gamma_range: (0.5, 2.0),
            normalize_by_count: true,
            independent_draws: false,
            seed: 0,
        }
    }
}

impl DcwConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.k_clusters == 0 {
            return bad("k_clusters must be at least 1".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        let j = self.jitter;
        for (name, s) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} jitter must be >= 0, got {s}"));
            }
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "gamma range must satisfy 0 < min <= max, got [{lo}, {hi}]"
            ));
        }
        Ok(())
    }

    /// The same configuration with every augmentation factor pinned to 1.
    pub fn without_augmentation(mut self) -> Self {
        self.jitter = ColorJitter {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        };
        self.gamma_range = (1.0, 1.0);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub gamma: f64,
}

impl PhotometricFactors {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            gamma: 1.0,
        }
    }

    pub fn sample(cfg: &DcwConfig, rng: &mut impl Rng) -> Self {
        let mut jitter = |s: f64| {
            let (lo, hi) = ((1.0 - s).max(0.0), 1.0 + s);
            if lo == hi {
                1.0
            } else {
                // Keep strictly positive factors.
                rng.random_range(lo..=hi).max(f64::MIN_POSITIVE)
            }
        };
        let brightness = jitter(cfg.jitter.brightness);
        let contrast = jitter(cfg.jitter.contrast);
        let saturation = jitter(cfg.jitter.saturation);
        let (lo, hi) = cfg.gamma_range;
        let gamma = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        Self {
            brightness,
            contrast,
            saturation,
            gamma,
        }
    }
}

/// Deterministic RNG seed for one image in one augmentation draw.
pub fn augmentation_seed(seed: u64, pair: usize, view: usize, draw: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    [pair as u64, view as u64, draw as u64]
        .into_iter()
        .fold(mix(seed), |acc, x| mix(acc ^ mix(x)))
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation, then gamma, each clamped to `[0, 1]`.
pub fn photometric_augment_with(image: &FeatureMap, f: PhotometricFactors) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(Error::Contract(format!(
            "augmentation needs a 3-channel image, got {}",
            image.channels()
        )));
    }
    if image.values().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(
            "augmentation input must lie in [0, 1]".into(),
        ));
    }
    let n = image.pixels();
    let mut x = image.values().to_vec();
    let clamp = |v: f64| v.clamp(0.0, 1.0);

    if f.brightness != 1.0 {
        for v in &mut x {
            *v = clamp(*v * f.brightness);
        }
    }
    if f.contrast != 1.0 {
        let mean = (0..n)
            .map(|i| luminance(x[i], x[n + i], x[2 * n + i]))
            .sum::<f64>()
            / n as f64;
        for v in &mut x {
            *v = clamp(f.contrast * *v + (1.0 - f.contrast) * mean);
        }
    }
    if f.saturation != 1.0 {
        for i in 0..n {
            let gray = luminance(x[i], x[n + i], x[2 * n + i]);
            for c in 0..3 {
                x[c * n + i] = clamp(f.saturation * x[c * n + i] + (1.0 - f.saturation) * gray);
            }
        }
    }
    if f.gamma != 1.0 {
        for v in &mut x {
            *v = clamp(v.powf(f.gamma));
        }
    }
    FeatureMap::new(3, image.height(), image.width(), x)
}

/// Random photometric augmentation drawn from `cfg` with a seeded RNG.
pub fn photometric_augment(image: &FeatureMap, cfg: &DcwConfig, seed: u64) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    photometric_augment_with(image, PhotometricFactors::sample(cfg, &mut rng))
}

fn check_label(k: usize, k_clusters: usize) -> Result<()> {
    if k >= k_clusters {
        return Err(Error::Contract(format!(
            "cluster {k} out of range for {k_clusters} clusters"
        )));
    }
    Ok(())
}

/// `F ⊙ 1(S = k)` and the member pixels of cluster `k`, row-major.
pub fn cluster_masked_features(
    f: &FeatureMap,
    s: &ClusterMap,
    k: usize,
    k_clusters: usize,
) -> Result<(FeatureMap, Vec<Pixel>)> {
    check_label(k, k_clusters)?;
    if (f.width(), f.height()) != (s.width(), s.height()) {
        return Err(Error::Dimension(format!(
            "feature map {}x{} vs cluster map {}x{}",
            f.width(),
            f.height(),
            s.width(),
            s.height()
        )));
    }
    let n = f.pixels();
    let member: Vec<bool> = s.labels().iter().map(|&l| l == k as i32).collect();
    let values = f
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| if member[i % n] { x } else { 0.0 })
        .collect();
    let pixels = (0..n)
        .filter(|&i| member[i])
        .map(|i| Pixel::new(i % f.width(), i / f.width()))
        .collect();
    Ok((
        FeatureMap::new(f.channels(), f.height(), f.width(), values)?,
        pixels,
    ))
}

/// Cross-view Gram matrix of one cluster in one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCov {
    pub matrix: DMatrix<f64>,
    /// Pixels that contributed; zero means the matrix is all zeros.
    pub valid_count: usize,
}

/// `Aᵀ B` over `cluster_pixels ∩ valid`, where the rows of `A` are
/// destination features and those of `B` warped features. Uncentred;
/// divided by the pixel count when `normalize_by_count` is set.
pub fn cross_view_covariance(
    feat_to: &FeatureMap,
    feat_from_warped: &FeatureMap,
    valid: &[bool],
    cluster_pixels: &[Pixel],
    normalize_by_count: bool,
) -> Result<ClusterCov> {
    let (c, h, w) = (feat_to.channels(), feat_to.height(), feat_to.width());
    if (
        feat_from_warped.channels(),
        feat_from_warped.height(),
        feat_from_warped.width(),
    ) != (c, h, w)
    {
        return Err(Error::Dimension(
            "cross-view feature maps differ in shape".into(),
        ));
    }
    if valid.len() != h * w {
        return Err(Error::Dimension(format!(
            "validity mask has {} entries, expected {}",
            valid.len(),
            h * w
        )));
    }
    let n = h * w;
    let mut m = DMatrix::zeros(c, c);
    let mut count = 0;
    for p in cluster_pixels {
        if p.u >= w || p.v >= h {
            return Err(Error::Dimension(format!(
                "pixel ({}, {}) outside {w}x{h}",
                p.u, p.v
            )));
        }
        let i = p.v * w + p.u;
        if !valid[i] {
            continue;
        }
        count += 1;
        for a in 0..c {
            let x = feat_to.values()[a * n + i];
            for b in 0..c {
                m[(a, b)] += x * feat_from_warped.values()[b * n + i];
            }
        }
    }
    if normalize_by_count && count > 0 {
        m /= count as f64;
    }
    Ok(ClusterCov {
        matrix: m,
        valid_count: count,
    })
}

/// Element-wise variance of two samples, `((a - mu)² + (b - mu)²) / 2`.
pub fn variance_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "variance of {:?} and {:?} matrices",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.zip_map(b, |x, y| {
        let mu = (x + y) / 2.0;
        ((x - mu).powi(2) + (y - mu).powi(2)) / 2.0
    }))
}

fn strict_upper(v: &DMatrix<f64>) -> Vec<f64> {
    let c = v.nrows();
    (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .map(|(i, j)| v[(i, j)])
        .collect()
}

/// Threshold between the two groups of a 1-D two-means split of the strict
/// upper triangle of `V`.
///
/// Centres start at the minimum and maximum value and Lloyd iterations run
/// until the partition is stable; `tau` is the midpoint of the final
/// centres. When every entry is equal, `tau` is that value, which selects
/// nothing under the strict `V > tau` test.
pub fn adaptive_threshold(v: &DMatrix<f64>) -> Result<f64> {
    if v.nrows() != v.ncols() || v.nrows() < 2 {
        return Err(Error::Contract(format!(
            "adaptive threshold needs a square matrix with C >= 2, got {}x{}",
            v.nrows(),
            v.ncols()
        )));
    }
    let xs = strict_upper(v);
    if xs.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::Contract(
            "variance matrix must be finite and non-negative".into(),
        ));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let (mut c0, mut c1) = (lo, hi);
    let mut split = f64::NAN;
    for _ in 0..100 {
        let mid = (c0 + c1) / 2.0;
        if mid == split {
            break;
        }
        split = mid;
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &x in &xs {
            if x > mid {
                s1 += x;
                n1 += 1;
            } else {
                s0 += x;
                n0 += 1;
            }
        }
        // Both groups stay populated: lo <= mid < hi.
        c0 = s0 / n0 as f64;
        c1 = s1 / n1 as f64;
    }
    Ok((c0 + c1) / 2.0)
}

/// Entries selected for the DCW penalty: `V > tau` on the strict upper
/// triangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    dim: usize,
    mask: Vec<bool>,
}

impl SelectionMask {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.dim + j]
    }

    /// Row-major flat indices of the selected entries.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

pub fn selection_mask(v: &DMatrix<f64>, tau: f64) -> SelectionMask {
    let c = v.nrows();
    let mask = (0..c * c).map(|i| {
        let (r, col) = (i / c, i % c);
        col > r && v[(r, col)] > tau
    });
    SelectionMask {
        dim: c,
        mask: mask.collect(),
    }
}

/// `mean over selected entries of |Σ_r2s - eps| + |Σ_s2r - eps|`; zero for
/// an empty mask.
pub fn dcw_loss(
    r2s: &ClusterCov,
    s2r: &ClusterCov,
    mask: &SelectionMask,
    epsilon: f64,
) -> Result<f64> {
    let c = mask.dim;
    if r2s.matrix.shape() != (c, c) || s2r.matrix.shape() != (c, c) {
        return Err(Error::Dimension(
            "DCW matrices and mask differ in size".into(),
        ));
    }
    let sel = mask.selected();
    if sel.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = sel
        .iter()
        .map(|&i| {
            let (r, col) = (i / c, i % c);
            (r2s.matrix[(r, col)] - epsilon).abs() + (s2r.matrix[(r, col)] - epsilon).abs()
        })
        .sum();
    Ok(total / sel.len() as f64)
}

/// Tape version of [`dcw_loss`] for two `[C, C]` variables.
pub fn dcw_loss_on_tape<'t>(
    tape: &'t Tape,
    r2s: Var<'t>,
    s2r: Var<'t>,
    mask: &SelectionMask,
    epsilon: f64,
) -> Result<Var<'t>> {
    let c = mask.dim;
    if r2s.shape() != [c, c] || s2r.shape() != [c, c] {
        return Err(Error::Dimension(
            "DCW matrices and mask differ in size".into(),
        ));
    }
    let sel = mask.selected();
    if sel.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = r2s.gather(&sel)?.add_scalar(-epsilon).abs().sum_all();
    let b = s2r.gather(&sel)?.add_scalar(-epsilon).abs().sum_all();
    Ok(a.add(b)?.scale(1.0 / sel.len() as f64))
}

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

/// Mean smooth-L1 (Huber) error over pixels where `gt` is valid.
pub fn smooth_huber_depth_loss(pred: &DepthMap, gt: &DepthMap, delta: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(
            "predicted and ground-truth depth differ in size".into(),
        ));
    }
    if !(delta > 0.0) {
        return Err(Error::Contract(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &ok) in pred.depths().iter().zip(gt.depths()).zip(gt.valid_mask()) {
        if !ok {
            continue;
        }
        let e = (p - g).abs();
        total += if e < delta {
            0.5 * e * e / delta
        } else {
            e - 0.5 * delta
        };
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("ground truth has no valid pixels".into()));
    }
    Ok(total / n as f64)
}

/// `L_depth + lambda / (P L K) * sum of DCW terms`, where `dcw_terms` is laid
/// out in `(pair, layer, cluster)` lexicographic order and summed in that
/// order.
pub fn overall_loss(
    depth_loss: f64,
    dcw_terms: &[f64],
    num_pairs: usize,
    cfg: &DcwConfig,
) -> Result<f64> {
    let expected = num_pairs * cfg.num_layers * cfg.k_clusters;
    if num_pairs == 0 || dcw_terms.len() != expected {
        return Err(Error::Contract(format!(
            "expected {expected} DCW terms ({num_pairs} pairs x {} layers x {} clusters), got {}",
            cfg.num_layers,
            cfg.k_clusters,
            dcw_terms.len()
        )));
    }
    let sum: f64 = dcw_terms.iter().sum();
    Ok(depth_loss + cfg.lambda / expected as f64 * sum)
}

/// One view of a DCW scene. View 0 is the reference.
#[derive(Clone, Debug)]
pub struct SceneView {
    pub depth: DepthMap,
    pub camera: Camera,
    /// Optional RGB image in `[0, 1]`, augmented before encoding.
    pub image: Option<FeatureMap>,
    /// Per-layer features, read by [`StoredFeatures`].
    pub features: Vec<FeatureMap>,
}

/// Produces the feature map of one layer of one view from its (augmented)
/// image.
pub trait FeatureEncoder {
    fn encode(
        &self,
        view_index: usize,
        view: &SceneView,
        layer: usize,
        image: Option<&FeatureMap>,
    ) -> Result<FeatureMap>;
}

/// Returns the features stored on each view and ignores the image; used when
/// features were computed elsewhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct StoredFeatures;

impl FeatureEncoder for StoredFeatures {
    fn encode(
        &self,
        view_index: usize,
        view: &SceneView,
        layer: usize,
        _: Option<&FeatureMap>,
    ) -> Result<FeatureMap> {
        view.features.get(layer).cloned().ok_or_else(|| {
            Error::Contract(format!(
                "view {view_index} has no stored features for layer {}",
                layer + 1
            ))
        })
    }
}

impl<F> FeatureEncoder for F
where
    F: Fn(usize, &SceneView, usize, Option<&FeatureMap>) -> Result<FeatureMap>,
{
    fn encode(
        &self,
        view_index: usize,
        view: &SceneView,
        layer: usize,
        image: Option<&FeatureMap>,
    ) -> Result<FeatureMap> {
        self(view_index, view, layer, image)
    }
}

struct LayerGeometry {
    width: usize,
    height: usize,
    clusters: Vec<ClusterMap>,
    /// Per pair: (ref→src warp into the source view, src→ref warp into the
    /// reference view).
    warps: Vec<(WarpField, WarpField)>,
}

/// Clustering and warp geometry shared by every loss evaluation of a scene.
pub struct DcwLayout {
    pub cluster_maps: Vec<ClusterMap>,
    pub centroids: Vec<[f64; 3]>,
    k_clusters: usize,
    layers: Vec<LayerGeometry>,
}

impl DcwLayout {
    /// Clusters the scene and precomputes warps for feature layers of the
    /// given `(width, height)`. Each layer size must divide the depth map
    /// size by the same integer stride.
    pub fn new(
        views: &[SceneView],
        layer_dims: &[(usize, usize)],
        cfg: &DcwConfig,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Contract(
                "DCW needs a reference and at least one source view".into(),
            ));
        }
        let (dw, dh) = views[0].depth.dims();
        if views.iter().any(|v| v.depth.dims() != (dw, dh)) {
            return Err(Error::Dimension(
                "all depth maps must share one size".into(),
            ));
        }
        let refs: Vec<ViewRef<'_>> = views
            .iter()
            .map(|v| ViewRef {
                depth: &v.depth,
                camera: &v.camera,
            })
            .collect();
        let (cluster_maps, centroids) = cluster_views(&refs, cfg.k_clusters, cfg.seed)?;

        let mut layers = Vec::with_capacity(layer_dims.len());
        for &(w, h) in layer_dims {
            if w == 0 || dw % w != 0 || dh % h != 0 || dw / w != dh / h {
                return Err(Error::Dimension(format!(
                    "layer {w}x{h} is not an integer subsampling of depth {dw}x{dh}"
                )));
            }
            let stride = dw / w;
            let depths = views
                .iter()
                .map(|v| v.depth.subsample(stride))
                .collect::<Result<Vec<_>>>()?;
            let cams: Vec<Camera> = views.iter().map(|v| v.camera.downsampled(stride)).collect();
            let clusters = cluster_maps
                .iter()
                .map(|m| m.subsample(stride))
                .collect::<Result<Vec<_>>>()?;
            let warps = (1..views.len())
                .map(|n| {
                    (
                        WarpField::new(&cams[0], (w, h), &cams[n], &depths[n]),
                        WarpField::new(&cams[n], (w, h), &cams[0], &depths[0]),
                    )
                })
                .collect();
            layers.push(LayerGeometry {
                width: w,
                height: h,
                clusters,
                warps,
            });
        }
        Ok(Self {
            cluster_maps,
            centroids,
            k_clusters: cfg.k_clusters,
            layers,
        })
    }

    pub fn num_views(&self) -> usize {
        self.cluster_maps.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(ref→src, src→ref)` warps of pair `pair` (1-based) at `layer`.
    pub fn warps(&self, layer: usize, pair: usize) -> &(WarpField, WarpField) {
        &self.layers[layer].warps[pair - 1]
    }

    /// Cluster map of `view` at the resolution of `layer`.
    pub fn layer_clusters(&self, layer: usize, view: usize) -> &ClusterMap {
        &self.layers[layer].clusters[view]
    }
}

/// Feature variables of one reference/source pair, one `[C, H*W]` variable
/// per layer. The `_alt` sets are the second augmentation draw and are only
/// read when [`DcwConfig::independent_draws`] is set.
pub struct PairFeatures<'t> {
    pub reference: Vec<Var<'t>>,
    pub source: Vec<Var<'t>>,
    pub reference_alt: Option<Vec<Var<'t>>>,
    pub source_alt: Option<Vec<Var<'t>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcwTerm {
    /// Source view index `n` (1-based; view 0 is the reference).
    pub pair: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub cluster: usize,
    pub valid_r2s: usize,
    pub valid_s2r: usize,
    /// `None` when either direction had no valid pixels.
    pub tau: Option<f64>,
    pub selected: usize,
    pub loss: f64,
}

impl DcwTerm {
    /// Directions with at least one valid pixel.
    pub fn direction_count(&self) -> usize {
        usize::from(self.valid_r2s > 0) + usize::from(self.valid_s2r > 0)
    }
}

pub struct RecordedDcw<'t> {
    pub terms: Vec<DcwTerm>,
    /// Plain sum over all terms.
    pub sum: Var<'t>,
    /// `lambda / (P L K)` times the sum.
    pub weighted: Var<'t>,
}

fn cluster_mask<'t>(tape: &'t Tape, map: &ClusterMap, k: usize, channels: usize) -> Var<'t> {
    let n = map.width() * map.height();
    let labels = map.labels();
    tape.constant(Tensor::from_fn(&[channels, n], |i| {
        if labels[i % n] == k as i32 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Tape version of [`cross_view_covariance`] for one direction.
///
/// `to_feat` and `from_feat` are `[C, H*W]`; `warp` resamples the `from`
/// view into the `to` view. The `from` features are masked to cluster `k`
/// before warping and the Gram runs over destination pixels of cluster `k`
/// with an in-bounds warp. Returns `(None, 0)` when no pixel qualifies.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_covariance_on_tape<'t>(
    tape: &'t Tape,
    to_feat: Var<'t>,
    from_feat: Var<'t>,
    to_map: &ClusterMap,
    from_map: &ClusterMap,
    warp: &WarpField,
    k: usize,
    normalize: bool,
) -> Result<(Option<Var<'t>>, usize)> {
    let shape = from_feat.shape();
    let (c, n) = (shape[0], shape[1]);
    let pixels: Vec<usize> = (0..n)
        .filter(|&i| to_map.labels()[i] == k as i32 && warp.taps(i).is_some())
        .collect();
    if pixels.is_empty() {
        return Ok((None, 0));
    }
    let masked_from = from_feat.mul(cluster_mask(tape, from_map, k, c))?;
    let mut sampler = ColumnMix::new(n);
    for &i in &pixels {
        sampler.push_column(warp.taps(i).expect("filtered above"));
    }
    let a = to_feat.mix_columns(Rc::new(ColumnMix::select(n, pixels.iter().copied())))?;
    let b = masked_from.mix_columns(Rc::new(sampler))?;
    let mut gram = a.matmul(b.transpose()?)?;
    if normalize {
        gram = gram.scale(1.0 / pixels.len() as f64);
    }
    Ok((Some(gram), pixels.len()))
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let c = t.shape()[0];
    DMatrix::from_row_slice(c, t.shape()[1], t.data())
}

/// Records every `(pair, layer, cluster)` DCW term on `tape`.
///
/// `pairs[n - 1]` holds the features of pair `n`. Terms whose cluster has no
/// valid pixels in either direction contribute zero.
pub fn record_dcw<'t>(
    tape: &'t Tape,
    layout: &DcwLayout,
    pairs: &[PairFeatures<'t>],
    cfg: &DcwConfig,
) -> Result<RecordedDcw<'t>> {
    if pairs.len() + 1 != layout.num_views() {
        return Err(Error::Contract(format!(
            "{} feature pairs for {} views",
            pairs.len(),
            layout.num_views()
        )));
    }
    if layout.num_layers() != cfg.num_layers {
        return Err(Error::Contract(format!(
            "layout has {} layers, config expects {}",
            layout.num_layers(),
            cfg.num_layers
        )));
    }
    let mut terms = Vec::new();
    let mut sum = tape.constant(Tensor::scalar(0.0));
    for (p, feats) in pairs.iter().enumerate() {
        let n = p + 1;
        for (l, geo) in layout.layers.iter().enumerate() {
            let expect = geo.width * geo.height;
            let pick = |set: &[Var<'t>], what: &str| -> Result<Var<'t>> {
                let v = *set.get(l).ok_or_else(|| {
                    Error::Contract(format!(
                        "pair {n} is missing {what} features for layer {}",
                        l + 1
                    ))
                })?;
                let s = v.shape();
                if s.len() != 2 || s[1] != expect {
                    return Err(Error::Dimension(format!(
                        "layer {} {what} features have shape {s:?}, expected [C, {expect}]",
                        l + 1
                    )));
                }
                Ok(v)
            };
            let fr = pick(&feats.reference, "reference")?;
            let fs = pick(&feats.source, "source")?;
            if fr.shape() != fs.shape() {
                return Err(Error::Dimension(format!(
                    "layer {} channel counts differ between views",
                    l + 1
                )));
            }
            let alt = if cfg.independent_draws {
                let missing =
                    || Error::Contract("independent_draws needs a second feature draw".into());
                let ra = pick(
                    feats.reference_alt.as_deref().ok_or_else(missing)?,
                    "reference (second draw)",
                )?;
                let sa = pick(
                    feats.source_alt.as_deref().ok_or_else(missing)?,
                    "source (second draw)",
                )?;
                Some((ra, sa))
            } else {
                None
            };
            let (ref_map, src_map) = (&geo.clusters[0], &geo.clusters[n]);
            let (warp_r2s, warp_s2r) = &geo.warps[p];

            for k in 0..layout.k_clusters {
                let norm = cfg.normalize_by_count;
                let (r2s, valid_r2s) = cross_view_covariance_on_tape(
                    tape, fs, fr, src_map, ref_map, warp_r2s, k, norm,
                )?;
                let (s2r, valid_s2r) = cross_view_covariance_on_tape(
                    tape, fr, fs, ref_map, src_map, warp_s2r, k, norm,
                )?;
                let mut term = DcwTerm {
                    pair: n,
                    layer: l + 1,
                    cluster: k,
                    valid_r2s,
                    valid_s2r,
                    tau: None,
                    selected: 0,
                    loss: 0.0,
                };
                let (Some(r2s), Some(s2r)) = (r2s, s2r) else {
                    terms.push(term);
                    continue;
                };
                let a = to_matrix(&r2s.value());
                let b = match alt {
                    Some((ra, sa)) => {
                        let (g, _) = cross_view_covariance_on_tape(
                            tape, sa, ra, src_map, ref_map, warp_r2s, k, norm,
                        )?;
                        to_matrix(&g.expect("same pixels as the first draw").value())
                    }
                    None => to_matrix(&s2r.value()),
                };
                let v = variance_matrix(&a, &b)?;
                let c = v.nrows();
                let mask = if c >= 2 {
                    let tau = adaptive_threshold(&v)?;
                    term.tau = Some(tau);
                    selection_mask(&v, tau)
                } else {
                    selection_mask(&v, f64::INFINITY)
                };
                let loss = dcw_loss_on_tape(tape, r2s, s2r, &mask, cfg.epsilon)?;
                term.selected = mask.count();
                term.loss = loss.item();
                if term.loss.is_nan() {
                    return Err(Error::Numerical(format!(
                        "DCW term (pair {n}, layer {}, cluster {k}) is NaN",
                        l + 1
                    )));
                }
                sum = sum.add(loss)?;
                terms.push(term);
            }
        }
    }
    let count = pairs.len() * cfg.num_layers * layout.k_clusters;
    let weighted = sum.scale(cfg.lambda / count as f64);
    Ok(RecordedDcw {
        terms,
        sum,
        weighted,
    })
}

/// Gradients of the weighted DCW term for one pair, `[C, H*W]` per layer.
#[derive(Clone, Debug)]
pub struct PairGradients {
    pub reference: Vec<Tensor>,
    pub source: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct DcwOutcome {
    /// In `(pair, layer, cluster)` order.
    pub terms: Vec<DcwTerm>,
    pub sum: f64,
    /// `lambda / (P L K) * sum`, the quantity added to the depth loss.
    pub weighted: f64,
    pub gradients: Vec<PairGradients>,
    pub cluster_maps: Vec<ClusterMap>,
    pub centroids: Vec<[f64; 3]>,
}

impl DcwOutcome {
    /// Sums gradients per view. With [`StoredFeatures`] this is the gradient
    /// with respect to each view's stored feature maps.
    pub fn gradients_by_view(&self) -> Vec<Vec<Tensor>> {
        let views = self.gradients.len() + 1;
        let mut out: Vec<Vec<Tensor>> = vec![Vec::new(); views];
        let mut add = |view: usize, grads: &[Tensor]| {
            if out[view].is_empty() {
                out[view] = grads.to_vec();
            } else {
                for (acc, g) in out[view].iter_mut().zip(grads) {
                    let data = acc
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a + b)
                        .collect();
                    *acc = Tensor::new(acc.shape().to_vec(), data).expect("same shape");
                }
            }
        };
        for (p, g) in self.gradients.iter().enumerate() {
            add(0, &g.reference);
            add(p + 1, &g.source);
        }
        out
    }
}

fn encode_view(
    encoder: &dyn FeatureEncoder,
    views: &[SceneView],
    index: usize,
    pair: usize,
    draw: usize,
    cfg: &DcwConfig,
) -> Result<Vec<FeatureMap>> {
    let view = &views[index];
    let image = view
        .image
        .as_ref()
        .map(|img| photometric_augment(img, cfg, augmentation_seed(cfg.seed, pair, index, draw)))
        .transpose()?;
    (0..cfg.num_layers)
        .map(|l| encoder.encode(index, view, l, image.as_ref()))
        .collect()
}

/// Runs the full DCW procedure on a scene.
///
/// For each pair `n`, the reference image and the image of view `n` are
/// augmented independently (one draw per image per pair, seeded from
/// `(cfg.seed, n, view)`) and passed through `encoder`. The scene is
/// clustered once over all views.
pub fn compute_dcw_pipeline(
    views: &[SceneView],
    encoder: &dyn FeatureEncoder,
    cfg: &DcwConfig,
) -> Result<DcwOutcome> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::Contract(
            "DCW needs a reference and at least one source view".into(),
        ));
    }
    let draws = if cfg.independent_draws { 2 } else { 1 };
    // encoded[pair - 1][draw] = (reference layers, source layers)
    let mut encoded = Vec::with_capacity(views.len() - 1);
    for n in 1..views.len() {
        let mut per_draw = Vec::with_capacity(draws);
        for d in 0..draws {
            per_draw.push((
                encode_view(encoder, views, 0, n, d, cfg)?,
                encode_view(encoder, views, n, n, d, cfg)?,
            ));
        }
        encoded.push(per_draw);
    }

    let layer_dims: Vec<(usize, usize)> = encoded[0][0]
        .0
        .iter()
        .map(|f| (f.width(), f.height()))
        .collect();
    for per_draw in &encoded {
        for (r, s) in per_draw {
            for (l, (a, b)) in r.iter().zip(s).enumerate() {
                if (a.width(), a.height()) != layer_dims[l]
                    || (b.width(), b.height()) != layer_dims[l]
                {
                    return Err(Error::Dimension(format!(
                        "layer {} feature sizes differ between views",
                        l + 1
                    )));
                }
            }
        }
    }
    let layout = DcwLayout::new(views, &layer_dims, cfg)?;

    let tape = Tape::new();
    let leaves = |maps: &[FeatureMap]| -> Vec<Var<'_>> {
        maps.iter()
            .map(|f| tape.leaf(f.to_matrix_tensor()))
            .collect()
    };
    let pairs: Vec<PairFeatures<'_>> = encoded
        .iter()
        .map(|per_draw| PairFeatures {
            reference: leaves(&per_draw[0].0),
            source: leaves(&per_draw[0].1),
            reference_alt: per_draw.get(1).map(|d| leaves(&d.0)),
            source_alt: per_draw.get(1).map(|d| leaves(&d.1)),
        })
        .collect();
    let recorded = record_dcw(&tape, &layout, &pairs, cfg)?;
    let grads = tape.backward(recorded.weighted)?;
    let gradients = pairs
        .iter()
        .map(|p| PairGradients {
            reference: p.reference.iter().map(|&v| grads.wrt(v)).collect(),
            source: p.source.iter().map(|&v| grads.wrt(v)).collect(),
        })
        .collect();
    let sum = recorded.sum.item();
    let weighted = recorded.weighted.item();
    if !sum.is_finite() || !weighted.is_finite() {
        return Err(Error::Numerical("DCW total is not finite".into()));
    }
    Ok(DcwOutcome {
        terms: recorded.terms,
        sum,
        weighted,
        gradients,
        cluster_maps: layout.cluster_maps,
        centroids: layout.centroids,
    })
}
