//! Pinhole cameras, depth maps and cross-view feature warping.
//!
//! Pixel centres sit at integer coordinates with the origin at the top-left;
//! `u` indexes columns and `v` rows. Extrinsics map world to camera
//! coordinates.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Projections with camera-space depth at or below this are behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;

/// Sample coordinates this close to an integer are snapped onto it, so that
/// warps which land on pixel centres reproduce the source exactly.
pub const SNAP_TOLERANCE: f64 = 1e-9;

const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
}

impl Pixel {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    intrinsic: Matrix3<f64>,
    extrinsic: Matrix4<f64>,
    intrinsic_inv: Matrix3<f64>,
    extrinsic_inv: Matrix4<f64>,
    depth_min: f64,
    depth_interval: f64,
}

impl Camera {
    /// Validates and builds a camera.
    ///
    /// The intrinsic matrix must be upper-triangular with `K[2][2] = 1` and
    /// positive focal lengths; the extrinsic's upper-left block must be a
    /// proper rotation and its last row `[0, 0, 0, 1]`. Nothing is repaired.
    pub fn new(
        intrinsic: Matrix3<f64>,
        extrinsic: Matrix4<f64>,
        depth_min: f64,
        depth_interval: f64,
    ) -> Result<Self> {
        if intrinsic
            .iter()
            .chain(extrinsic.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Validation(
                "camera matrices contain non-finite values".into(),
            ));
        }
        let k = &intrinsic;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Validation(
                "intrinsic matrix is not upper-triangular".into(),
            ));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "intrinsic K[2][2] must be 1, got {}",
                k[(2, 2)]
            )));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        let bottom = extrinsic.row(3);
        if bottom[0] != 0.0
            || bottom[1] != 0.0
            || bottom[2] != 0.0
            || (bottom[3] - 1.0).abs() > 1e-12
        {
            return Err(Error::Validation(format!(
                "extrinsic last row must be [0 0 0 1], got [{} {} {} {}]",
                bottom[0], bottom[1], bottom[2], bottom[3]
            )));
        }
        let rotation: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if residual > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::Validation(format!(
                "extrinsic rotation block is not a rotation: orthogonality residual {residual:.3e}, determinant {det}"
            )));
        }
        if !(depth_min > 0.0 && depth_min.is_finite()) {
            return Err(Error::Validation(format!(
                "depth_min must be positive, got {depth_min}"
            )));
        }
        if !depth_interval.is_finite() {
            return Err(Error::Validation("depth_interval must be finite".into()));
        }
        let intrinsic_inv = intrinsic
            .try_inverse()
            .ok_or_else(|| Error::Numerical("intrinsic matrix is singular".into()))?;
        let extrinsic_inv = extrinsic
            .try_inverse()
            .ok_or_else(|| Error::Numerical("extrinsic matrix is singular".into()))?;
        Ok(Self {
            intrinsic,
            extrinsic,
            intrinsic_inv,
            extrinsic_inv,
            depth_min,
            depth_interval,
        })
    }

    /// Camera with focal lengths `focal`, principal point `(cx, cy)` and the
    /// given world-to-camera pose.
    pub fn from_pose(
        focal: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(k, t, 1.0, 1.0)
    }

    pub fn intrinsic(&self) -> &Matrix3<f64> {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn depth_min(&self) -> f64 {
        self.depth_min
    }

    pub fn depth_interval(&self) -> f64 {
        self.depth_interval
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        let q = self.extrinsic * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(q.x, q.y, q.z)
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        let q = self.extrinsic_inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(q.x, q.y, q.z)
    }

    /// World point seen at pixel `(u, v)` with camera-space depth `depth`.
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let ray = self.intrinsic_inv * Vector3::new(u, v, 1.0);
        self.camera_to_world(&Point3::from(ray * depth))
    }

    /// The same camera for an image subsampled by `stride`, keeping every
    /// `stride`-th pixel starting at the origin.
    pub fn downsampled(&self, stride: usize) -> Camera {
        let s = stride as f64;
        let mut k = self.intrinsic;
        for c in 0..3 {
            k[(0, c)] /= s;
            k[(1, c)] /= s;
        }
        Camera::new(k, self.extrinsic, self.depth_min, self.depth_interval)
            .expect("scaling a valid camera keeps it valid")
    }
}

/// Per-pixel depth with a validity mask. Invalid pixels carry depth 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Row-major depths; non-finite and non-positive values become invalid.
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("depth map must be at least 1x1".into()));
        }
        if depth.len() != width * height {
            return Err(Error::Dimension(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                depth.len()
            )));
        }
        let valid: Vec<bool> = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depth = depth
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn invalid(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        (u < self.width && v < self.height && self.valid[i]).then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn subsample(&self, stride: usize) -> Result<DepthMap> {
        let (w, h) = subsampled_dims(self.width, self.height, stride)?;
        let depth = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .map(|(u, v)| self.depth[v * stride * self.width + u * stride])
            .collect();
        DepthMap::new(w, h, depth)
    }
}

pub(crate) fn subsampled_dims(
    width: usize,
    height: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || !width.is_multiple_of(stride) || !height.is_multiple_of(stride) {
        return Err(Error::Dimension(format!(
            "{width}x{height} is not divisible by stride {stride}"
        )));
    }
    Ok((width / stride, height / stride))
}

/// Channel-major dense features, `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "feature map {channels}x{height}x{width} has an empty dimension"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
        .expect("zero-sized feature map")
    }

    /// From a `[C, H, W]` or `[C, H*W]` tensor (the latter needs `height`).
    pub fn from_tensor(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        let c = t.shape()[0];
        if t.len() != c * height * width {
            return Err(Error::Dimension(format!(
                "tensor {:?} does not hold a {height}x{width} feature map",
                t.shape()
            )));
        }
        Self::new(c, height, width, t.data().to_vec())
    }

    /// Reads a rank-3 `[C, H, W]` tensor.
    pub fn from_chw_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::Dimension(format!(
                "feature map tensor must be rank 3 (C, H, W), got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> f64 {
        self.values[(c * self.height + v) * self.width + u]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, u: usize, v: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, v, u)).collect()
    }

    /// Flattened `[C, H*W]` view used on the tape.
    pub fn to_matrix_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.pixels()], self.values.clone())
            .expect("feature map is non-empty")
    }

    pub fn to_chw_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.values.clone(),
        )
        .expect("feature map is non-empty")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<FeatureMap> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.values.iter().map(|&x| f(x)).collect(),
        )
    }
}

/// A world point produced from one valid depth pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Point3<f64>,
    pub pixel: Pixel,
}

/// Lifts every valid depth pixel into world space, in row-major order.
pub fn unproject(depth: &DepthMap, cam: &Camera) -> Vec<SurfacePoint> {
    let mut out = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some(d) = depth.get(u, v) {
                out.push(SurfacePoint {
                    position: cam.lift(u as f64, v as f64, d),
                    pixel: Pixel::new(u, v),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-space z.
    pub depth: f64,
}

/// Projects a world point; `None` when it lies at or behind the image plane
/// origin (`z <= 1e-9`).
pub fn project(point: &Point3<f64>, cam: &Camera) -> Option<Projection> {
    let pc = cam.world_to_camera(point);
    if !(pc.z > MIN_PROJECTION_DEPTH) {
        return None;
    }
    let q = cam.intrinsic * pc.coords;
    Some(Projection {
        u: q.x / q.z,
        v: q.y / q.z,
        depth: pc.z,
    })
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= SNAP_TOLERANCE {
        r
    } else {
        x
    }
}

fn axis_taps(x: f64, n: usize) -> Option<(usize, usize, f64)> {
    let x = snap(x);
    if !(x >= 0.0 && x <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let x0 = (x.floor() as usize).min(n - 2);
    Some((x0, x0 + 1, x - x0 as f64))
}

/// Bilinear footprint of `(u, v)` in a `width x height` image as four
/// `(flat pixel index, weight)` taps.
///
/// The footprint is the 2x2 neighbourhood actually needed by the
/// interpolation, so any point in `[0, W-1] x [0, H-1]` is in bounds,
/// including the last row and column. Everything else is `None`.
pub fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    let (x0, x1, tx) = axis_taps(u, width)?;
    let (y0, y1, ty) = axis_taps(v, height)?;
    Some([
        (y0 * width + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * width + x1, tx * (1.0 - ty)),
        (y1 * width + x0, (1.0 - tx) * ty),
        (y1 * width + x1, tx * ty),
    ])
}

/// Interpolated feature vector at `(u, v)`, or `None` out of bounds.
pub fn bilinear_sample(feat: &FeatureMap, u: f64, v: f64) -> Option<Vec<f64>> {
    let taps = bilinear_taps(feat.width, feat.height, u, v)?;
    let n = feat.pixels();
    Some(
        (0..feat.channels)
            .map(|c| {
                let ch = &feat.values[c * n..(c + 1) * n];
                taps.iter().map(|&(i, w)| w * ch[i]).sum()
            })
            .collect(),
    )
}

/// Backward warp from a `from` view into a `to` view through the `to` view's
/// depth: destination pixel `p` is lifted with `to_depth`, projected into
/// `from`, and sampled bilinearly there.
#[derive(Clone, Debug)]
pub struct WarpField {
    width: usize,
    height: usize,
    source_width: usize,
    source_height: usize,
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl WarpField {
    pub fn new(
        from_cam: &Camera,
        source_dims: (usize, usize),
        to_cam: &Camera,
        to_depth: &DepthMap,
    ) -> Self {
        let (sw, sh) = source_dims;
        let mut taps = Vec::with_capacity(to_depth.width * to_depth.height);
        for v in 0..to_depth.height {
            for u in 0..to_depth.width {
                let tap = to_depth.get(u, v).and_then(|d| {
                    let world = to_cam.lift(u as f64, v as f64, d);
                    let proj = project(&world, from_cam)?;
                    bilinear_taps(sw, sh, proj.u, proj.v)
                });
                taps.push(tap);
            }
        }
        Self {
            width: to_depth.width,
            height: to_depth.height,
            source_width: sw,
            source_height: sh,
            taps,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.source_width, self.source_height)
    }

    /// Taps for the destination pixel at flat index `i`.
    pub fn taps(&self, i: usize) -> Option<&[(usize, f64); 4]> {
        self.taps[i].as_ref()
    }

    pub fn in_bounds(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }
}

/// Warps `src_feat` (seen by `from_cam`) into the view of `to_cam`.
///
/// Returns the warped map and the in-bounds mask; out-of-bounds and
/// invalid-depth pixels are zero.
pub fn warp_feature(
    src_feat: &FeatureMap,
    from_cam: &Camera,
    to_cam: &Camera,
    to_depth: &DepthMap,
) -> Result<(FeatureMap, Vec<bool>)> {
    if (src_feat.width, src_feat.height) != to_depth.dims() {
        return Err(Error::Dimension(format!(
            "feature map {}x{} vs destination depth {}x{}",
            src_feat.width, src_feat.height, to_depth.width, to_depth.height
        )));
    }
    let field = WarpField::new(
        from_cam,
        (src_feat.width, src_feat.height),
        to_cam,
        to_depth,
    );
    let n = src_feat.pixels();
    let mut out = vec![0.0; src_feat.values.len()];
    for (i, taps) in field.taps.iter().enumerate() {
        let Some(taps) = taps else { continue };
        for c in 0..src_feat.channels {
            let ch = &src_feat.values[c * n..(c + 1) * n];
            out[c * n + i] = taps.iter().map(|&(j, w)| w * ch[j]).sum();
        }
    }
    let warped = FeatureMap::new(src_feat.channels, src_feat.height, src_feat.width, out)?;
    Ok((warped, field.in_bounds()))
}
