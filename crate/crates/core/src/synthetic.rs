//! Small analytic scenes: pinhole cameras looking at a tilted plane, with
//! textures defined on world coordinates so that corresponding pixels in
//! different views carry related features.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dcw::SceneView;
use crate::geometry::{Camera, DepthMap, FeatureMap};
use crate::whitening::instance_standardize;

/// The plane `normal · X = offset` in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// `z = z0 + a x + b y`.
    pub fn tilted(z0: f64, a: f64, b: f64) -> Self {
        Self {
            normal: Vector3::new(-a, -b, 1.0),
            offset: z0,
        }
    }
}

/// Camera centred at `center` with yaw `yaw` (radians, about the world y
/// axis), focal length `0.9 * width` and a centred principal point.
pub fn camera_at(width: usize, height: usize, center: Vector3<f64>, yaw: f64) -> Camera {
    let r: Matrix3<f64> = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
    let t = -(r * center);
    let focal = 0.9 * width as f64;
    Camera::from_pose(
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        r,
        t,
    )
    .expect("synthetic camera is valid")
}

/// Depth of the plane seen through `cam`; pixels whose ray misses it are
/// invalid.
pub fn render_plane_depth(cam: &Camera, width: usize, height: usize, plane: &Plane) -> DepthMap {
    let center = cam.camera_to_world(&Point3::origin()).coords;
    let depth = (0..height)
        .flat_map(|v| (0..width).map(move |u| (u, v)))
        .map(|(u, v)| {
            let dir = cam.lift(u as f64, v as f64, 1.0).coords - center;
            let denom = plane.normal.dot(&dir);
            if denom.abs() < 1e-12 {
                return 0.0;
            }
            let s = (plane.offset - plane.normal.dot(&center)) / denom;
            if s > 0.0 {
                s
            } else {
                0.0
            }
        })
        .collect();
    DepthMap::new(width, height, depth).expect("sizes match")
}

/// Smooth random texture on world coordinates: a sum of sinusoids per
/// channel. Deterministic in `seed`.
#[derive(Clone, Debug)]
pub struct WorldTexture {
    waves: Vec<Vec<([f64; 3], f64, f64)>>,
}

impl WorldTexture {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..channels)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let freq = [
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-2.0..2.0),
                        ];
                        (
                            freq,
                            rng.random_range(0.0..std::f64::consts::TAU),
                            rng.random_range(0.2..1.0),
                        )
                    })
                    .collect()
            })
            .collect();
        Self { waves }
    }

    pub fn channels(&self) -> usize {
        self.waves.len()
    }

    pub fn eval(&self, p: &Point3<f64>) -> Vec<f64> {
        self.waves
            .iter()
            .map(|ws| {
                ws.iter()
                    .map(|(f, phase, amp)| {
                        amp * (f[0] * p.x + f[1] * p.y + f[2] * p.z + phase).sin()
                    })
                    .sum()
            })
            .collect()
    }

    /// Renders the texture through a camera; invalid depth gives zeros.
    pub fn render(&self, cam: &Camera, depth: &DepthMap) -> FeatureMap {
        let (w, h) = depth.dims();
        let n = w * h;
        let c = self.channels();
        let mut values = vec![0.0; c * n];
        for i in 0..n {
            if let Some(d) = depth.get(i % w, i / w) {
                let p = cam.lift((i % w) as f64, (i / w) as f64, d);
                for (ch, x) in self.eval(&p).into_iter().enumerate() {
                    values[ch * n + i] = x;
                }
            }
        }
        FeatureMap::new(c, h, w, values).expect("sizes match")
    }
}

fn rgb(texture: &WorldTexture, cam: &Camera, depth: &DepthMap) -> FeatureMap {
    let scale = texture.waves[0].iter().map(|w| w.2).sum::<f64>().max(1.0);
    texture
        .render(cam, depth)
        .map(|x| (0.5 + 0.5 * x / scale).clamp(0.0, 1.0))
        .expect("finite")
}

/// `views` cameras spaced along the x axis, all looking at a tilted plane
/// about four units away. Each view has an RGB image and one standardized
/// feature layer at full resolution with `channels` channels.
pub fn rig_scene(
    seed: u64,
    views: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Vec<SceneView> {
    let plane = Plane::tilted(4.0, 0.15, 0.05);
    let color = WorldTexture::new(3, seed ^ 0xc01_0a);
    let feats = WorldTexture::new(channels, seed);
    (0..views)
        .map(|i| {
            let x = 0.25 * i as f64;
            let camera = camera_at(
                width,
                height,
                Vector3::new(x, 0.02 * i as f64, 0.0),
                -0.03 * i as f64,
            );
            let depth = render_plane_depth(&camera, width, height, &plane);
            let image = rgb(&color, &camera, &depth);
            let features = instance_standardize(&feats.render(&camera, &depth)).features;
            SceneView {
                depth,
                camera,
                image: Some(image),
                features: vec![features],
            }
        })
        .collect()
}

/// Reference plus one source view of [`rig_scene`].
pub fn two_view_scene(seed: u64, channels: usize, height: usize, width: usize) -> Vec<SceneView> {
    rig_scene(seed, 2, channels, height, width)
}
