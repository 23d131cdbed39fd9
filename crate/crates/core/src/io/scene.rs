//! Scene directories:
//!
//! ```text
//! cams/00000000_cam.txt        one camera per view; view 0 is the reference
//! depths/00000000.pfm
//! feats_layer1/00000000.rmvt   C x H x W features, one directory per layer
//! images/00000000.rmvt|.ppm    optional 3 x H x W images in [0, 1]
//! ```
//!
//! Views are the `*_cam.txt` files in name order.

use std::fs;
use std::path::Path;

use super::{cam, pfm, ppm, rmvt};
use crate::dcw::SceneView;
use crate::geometry::FeatureMap;
use crate::{Error, Result};

pub fn view_id(i: usize) -> String {
    format!("{i:08}")
}

fn view_ids(dir: &Path) -> Result<Vec<String>> {
    let cams = dir.join("cams");
    let mut ids: Vec<String> = fs::read_dir(&cams)
        .map_err(|e| Error::Validation(format!("cannot list {}: {e}", cams.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_cam.txt"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "no *_cam.txt files in {}",
            cams.display()
        )));
    }
    Ok(ids)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Io(io) => Error::Validation(format!("{}: {io}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_image(dir: &Path, id: &str) -> Result<Option<FeatureMap>> {
    let r = dir.join("images").join(format!("{id}.rmvt"));
    if r.exists() {
        return with_path(&r, rmvt::read_feature_map(&r)).map(Some);
    }
    let p = dir.join("images").join(format!("{id}.ppm"));
    if p.exists() {
        return with_path(&p, ppm::read(&p)).map(Some);
    }
    Ok(None)
}

/// Cameras, depths and images; feature layers `1..=layers` are required.
pub fn load_scene(dir: impl AsRef<Path>, layers: usize) -> Result<Vec<SceneView>> {
    let dir = dir.as_ref();
    view_ids(dir)?
        .into_iter()
        .map(|id| {
            let cp = dir.join("cams").join(format!("{id}_cam.txt"));
            let camera = with_path(&cp, cam::read(&cp))?.camera;
            let dp = dir.join("depths").join(format!("{id}.pfm"));
            let depth = with_path(&dp, pfm::read(&dp))?;
            let features = (1..=layers)
                .map(|l| {
                    let fp = dir
                        .join(format!("feats_layer{l}"))
                        .join(format!("{id}.rmvt"));
                    with_path(&fp, rmvt::read_feature_map(&fp))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneView {
                depth,
                camera,
                image: load_image(dir, &id)?,
                features,
            })
        })
        .collect()
}

/// Writes views in the layout read by [`load_scene`]; images as RMVT.
pub fn save_scene(dir: impl AsRef<Path>, views: &[SceneView]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["cams", "depths"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, v) in views.iter().enumerate() {
        let id = view_id(i);
        let cf = cam::CamFile {
            camera: v.camera.clone(),
            depth_num: None,
            depth_max: None,
        };
        cam::write(dir.join("cams").join(format!("{id}_cam.txt")), &cf)?;
        pfm::write(dir.join("depths").join(format!("{id}.pfm")), &v.depth)?;
        for (l, f) in v.features.iter().enumerate() {
            let d = dir.join(format!("feats_layer{}", l + 1));
            fs::create_dir_all(&d)?;
            rmvt::write(d.join(format!("{id}.rmvt")), &f.to_chw_tensor())?;
        }
        if let Some(img) = &v.image {
            fs::create_dir_all(dir.join("images"))?;
            rmvt::write(
                dir.join("images").join(format!("{id}.rmvt")),
                &img.to_chw_tensor(),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let views = synthetic::two_view_scene(1, 4, 8, 8);
        save_scene(dir.path(), &views).unwrap();
        let back = load_scene(dir.path(), 1).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.camera, b.camera);
            // Stored as f32 on disk.
            let close = |x: &[f64], y: &[f64]| {
                x.iter()
                    .zip(y)
                    .all(|(p, q)| (p - q).abs() <= 1e-6 * p.abs().max(1.0))
            };
            assert!(close(a.depth.depths(), b.depth.depths()));
            assert!(close(a.features[0].values(), b.features[0].values()));
            assert!(b.image.is_some());
        }
        assert!(load_scene(dir.path(), 2).is_err());
        assert!(load_scene(dir.path().join("missing"), 1).is_err());
    }
}
