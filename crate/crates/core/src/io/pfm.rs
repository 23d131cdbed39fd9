//! Single-channel PFM depth maps.
//!
//! Header `Pf`, `width height`, then a scale whose sign gives the byte order
//! (negative = little-endian). Rows are stored bottom to top.

use std::path::Path;

use super::{atomic_write, payload_len, positive_dim, HeaderTokens};
use crate::geometry::DepthMap;
use crate::{Error, Result};

pub fn parse(data: &[u8]) -> Result<DepthMap> {
    let mut h = HeaderTokens::new(data, false);
    let (magic, at) = h.next("magic")?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::parse(at, "colour PFM is not a depth map")),
        _ => {
            return Err(Error::parse(
                at,
                format!("bad magic {magic:?}, expected \"Pf\""),
            ))
        }
    }
    let w = positive_dim(h.number("width")?, "width")?;
    let ht = positive_dim(h.number("height")?, "height")?;
    let (scale, at) = h.number::<f64>("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(
            at,
            format!("scale must be finite and non-zero, got {scale}"),
        ));
    }
    let start = h.end()?;
    payload_len(start, &[w, ht], 4, data.len() - start)?;
    let little = scale < 0.0;
    let mut depth = vec![0.0; w * ht];
    for (i, chunk) in data[start..].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (i / w, i % w);
        depth[(ht - 1 - row) * w + col] = f64::from(x);
    }
    DepthMap::new(w, ht, depth)
}

/// Little-endian encoding with scale `-1.0`; invalid pixels are written as 0.
pub fn to_bytes(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for row in (0..h).rev() {
        for &d in &depth.depths()[row * w..(row + 1) * w] {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
    }
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<DepthMap> {
    parse(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    atomic_write(path, &to_bytes(depth))
}
