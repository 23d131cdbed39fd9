//! Binary PPM (`P6`) images, read as `3 x H x W` feature maps in `[0, 1]`.

use std::path::Path;

use super::{payload_len, positive_dim, HeaderTokens};
use crate::geometry::FeatureMap;
use crate::{Error, Result};

pub fn parse(data: &[u8]) -> Result<FeatureMap> {
    let mut h = HeaderTokens::new(data, true);
    let (magic, at) = h.next("magic")?;
    if magic != "P6" {
        return Err(Error::parse(
            at,
            format!("bad magic {magic:?}, expected \"P6\""),
        ));
    }
    let w = positive_dim(h.number("width")?, "width")?;
    let ht = positive_dim(h.number("height")?, "height")?;
    let (maxval, at) = h.number::<u32>("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(
            at,
            format!("maxval must be in 1..=65535, got {maxval}"),
        ));
    }
    let start = h.end()?;
    let bytes = if maxval < 256 { 1 } else { 2 };
    payload_len(start, &[w, ht, 3], bytes, data.len() - start)?;
    let n = w * ht;
    let mut values = vec![0.0; 3 * n];
    for (i, s) in data[start..].chunks_exact(bytes).enumerate() {
        let v = if bytes == 1 {
            u32::from(s[0])
        } else {
            u32::from(u16::from_be_bytes([s[0], s[1]]))
        };
        if v > maxval {
            return Err(Error::parse(
                start + i * bytes,
                format!("sample {v} exceeds maxval {maxval}"),
            ));
        }
        // Interleaved RGB to channel-major.
        values[(i % 3) * n + i / 3] = f64::from(v) / f64::from(maxval);
    }
    FeatureMap::new(3, ht, w, values)
}

pub fn read(path: impl AsRef<Path>) -> Result<FeatureMap> {
    parse(&std::fs::read(path)?)
}
