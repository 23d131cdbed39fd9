//! Cluster maps as binary PGM (`P5`). Stored value = label + 1, so 0 marks
//! pixels without a cluster. Written with maxval 65535 (16-bit big-endian
//! samples); 8-bit files (maxval < 256) are also read.

use std::path::Path;

use super::{atomic_write, payload_len, positive_dim, HeaderTokens};
use crate::clustering::ClusterMap;
use crate::{Error, Result};

pub fn parse(data: &[u8]) -> Result<ClusterMap> {
    let mut h = HeaderTokens::new(data, true);
    let (magic, at) = h.next("magic")?;
    if magic != "P5" {
        return Err(Error::parse(
            at,
            format!("bad magic {magic:?}, expected \"P5\""),
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
    payload_len(start, &[w, ht], bytes, data.len() - start)?;
    let mut labels = Vec::with_capacity(w * ht);
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
        labels.push(v as i32 - 1);
    }
    ClusterMap::new(w, ht, labels)
}

pub fn to_bytes(map: &ClusterMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width(), map.height()).into_bytes();
    for &l in map.labels() {
        let v = u16::try_from(l + 1)
            .map_err(|_| Error::Contract(format!("label {l} does not fit a 16-bit PGM")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<ClusterMap> {
    parse(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, map: &ClusterMap) -> Result<()> {
    atomic_write(path, &to_bytes(map)?)
}
