//! RMVT tensor files: `"RMVT"`, version `u16`, rank `u16`, `rank` dims as
//! `u32`, then the row-major payload as `f32`. All integers and floats are
//! little-endian.

use std::path::Path;

use super::{atomic_write, payload_len};
use crate::geometry::FeatureMap;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMVT";
pub const VERSION: u16 = 1;

fn u16_at(data: &[u8], at: usize) -> Result<u16> {
    data.get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| Error::parse(at, "header truncated"))
}

pub fn parse(data: &[u8]) -> Result<Tensor> {
    if data.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::parse(0, "bad magic, expected \"RMVT\""));
    }
    let version = u16_at(data, 4)?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let rank = usize::from(u16_at(data, 6)?);
    if rank == 0 {
        return Err(Error::parse(6, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 8 + 4 * i;
        let b = data
            .get(at..at + 4)
            .ok_or_else(|| Error::parse(at, "header truncated"))?;
        let d = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if d == 0 {
            return Err(Error::parse(at, format!("dimension {i} is zero")));
        }
        dims.push(d as usize);
    }
    let start = 8 + 4 * rank;
    payload_len(start, &dims, 4, data.len() - start)?;
    let mut values = Vec::with_capacity((data.len() - start) / 4);
    for (i, b) in data[start..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !x.is_finite() {
            return Err(Error::parse(start + 4 * i, "non-finite value"));
        }
        values.push(f64::from(x));
    }
    Tensor::new(dims, values)
}

/// Values are rounded to `f32`; values outside its range are rejected.
pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > usize::from(u16::MAX) {
        return Err(Error::Contract(
            "tensor rank does not fit the header".into(),
        ));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Contract(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for &x in t.data() {
        let y = x as f32;
        if !y.is_finite() {
            return Err(Error::Contract(format!(
                "value {x} is not representable as a finite f32"
            )));
        }
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    parse(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    atomic_write(path, &to_bytes(t)?)
}

/// A rank-3 `C x H x W` file as a feature map.
pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureMap::from_chw_tensor(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-3f32 as f64, 7.0]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(&b[..8], b"RMVT\x01\x00\x02\x00");
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(parse(&b).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert!(parse(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(parse(&long).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(parse(&v2), Err(Error::Parse { offset: 4, .. })));
        let mut r0 = b.clone();
        r0[6] = 0;
        assert!(parse(&r0).is_err());
        let mut d0 = b.clone();
        d0[8] = 0;
        assert!(parse(&d0).is_err());
        let mut nan = b.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse(&nan), Err(Error::Parse { offset: 12, .. })));
        assert!(
            parse(b"RMVT\x01\x00\x03\x00\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff").is_err()
        );
        assert!(parse(b"RMV").is_err());
        assert!(to_bytes(&Tensor::new(vec![1], vec![1e300]).unwrap()).is_err());
    }
}
