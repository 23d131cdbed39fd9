//! MVSNet-style `cam.txt` files:
//!
//! ```text
//! extrinsic
//! <4 rows of 4>
//!
//! intrinsic
//! <3 rows of 3>
//!
//! depth_min depth_interval [depth_num depth_max]
//! ```
//!
//! The extrinsic maps world to camera coordinates.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use super::atomic_write;
use crate::geometry::Camera;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CamFile {
    pub camera: Camera,
    pub depth_num: Option<f64>,
    pub depth_max: Option<f64>,
}

struct Token<'a> {
    text: &'a str,
    offset: usize,
    line: usize,
}

fn tokens(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split('\n').enumerate() {
        let mut col = 0;
        for word in line.split_ascii_whitespace() {
            let start = col + line[col..].find(word).expect("word comes from line");
            out.push(Token {
                text: word,
                offset: offset + start,
                line: i + 1,
            });
            col = start + word.len();
        }
        offset += line.len() + 1;
    }
    out
}

pub fn parse(data: &[u8]) -> Result<CamFile> {
    let text = std::str::from_utf8(data)
        .map_err(|e| Error::parse(e.valid_up_to(), "camera file is not UTF-8"))?;
    let toks = tokens(text);
    let mut it = toks.iter().peekable();
    let end = data.len();

    let keyword =
        |want: &str, it: &mut std::iter::Peekable<std::slice::Iter<'_, Token<'_>>>| -> Result<()> {
            match it.next() {
                Some(t) if t.text == want => Ok(()),
                Some(t) => Err(Error::parse(
                    t.offset,
                    format!("line {}: expected {want:?}, found {:?}", t.line, t.text),
                )),
                None => Err(Error::parse(
                    end,
                    format!("expected {want:?} before end of file"),
                )),
            }
        };
    let number = |what: &str,
                  it: &mut std::iter::Peekable<std::slice::Iter<'_, Token<'_>>>|
     -> Result<f64> {
        let t = it
            .next()
            .ok_or_else(|| Error::parse(end, format!("expected {what} before end of file")))?;
        match t.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::parse(
                t.offset,
                format!("line {}: invalid {what} {:?}", t.line, t.text),
            )),
        }
    };

    keyword("extrinsic", &mut it)?;
    let mut ext = [0.0; 16];
    for x in &mut ext {
        *x = number("extrinsic entry", &mut it)?;
    }
    keyword("intrinsic", &mut it)?;
    let mut int = [0.0; 9];
    for x in &mut int {
        *x = number("intrinsic entry", &mut it)?;
    }
    let depth_min = number("depth_min", &mut it)?;
    let depth_interval = number("depth_interval", &mut it)?;
    let (depth_num, depth_max) = if it.peek().is_some() {
        let n = number("depth_num", &mut it)?;
        let m = number("depth_max", &mut it)?;
        (Some(n), Some(m))
    } else {
        (None, None)
    };
    if let Some(t) = it.next() {
        return Err(Error::parse(
            t.offset,
            format!("line {}: unexpected trailing token {:?}", t.line, t.text),
        ));
    }
    let camera = Camera::new(
        Matrix3::from_row_slice(&int),
        Matrix4::from_row_slice(&ext),
        depth_min,
        depth_interval,
    )?;
    Ok(CamFile {
        camera,
        depth_num,
        depth_max,
    })
}

/// Numbers use the shortest decimal that parses back to the same value.
pub fn to_text(cam: &CamFile) -> String {
    let mut s = String::from("extrinsic\n");
    let t = cam.camera.extrinsic();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| t[(r, c)].to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.push_str("\nintrinsic\n");
    let k = cam.camera.intrinsic();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| k[(r, c)].to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.push('\n');
    s.push_str(&format!(
        "{} {}",
        cam.camera.depth_min(),
        cam.camera.depth_interval()
    ));
    if let (Some(n), Some(m)) = (cam.depth_num, cam.depth_max) {
        s.push_str(&format!(" {n} {m}"));
    }
    s.push('\n');
    s
}

pub fn read(path: impl AsRef<Path>) -> Result<CamFile> {
    parse(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, cam: &CamFile) -> Result<()> {
    atomic_write(path, to_text(cam).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\nintrinsic\n361.54125 0 82.900625\n0 360.3975 66.383875\n0 0 1\n\n425 2.5\n";

    #[test]
    fn identity_fixture() {
        let c = parse(FIXTURE.as_bytes()).unwrap();
        assert_eq!(c.camera.extrinsic(), &Matrix4::identity());
        assert_eq!(c.camera.intrinsic()[(0, 0)], 361.54125);
        assert_eq!(c.camera.depth_min(), 425.0);
        assert_eq!(c.camera.depth_interval(), 2.5);
        assert_eq!((c.depth_num, c.depth_max), (None, None));
    }

    #[test]
    fn round_trips() {
        let c = parse(FIXTURE.as_bytes()).unwrap();
        assert_eq!(to_text(&c), FIXTURE);
        let four = FIXTURE.replace("425 2.5", "425 2.5 192 935");
        let c = parse(four.as_bytes()).unwrap();
        assert_eq!((c.depth_num, c.depth_max), (Some(192.0), Some(935.0)));
        assert_eq!(parse(to_text(&c).as_bytes()).unwrap(), c);

        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.7, 0.3).into_inner();
        let cam = Camera::from_pose(
            700.123,
            320.5,
            240.25,
            r,
            nalgebra::Vector3::new(0.1, 1e-7, -3.3),
        )
        .unwrap();
        let cf = CamFile {
            camera: cam,
            depth_num: None,
            depth_max: None,
        };
        assert_eq!(parse(to_text(&cf).as_bytes()).unwrap(), cf);
    }

    #[test]
    fn errors_carry_positions() {
        let bad = FIXTURE.replace("0 0 1 0\n", "0 0 1 x\n");
        match parse(bad.as_bytes()) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("line 4"), "{message}"),
            other => panic!("{other:?}"),
        }
        let scaled = FIXTURE.replacen("1 0 0 0", "2 0 0 0", 1);
        match parse(scaled.as_bytes()) {
            Err(Error::Validation(m)) => {
                assert!(m.contains("determinant") && m.contains("residual"), "{m}")
            }
            other => panic!("{other:?}"),
        }
        assert!(parse(FIXTURE.replace("425 2.5", "425").as_bytes()).is_err());
        assert!(parse(FIXTURE.replace("425 2.5", "425 2.5 192").as_bytes()).is_err());
        assert!(parse(FIXTURE.replace("425 2.5", "425 2.5 192 935 1").as_bytes()).is_err());
        assert!(parse(b"intrinsic").is_err());
    }
}
