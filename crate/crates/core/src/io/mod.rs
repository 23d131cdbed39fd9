//! File formats. Every reader has a `parse(&[u8])` entry point that never
//! touches the filesystem; writers produce bytes that parse back to an equal
//! value. Files are written atomically.

pub mod cam;
pub mod config;
pub mod pfm;
pub mod pgm;
pub mod ply;
pub mod ppm;
pub mod rmvt;
pub mod scene;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Whitespace-separated header tokens of the netpbm family (PGM, PPM, PFM).
pub(crate) struct HeaderTokens<'a> {
    data: &'a [u8],
    pos: usize,
    comments: bool,
}

impl<'a> HeaderTokens<'a> {
    pub(crate) fn new(data: &'a [u8], comments: bool) -> Self {
        Self {
            data,
            pos: 0,
            comments,
        }
    }

    /// The next token and its byte offset.
    pub(crate) fn next(&mut self, what: &str) -> Result<(&'a str, usize)> {
        loop {
            match self.data.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') if self.comments => {
                    while self.data.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::parse(
                        self.pos,
                        format!("unexpected end of header, expected {what}"),
                    ))
                }
            }
        }
        let start = self.pos;
        while self
            .data
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        let token = std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::parse(start, format!("{what} is not ASCII")))?;
        Ok((token, start))
    }

    pub(crate) fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<(T, usize)> {
        let (tok, at) = self.next(what)?;
        let value = tok
            .parse()
            .map_err(|_| Error::parse(at, format!("invalid {what} {tok:?}")))?;
        Ok((value, at))
    }

    /// Consumes the single whitespace byte that ends the header and returns
    /// the payload offset.
    pub(crate) fn end(&mut self) -> Result<usize> {
        match self.data.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::parse(
                self.pos,
                "header must end with one whitespace byte",
            )),
        }
    }
}

pub(crate) fn positive_dim(value: (u64, usize), what: &str) -> Result<usize> {
    let (v, at) = value;
    if v == 0 {
        return Err(Error::parse(at, format!("{what} must be positive")));
    }
    usize::try_from(v).map_err(|_| Error::parse(at, format!("{what} too large")))
}

pub(crate) fn payload_len(
    at: usize,
    dims: &[usize],
    bytes_per: usize,
    available: usize,
) -> Result<usize> {
    let need = dims
        .iter()
        .try_fold(bytes_per, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(at, "payload size overflows"))?;
    if available < need {
        return Err(Error::parse(
            at + available,
            format!("payload truncated: {available} of {need} bytes"),
        ));
    }
    if available > need {
        return Err(Error::parse(
            at + need,
            format!("{} trailing bytes after payload", available - need),
        ));
    }
    Ok(need)
}
