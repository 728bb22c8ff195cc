//! MVOL1 reader and writer.
//!
//! ```text
//! MVOL1 <i16|f32>
//! <nx> <ny> <nz>
//! <sx> <sy> <sz>
//! <ox> <oy> <oz>
//! <little-endian payload, x fastest, z slowest>
//! ```
//!
//! `Hu` volumes are written as int16 (rounded, saturated); everything else
//! as f32. An int16 file loads as `Hu`, an f32 file as `Normalized`.

use std::fs;
use std::path::Path;

use super::{Domain, Grid, Volume3D};
use crate::error::{Error, Result};

const MAGIC: &str = "MVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleType {
    I16,
    F32,
}

impl SampleType {
    fn size(self) -> usize {
        match self {
            SampleType::I16 => 2,
            SampleType::F32 => 4,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SampleType::I16 => "i16",
            SampleType::F32 => "f32",
        }
    }
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(vol)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode(vol: &Volume3D) -> Vec<u8> {
    let g = vol.grid();
    let sample = match vol.domain() {
        Domain::Hu => SampleType::I16,
        _ => SampleType::F32,
    };
    let header = format!(
        "{MAGIC} {}\n{} {} {}\n{} {} {}\n{} {} {}\n",
        sample.tag(),
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2],
    );
    let mut out = Vec::with_capacity(header.len() + vol.data().len() * sample.size());
    out.extend_from_slice(header.as_bytes());
    match sample {
        SampleType::I16 => {
            for &v in vol.data() {
                let q = v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        SampleType::F32 => {
            for &v in vol.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("MVOL1 header", "unterminated header line"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("MVOL1 header", "non-UTF-8 header"))
}

fn parse_triple<T: std::str::FromStr>(line: &str, what: &str) -> Result<[T; 3]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::format(
            "MVOL1 header",
            format!("{what} line needs 3 fields, got {line:?}"),
        ));
    }
    let mut out = Vec::with_capacity(3);
    for f in fields {
        out.push(
            f.parse::<T>()
                .map_err(|_| Error::format("MVOL1 header", format!("bad {what} value {f:?}")))?,
        );
    }
    let arr: [T; 3] = out
        .try_into()
        .unwrap_or_else(|_| unreachable!("three fields checked above"));
    Ok(arr)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Volume3D> {
    let mut pos = 0;
    let first = next_line(bytes, &mut pos)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::format("MVOL1 header", format!("bad magic line {first:?}")));
    }
    let sample = match parts.next() {
        Some("i16") => SampleType::I16,
        Some("f32") => SampleType::F32,
        other => {
            return Err(Error::format("MVOL1 header", format!("unknown sample type {other:?}")))
        }
    };
    if parts.next().is_some() {
        return Err(Error::format("MVOL1 header", "trailing fields on magic line"));
    }
    let dims: [usize; 3] = parse_triple(next_line(bytes, &mut pos)?, "dims")?;
    let spacing: [f64; 3] = parse_triple(next_line(bytes, &mut pos)?, "spacing")?;
    let origin: [f64; 3] = parse_triple(next_line(bytes, &mut pos)?, "origin")?;
    let grid = Grid::new(dims, spacing, origin)
        .map_err(|e| Error::format("MVOL1 header", e.to_string()))?;

    let payload = &bytes[pos..];
    let expected = grid
        .len()
        .checked_mul(sample.size())
        .ok_or_else(|| Error::format("MVOL1 header", "dims overflow"))?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::format(
            "MVOL1 payload",
            format!("{} bytes for dims {dims:?}, expected {expected}", payload.len()),
        ));
    }
    let (domain, data) = match sample {
        SampleType::I16 => (
            Domain::Hu,
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect(),
        ),
        SampleType::F32 => (
            Domain::Normalized,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Volume3D::new(grid, domain, data)
}
