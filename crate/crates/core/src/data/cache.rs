//! The MSKD cached-dataset format.
//!
//! All integers are little-endian `u32`:
//!
//! | offset        | content                                            |
//! |---------------|----------------------------------------------------|
//! | 0             | magic `b"MSKD"`                                    |
//! | 4             | format version ([`MSKD_VERSION`])                  |
//! | 8             | rank `r` (4, or 5 with a version axis)             |
//! | 12            | version axis index, `0xFFFF_FFFF` for none         |
//! | 16            | `r` dims: `[n, c, h, w]` or `[n, c, v, h, w]`      |
//! | 16 + 4r       | class count                                        |
//! | 20 + 4r       | `n` labels                                         |
//! | 20 + 4r + 4n  | `f32` payload in dims order                        |
//!
//! A version axis at index 2 stores an extended dataset whose channel
//! `ch · v + j` holds version `j` of source channel `ch`.

use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};

pub const MSKD_MAGIC: [u8; 4] = *b"MSKD";
pub const MSKD_VERSION: u32 = 1;
const NO_AXIS: u32 = u32::MAX;

/// A dataset read from an MSKD file with its version count, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct MskdFile {
    pub dataset: Dataset,
    pub versions: Option<usize>,
}

/// Writes `ds`; with `versions = Some(v)`, its channels are recorded as
/// `c = channels / v` sources times `v` versions.
pub fn write_mskd(ds: &Dataset, versions: Option<usize>, path: &Path) -> Result<()> {
    let s = ds.shape();
    let (dims, axis) = match versions {
        None => (vec![ds.len(), s.channels, s.height, s.width], NO_AXIS),
        Some(v) if v > 0 && s.channels % v == 0 => (vec![ds.len(), s.channels / v, v, s.height, s.width], 2),
        Some(v) => {
            return Err(Error::param(
                "versions",
                format!("{v} versions do not divide {} channels", s.channels),
            ))
        }
    };
    let to_u32 = |v: usize| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::invalid("write_mskd", format!("{v} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(24 + 4 * dims.len() + 4 * ds.len() + 4 * ds.images().len());
    out.extend_from_slice(&MSKD_MAGIC);
    for v in [MSKD_VERSION, dims.len() as u32, axis] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &d in &dims {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    out.extend_from_slice(&to_u32(ds.class_count())?.to_le_bytes());
    for &l in ds.labels() {
        out.extend_from_slice(&to_u32(l)?.to_le_bytes());
    }
    for &v in ds.images() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated {what}: expected {n} bytes, found {}", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_mskd(path: &Path) -> Result<MskdFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4, "magic")? != MSKD_MAGIC {
        return Err(c.err(0, "bad magic, expected MSKD"));
    }
    let version = c.u32("header")?;
    if version != MSKD_VERSION {
        return Err(c.err(4, format!("unsupported format version {version}")));
    }
    let rank = c.u32("header")? as usize;
    let axis = c.u32("header")?;
    let valid = matches!((rank, axis), (4, NO_AXIS) | (5, 2));
    if !valid {
        return Err(c.err(8, format!("unsupported rank {rank} with version axis {axis}")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
    if dims.contains(&0) {
        return Err(c.err(16, format!("zero-sized dimension in {dims:?}")));
    }
    let classes = c.u32("class count")? as usize;
    let n = dims[0];
    let labels_at = c.pos;
    let labels: Vec<usize> = c
        .take(4 * n, "labels")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    if let Some(i) = labels.iter().position(|&l| l >= classes) {
        return Err(c.err(labels_at + 4 * i, format!("label {} out of range for {classes} classes", labels[i])));
    }
    let count: usize = dims.iter().product();
    let images: Vec<f32> = c
        .take(4 * count, "payload")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let (shape, versions) = if rank == 4 {
        (ImageShape::new(dims[1], dims[2], dims[3]), None)
    } else {
        (ImageShape::new(dims[1] * dims[2], dims[3], dims[4]), Some(dims[2]))
    };
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mskd");
    Ok(MskdFile {
        dataset: Dataset::new(name, shape, images, labels, classes)?,
        versions,
    })
}
