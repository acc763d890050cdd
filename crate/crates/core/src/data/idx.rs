//! IDX containers (big-endian headers, unsigned-byte payloads), optionally
//! gzip-compressed. Byte offsets in errors refer to the decompressed
//! stream.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: [u8; 4],
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses and validates the header of an in-memory IDX file.
pub fn read_idx_header(bytes: &[u8], path: &Path) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), format!("expected 4 magic bytes, found {}", bytes.len())));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic[0] != 0 || magic[1] != 0 {
        return Err(format_err(path, 0, format!("bad magic {magic:02x?}: leading bytes must be zero")));
    }
    if magic[2] != UBYTE {
        return Err(format_err(path, 2, format!("unsupported element type 0x{:02x}, expected 0x08", magic[2])));
    }
    let rank = magic[3] as usize;
    if rank == 0 {
        return Err(format_err(path, 3, "rank must be positive"));
    }
    let need = 4 + 4 * rank;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated header: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let dims = bytes[4..need]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let header = IdxHeader { magic, dims };
    let expected = header.payload_len();
    let actual = bytes.len() - need;
    if actual < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            path,
            need + expected,
            format!("{} trailing bytes after a {expected}-byte payload", actual - expected),
        ));
    }
    Ok(header)
}

/// Loads an image/label IDX pair. Pixel bytes are scaled by 1/255; with
/// `limit`, only the first `limit` examples (file order) are kept. Images
/// may be `[n, h, w]` or `[n, h, w, c]`; the class count is one more than
/// the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = read_bytes(images_path)?;
    let ih = read_idx_header(&images, images_path)?;
    let labels = read_bytes(labels_path)?;
    let lh = read_idx_header(&labels, labels_path)?;

    let (h, w, c) = match ih.dims.as_slice() {
        [_, h, w] => (*h as usize, *w as usize, 1),
        [_, h, w, c] => (*h as usize, *w as usize, *c as usize),
        _ => return Err(format_err(images_path, 3, format!("image rank {} is not 3 or 4", ih.rank()))),
    };
    if lh.rank() != 1 {
        return Err(format_err(labels_path, 3, format!("label rank {} is not 1", lh.rank())));
    }
    let n = ih.dims[0] as usize;
    if lh.dims[0] as usize != n {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels for {n} images in {}", lh.dims[0], images_path.display()),
        ));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let shape = ImageShape::new(c, h, w);
    let per = shape.len();
    let payload = &images[ih.byte_len()..];
    let mut values = vec![0.0f32; n * per];
    for i in 0..n {
        let src = &payload[i * per..(i + 1) * per];
        let dst = &mut values[i * per..(i + 1) * per];
        // HWC on disk, CHW in memory
        for (p, px) in src.chunks_exact(c).enumerate() {
            for (ch, &b) in px.iter().enumerate() {
                dst[ch * h * w + p] = b as f32 / 255.0;
            }
        }
    }
    let label_bytes = &labels[lh.byte_len()..lh.byte_len() + n];
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.split('-').next())
        .unwrap_or("idx");
    Dataset::new(name, shape, values, labels, classes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

fn header_bytes(dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes `ds` as an IDX pair (gzip-compressed if a path ends in `.gz`).
/// Values are stored as `round(v · 255)`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = ds.shape();
    if ds.class_count() > 256 {
        return Err(Error::invalid("write_idx", "labels must fit in one byte"));
    }
    let dims = if s.channels == 1 {
        vec![ds.len(), s.height, s.width]
    } else {
        vec![ds.len(), s.height, s.width, s.channels]
    };
    let mut img = header_bytes(&dims);
    img.reserve(ds.images().len());
    for i in 0..ds.len() {
        let src = ds.image(i);
        for p in 0..s.plane() {
            for ch in 0..s.channels {
                img.push((src[ch * s.plane() + p] * 255.0).round() as u8);
            }
        }
    }
    let mut lab = header_bytes(&[ds.len()]);
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn pair(n: u32, payload: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for d in [n, 2, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(payload);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn loads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = pair(2, &[0, 255, 51, 102, 1, 2, 3, 4], &[3, 1]);
        let ip = write_raw(dir.path(), "img", &img);
        let lp = write_raw(dir.path(), "lab", &lab);
        let ds = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), ImageShape::new(1, 2, 2));
        assert_eq!(ds.image(0), &[0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.class_count(), 4);

        let limited = load_idx(&ip, &lp, Some(1)).unwrap();
        assert_eq!(limited.len(), 1);
        assert_eq!(limited.labels(), &[3]);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = pair(2, &[0; 7], &[0, 1]);
        let ip = write_raw(dir.path(), "img", &img);
        let lp = write_raw(dir.path(), "lab", &lab);
        let err = load_idx(&ip, &lp, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 8 bytes, found 7"), "{msg}");
        assert!(matches!(err, Error::Format { offset: 23, .. }));
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = pair(2, &[0; 8], &[0, 1]);
        img[2] = 0x0d;
        let ip = write_raw(dir.path(), "img", &img);
        let lp = write_raw(dir.path(), "lab", &lab);
        assert!(matches!(load_idx(&ip, &lp, None), Err(Error::Format { offset: 2, .. })));

        let (img, lab) = pair(2, &[0; 8], &[0, 1, 2]);
        let ip = write_raw(dir.path(), "img2", &img);
        let lp = write_raw(dir.path(), "lab2", &lab);
        assert!(matches!(load_idx(&ip, &lp, None), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn gzip_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = pair(2, &[9, 8, 7, 6, 5, 4, 3, 255], &[0, 1]);
        let ds = load_idx(
            &write_raw(dir.path(), "img", &img),
            &write_raw(dir.path(), "lab", &lab),
            None,
        )
        .unwrap();
        let ip = dir.path().join("out-images.gz");
        let lp = dir.path().join("out-labels.gz");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(back.images(), ds.images());
        assert_eq!(back.labels(), ds.labels());
    }
}
