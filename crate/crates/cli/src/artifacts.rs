//! Mask artifacts: PGM snapshots, final-mask files and transfer costs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use maskforge::data::ImageShape;
use maskforge::mask::{BinaryMask, MaskGeometry, MaskKind};

use crate::error::{CliError, Result};

/// Writes a binary PGM ("P5", maxval 255) of `width × height` samples.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pgm: pixel count does not match size");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| CliError::io(path, e))
}

/// Renders a mask as graymaps (kept = 255, dropped = 0): a `k × 1` strip
/// for channel masks, one `w × h` image per channel otherwise. Returns the
/// written paths; `stem` gets a `_c<i>` suffix per channel for pixel masks.
pub fn write_mask_pgm(mask: &BinaryMask, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let px = |k: bool| if k { 255u8 } else { 0 };
    let g = mask.geometry;
    match mask.kind {
        MaskKind::ChannelAny | MaskKind::ChannelXor { .. } => {
            let path = dir.join(format!("{stem}.pgm"));
            let strip: Vec<u8> = mask.keep.iter().map(|&k| px(k)).collect();
            write_pgm(&path, strip.len(), 1, &strip)?;
            Ok(vec![path])
        }
        _ => {
            let plane = g.width * g.height;
            let expanded = mask.expand();
            let mut paths = Vec::with_capacity(g.channels);
            for c in 0..g.channels {
                let path = dir.join(format!("{stem}_c{c}.pgm"));
                let img: Vec<u8> = expanded[c * plane..(c + 1) * plane].iter().map(|&k| px(k)).collect();
                write_pgm(&path, g.width, g.height, &img)?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}

/// A final mask as stored in `masks_final/run_<id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMask {
    pub name: String,
    pub kind: MaskKind,
    pub geometry: MaskGeometry,
    /// Channel-major keep flags, 0 or 1.
    pub keep: Vec<u8>,
}

impl StoredMask {
    pub fn new(name: &str, mask: &BinaryMask) -> Self {
        Self {
            name: name.to_string(),
            kind: mask.kind,
            geometry: mask.geometry,
            keep: mask.keep.iter().map(|&k| u8::from(k)).collect(),
        }
    }

    /// Rejects anything but 0/1 flags of the right count.
    pub fn to_binary(&self) -> Result<BinaryMask> {
        if let Some(v) = self.keep.iter().find(|&&v| v > 1) {
            return Err(CliError::config("keep", format!("mask `{}` is not binary (value {v})", self.name)));
        }
        let cells = match self.kind {
            MaskKind::ChannelAny | MaskKind::ChannelXor { .. } => 1,
            MaskKind::PixelAny | MaskKind::PixelXor => self.geometry.width * self.geometry.height,
            MaskKind::BlockAny { grid_w, grid_h } => grid_w * grid_h,
        };
        if self.keep.len() != cells * self.geometry.channels {
            return Err(CliError::config(
                "keep",
                format!("mask `{}` has {} flags, expected {}", self.name, self.keep.len(), cells * self.geometry.channels),
            ));
        }
        Ok(BinaryMask {
            kind: self.kind,
            geometry: self.geometry,
            keep: self.keep.iter().map(|&v| v == 1).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMasks {
    pub run_id: usize,
    pub grid_point: usize,
    pub seed: u64,
    pub lambda_init: f64,
    pub lambda_fac: f64,
    /// Extend qualities, when the pipeline starts with an extend stage.
    pub qualities: Option<Vec<u32>>,
    /// Noise-free test accuracy and mask cost at the end of the run.
    pub test_accuracy: f64,
    pub mask_loss: f64,
    /// Test accuracy after pretraining, if the run pretrained.
    pub baseline_accuracy: Option<f64>,
    pub masks: Vec<StoredMask>,
}

impl FinalMasks {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTransfer {
    pub name: String,
    pub kind: String,
    pub selected: usize,
    pub total: usize,
    pub selected_fraction: f64,
    /// Payload bytes per image without / with the mask.
    pub bytes_before: f64,
    pub bytes_after: f64,
    /// Keep-bitmap bytes a receiver needs for pixel-level masks.
    pub bitmap_bytes: usize,
    /// `bytes_after / bytes_before`, bitmap excluded.
    pub payload_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub shape: ImageShape,
    pub bytes_per_value: usize,
    pub masks: Vec<MaskTransfer>,
    /// Product of the per-mask payload ratios.
    pub combined_ratio: f64,
}

/// Estimated per-image transfer cost of the given binary masks for input
/// `shape`. Channel masks keep whole `w·h` planes; pixel and block masks
/// keep individual values and need a `⌈w·h·k/8⌉`-byte bitmap; a channel
/// (xor) mask over quality versions keeps one version per source channel,
/// estimated at `w·h·q/100` bytes.
pub fn transfer_cost_report(
    masks: &[StoredMask],
    shape: ImageShape,
    qualities: Option<&[u32]>,
    bytes_per_value: usize,
) -> Result<TransferReport> {
    let bpv = bytes_per_value as f64;
    let plane = (shape.width * shape.height) as f64;
    let mut out = Vec::with_capacity(masks.len());
    for stored in masks {
        let m = stored.to_binary()?;
        let g = m.geometry;
        if g.width != shape.width || g.height != shape.height {
            return Err(CliError::config(
                "shape",
                format!("mask `{}` is {}x{}, input is {shape}", stored.name, g.width, g.height),
            ));
        }
        let k = g.channels;
        let (before, after, bitmap) = match (m.kind, qualities) {
            (MaskKind::ChannelXor { groups }, Some(q)) if groups * q.len() == k => {
                let before = groups as f64 * plane * bpv;
                let after: f64 = m
                    .keep
                    .iter()
                    .enumerate()
                    .filter(|(_, &kept)| kept)
                    .map(|(i, _)| plane * q[i % q.len()] as f64 / 100.0 * bpv)
                    .sum();
                (before, after, 0)
            }
            (MaskKind::ChannelAny | MaskKind::ChannelXor { .. }, _) => {
                (k as f64 * plane * bpv, m.selected() as f64 * plane * bpv, 0)
            }
            _ => {
                let kept = m.expand().iter().filter(|&&b| b).count();
                let n = g.width * g.height * k;
                (n as f64 * bpv, kept as f64 * bpv, n.div_ceil(8))
            }
        };
        out.push(MaskTransfer {
            name: stored.name.clone(),
            kind: m.kind.name().to_string(),
            selected: m.selected(),
            total: m.keep.len(),
            selected_fraction: m.selected_fraction(),
            bytes_before: before,
            bytes_after: after,
            bitmap_bytes: bitmap,
            payload_ratio: after / before,
        });
    }
    Ok(TransferReport {
        shape,
        bytes_per_value,
        combined_ratio: out.iter().map(|m| m.payload_ratio).product(),
        masks: out,
    })
}

/// Parses `WxHxC` (or `WxH` for one channel).
pub fn parse_shape(s: &str) -> Result<ImageShape> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums: std::result::Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse::<usize>()).collect();
    match nums.as_deref() {
        Ok([w, h]) if *w > 0 && *h > 0 => Ok(ImageShape::new(1, *h, *w)),
        Ok([w, h, c]) if *w > 0 && *h > 0 && *c > 0 => Ok(ImageShape::new(*c, *h, *w)),
        _ => Err(CliError::config("shape", format!("`{s}` is not of the form WxHxC"))),
    }
}
