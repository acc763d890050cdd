//! Synthetic datasets with known structure.

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Parameters of [`synth_redundant_channels`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedundantChannelParams {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub informative: usize,
    pub noise_sigma: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for RedundantChannelParams {
    fn default() -> Self {
        Self {
            n: 2000,
            width: 16,
            height: 16,
            channels: 8,
            informative: 1,
            noise_sigma: 0.1,
            classes: 4,
            seed: 0,
        }
    }
}

/// Parameters of [`synth_center_target`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterTargetParams {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for CenterTargetParams {
    fn default() -> Self {
        Self {
            n: 2000,
            width: 20,
            height: 20,
            channels: 3,
            classes: 2,
            seed: 0,
        }
    }
}

/// Side of the square window carrying the label in [`synth_center_target`].
pub const CENTER_WINDOW: usize = 6;

/// Class-independent background level and per-pixel noise of
/// [`synth_center_target`]; the window mean of class `c` is shifted by
/// `CENTER_STEP · (c − (classes − 1)/2)`.
const CENTER_BACKGROUND: f64 = 0.5;
const CENTER_NOISE: f64 = 0.2;
const CENTER_STEP: f64 = 0.2;

fn balanced_labels(n: usize, classes: usize, rng: &mut RandomStream) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Images whose class is the grid cell (quadrant, for up to four classes)
/// holding a bright blob in channel 0. Channels `1..informative` are
/// copies of channel 0 with added `N(0, noise_sigma)` noise; the remaining
/// channels are uniform noise. All values are clamped to `[0, 1]`.
pub fn synth_redundant_channels(p: &RedundantChannelParams) -> Result<Dataset> {
    if p.informative == 0 || p.informative > p.channels {
        return Err(Error::param(
            "informative",
            format!("must lie in [1, {}], got {}", p.channels, p.informative),
        ));
    }
    if p.classes < 2 || p.n == 0 || p.width < 4 || p.height < 4 {
        return Err(Error::param("synth", "need n ≥ 1, classes ≥ 2 and images of at least 4x4"));
    }
    let shape = ImageShape::new(p.channels, p.height, p.width);
    let mut rng = RandomStream::new(p.seed, 0);
    let labels = balanced_labels(p.n, p.classes, &mut rng);
    let grid = (p.classes as f64).sqrt().ceil() as usize;
    let (cw, ch) = (p.width as f64 / grid as f64, p.height as f64 / grid as f64);
    let radius = cw.min(ch) / 3.0;
    let plane = shape.plane();
    let mut images = Vec::with_capacity(p.n * shape.len());
    let mut base = vec![0.0f64; plane];
    for &label in &labels {
        let (gx, gy) = ((label % grid) as f64, (label / grid) as f64);
        let cx = (gx + 0.25 + 0.5 * rng.uniform()) * cw;
        let cy = (gy + 0.25 + 0.5 * rng.uniform()) * ch;
        let amp = 0.6 + 0.4 * rng.uniform();
        for y in 0..p.height {
            for x in 0..p.width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                base[y * p.width + x] = amp * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
            }
        }
        images.extend(base.iter().map(|&v| v as f32));
        for _ in 1..p.informative {
            images.extend(base.iter().map(|&v| (v + p.noise_sigma * rng.normal()).clamp(0.0, 1.0) as f32));
        }
        for _ in p.informative..p.channels {
            images.extend((0..plane).map(|_| rng.uniform() as f32));
        }
    }
    Dataset::new("redundant_channels", shape, images, labels, p.classes)
}

/// Noise images whose class only shifts the mean of the central
/// [`CENTER_WINDOW`]² window (all channels); the border is class-independent.
pub fn synth_center_target(p: &CenterTargetParams) -> Result<Dataset> {
    if p.width < CENTER_WINDOW || p.height < CENTER_WINDOW || p.classes < 2 || p.n == 0 || p.channels == 0 {
        return Err(Error::param(
            "synth",
            format!("need n ≥ 1, classes ≥ 2 and images of at least {CENTER_WINDOW}x{CENTER_WINDOW}"),
        ));
    }
    let shape = ImageShape::new(p.channels, p.height, p.width);
    let mut rng = RandomStream::new(p.seed, 0);
    let labels = balanced_labels(p.n, p.classes, &mut rng);
    let (x0, y0) = center_window_origin(p.width, p.height);
    let mut images = Vec::with_capacity(p.n * shape.len());
    for &label in &labels {
        let shift = CENTER_STEP * (label as f64 - (p.classes - 1) as f64 / 2.0);
        for _ in 0..p.channels {
            for y in 0..p.height {
                for x in 0..p.width {
                    let inside = (x0..x0 + CENTER_WINDOW).contains(&x) && (y0..y0 + CENTER_WINDOW).contains(&y);
                    let mean = CENTER_BACKGROUND + if inside { shift } else { 0.0 };
                    images.push((mean + CENTER_NOISE * rng.normal()).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new("center_target", shape, images, labels, p.classes)
}

/// Top-left corner of a centered window of side [`CENTER_WINDOW`].
pub fn center_window_origin(width: usize, height: usize) -> (usize, usize) {
    ((width - CENTER_WINDOW) / 2, (height - CENTER_WINDOW) / 2)
}
