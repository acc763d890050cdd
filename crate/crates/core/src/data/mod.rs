//! Datasets, loaders, synthetic generators and batch iteration.
//!
//! Images are stored as `f32` in NCHW order with values in `[0, 1]`; they
//! are widened to `f64` when a batch is assembled.

mod cache;
mod idx;
mod synth;

pub use cache::{read_mskd, write_mskd, MskdFile, MSKD_MAGIC, MSKD_VERSION};
pub use idx::{load_idx, read_idx_header, write_idx, IdxHeader};
pub use synth::{
    center_window_origin, synth_center_target, synth_redundant_channels, CenterTargetParams,
    RedundantChannelParams, CENTER_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Channels, height and width of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    shape: ImageShape,
    images: Vec<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        images: Vec<f32>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() || shape.is_empty() {
            return Err(Error::invalid("dataset", "a dataset needs at least one non-empty image"));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: vec![images.len()],
                rhs: vec![labels.len(), shape.channels, shape.height, shape.width],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, classes: class_count });
        }
        if let Some(pos) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "dataset",
                format!("value {} at index {pos} lies outside [0, 1]", images[pos]),
            ));
        }
        Ok(Self {
            name: name.into(),
            shape,
            images,
            labels,
            class_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    /// The `i`-th image, CHW.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Examples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(
                "dataset",
                format!("range {range:?} is empty or exceeds {} examples", self.len()),
            ));
        }
        let n = self.shape.len();
        Self::new(
            self.name.clone(),
            self.shape,
            self.images[range.start * n..range.end * n].to_vec(),
            self.labels[range].to_vec(),
            self.class_count,
        )
    }

    /// Splits into the first `at` examples and the rest, in order.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        Ok((self.slice(0..at)?, self.slice(at..self.len())?))
    }

    /// Stacks the given examples into an `[b, c, h, w]` tensor and labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.shape.len();
        let mut values = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("gather", format!("index {i} out of {}", self.len())));
            }
            values.extend(self.image(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        let s = self.shape;
        let x = Tensor::new(&[indices.len(), s.channels, s.height, s.width], values)?;
        Ok((x, labels))
    }

    /// Count of each label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Example indices of each batch of one epoch: a seeded permutation cut
/// into `batch_size` chunks, keeping the final partial batch.
pub fn batch_order(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::param(
            "batch_size",
            format!("must lie in [1, {n}] for {n} examples, got {batch_size}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RandomStream::new(epoch_seed, 0).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of `ds` for one epoch, in the order given by [`batch_order`].
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_> {
    let order = batch_order(ds.len(), batch_size, epoch_seed)?;
    Ok(order.into_iter().map(move |idx| ds.gather(&idx)))
}
