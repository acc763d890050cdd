//! Input pipelines: quality versions (extend), selection masks and merging.
//!
//! A pipeline is an ordered list of stages applied to an NCHW batch. An
//! optional leading [`Stage::Extend`] fans every channel out into quality
//! versions; it is precomputed once per dataset by [`Pipeline::prepare`]
//! and not recorded on the tape. [`Stage::Mask`] applies a registered
//! [`SelectionMask`]; [`Stage::MergeSum`] sums groups of consecutive
//! channels.

mod quality;

pub use quality::{quality_transform, quant_table, LUMINANCE_TABLE};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskForward, MaskGeometry, SelectionMask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Stage {
    /// Strictly decreasing qualities in `[1, 100]`.
    Extend { qualities: Vec<u32> },
    Mask { name: String },
    MergeSum { group: usize },
}

/// How per-stage mask costs combine into the total cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    #[default]
    Sum,
    Product,
}

impl Combiner {
    pub fn combine(self, costs: impl IntoIterator<Item = f64>) -> f64 {
        let mut it = costs.into_iter();
        let Some(first) = it.next() else { return 0.0 };
        match self {
            Combiner::Sum => it.fold(first, |a, b| a + b),
            Combiner::Product => it.fold(first, |a, b| a * b),
        }
    }
}

/// Named selection masks, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    names: Vec<String>,
    masks: Vec<SelectionMask>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: SelectionMask) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid("mask_set", format!("mask `{name}` registered twice")));
        }
        self.names.push(name);
        self.masks.push(mask);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&SelectionMask> {
        self.index_of(name).map(|i| &self.masks[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn masks(&self) -> &[SelectionMask] {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut [SelectionMask] {
        &mut self.masks
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SelectionMask)> {
        self.names.iter().map(String::as_str).zip(&self.masks)
    }

    /// Noise-free binary masks, in registration order.
    pub fn final_masks(&self) -> Vec<BinaryMask> {
        self.masks.iter().map(SelectionMask::final_discretize).collect()
    }
}

/// Tape handles of one [`Pipeline::forward`] pass.
#[derive(Clone, Debug)]
pub struct PipelineForward {
    pub output: Var,
    /// Combined mask cost (a scalar; constant 0 without mask stages).
    pub loss: Var,
    /// `(mask index in the set, forward handles)` in stage order.
    pub masks: Vec<(usize, MaskForward)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    input: ImageShape,
    stages: Vec<Stage>,
    combiner: Combiner,
    /// Shape entering each stage, plus the output shape last.
    shapes: Vec<ImageShape>,
}

impl Pipeline {
    pub fn new(input: ImageShape, stages: Vec<Stage>, combiner: Combiner) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::param("pipeline", "input shape must be non-empty"));
        }
        let mut shapes = vec![input];
        let mut names: Vec<&str> = vec![];
        let mut cur = input;
        for (i, stage) in stages.iter().enumerate() {
            cur = match stage {
                Stage::Extend { qualities } => {
                    if i != 0 {
                        return Err(Error::param("stages", format!("stage {i}: extend must be the first stage")));
                    }
                    check_qualities(qualities)?;
                    ImageShape::new(cur.channels * qualities.len(), cur.height, cur.width)
                }
                Stage::Mask { name } => {
                    if names.contains(&name.as_str()) {
                        return Err(Error::param("stages", format!("stage {i}: mask `{name}` used twice")));
                    }
                    names.push(name);
                    cur
                }
                Stage::MergeSum { group } => {
                    if *group == 0 || cur.channels % group != 0 {
                        return Err(Error::param(
                            "stages",
                            format!("stage {i}: merge group {group} does not divide {} channels", cur.channels),
                        ));
                    }
                    ImageShape::new(cur.channels / group, cur.height, cur.width)
                }
            };
            shapes.push(cur);
        }
        Ok(Self {
            input,
            stages,
            combiner,
            shapes,
        })
    }

    /// A pipeline with a single mask stage.
    pub fn single_mask(input: ImageShape, name: impl Into<String>) -> Result<Self> {
        Self::new(input, vec![Stage::Mask { name: name.into() }], Combiner::Sum)
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn output_shape(&self) -> ImageShape {
        *self.shapes.last().unwrap()
    }

    /// Shape of prepared (extended) data, the input of the taped stages.
    pub fn prepared_shape(&self) -> ImageShape {
        self.shapes[self.taped_start()]
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn combiner(&self) -> Combiner {
        self.combiner
    }

    /// Versions per source channel produced by the extend stage.
    pub fn versions(&self) -> Option<usize> {
        match self.stages.first() {
            Some(Stage::Extend { qualities }) => Some(qualities.len()),
            _ => None,
        }
    }

    fn taped_start(&self) -> usize {
        usize::from(matches!(self.stages.first(), Some(Stage::Extend { .. })))
    }

    /// `(name, geometry)` of every mask stage, in order.
    pub fn mask_stages(&self) -> Vec<(&str, MaskGeometry)> {
        self.stages
            .iter()
            .zip(&self.shapes)
            .filter_map(|(st, s)| match st {
                Stage::Mask { name } => Some((name.as_str(), MaskGeometry::new(s.channels, s.width, s.height))),
                _ => None,
            })
            .collect()
    }

    /// Verifies every mask stage has a registered mask of matching geometry.
    pub fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        for (name, geometry) in self.mask_stages() {
            let m = masks
                .get(name)
                .ok_or_else(|| Error::invalid("pipeline", format!("mask `{name}` is not registered")))?;
            if m.geometry() != geometry {
                return Err(Error::invalid(
                    "pipeline",
                    format!("mask `{name}` has geometry {:?}, stage expects {geometry:?}", m.geometry()),
                ));
            }
        }
        Ok(())
    }

    /// Applies the extend stage (if any) to every image. Versions are
    /// stored as `f32`, like any dataset.
    pub fn prepare(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.shape() != self.input {
            return Err(Error::invalid(
                "pipeline",
                format!("dataset shape {} does not match pipeline input {}", ds.shape(), self.input),
            ));
        }
        let Some(Stage::Extend { qualities }) = self.stages.first() else {
            return Ok(ds.clone());
        };
        let s = self.input;
        let mut images = Vec::with_capacity(ds.len() * s.len() * qualities.len());
        for i in 0..ds.len() {
            let img: Vec<f64> = ds.image(i).iter().map(|&v| v as f64).collect();
            for v in extend_image(&img, s, qualities)? {
                images.push(v as f32);
            }
        }
        Dataset::new(ds.name(), self.prepared_shape(), images, ds.labels().to_vec(), ds.class_count())
    }

    /// Records the taped stages on prepared input `x` with the given noise
    /// per mask stage (stage order).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        masks: &MaskSet,
        tau: f64,
        noises: &[Vec<f64>],
    ) -> Result<PipelineForward> {
        self.check_input(tape.shape(x))?;
        let mut cur = x;
        let mut fwds = Vec::new();
        let mut losses = Vec::new();
        for stage in &self.stages[self.taped_start()..] {
            match stage {
                Stage::Extend { .. } => unreachable!("extend is validated to be the first stage"),
                Stage::Mask { name } => {
                    let idx = masks
                        .index_of(name)
                        .ok_or_else(|| Error::invalid("pipeline", format!("mask `{name}` is not registered")))?;
                    let noise = noises
                        .get(fwds.len())
                        .ok_or_else(|| Error::invalid("pipeline", format!("no noise for mask `{name}`")))?;
                    let mask = &masks.masks()[idx];
                    let f = mask.forward(tape, tau, noise)?;
                    cur = mask.apply(tape, cur, &f)?;
                    losses.push(mask.loss(tape, &f)?);
                    fwds.push((idx, f));
                }
                Stage::MergeSum { group } => cur = merge_sum(tape, cur, *group)?,
            }
        }
        let mut it = losses.into_iter();
        let loss = match it.next() {
            None => tape.constant(Tensor::scalar(0.0)),
            Some(first) => {
                let mut acc = first;
                for l in it {
                    acc = match self.combiner {
                        Combiner::Sum => tape.add(acc, l)?,
                        Combiner::Product => tape.mul(acc, l)?,
                    };
                }
                acc
            }
        };
        Ok(PipelineForward {
            output: cur,
            loss,
            masks: fwds,
        })
    }

    /// Applies the taped stages without a tape, using binary masks (given
    /// in mask-set order).
    pub fn forward_hard(&self, x: &Tensor, masks: &MaskSet, finals: &[BinaryMask]) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut cur = x.clone();
        for stage in &self.stages[self.taped_start()..] {
            cur = match stage {
                Stage::Extend { .. } => unreachable!("extend is validated to be the first stage"),
                Stage::Mask { name } => {
                    let idx = masks
                        .index_of(name)
                        .ok_or_else(|| Error::invalid("pipeline", format!("mask `{name}` is not registered")))?;
                    finals
                        .get(idx)
                        .ok_or_else(|| Error::invalid("pipeline", format!("no binary mask for `{name}`")))?
                        .apply(&cur)?
                }
                Stage::MergeSum { group } => merge_sum_values(&cur, *group)?,
            };
        }
        Ok(cur)
    }

    /// Combined cost of the noise-free masks.
    pub fn final_mask_loss(&self, masks: &MaskSet) -> Result<f64> {
        let mut costs = Vec::new();
        for (name, _) in self.mask_stages() {
            let m = masks
                .get(name)
                .ok_or_else(|| Error::invalid("pipeline", format!("mask `{name}` is not registered")))?;
            costs.push(m.costs().total(&m.final_discretize().keep));
        }
        Ok(self.combiner.combine(costs))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.prepared_shape();
        if shape.len() != 4 || shape[1..] != [s.channels, s.height, s.width] {
            return Err(Error::ShapeMismatch {
                op: "pipeline",
                lhs: shape.to_vec(),
                rhs: vec![0, s.channels, s.height, s.width],
            });
        }
        Ok(())
    }
}

fn check_qualities(qualities: &[u32]) -> Result<()> {
    if qualities.is_empty() {
        return Err(Error::param("qualities", "need at least one quality"));
    }
    if qualities.iter().any(|q| !(1..=100).contains(q)) {
        return Err(Error::param("qualities", format!("{qualities:?}: each must lie in [1, 100]")));
    }
    if qualities.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::param("qualities", format!("{qualities:?} is not strictly decreasing")));
    }
    Ok(())
}

/// Quality versions of one CHW image in `[0, 1]`: channel-major, then by
/// quality. Bridges to the `[0, 255]` transform domain and back.
fn extend_image(img: &[f64], s: ImageShape, qualities: &[u32]) -> Result<Vec<f64>> {
    let plane = s.plane();
    let mut out = Vec::with_capacity(img.len() * qualities.len());
    let mut scaled = vec![0.0; plane];
    for ch in 0..s.channels {
        for (d, &v) in scaled.iter_mut().zip(&img[ch * plane..(ch + 1) * plane]) {
            *d = v * 255.0;
        }
        for &q in qualities {
            let t = quality_transform(&scaled, s.width, s.height, q)?;
            out.extend(t.iter().map(|v| v / 255.0));
        }
    }
    Ok(out)
}

/// `[n, c, h, w] → [n, c·v, h, w]`; output channel `ch·v + j` is source
/// channel `ch` at `qualities[j]`. Values are in `[0, 1]`.
pub fn extend(x: &Tensor, qualities: &[u32]) -> Result<Tensor> {
    check_qualities(qualities)?;
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "extend",
            lhs: sh.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let s = ImageShape::new(sh[1], sh[2], sh[3]);
    let mut out = Vec::with_capacity(x.len() * qualities.len());
    for img in x.values().chunks(s.len()) {
        out.extend(extend_image(img, s, qualities)?);
    }
    Tensor::new(&[sh[0], sh[1] * qualities.len(), sh[2], sh[3]], out)
}

fn merge_shape(shape: &[usize], group: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || group == 0 || shape[1] % group != 0 {
        return Err(Error::ShapeMismatch {
            op: "merge_sum",
            lhs: shape.to_vec(),
            rhs: vec![group],
        });
    }
    Ok((shape[0], shape[1] / group, shape[2] * shape[3]))
}

/// Sums each run of `group` consecutive channels, recorded on the tape as a
/// 1×1 convolution with a constant 0/1 kernel.
pub fn merge_sum(tape: &mut Tape, x: Var, group: usize) -> Result<Var> {
    let (_, out_c, _) = merge_shape(tape.shape(x), group)?;
    if group == 1 {
        return Ok(x);
    }
    let in_c = out_c * group;
    let mut kernel = vec![0.0; out_c * in_c];
    for o in 0..out_c {
        for j in 0..group {
            kernel[o * in_c + o * group + j] = 1.0;
        }
    }
    let w = tape.constant(Tensor::new(&[out_c, in_c, 1, 1], kernel)?);
    tape.conv2d(x, w, 1, 0)
}

/// Tape-free [`merge_sum`].
pub fn merge_sum_values(x: &Tensor, group: usize) -> Result<Tensor> {
    let (n, out_c, plane) = merge_shape(x.shape(), group)?;
    let src = x.values();
    let mut out = vec![0.0; n * out_c * plane];
    for b in 0..n {
        for o in 0..out_c {
            let dst = &mut out[(b * out_c + o) * plane..(b * out_c + o + 1) * plane];
            for j in 0..group {
                let s = &src[((b * out_c + o) * group + j) * plane..][..plane];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
        }
    }
    let sh = x.shape();
    Tensor::new(&[n, out_c, sh[2], sh[3]], out)
}

/// Draws noise for every mask stage (fresh Gumbel noise when exploring,
/// zeros otherwise) and runs [`Pipeline::forward`].
pub fn pipeline_forward(
    pipeline: &Pipeline,
    tape: &mut Tape,
    x: Var,
    masks: &mut MaskSet,
    tau: f64,
    explore: bool,
) -> Result<PipelineForward> {
    pipeline.check_masks(masks)?;
    let mut noises = Vec::new();
    for (name, _) in pipeline.mask_stages() {
        let idx = masks.index_of(name).expect("checked above");
        noises.push(masks.masks_mut()[idx].draw_noise(explore));
    }
    pipeline.forward(tape, x, masks, tau, &noises)
}
