//! Selection masks: parameterization, Gumbel-Max discretization with a
//! temperature-softmax surrogate, straight-through application and the
//! mask cost `Q`.
//!
//! Every mask is a set of independent categorical groups over real-valued
//! logits. "Any" kinds have one binary keep/drop group per selectable
//! element (slot 0 = keep, slot 1 = drop); "xor" kinds have one group per
//! location whose members compete for a single selection.
//!
//! Logit layouts (row-major):
//!
//! | kind        | logits shape            | group width |
//! |-------------|-------------------------|-------------|
//! | ChannelAny  | `[k, 1, 1, 2]`          | 2           |
//! | ChannelXor  | `[groups, k / groups]`  | k / groups  |
//! | PixelAny    | `[k, h, w, 2]`          | 2           |
//! | PixelXor    | `[h, w, k]`             | k           |
//! | BlockAny    | `[k, grid_h, grid_w, 2]`| 2           |
//!
//! Keep vectors and per-element costs are always channel-major: `[k, cells]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{RandomStream, StreamState};

/// Floor applied to the positive mask weights before taking logs.
pub const MIN_WEIGHT: f64 = 1e-4;

const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskKind {
    ChannelAny,
    /// Exactly one channel per group of `k / groups` consecutive channels.
    ChannelXor {
        #[serde(default = "one")]
        groups: usize,
    },
    PixelAny,
    PixelXor,
    /// Keep/drop decisions on a `grid_w × grid_h` partition of the image.
    /// The last row and column of cells absorb any remainder.
    BlockAny { grid_w: usize, grid_h: usize },
}

fn one() -> usize {
    1
}

impl MaskKind {
    pub fn is_xor(&self) -> bool {
        matches!(self, MaskKind::ChannelXor { .. } | MaskKind::PixelXor)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::ChannelAny => "channel(any)",
            MaskKind::ChannelXor { .. } => "channel(xor)",
            MaskKind::PixelAny => "pixel(any)",
            MaskKind::PixelXor => "pixel(xor)",
            MaskKind::BlockAny { .. } => "block(any)",
        }
    }
}

/// Channel count and spatial size of the tensor a mask is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGeometry {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl MaskGeometry {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        Self { channels, width, height }
    }
}

/// Which elements start out selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPattern {
    /// Every element ("any" kinds only, or xor groups of width 1).
    All,
    /// The same member index in every group. For "any" kinds, selects that
    /// channel only.
    Index(usize),
    /// Explicit keep flags in keep-vector (channel-major) order.
    Pattern(Vec<bool>),
}

/// Per-element costs; `Q = Σ_selected weight_i / denominator`.
///
/// Keeping the common denominator separate makes uniform costs exact:
/// with unit weights and denominator `n`, `Q` is exactly `count / n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCosts {
    weights: Vec<f64>,
    denominator: f64,
}

impl MaskCosts {
    pub fn new(weights: Vec<f64>, denominator: f64) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("costs", "weights must be finite and non-negative"));
        }
        if !(denominator.is_finite() && denominator > 0.0) {
            return Err(Error::param("costs", format!("denominator must be positive, got {denominator}")));
        }
        Ok(Self { weights, denominator })
    }

    /// Cost `1/n` for each of `n` elements.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            denominator: n as f64,
        }
    }

    /// Cost `q / (c·100)` for each version of each of `c` source channels,
    /// laid out channel-major then by quality.
    pub fn quality(channels: usize, qualities: &[f64]) -> Self {
        let weights = (0..channels).flat_map(|_| qualities.iter().copied()).collect();
        Self {
            weights,
            denominator: channels as f64 * 100.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Largest attainable `Q` (every element selected).
    pub fn max_total(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.denominator
    }

    /// `Q` of a binary keep vector.
    pub fn total(&self, keep: &[bool]) -> f64 {
        // an empty f64 `sum()` is -0.0, which would print as "-0"
        let sum = self
            .weights
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .fold(0.0, |acc, (w, _)| acc + w);
        sum / self.denominator
    }
}

/// Hard one-hot mask `m^D` and its softmax surrogate `m^S`, both in the
/// logits layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePair {
    pub hard: Tensor,
    pub soft: Tensor,
}

/// Binary keep decisions of a mask after discretization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub kind: MaskKind,
    pub geometry: MaskGeometry,
    /// Channel-major `[k, cells]` keep flags.
    pub keep: Vec<bool>,
}

impl BinaryMask {
    pub fn cells(&self) -> usize {
        self.keep.len() / self.geometry.channels
    }

    pub fn selected(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected() as f64 / self.keep.len() as f64
    }

    /// Per-pixel keep flags `[k, h, w]`.
    pub fn expand(&self) -> Vec<bool> {
        let g = self.geometry;
        let plane = g.width * g.height;
        let mut out = vec![false; g.channels * plane];
        let cells = self.cells();
        for c in 0..g.channels {
            for p in 0..plane {
                let cell = match cells {
                    1 => 0,
                    n if n == plane => p,
                    _ => block_cell(self.kind, g, p % g.width, p / g.width),
                };
                out[c * plane + p] = self.keep[c * cells + cell];
            }
        }
        out
    }

    /// `x ⊙ keep` for an NCHW batch without recording a tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry;
        let s = x.shape();
        if s.len() != 4 || s[1] != g.channels || s[2] != g.height || s[3] != g.width {
            return Err(Error::ShapeMismatch {
                op: "apply_mask",
                lhs: s.to_vec(),
                rhs: vec![0, g.channels, g.height, g.width],
            });
        }
        let keep = self.expand();
        let mut out = x.values().to_vec();
        for img in out.chunks_mut(keep.len()) {
            for (v, &k) in img.iter_mut().zip(&keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        Tensor::new(s, out)
    }
}

fn block_cell(kind: MaskKind, g: MaskGeometry, x: usize, y: usize) -> usize {
    let MaskKind::BlockAny { grid_w, grid_h } = kind else {
        unreachable!("block_cell on {kind:?}")
    };
    let cx = (x / (g.width / grid_w)).min(grid_w - 1);
    let cy = (y / (g.height / grid_h)).min(grid_h - 1);
    cy * grid_w + cx
}

/// `-ln(-ln(u))` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel samples.
pub fn sample_gumbel(shape: &[usize], rng: &mut RandomStream) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| gumbel_from_uniform(rng.uniform())).collect();
    Tensor::new(shape, values).expect("sample_gumbel: zero-sized shape")
}

/// Per group: `hard = one_hot(argmax z)`, `soft = softmax(z / tau)` with
/// `z = logits + noise`. Ties go to the lowest index.
pub fn discretize_logits(logits: &[f64], noise: &[f64], group: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    let mut hard = vec![0.0; z.len()];
    let mut soft: Vec<f64> = z.iter().map(|v| v / tau).collect();
    for ((zg, hg), sg) in z.chunks(group).zip(hard.chunks_mut(group)).zip(soft.chunks_mut(group)) {
        let mut best = 0;
        for (i, v) in zg.iter().enumerate() {
            if *v > zg[best] {
                best = i;
            }
        }
        hg[best] = 1.0;
        softmax_in_place(sg);
    }
    (hard, soft)
}

/// Tape handles produced by [`SelectionMask::forward`].
#[derive(Clone, Debug)]
pub struct MaskForward {
    /// Differentiable logits leaf; its gradient feeds the mask optimizer.
    pub logits: Var,
    /// Straight-through keep vector `[k · cells]`: hard values, soft gradients.
    pub keep: Var,
    pub pair: DiscretePair,
}

/// A trainable selection mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    kind: MaskKind,
    geometry: MaskGeometry,
    logits: Parameter,
    costs: MaskCosts,
    noise: RandomStream,
}

/// Serializable snapshot of a [`SelectionMask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub kind: MaskKind,
    pub geometry: MaskGeometry,
    pub logits: Parameter,
    pub costs: MaskCosts,
    pub noise: StreamState,
}

impl SelectionMask {
    /// Logits shape for a kind and geometry, validating the combination.
    pub fn logits_shape(kind: MaskKind, g: MaskGeometry) -> Result<Vec<usize>> {
        if g.channels == 0 || g.width == 0 || g.height == 0 {
            return Err(Error::param("geometry", format!("dimensions must be positive, got {g:?}")));
        }
        Ok(match kind {
            MaskKind::ChannelAny => vec![g.channels, 1, 1, 2],
            MaskKind::ChannelXor { groups } => {
                if groups == 0 || g.channels % groups != 0 {
                    return Err(Error::param(
                        "groups",
                        format!("{groups} groups do not divide {} channels", g.channels),
                    ));
                }
                vec![groups, g.channels / groups]
            }
            MaskKind::PixelAny => vec![g.channels, g.height, g.width, 2],
            MaskKind::PixelXor => vec![g.height, g.width, g.channels],
            MaskKind::BlockAny { grid_w, grid_h } => {
                if grid_w == 0 || grid_h == 0 || grid_w > g.width || grid_h > g.height {
                    return Err(Error::param(
                        "grid",
                        format!("{grid_w}x{grid_h} grid does not tile a {}x{} image", g.width, g.height),
                    ));
                }
                vec![g.channels, grid_h, grid_w, 2]
            }
        })
    }

    /// Initializes logits to `ln(weight) + ε` with weight 1 for selected and
    /// [`MIN_WEIGHT`] for unselected slots and `ε ~ N(0, sigma)`.
    pub fn init(
        kind: MaskKind,
        geometry: MaskGeometry,
        pattern: &InitPattern,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let shape = Self::logits_shape(kind, geometry)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be non-negative, got {sigma}")));
        }
        let cells = keep_cells(kind, geometry);
        let n_keep = geometry.channels * cells;
        let keep: Vec<bool> = match pattern {
            InitPattern::All => vec![true; n_keep],
            InitPattern::Index(i) => match kind {
                MaskKind::ChannelXor { groups } => {
                    let width = geometry.channels / groups;
                    if *i >= width {
                        return Err(Error::param("init", format!("index {i} exceeds group width {width}")));
                    }
                    (0..n_keep).map(|j| j % width == *i).collect()
                }
                _ => {
                    if *i >= geometry.channels {
                        return Err(Error::param("init", format!("index {i} exceeds {} channels", geometry.channels)));
                    }
                    (0..n_keep).map(|j| j / cells == *i).collect()
                }
            },
            InitPattern::Pattern(p) => {
                if p.len() != n_keep {
                    return Err(Error::param("init", format!("pattern has {} entries, expected {n_keep}", p.len())));
                }
                p.clone()
            }
        };

        let log_min = MIN_WEIGHT.ln();
        let mut rng = RandomStream::new(seed, 0);
        let n: usize = shape.iter().product();
        let mut logits = vec![0.0; n];
        match kind {
            MaskKind::ChannelAny | MaskKind::PixelAny | MaskKind::BlockAny { .. } => {
                for (i, &k) in keep.iter().enumerate() {
                    let (a, b) = if k { (0.0, log_min) } else { (log_min, 0.0) };
                    logits[2 * i] = a;
                    logits[2 * i + 1] = b;
                }
            }
            MaskKind::ChannelXor { .. } | MaskKind::PixelXor => {
                let group = *shape.last().unwrap();
                let mut selected = vec![0usize; n / group];
                for (e, &k) in keep.iter().enumerate() {
                    let pos = xor_logit_index(kind, geometry, e);
                    logits[pos] = if k { 0.0 } else { log_min };
                    if k {
                        selected[pos / group] += 1;
                    }
                }
                if let Some(bad) = selected.iter().position(|&c| c != 1) {
                    return Err(Error::param(
                        "init",
                        format!("xor group {bad} has {} selections, expected exactly 1", selected[bad]),
                    ));
                }
            }
        }
        for l in logits.iter_mut() {
            *l += sigma * rng.normal();
        }

        let logits = Parameter::new(Tensor::new(&shape, logits)?);
        Ok(Self {
            kind,
            geometry,
            logits,
            costs: MaskCosts::uniform(n_keep),
            noise: RandomStream::new(seed, 1),
        })
    }

    pub fn with_costs(mut self, costs: MaskCosts) -> Result<Self> {
        if costs.len() != self.selectable_len() {
            return Err(Error::param(
                "costs",
                format!("{} costs for {} selectable elements", costs.len(), self.selectable_len()),
            ));
        }
        self.costs = costs;
        Ok(self)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn geometry(&self) -> MaskGeometry {
        self.geometry
    }

    pub fn costs(&self) -> &MaskCosts {
        &self.costs
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits.tensor
    }

    pub fn parameter_mut(&mut self) -> &mut Parameter {
        &mut self.logits
    }

    pub fn noise_stream_mut(&mut self) -> &mut RandomStream {
        &mut self.noise
    }

    /// Members per categorical group.
    pub fn group_width(&self) -> usize {
        *self.logits.tensor.shape().last().unwrap()
    }

    /// Spatial cells per channel in the keep vector.
    pub fn cells(&self) -> usize {
        keep_cells(self.kind, self.geometry)
    }

    /// Length of the keep vector (and of the cost vector).
    pub fn selectable_len(&self) -> usize {
        self.geometry.channels * self.cells()
    }

    /// Fresh Gumbel noise in the logits layout, or zeros when not exploring.
    pub fn draw_noise(&mut self, explore: bool) -> Vec<f64> {
        let shape = self.logits.tensor.shape().to_vec();
        if explore {
            sample_gumbel(&shape, &mut self.noise).into_values()
        } else {
            vec![0.0; self.logits.tensor.len()]
        }
    }

    pub fn discretize_with_noise(&self, tau: f64, noise: &[f64]) -> Result<DiscretePair> {
        if !(tau > 0.0) {
            return Err(Error::param("tau", format!("must be positive, got {tau}")));
        }
        let shape = self.logits.tensor.shape();
        let (hard, soft) = discretize_logits(self.logits.tensor.values(), noise, self.group_width(), tau);
        Ok(DiscretePair {
            hard: Tensor::new(shape, hard)?,
            soft: Tensor::new(shape, soft)?,
        })
    }

    /// Hard/soft pair; draws noise from the mask's own stream when exploring.
    pub fn discretize(&mut self, tau: f64, explore: bool) -> Result<DiscretePair> {
        let noise = self.draw_noise(explore);
        self.discretize_with_noise(tau, &noise)
    }

    /// Channel-major keep flags read off a hard mask.
    pub fn keep_from_hard(&self, hard: &Tensor) -> Vec<bool> {
        let h = hard.values();
        match self.kind {
            MaskKind::ChannelAny | MaskKind::PixelAny | MaskKind::BlockAny { .. } => {
                h.chunks(2).map(|g| g[0] == 1.0).collect()
            }
            MaskKind::ChannelXor { .. } | MaskKind::PixelXor => (0..self.selectable_len())
                .map(|e| h[xor_logit_index(self.kind, self.geometry, e)] == 1.0)
                .collect(),
        }
    }

    /// Noise-free binary mask.
    pub fn final_discretize(&self) -> BinaryMask {
        let zeros = vec![0.0; self.logits.tensor.len()];
        let pair = self
            .discretize_with_noise(1.0, &zeros)
            .expect("unit temperature is valid");
        BinaryMask {
            kind: self.kind,
            geometry: self.geometry,
            keep: self.keep_from_hard(&pair.hard),
        }
    }

    /// Records the straight-through mask on `tape`: the keep vector carries
    /// the hard values while its gradient flows through the softmax surrogate.
    pub fn forward(&self, tape: &mut Tape, tau: f64, noise: &[f64]) -> Result<MaskForward> {
        let pair = self.discretize_with_noise(tau, noise)?;
        let shape = self.logits.tensor.shape().to_vec();
        let logits = tape.param(self.logits.tensor.clone());
        let g = tape.constant(Tensor::new(&shape, noise.to_vec())?);
        let z = tape.add(logits, g)?;
        let z = tape.div_scalar(z, tau)?;
        let soft = tape.softmax_lastaxis(z)?;
        let soft_fixed = tape.detach(soft);
        let delta = tape.sub(soft, soft_fixed)?;
        let hard = tape.constant(pair.hard.clone());
        let st = tape.add(hard, delta)?;

        let k = self.geometry.channels;
        let cells = self.cells();
        let keep = match self.kind {
            MaskKind::ChannelAny | MaskKind::PixelAny | MaskKind::BlockAny { .. } => {
                let groups = tape.reshape(st, &[k * cells, 2])?;
                let slot0 = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0])?);
                let kept = tape.matmul(groups, slot0)?;
                tape.reshape(kept, &[k * cells])?
            }
            MaskKind::ChannelXor { .. } => tape.reshape(st, &[k])?,
            MaskKind::PixelXor => {
                let grid = tape.reshape(st, &[cells, k])?;
                let by_channel = tape.transpose(grid)?;
                tape.reshape(by_channel, &[k * cells])?
            }
        };
        Ok(MaskForward { logits, keep, pair })
    }

    /// `x ⊙ keep` for an NCHW batch `x`, broadcasting the keep vector over
    /// the batch and over each channel's (or cell's) pixels.
    pub fn apply(&self, tape: &mut Tape, x: Var, fwd: &MaskForward) -> Result<Var> {
        let g = self.geometry;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != g.channels || s[2] != g.height || s[3] != g.width {
            return Err(Error::ShapeMismatch {
                op: "apply_mask",
                lhs: s,
                rhs: vec![0, g.channels, g.height, g.width],
            });
        }
        let k = g.channels;
        let per_pixel = match self.kind {
            MaskKind::ChannelAny | MaskKind::ChannelXor { .. } => tape.reshape(fwd.keep, &[1, k, 1, 1])?,
            MaskKind::PixelAny | MaskKind::PixelXor => tape.reshape(fwd.keep, &[1, k, g.height, g.width])?,
            MaskKind::BlockAny { grid_w, grid_h } => {
                let cells = grid_w * grid_h;
                let plane = g.width * g.height;
                let mut assign = vec![0.0; cells * plane];
                for y in 0..g.height {
                    for x in 0..g.width {
                        let p = y * g.width + x;
                        assign[block_cell(self.kind, g, x, y) * plane + p] = 1.0;
                    }
                }
                let assign = tape.constant(Tensor::new(&[cells, plane], assign)?);
                let keep = tape.reshape(fwd.keep, &[k, cells])?;
                let spread = tape.matmul(keep, assign)?;
                tape.reshape(spread, &[1, k, g.height, g.width])?
            }
        };
        let full = tape.broadcast_to(per_pixel, &s)?;
        tape.mul(x, full)
    }

    /// Straight-through mask cost `Q = Σ keep_i · weight_i / denominator`.
    pub fn loss(&self, tape: &mut Tape, fwd: &MaskForward) -> Result<Var> {
        let n = self.selectable_len();
        let w = tape.constant(Tensor::new(&[n], self.costs.weights.clone())?);
        let weighted = tape.mul(fwd.keep, w)?;
        let sum = tape.reduce_sum(weighted)?;
        tape.div_scalar(sum, self.costs.denominator)
    }

    pub fn state(&self) -> MaskState {
        MaskState {
            kind: self.kind,
            geometry: self.geometry,
            logits: self.logits.clone(),
            costs: self.costs.clone(),
            noise: self.noise.state(),
        }
    }

    pub fn from_state(state: MaskState) -> Result<Self> {
        let shape = Self::logits_shape(state.kind, state.geometry)?;
        if state.logits.tensor.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "mask_state",
                lhs: state.logits.tensor.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(Self {
            kind: state.kind,
            geometry: state.geometry,
            logits: state.logits,
            costs: state.costs,
            noise: RandomStream::from_state(&state.noise),
        })
    }
}

fn keep_cells(kind: MaskKind, g: MaskGeometry) -> usize {
    match kind {
        MaskKind::ChannelAny | MaskKind::ChannelXor { .. } => 1,
        MaskKind::PixelAny | MaskKind::PixelXor => g.width * g.height,
        MaskKind::BlockAny { grid_w, grid_h } => grid_w * grid_h,
    }
}

/// Logit index of keep element `e` (channel-major) for xor kinds.
fn xor_logit_index(kind: MaskKind, g: MaskGeometry, e: usize) -> usize {
    match kind {
        MaskKind::ChannelXor { .. } => e,
        MaskKind::PixelXor => {
            let plane = g.width * g.height;
            let (c, p) = (e / plane, e % plane);
            p * g.channels + c
        }
        _ => unreachable!("xor_logit_index on {kind:?}"),
    }
}
