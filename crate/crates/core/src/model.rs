//! Small feed-forward classifiers described by a layer list.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    /// 2×2 max pooling, stride 2.
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Flatten,
    Dense { out: usize },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: ImageShape,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image(ImageShape),
    Flat(usize),
}

impl ModelSpec {
    /// Conv(8, 5×5) → relu → pool → conv(16, 5×5) → relu → pool → dense(120) → relu → dense(classes).
    pub fn lenet_small(input: ImageShape, classes: usize) -> Self {
        Self {
            input,
            classes,
            layers: vec![
                Layer::Conv { out: 8, kernel: 5, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv { out: 16, kernel: 5, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { out: 120 },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
        }
    }

    /// Output shape of every layer, checking that the last one emits
    /// `classes` logits.
    pub fn shape_chain(&self) -> Result<Vec<ActShape>> {
        let bad = |i: usize, msg: String| Error::invalid("model", format!("layer {i}: {msg}"));
        if self.input.is_empty() || self.classes == 0 {
            return Err(Error::invalid("model", "input shape and class count must be positive"));
        }
        let mut cur = ActShape::Image(self.input);
        let mut chain = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (Layer::Conv { out, kernel, stride, pad }, ActShape::Image(s)) => {
                    if out == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "conv sizes must be positive".into()));
                    }
                    if s.height + 2 * pad < kernel || s.width + 2 * pad < kernel {
                        return Err(bad(i, format!("{kernel}x{kernel} kernel exceeds padded input {s}")));
                    }
                    ActShape::Image(ImageShape::new(
                        out,
                        (s.height + 2 * pad - kernel) / stride + 1,
                        (s.width + 2 * pad - kernel) / stride + 1,
                    ))
                }
                (Layer::MaxPool2, ActShape::Image(s)) => {
                    if s.height < 2 || s.width < 2 {
                        return Err(bad(i, format!("cannot pool a {s} input")));
                    }
                    ActShape::Image(ImageShape::new(s.channels, s.height / 2, s.width / 2))
                }
                (Layer::Flatten, ActShape::Image(s)) => ActShape::Flat(s.len()),
                (Layer::Relu, s) => s,
                (Layer::Dense { out }, ActShape::Flat(_)) => {
                    if out == 0 {
                        return Err(bad(i, "dense width must be positive".into()));
                    }
                    ActShape::Flat(out)
                }
                (Layer::Dense { .. }, ActShape::Image(_)) => return Err(bad(i, "dense needs a flatten first".into())),
                (l, ActShape::Flat(_)) => return Err(bad(i, format!("{l:?} needs an image input"))),
            };
            chain.push(cur);
        }
        if cur != ActShape::Flat(self.classes) {
            return Err(Error::invalid(
                "model",
                format!("final layer emits {cur:?}, expected {} logits", self.classes),
            ));
        }
        Ok(chain)
    }
}

/// Network parameters: weight and bias of every conv/dense layer, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
}

/// Seeded Kaiming-uniform weights (`±sqrt(6 / fan_in)`), zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let chain = spec.shape_chain()?;
    let mut rng = RandomStream::new(seed, 2);
    let mut params = Vec::new();
    let mut prev = ActShape::Image(spec.input);
    for (layer, out) in spec.layers.iter().zip(&chain) {
        let (wshape, fan_in, bias) = match (*layer, prev) {
            (Layer::Conv { out, kernel, .. }, ActShape::Image(s)) => {
                (vec![out, s.channels, kernel, kernel], s.channels * kernel * kernel, out)
            }
            (Layer::Dense { out }, ActShape::Flat(n)) => (vec![n, out], n, out),
            _ => {
                prev = *out;
                continue;
            }
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = wshape.iter().product();
        let w = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
        params.push(Parameter::new(Tensor::new(&wshape, w)?));
        params.push(Parameter::new(Tensor::zeros(&[bias])));
        prev = *out;
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records the network on `tape` for an NCHW batch; returns the logits
    /// and the parameter leaves (same order as [`Model::params`]).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = self.spec.input;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != [s.channels, s.height, s.width] {
            return Err(Error::ShapeMismatch {
                op: "model",
                lhs: xs.to_vec(),
                rhs: vec![0, s.channels, s.height, s.width],
            });
        }
        let n = xs[0];
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut params = self.params.iter();
        let mut cur = x;
        for layer in &self.spec.layers {
            cur = match *layer {
                Layer::Conv { out, stride, pad, .. } => {
                    let w = tape.param(params.next().unwrap().tensor.clone());
                    let b = tape.param(params.next().unwrap().tensor.clone());
                    leaves.extend([w, b]);
                    let y = tape.conv2d(cur, w, stride, pad)?;
                    let b = tape.reshape(b, &[1, out, 1, 1])?;
                    let target = tape.shape(y).to_vec();
                    let b = tape.broadcast_to(b, &target)?;
                    tape.add(y, b)?
                }
                Layer::Dense { out } => {
                    let w = tape.param(params.next().unwrap().tensor.clone());
                    let b = tape.param(params.next().unwrap().tensor.clone());
                    leaves.extend([w, b]);
                    let y = tape.matmul(cur, w)?;
                    let b = tape.broadcast_to(b, &[n, out])?;
                    tape.add(y, b)?
                }
                Layer::Relu => tape.relu(cur)?,
                Layer::MaxPool2 => tape.max_pool2(cur)?,
                Layer::Flatten => {
                    let len = tape.value(cur).len() / n;
                    tape.reshape(cur, &[n, len])?
                }
            };
        }
        Ok((cur, leaves))
    }

    /// Adds the gradients of `leaves` (from [`Model::forward`]) to the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, leaves: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(leaves) {
            p.accumulate_grad(tape.grad(v));
        }
    }
}
