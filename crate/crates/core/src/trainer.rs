//! Joint training of a network and its input-selection masks.
//!
//! Every epoch walks a freshly shuffled batch order. Even batches
//! (`j = 0, 2, …`) draw Gumbel noise for every mask ("explore"), odd
//! batches use none ("fixate"). The loss `L = CE + λ·Q` is backpropagated
//! into the network and the mask logits, each with its own AMSGrad step.
//! After the epoch the `λ`/`τ` schedules adapt and metrics are recorded
//! with the noise-free masks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AmsGrad, Tape};
use crate::data::{batch_order, Dataset};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskState, SelectionMask};
use crate::model::Model;
use crate::pipeline::{pipeline_forward, MaskSet, Pipeline};
use crate::schedule::{adapt_lambda_tau, init_fixed_lambda, init_lambda_tau, LambdaSchedule, ScheduleParams, TauSchedule};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Joint-training epochs (after pretraining).
    pub n_epoch: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub schedule: ScheduleParams,
    /// Keep `λ = lambda_init` for the whole run (no plateau steps).
    pub fixed_lambda: bool,
    pub mask_lr: f64,
    pub model_lr: f64,
    pub seed: u64,
    /// Stop after the first epoch whose noise-free mask cost is at most this.
    pub q_stop: Option<f64>,
    /// Epochs of network-only training with the masks frozen at init.
    pub pretrain_epochs: usize,
    /// Record elapsed seconds per epoch; off by default so that metrics
    /// are reproducible bit for bit.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epoch: 10,
            batch_size: 128,
            schedule: ScheduleParams::default(),
            fixed_lambda: false,
            mask_lr: 0.01,
            model_lr: 1e-4,
            seed: 0,
            q_stop: None,
            pretrain_epochs: 0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.model_lr > 0.0 && self.model_lr.is_finite()) {
            return Err(Error::param("model_lr", format!("must be positive, got {}", self.model_lr)));
        }
        if !(self.mask_lr >= 0.0 && self.mask_lr.is_finite()) {
            return Err(Error::param("mask_lr", format!("must be non-negative, got {}", self.mask_lr)));
        }
        if let Some(q) = self.q_stop {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(Error::param("q_stop", format!("must be non-negative, got {q}")));
            }
        }
        self.schedules().map(|_| ())
    }

    fn schedules(&self) -> Result<(LambdaSchedule, TauSchedule)> {
        if self.fixed_lambda {
            init_fixed_lambda(&self.schedule)
        } else {
            init_lambda_tau(&self.schedule)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based joint-training epoch.
    pub epoch: usize,
    /// Fraction of training examples classified correctly during the epoch.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub task_loss: f64,
    /// Combined cost of the noise-free masks at the end of the epoch.
    pub mask_loss: f64,
    /// `λ` and `τ` used during the epoch.
    pub lambda: f64,
    pub tau: f64,
    /// Whether `λ` was stepped at the end of the epoch.
    pub lambda_stepped: bool,
    pub seconds: f64,
}

/// Per-batch record of the most recent epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub explore: bool,
    pub task_loss: f64,
    pub mask_loss: f64,
    pub lambda: f64,
    pub loss: f64,
    pub correct: usize,
    pub size: usize,
}

/// Whether batch `j` of an epoch draws Gumbel noise.
pub fn explores(batch: usize) -> bool {
    batch % 2 == 0
}

/// Shuffle seed of global epoch `epoch` (pretraining epochs included).
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub masks: Vec<(String, MaskState)>,
    pub lambda: LambdaSchedule,
    pub tau: TauSchedule,
    pub pretrain_done: usize,
    pub epochs_done: usize,
    pub stopped: bool,
    pub baseline_accuracy: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub masks: MaskSet,
    /// Noise-free binary masks, in mask-set order.
    pub finals: Vec<BinaryMask>,
    pub history: Vec<EpochMetrics>,
    /// Test accuracy after pretraining, with the masks at init.
    pub baseline_accuracy: Option<f64>,
}

/// Stateful training loop over prepared (extended) datasets.
pub struct Trainer<'a> {
    config: TrainConfig,
    pipeline: &'a Pipeline,
    train: &'a Dataset,
    test: &'a Dataset,
    model: Model,
    masks: MaskSet,
    lambda: LambdaSchedule,
    tau: TauSchedule,
    pretrain_done: usize,
    epochs_done: usize,
    stopped: bool,
    baseline_accuracy: Option<f64>,
    history: Vec<EpochMetrics>,
    last_batches: Vec<BatchStats>,
}

fn check_data(pipeline: &Pipeline, model: &Model, ds: &Dataset, which: &str) -> Result<()> {
    if ds.shape() != pipeline.prepared_shape() {
        return Err(Error::invalid(
            "trainer",
            format!(
                "{which} data has shape {}, pipeline expects prepared input {}",
                ds.shape(),
                pipeline.prepared_shape()
            ),
        ));
    }
    if ds.class_count() > model.spec().classes {
        return Err(Error::invalid(
            "trainer",
            format!("{which} data has {} classes, model emits {}", ds.class_count(), model.spec().classes),
        ));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// `train` and `test` must already be prepared by [`Pipeline::prepare`].
    pub fn new(
        model: Model,
        pipeline: &'a Pipeline,
        masks: MaskSet,
        train: &'a Dataset,
        test: &'a Dataset,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (lambda, tau) = config.schedules()?;
        Self::assemble(model, pipeline, masks, train, test, config, lambda, tau)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        pipeline: &'a Pipeline,
        masks: MaskSet,
        train: &'a Dataset,
        test: &'a Dataset,
        config: TrainConfig,
        lambda: LambdaSchedule,
        tau: TauSchedule,
    ) -> Result<Self> {
        pipeline.check_masks(&masks)?;
        if pipeline.output_shape() != model.spec().input {
            return Err(Error::invalid(
                "trainer",
                format!(
                    "pipeline emits {}, model expects {}",
                    pipeline.output_shape(),
                    model.spec().input
                ),
            ));
        }
        check_data(pipeline, &model, train, "training")?;
        check_data(pipeline, &model, test, "test")?;
        if config.batch_size > train.len() {
            return Err(Error::param(
                "batch_size",
                format!("{} exceeds the {} training examples", config.batch_size, train.len()),
            ));
        }
        if let Some(q) = config.q_stop {
            let max = pipeline.combiner().combine(
                pipeline
                    .mask_stages()
                    .iter()
                    .map(|(name, _)| masks.get(name).unwrap().costs().max_total()),
            );
            if q > max {
                return Err(Error::param("q_stop", format!("{q} exceeds the largest attainable cost {max}")));
            }
        }
        Ok(Self {
            config,
            pipeline,
            train,
            test,
            model,
            masks,
            lambda,
            tau,
            pretrain_done: 0,
            epochs_done: 0,
            stopped: false,
            baseline_accuracy: None,
            history: Vec::new(),
            last_batches: Vec::new(),
        })
    }

    pub fn resume(checkpoint: Checkpoint, pipeline: &'a Pipeline, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        checkpoint.config.validate()?;
        let mut masks = MaskSet::new();
        for (name, state) in checkpoint.masks {
            masks.insert(name, SelectionMask::from_state(state)?)?;
        }
        let mut t = Self::assemble(
            checkpoint.model,
            pipeline,
            masks,
            train,
            test,
            checkpoint.config,
            checkpoint.lambda,
            checkpoint.tau,
        )?;
        t.pretrain_done = checkpoint.pretrain_done;
        t.epochs_done = checkpoint.epochs_done;
        t.stopped = checkpoint.stopped;
        t.baseline_accuracy = checkpoint.baseline_accuracy;
        t.history = checkpoint.history;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            masks: self
                .masks
                .iter()
                .map(|(n, m)| (n.to_string(), m.state()))
                .collect(),
            lambda: self.lambda.clone(),
            tau: self.tau.clone(),
            pretrain_done: self.pretrain_done,
            epochs_done: self.epochs_done,
            stopped: self.stopped,
            baseline_accuracy: self.baseline_accuracy,
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn lambda_schedule(&self) -> &LambdaSchedule {
        &self.lambda
    }

    pub fn tau_schedule(&self) -> &TauSchedule {
        &self.tau
    }

    pub fn baseline_accuracy(&self) -> Option<f64> {
        self.baseline_accuracy
    }

    /// Batch records of the most recent epoch.
    pub fn last_batches(&self) -> &[BatchStats] {
        &self.last_batches
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.epochs_done >= self.config.n_epoch
    }

    /// Runs the remaining pretraining epochs; returns the test accuracy
    /// afterwards (`None` without pretraining).
    pub fn pretrain(&mut self) -> Result<Option<f64>> {
        while self.pretrain_done < self.config.pretrain_epochs {
            let global = self.pretrain_done;
            self.run_batches(global, 0.0, 1.0, false)?;
            self.pretrain_done += 1;
            if self.pretrain_done == self.config.pretrain_epochs {
                let finals = self.masks.final_masks();
                self.baseline_accuracy = Some(evaluate(&self.model, self.pipeline, &self.masks, &finals, self.test)?);
            }
        }
        Ok(self.baseline_accuracy)
    }

    /// Pretrains if needed, then runs one joint epoch. Returns `None` once
    /// training has finished.
    pub fn step_epoch(&mut self) -> Result<Option<EpochMetrics>> {
        self.pretrain()?;
        if self.is_finished() {
            return Ok(None);
        }
        let start = Instant::now();
        let lambda = self.lambda.lambda();
        let tau = self.tau.tau();
        let global = self.config.pretrain_epochs + self.epochs_done;
        self.run_batches(global, lambda, tau, true)?;
        self.epochs_done += 1;

        let batches = &self.last_batches;
        let epoch_loss = batches.iter().map(|b| b.loss).sum::<f64>() / batches.len() as f64;
        let task_loss = batches.iter().map(|b| b.task_loss).sum::<f64>() / batches.len() as f64;
        let correct: usize = batches.iter().map(|b| b.correct).sum();
        let lambda_stepped = adapt_lambda_tau(&mut self.lambda, &mut self.tau, epoch_loss)?;

        let finals = self.masks.final_masks();
        let mask_loss = self.pipeline.final_mask_loss(&self.masks)?;
        let test_accuracy = evaluate(&self.model, self.pipeline, &self.masks, &finals, self.test)?;
        let metrics = EpochMetrics {
            epoch: self.epochs_done,
            train_accuracy: correct as f64 / self.train.len() as f64,
            test_accuracy,
            task_loss,
            mask_loss,
            lambda,
            tau,
            lambda_stepped,
            seconds: if self.config.record_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if self.config.q_stop.is_some_and(|q| mask_loss <= q) {
            self.stopped = true;
        }
        self.history.push(metrics.clone());
        Ok(Some(metrics))
    }

    /// One pass over the training data. With `joint = false` (pretraining)
    /// the masks use no noise and are not updated, and `λ` is zero.
    fn run_batches(&mut self, global_epoch: usize, lambda: f64, tau: f64, joint: bool) -> Result<()> {
        let order = batch_order(self.train.len(), self.config.batch_size, epoch_seed(self.config.seed, global_epoch))?;
        let model_opt = AmsGrad::new(self.config.model_lr)?;
        let mask_opt = if joint && self.config.mask_lr > 0.0 {
            Some(AmsGrad::new(self.config.mask_lr)?)
        } else {
            None
        };
        let epoch = self.epochs_done + 1;
        let diverged = |batch: usize, loss: f64| Error::Diverged { epoch, batch, loss };
        self.last_batches.clear();
        for (j, idx) in order.iter().enumerate() {
            let explore = joint && explores(j);
            let (x, y) = self.train.gather(idx)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pf = pipeline_forward(self.pipeline, &mut tape, xv, &mut self.masks, tau, explore)?;
            let step = (|| {
                let (logits, leaves) = self.model.forward(&mut tape, pf.output)?;
                let ce = tape.cross_entropy_with_logits(logits, &y)?;
                let penalty = tape.scale(pf.loss, lambda)?;
                let total = tape.add(ce, penalty)?;
                tape.backward(total)?;
                Ok::<_, Error>((logits, leaves, ce, total))
            })();
            let (logits, leaves, ce, total) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(j, f64::NAN)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(diverged(j, loss));
            }
            let classes = tape.shape(logits)[1];
            let correct = tape
                .values(logits)
                .chunks(classes)
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
            self.last_batches.push(BatchStats {
                explore,
                task_loss: tape.value(ce).item(),
                mask_loss: tape.value(pf.loss).item(),
                lambda,
                loss,
                correct,
                size: y.len(),
            });

            self.model.accumulate_grads(&tape, &leaves);
            for p in self.model.params_mut() {
                model_opt.step(p).map_err(|_| diverged(j, loss))?;
            }
            if let Some(opt) = &mask_opt {
                for (i, f) in &pf.masks {
                    let p = self.masks.masks_mut()[*i].parameter_mut();
                    p.accumulate_grad(tape.grad(f.logits));
                    opt.step(p).map_err(|_| diverged(j, loss))?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            finals: self.masks.final_masks(),
            model: self.model,
            masks: self.masks,
            history: self.history,
            baseline_accuracy: self.baseline_accuracy,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` and `masks` on prepared data; `on_epoch` sees every
/// joint-epoch record as it is produced.
pub fn learn_selection_masks(
    model: Model,
    pipeline: &Pipeline,
    masks: MaskSet,
    train: &Dataset,
    test: &Dataset,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, pipeline, masks, train, test, config)?;
    while let Some(m) = t.step_epoch()? {
        on_epoch(&m);
    }
    Ok(t.finish())
}

/// Noise-free accuracy on a prepared dataset with binary masks (given in
/// mask-set order).
pub fn evaluate(model: &Model, pipeline: &Pipeline, masks: &MaskSet, finals: &[BinaryMask], ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut correct = 0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk)?;
        let xm = pipeline.forward_hard(&x, masks, finals)?;
        let mut tape = Tape::new();
        let xv = tape.constant(xm);
        let (logits, _) = model.forward(&mut tape, xv)?;
        let classes = tape.shape(logits)[1];
        correct += tape
            .values(logits)
            .chunks(classes)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_redundant_channels, ImageShape, RedundantChannelParams};
    use crate::mask::{InitPattern, MaskGeometry, MaskKind};
    use crate::model::{build_model, Layer, ModelSpec};

    fn setup(n: usize) -> (Pipeline, MaskSet, Dataset, Model) {
        let ds = synth_redundant_channels(&RedundantChannelParams {
            n,
            width: 8,
            height: 8,
            channels: 4,
            informative: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let s = ds.shape();
        let pipeline = Pipeline::single_mask(s, "ch").unwrap();
        let mut masks = MaskSet::new();
        let m = SelectionMask::init(
            MaskKind::ChannelAny,
            MaskGeometry::new(4, 8, 8),
            &InitPattern::All,
            0.0,
            5,
        )
        .unwrap();
        masks.insert("ch", m).unwrap();
        let spec = ModelSpec {
            input: s,
            classes: 4,
            layers: vec![
                Layer::Conv { out: 4, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { out: 4 },
            ],
        };
        let model = build_model(&spec, 3).unwrap();
        (pipeline, masks, ds, model)
    }

    fn config(n_epoch: usize) -> TrainConfig {
        TrainConfig {
            n_epoch,
            batch_size: 16,
            model_lr: 1e-3,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decomposes_exactly() {
        let (p, masks, ds, model) = setup(64);
        let mut t = Trainer::new(model, &p, masks, &ds, &ds, config(2)).unwrap();
        t.step_epoch().unwrap();
        assert_eq!(t.last_batches().len(), 4);
        for b in t.last_batches() {
            assert_eq!(b.loss, b.task_loss + b.lambda * b.mask_loss);
        }
        let explore: Vec<bool> = t.last_batches().iter().map(|b| b.explore).collect();
        assert_eq!(explore, vec![true, false, true, false]);
    }

    #[test]
    fn explore_batches_consume_noise() {
        let (p, masks, ds, model) = setup(80);
        let mut t = Trainer::new(model, &p, masks, &ds, &ds, config(1)).unwrap();
        t.step_epoch().unwrap();
        // five batches, three of them exploring
        let mut reference = SelectionMask::init(
            MaskKind::ChannelAny,
            MaskGeometry::new(4, 8, 8),
            &InitPattern::All,
            0.0,
            5,
        )
        .unwrap();
        for _ in 0..3 {
            reference.draw_noise(true);
        }
        assert_eq!(t.masks().masks()[0].state().noise, reference.state().noise);
    }

    #[test]
    fn zero_mask_lr_freezes_logits() {
        let (p, masks, ds, model) = setup(64);
        let before = masks.masks()[0].logits().clone();
        let cfg = TrainConfig {
            mask_lr: 0.0,
            schedule: ScheduleParams { lambda_init: 0.0, ..Default::default() },
            fixed_lambda: true,
            ..config(3)
        };
        let out = learn_selection_masks(model, &p, masks, &ds, &ds, cfg, |_| {}).unwrap();
        assert_eq!(out.masks.masks()[0].logits().values(), before.values());
        assert!(out.finals[0].keep.iter().all(|&k| k));
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let (p, masks, ds, model) = setup(64);
        let cfg = TrainConfig { pretrain_epochs: 1, ..config(3) };
        let full = learn_selection_masks(model.clone(), &p, masks.clone(), &ds, &ds, cfg.clone(), |_| {}).unwrap();

        let mut t = Trainer::new(model, &p, masks, &ds, &ds, cfg).unwrap();
        t.step_epoch().unwrap();
        let json = t.checkpoint().to_json().unwrap();
        drop(t);
        let mut t = Trainer::resume(Checkpoint::from_json(&json).unwrap(), &p, &ds, &ds).unwrap();
        while t.step_epoch().unwrap().is_some() {}
        let resumed = t.finish();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.masks, full.masks);
        assert_eq!(resumed.baseline_accuracy, full.baseline_accuracy);
    }

    #[test]
    fn q_stop_halts_training() {
        let (p, masks, ds, model) = setup(64);
        let cfg = TrainConfig { q_stop: Some(1.0), ..config(5) };
        let out = learn_selection_masks(model, &p, masks, &ds, &ds, cfg, |_| {}).unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn rejects_shape_mismatch_and_oversized_batches() {
        let (_, masks, ds, model) = setup(16);
        let wrong = Pipeline::single_mask(ImageShape::new(3, 8, 8), "ch").unwrap();
        assert!(Trainer::new(model.clone(), &wrong, masks.clone(), &ds, &ds, config(1)).is_err());
        let p = Pipeline::single_mask(ds.shape(), "ch").unwrap();
        let cfg = TrainConfig { batch_size: 17, ..config(1) };
        assert!(Trainer::new(model.clone(), &p, masks.clone(), &ds, &ds, cfg).is_err());
        let cfg = TrainConfig { q_stop: Some(1.5), ..config(1) };
        assert!(Trainer::new(model, &p, masks, &ds, &ds, cfg).is_err());
    }

    #[test]
    fn zero_epochs_keep_initial_masks() {
        let (p, masks, ds, model) = setup(16);
        let init = masks.final_masks();
        let out = learn_selection_masks(model, &p, masks, &ds, &ds, config(0), |_| {}).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.finals, init);
    }
}
