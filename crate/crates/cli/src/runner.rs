//! Grid sweeps: one seeded training job per (grid point, run).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use maskforge::data::Dataset;
use maskforge::mask::SelectionMask;
use maskforge::model::build_model;
use maskforge::pipeline::{MaskSet, Pipeline, Stage};
use maskforge::trainer::{evaluate, Trainer};

use crate::artifacts::{write_mask_pgm, FinalMasks, StoredMask};
use crate::config::{data_root, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::report::{write_report, Failure, Report};

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// One (grid point, run) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub run_id: usize,
    pub grid_point: usize,
    pub run: usize,
    pub seed: u64,
    pub lambda_init: f64,
    pub lambda_fac: f64,
}

/// Jobs in run_id order; run `r` of grid point `g` has
/// `run_id = g·n_runs + r` and `seed = base_seed + 1000·g + r`.
pub fn plan_jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (g, &(lambda_init, lambda_fac)) in cfg.grid_points().iter().enumerate() {
        for r in 0..cfg.n_runs {
            jobs.push(Job {
                run_id: g * cfg.n_runs + r,
                grid_point: g,
                run: r,
                seed: cfg.base_seed.wrapping_add(1000 * g as u64).wrapping_add(r as u64),
                lambda_init,
                lambda_fac,
            });
        }
    }
    jobs
}

/// Seed for the `i`-th mask of a run; the model draws from its own stream
/// of the run seed.
fn mask_seed(run_seed: u64, i: usize) -> u64 {
    run_seed ^ ((i as u64) << 48)
}

struct JobResult {
    job: Job,
    rows: Vec<MetricsRow>,
    finals: Option<FinalMasks>,
    error: Option<String>,
}

/// Prepared data and settings shared by all jobs.
struct Shared<'a> {
    cfg: &'a RunConfig,
    pipeline: Pipeline,
    train: Dataset,
    test: Dataset,
    classes: usize,
    out: &'a Path,
}

impl Shared<'_> {
    fn qualities(&self) -> Option<Vec<u32>> {
        match self.pipeline.stages().first() {
            Some(Stage::Extend { qualities }) => Some(qualities.clone()),
            _ => None,
        }
    }

    fn build_masks(&self, seed: u64) -> Result<MaskSet> {
        let stages = self.pipeline.mask_stages();
        let qualities = self.qualities();
        let mut set = MaskSet::new();
        for (i, m) in self.cfg.masks.iter().enumerate() {
            let Some(&(_, geometry)) = stages.iter().find(|(n, _)| *n == m.name) else {
                return Err(CliError::config("masks.name", format!("mask `{}` is not used by the pipeline", m.name)));
            };
            let costs = RunConfig::mask_costs(m, geometry, qualities.as_deref())?;
            let mask = SelectionMask::init(m.kind, geometry, &m.init.pattern()?, m.sigma, mask_seed(seed, i))?
                .with_costs(costs)?;
            set.insert(m.name.clone(), mask)?;
        }
        self.pipeline.check_masks(&set)?;
        Ok(set)
    }

    fn snapshot(&self, job: &Job, set: &MaskSet, epoch: usize) -> Result<()> {
        let dir = self.out.join("snapshots").join(format!("run_{:03}", job.run_id));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (name, mask) in set.names().iter().zip(set.final_masks()) {
            write_mask_pgm(&mask, &dir, &format!("{name}_e{epoch:04}"))?;
        }
        Ok(())
    }

    fn run(&self, job: Job) -> JobResult {
        let mut rows = Vec::new();
        let outcome = self.train_job(&job, &mut rows);
        let (finals, error) = match outcome {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        JobResult {
            job,
            rows,
            finals,
            error,
        }
    }

    fn train_job(&self, job: &Job, rows: &mut Vec<MetricsRow>) -> Result<FinalMasks> {
        let mut config = self.cfg.train.clone();
        config.seed = job.seed;
        config.schedule.lambda_init = job.lambda_init;
        config.schedule.lambda_fac = job.lambda_fac;

        let masks = self.build_masks(job.seed)?;
        let spec = self.cfg.model_spec(self.pipeline.output_shape(), self.classes)?;
        let model = build_model(&spec, job.seed)?;
        let mut trainer = Trainer::new(model, &self.pipeline, masks, &self.train, &self.test, config)?;
        self.snapshot(job, trainer.masks(), 0)?;
        while let Some(m) = trainer.step_epoch()? {
            rows.push(MetricsRow::from_epoch(job.run_id, &m));
            if m.epoch % self.cfg.snapshot_interval == 0 {
                self.snapshot(job, trainer.masks(), m.epoch)?;
            }
        }
        let baseline_accuracy = trainer.baseline_accuracy();
        let outcome = trainer.finish();
        let (test_accuracy, mask_loss) = match outcome.history.last() {
            Some(m) => (m.test_accuracy, m.mask_loss),
            None => (
                evaluate(&outcome.model, &self.pipeline, &outcome.masks, &outcome.finals, &self.test)?,
                self.pipeline.final_mask_loss(&outcome.masks)?,
            ),
        };
        Ok(FinalMasks {
            run_id: job.run_id,
            grid_point: job.grid_point,
            seed: job.seed,
            lambda_init: job.lambda_init,
            lambda_fac: job.lambda_fac,
            qualities: self.qualities(),
            test_accuracy,
            mask_loss,
            baseline_accuracy,
            masks: outcome
                .masks
                .names()
                .iter()
                .zip(&outcome.finals)
                .map(|(n, m)| StoredMask::new(n, m))
                .collect(),
        })
    }
}

/// Loads `config_path`, applies overrides and runs every job.
pub fn run_experiment(config_path: &Path, overrides: &Overrides) -> Result<Report> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = overrides.jobs {
        if jobs == 0 {
            return Err(CliError::config("jobs", "must be at least 1"));
        }
        cfg.jobs = jobs;
    }
    run_config(&cfg, &data_root(config_path))
}

/// Runs every job of a validated config, resolving relative dataset paths
/// against `root`. Job failures end up in the report; only setup and
/// output errors are returned.
pub fn run_config(cfg: &RunConfig, root: &Path) -> Result<Report> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    let (train, test) = cfg.load_datasets(root)?;
    let pipeline = cfg.pipeline(train.shape())?;
    let classes = train.class_count().max(test.class_count());
    // fail early on model errors instead of once per job
    cfg.model_spec(pipeline.output_shape(), classes)?;
    let shared = Shared {
        cfg,
        train: pipeline.prepare(&train)?,
        test: pipeline.prepare(&test)?,
        pipeline,
        classes,
        out,
    };
    // mask setup errors are the same for every job
    shared.build_masks(cfg.base_seed)?;

    let finals_dir = out.join("masks_final");
    std::fs::create_dir_all(&finals_dir).map_err(|e| CliError::io(&finals_dir, e))?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;

    let jobs = plan_jobs(cfg);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<JobResult>();
    let mut failures = Vec::new();
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..cfg.jobs.min(jobs.len()) {
            let tx = tx.clone();
            let (jobs, next, shared) = (&jobs, &next, &shared);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                if tx.send(shared.run(job)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // single writer: results are committed in run_id order
        let mut pending = BTreeMap::new();
        let mut committed = 0;
        for result in rx {
            pending.insert(result.job.run_id, result);
            while let Some(r) = pending.remove(&committed) {
                for row in &r.rows {
                    writer.append(row)?;
                }
                writer.flush()?;
                if let Some(f) = &r.finals {
                    f.save(&finals_dir.join(format!("run_{:03}.json", r.job.run_id)))?;
                }
                if let Some(msg) = r.error {
                    failures.push(Failure { job: r.job, error: msg });
                }
                committed += 1;
            }
        }
        Ok(())
    })?;
    write_report(out, &cfg.name, &failures)
}
