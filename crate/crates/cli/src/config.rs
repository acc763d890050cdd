//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use maskforge::data::{
    load_idx, read_mskd, synth_center_target, synth_redundant_channels, CenterTargetParams, Dataset, ImageShape,
    RedundantChannelParams,
};
use maskforge::mask::{InitPattern, MaskCosts, MaskGeometry, MaskKind};
use maskforge::model::{Layer, ModelSpec};
use maskforge::pipeline::{Combiner, Pipeline, Stage};
use maskforge::trainer::TrainConfig;

use crate::error::{CliError, Result};

/// Environment variable holding the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "MASKFORGE_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// `(lambda_init, lambda_fac)` pairs; without a grid, the values in
    /// `[train]` form the only grid point.
    #[serde(default)]
    pub grid: Option<Vec<(f64, f64)>>,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pipeline: Option<PipelineConfig>,
    #[serde(default)]
    pub masks: Vec<MaskConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_out() -> PathBuf {
    "out".into()
}

fn default_runs() -> usize {
    10
}

fn default_snapshot_interval() -> usize {
    50
}

fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// An IDX image/label pair; the first `train` examples train, the next
    /// `test` examples test.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        train: usize,
        test: usize,
    },
    /// An MSKD file without a version axis, split like `idx`.
    Mskd { path: PathBuf, train: usize, test: usize },
    RedundantChannels {
        n_train: usize,
        n_test: usize,
        #[serde(default = "w16")]
        width: usize,
        #[serde(default = "w16")]
        height: usize,
        #[serde(default = "k8")]
        channels: usize,
        #[serde(default = "one")]
        informative: usize,
        #[serde(default = "sigma")]
        noise_sigma: f64,
        #[serde(default = "four")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    CenterTarget {
        n_train: usize,
        n_test: usize,
        #[serde(default = "w20")]
        width: usize,
        #[serde(default = "w20")]
        height: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn w16() -> usize {
    16
}
fn w20() -> usize {
    20
}
fn k8() -> usize {
    8
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn sigma() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `"lenet_small"`, or omit and list `layers`.
    pub preset: Option<String>,
    #[serde(default)]
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub combiner: Combiner,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostScheme {
    UniformChannel,
    UniformPixel,
    Quality,
    Custom { weights: Vec<f64>, denominator: f64 },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum InitConfig {
    Named(String),
    Index { index: usize },
    Pattern { pattern: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub name: String,
    pub kind: MaskKind,
    #[serde(default = "init_all")]
    pub init: InitConfig,
    #[serde(default)]
    pub sigma: f64,
    pub cost: CostScheme,
}

fn init_all() -> InitConfig {
    InitConfig::Named("all".into())
}

impl InitConfig {
    pub fn pattern(&self) -> Result<InitPattern> {
        Ok(match self {
            InitConfig::Named(s) if s == "all" => InitPattern::All,
            InitConfig::Named(s) => return Err(CliError::config("masks.init", format!("unknown init `{s}`"))),
            InitConfig::Index { index } => InitPattern::Index(*index),
            InitConfig::Pattern { pattern } => InitPattern::Pattern(pattern.clone()),
        })
    }
}

/// Where relative dataset paths resolve: `$MASKFORGE_DATA_DIR` if set,
/// otherwise the config file's directory.
pub fn data_root(config_path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => config_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            field: "toml".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(CliError::config("n_runs", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(CliError::config("jobs", "must be at least 1"));
        }
        if self.snapshot_interval == 0 {
            return Err(CliError::config("snapshot_interval", "must be at least 1"));
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() {
                return Err(CliError::config("grid", "must list at least one (lambda_init, lambda_fac) pair"));
            }
        }
        self.train.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        let mut names: Vec<&str> = vec![];
        for m in &self.masks {
            if names.contains(&m.name.as_str()) {
                return Err(CliError::config("masks.name", format!("mask `{}` defined twice", m.name)));
            }
            names.push(&m.name);
            m.init.pattern()?;
            let ok = match (&m.cost, m.kind) {
                (CostScheme::UniformChannel, MaskKind::ChannelAny | MaskKind::ChannelXor { .. }) => true,
                (CostScheme::UniformPixel, MaskKind::PixelAny | MaskKind::PixelXor | MaskKind::BlockAny { .. }) => true,
                (CostScheme::Quality, MaskKind::ChannelXor { .. }) => true,
                (CostScheme::Custom { .. }, _) => true,
                _ => false,
            };
            if !ok {
                return Err(CliError::config(
                    "masks.cost",
                    format!("cost scheme {:?} does not fit mask `{}` of kind {}", m.cost, m.name, m.kind.name()),
                ));
            }
        }
        Ok(())
    }

    /// `(lambda_init, lambda_fac)` of every grid point.
    pub fn grid_points(&self) -> Vec<(f64, f64)> {
        self.grid
            .clone()
            .unwrap_or_else(|| vec![(self.train.schedule.lambda_init, self.train.schedule.lambda_fac)])
    }

    /// Train and test splits.
    pub fn load_datasets(&self, root: &Path) -> Result<(Dataset, Dataset)> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let split = |ds: Dataset, train: usize, test: usize| -> Result<(Dataset, Dataset)> {
            if train == 0 || test == 0 || train + test > ds.len() {
                return Err(CliError::config(
                    "dataset",
                    format!("{train} train + {test} test examples requested, {} available", ds.len()),
                ));
            }
            Ok((ds.slice(0..train)?, ds.slice(train..train + test)?))
        };
        match self.dataset.clone() {
            DatasetConfig::Idx { images, labels, train, test } => {
                let ds = load_idx(&resolve(&images), &resolve(&labels), Some(train + test))?;
                split(ds, train, test)
            }
            DatasetConfig::Mskd { path, train, test } => {
                let file = read_mskd(&resolve(&path))?;
                if file.versions.is_some() {
                    return Err(CliError::config("dataset.path", "expected a dataset without a version axis"));
                }
                split(file.dataset, train, test)
            }
            DatasetConfig::RedundantChannels {
                n_train,
                n_test,
                width,
                height,
                channels,
                informative,
                noise_sigma,
                classes,
                seed,
            } => {
                let ds = synth_redundant_channels(&RedundantChannelParams {
                    n: n_train + n_test,
                    width,
                    height,
                    channels,
                    informative,
                    noise_sigma,
                    classes,
                    seed,
                })?;
                split(ds, n_train, n_test)
            }
            DatasetConfig::CenterTarget {
                n_train,
                n_test,
                width,
                height,
                channels,
                classes,
                seed,
            } => {
                let ds = synth_center_target(&CenterTargetParams {
                    n: n_train + n_test,
                    width,
                    height,
                    channels,
                    classes,
                    seed,
                })?;
                split(ds, n_train, n_test)
            }
        }
    }

    pub fn pipeline(&self, input: ImageShape) -> Result<Pipeline> {
        let p = match &self.pipeline {
            Some(p) => Pipeline::new(input, p.stages.clone(), p.combiner),
            None if self.masks.len() == 1 => Pipeline::single_mask(input, self.masks[0].name.clone()),
            None if self.masks.is_empty() => Pipeline::new(input, vec![], Combiner::Sum),
            None => return Err(CliError::config("pipeline", "several masks need an explicit pipeline")),
        };
        p.map_err(|e| CliError::config("pipeline", e.to_string()))
    }

    pub fn model_spec(&self, input: ImageShape, classes: usize) -> Result<ModelSpec> {
        let spec = match (&self.model.preset, self.model.layers.is_empty()) {
            (Some(p), true) if p == "lenet_small" => ModelSpec::lenet_small(input, classes),
            (Some(p), true) => return Err(CliError::config("model.preset", format!("unknown preset `{p}`"))),
            (None, false) => ModelSpec {
                input,
                classes,
                layers: self.model.layers.clone(),
            },
            _ => return Err(CliError::config("model", "give exactly one of `preset` and `layers`")),
        };
        spec.shape_chain().map_err(|e| CliError::config("model", e.to_string()))?;
        Ok(spec)
    }

    /// Costs for mask `m` applied at `geometry`, given the pipeline's
    /// extend qualities.
    pub fn mask_costs(m: &MaskConfig, geometry: MaskGeometry, qualities: Option<&[u32]>) -> Result<MaskCosts> {
        let k = geometry.channels;
        let plane = geometry.width * geometry.height;
        let costs = match &m.cost {
            CostScheme::UniformChannel => MaskCosts::uniform(k),
            CostScheme::UniformPixel => match m.kind {
                MaskKind::BlockAny { grid_w, grid_h } => {
                    let mut area = vec![0.0; grid_w * grid_h];
                    let bw = geometry.width / grid_w;
                    let bh = geometry.height / grid_h;
                    for y in 0..geometry.height {
                        for x in 0..geometry.width {
                            let cell = (y / bh).min(grid_h - 1) * grid_w + (x / bw).min(grid_w - 1);
                            area[cell] += 1.0;
                        }
                    }
                    let weights = (0..k).flat_map(|_| area.iter().copied()).collect();
                    MaskCosts::new(weights, (k * plane) as f64)?
                }
                _ => MaskCosts::uniform(k * plane),
            },
            CostScheme::Quality => {
                let Some(q) = qualities else {
                    return Err(CliError::config(
                        "masks.cost",
                        format!("quality costs for `{}` need an extend stage", m.name),
                    ));
                };
                let MaskKind::ChannelXor { groups } = m.kind else { unreachable!("validated") };
                if groups * q.len() != k {
                    return Err(CliError::config(
                        "masks.kind",
                        format!("`{}` needs groups = {} (one per source channel)", m.name, k / q.len()),
                    ));
                }
                let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
                MaskCosts::quality(groups, &q)
            }
            CostScheme::Custom { weights, denominator } => MaskCosts::new(weights.clone(), *denominator)?,
        };
        Ok(costs)
    }
}
