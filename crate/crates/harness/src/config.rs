//! Run configuration: one strict JSON document covering model, optimizer, data and output.

use std::fs;
use std::path::{Path, PathBuf};

use mvp_core::model::ModelConfig;
use mvp_core::scenegen::Scene;
use mvp_core::setmatch::LossConfig;
use mvp_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch at which the learning rate is multiplied by `decay_factor`; `None` keeps it flat.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: Some(20),
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(e) if epoch >= e => self.lr * self.decay_factor,
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Scenes whose gradients are accumulated into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub train_data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Person confidence below which predictions are dropped at evaluation.
    pub confidence_threshold: f64,
    /// MPJPE thresholds (mm) for AP and recall.
    pub thresholds: Vec<f64>,
    /// Optimizer steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            epochs: 40,
            max_steps: None,
            batch_size: 1,
            seed: 0,
            train_data: PathBuf::from("train.mvpd"),
            eval_data: None,
            out_dir: PathBuf::from("runs/default"),
            confidence_threshold: 0.1,
            thresholds: vec![25.0, 50.0, 100.0, 150.0],
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", o.decay_factor)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config("confidence threshold must lie in [0, 1]".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("thresholds must be a non-empty list of positive mm values".into()));
        }
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.focal_gamma >= 0.0 && (0.0..=1.0).contains(&l.focal_alpha) && l.weight_2d >= 0.0) {
            return Err(Error::Config("loss weights out of range".into()));
        }
        Ok(())
    }

    /// Checks that the dataset matches the model's view count, channels and workspace.
    pub fn check_dataset(&self, scenes: &[Scene]) -> Result<()> {
        let m = &self.model;
        let Some(first) = scenes.first() else {
            return Err(Error::Config("dataset is empty".into()));
        };
        for (i, s) in scenes.iter().enumerate() {
            let shape = s.features[0].shape();
            if s.views() != m.views || shape[0] != m.in_channels || s.joints() != m.joints {
                return Err(Error::Config(format!(
                    "scene {i} has {} views, {} channels and {} joints; the model expects {}, {} and {}",
                    s.views(),
                    shape[0],
                    s.joints(),
                    m.views,
                    m.in_channels,
                    m.joints
                )));
            }
            if s.workspace != m.workspace {
                return Err(Error::Config(format!(
                    "scene {i} workspace {:?} differs from the model workspace {:?}",
                    s.workspace, m.workspace
                )));
            }
            if s.persons() > m.persons {
                return Err(Error::Config(format!(
                    "scene {i} has {} persons but the model has {} slots",
                    s.persons(),
                    m.persons
                )));
            }
            if shape != first.features[0].shape() {
                return Err(Error::Config(format!("scene {i} feature size differs from scene 0")));
            }
        }
        Ok(())
    }
}
